#include "offroad/nn_ops.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace offroad::nn {

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_rank(const NdArray& a, std::size_t rank, const char* what) {
  if (a.rank() != rank)
    throw std::invalid_argument(std::string(what) + ": expected rank " + std::to_string(rank) +
                                ", got shape " + a.shape_str());
}

}  // namespace

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t pad) {
  const std::size_t padded = in + 2 * pad;
  if (kernel == 0 || stride == 0 || kernel > padded) return 0;
  return (padded - kernel) / stride + 1;
}

NdArray conv2d_forward(const NdArray& input, const NdArray& kernels, const NdArray& bias,
                       std::size_t stride, std::size_t pad) {
  check_rank(input, 3, "conv2d input");
  check_rank(kernels, 4, "conv2d kernels");
  check_rank(bias, 1, "conv2d bias");
  const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  const std::size_t kh = kernels.dim(0), kw = kernels.dim(1);
  const std::size_t cout = kernels.dim(3);
  if (kernels.dim(2) != cin)
    throw std::invalid_argument("conv2d: kernel channels " + std::to_string(kernels.dim(2)) +
                                " do not match input channels " + std::to_string(cin));
  if (bias.dim(0) != cout) throw std::invalid_argument("conv2d: bias length != out channels");
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t oh = conv_out_extent(h, kh, stride, pad);
  const std::size_t ow = conv_out_extent(w, kw, stride, pad);
  if (oh == 0 || ow == 0)
    throw std::invalid_argument("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                " does not fit input " + input.shape_str());

  NdArray out({oh, ow, cout});
  const double* in = input.data();
  const double* ker = kernels.data();
  double* o = out.data();
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double* cell = o + (y * ow + x) * cout;
      for (std::size_t c = 0; c < cout; ++c) cell[c] = bias[c];
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ky) -
                                  static_cast<std::ptrdiff_t>(pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * stride + kx) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const double* px = in + (static_cast<std::size_t>(iy) * w +
                                   static_cast<std::size_t>(ix)) * cin;
          const double* kp = ker + (ky * kw + kx) * cin * cout;
          for (std::size_t c = 0; c < cin; ++c) {
            const double v = px[c];
            const double* krow = kp + c * cout;
            for (std::size_t co = 0; co < cout; ++co) cell[co] += v * krow[co];
          }
        }
      }
    }
  }
  return out;
}

Conv2dGrads conv2d_backward(const NdArray& input, const NdArray& kernels, std::size_t stride,
                            std::size_t pad, const NdArray& grad_out, bool need_input_grad) {
  const std::size_t h = input.dim(0), w = input.dim(1), cin = input.dim(2);
  const std::size_t kh = kernels.dim(0), kw = kernels.dim(1);
  const std::size_t cout = kernels.dim(3);
  const std::size_t oh = conv_out_extent(h, kh, stride, pad);
  const std::size_t ow = conv_out_extent(w, kw, stride, pad);
  require_shape(grad_out, {oh, ow, cout}, "conv2d grad_out");

  Conv2dGrads g;
  if (need_input_grad) g.input = NdArray({h, w, cin});
  g.kernels = NdArray({kh, kw, cin, cout});
  g.bias = NdArray({cout});
  const double* in = input.data();
  const double* ker = kernels.data();
  const double* go = grad_out.data();

  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      const double* gcell = go + (y * ow + x) * cout;
      for (std::size_t co = 0; co < cout; ++co) g.bias[co] += gcell[co];
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(y * stride + ky) -
                                  static_cast<std::ptrdiff_t>(pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(x * stride + kx) -
                                    static_cast<std::ptrdiff_t>(pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
          const std::size_t pixel = static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix);
          const double* px = in + pixel * cin;
          double* gpx = need_input_grad ? g.input.data() + pixel * cin : nullptr;
          const std::size_t koff = (ky * kw + kx) * cin * cout;
          for (std::size_t c = 0; c < cin; ++c) {
            const double* krow = ker + koff + c * cout;
            double* gkrow = g.kernels.data() + koff + c * cout;
            double acc = 0.0;
            const double v = px[c];
            for (std::size_t co = 0; co < cout; ++co) {
              const double gv = gcell[co];
              gkrow[co] += v * gv;
              acc += krow[co] * gv;
            }
            if (gpx) gpx[c] += acc;
          }
        }
      }
    }
  }
  return g;
}

NdArray relu(const NdArray& z) {
  NdArray out = z;
  for (double& v : out.values()) v = v > 0.0 ? v : 0.0;
  return out;
}

NdArray relu_backward(const NdArray& z, const NdArray& grad_out) {
  if (!z.same_shape(grad_out)) throw std::invalid_argument("relu_backward: shape mismatch");
  NdArray g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i)
    if (z[i] <= 0.0) g[i] = 0.0;
  return g;
}

NdArray dense_forward(const NdArray& x, const NdArray& weight, const NdArray& bias) {
  check_rank(weight, 2, "dense weight");
  const std::size_t din = weight.dim(0), dout = weight.dim(1);
  if (x.size() != din)
    throw std::invalid_argument("dense: input size " + std::to_string(x.size()) +
                                " != weight rows " + std::to_string(din));
  if (bias.size() != dout) throw std::invalid_argument("dense: bias length != weight cols");

  NdArray out({dout});
  double* o = out.data();
  for (std::size_t j = 0; j < dout; ++j) o[j] = bias[j];
  const double* wp = weight.data();
  for (std::size_t d = 0; d < din; ++d) {
    const double v = x[d];
    if (v == 0.0) continue;
    const double* row = wp + d * dout;
    for (std::size_t j = 0; j < dout; ++j) o[j] += v * row[j];
  }
  return out;
}

DenseGrads dense_backward(const NdArray& x, const NdArray& weight, const NdArray& grad_out) {
  const std::size_t din = weight.dim(0), dout = weight.dim(1);
  if (grad_out.size() != dout) throw std::invalid_argument("dense_backward: grad size mismatch");
  DenseGrads g;
  g.input = NdArray({din});
  g.weight = NdArray({din, dout});
  g.bias = grad_out;
  const double* go = grad_out.data();
  const double* wp = weight.data();
  for (std::size_t d = 0; d < din; ++d) {
    const double* row = wp + d * dout;
    double* grow = g.weight.data() + d * dout;
    const double v = x[d];
    double acc = 0.0;
    for (std::size_t j = 0; j < dout; ++j) {
      grow[j] = v * go[j];
      acc += row[j] * go[j];
    }
    g.input[d] = acc;
  }
  return g;
}

LstmState lstm_step(const LstmParams& params, const NdArray& x, const LstmState& state,
                    LstmCache* cache) {
  const std::size_t din = params.input_dim();
  const std::size_t dh = params.hidden_dim();
  if (params.wx.dim(1) != 4 * dh || params.b.size() != 4 * dh || params.wh.dim(1) != 4 * dh)
    throw std::invalid_argument("lstm_step: inconsistent parameter shapes");
  if (x.size() != din) throw std::invalid_argument("lstm_step: input size != Din");
  if (state.h.size() != dh || state.c.size() != dh)
    throw std::invalid_argument("lstm_step: state size != Dh");

  std::vector<double> pre(params.b.values());
  const double* wx = params.wx.data();
  for (std::size_t d = 0; d < din; ++d) {
    const double v = x[d];
    if (v == 0.0) continue;
    const double* row = wx + d * 4 * dh;
    for (std::size_t j = 0; j < 4 * dh; ++j) pre[j] += v * row[j];
  }
  const double* wh = params.wh.data();
  for (std::size_t d = 0; d < dh; ++d) {
    const double v = state.h[d];
    if (v == 0.0) continue;
    const double* row = wh + d * 4 * dh;
    for (std::size_t j = 0; j < 4 * dh; ++j) pre[j] += v * row[j];
  }

  NdArray gi({dh}), gf({dh}), gg({dh}), go({dh});
  for (std::size_t j = 0; j < dh; ++j) {
    gi[j] = sigmoid(pre[j]);
    gf[j] = sigmoid(pre[dh + j]);
    gg[j] = std::tanh(pre[2 * dh + j]);
    go[j] = sigmoid(pre[3 * dh + j]);
  }

  LstmState next;
  next.c = NdArray({dh});
  next.h = NdArray({dh});
  NdArray tanh_c({dh});
  for (std::size_t j = 0; j < dh; ++j) {
    next.c[j] = gf[j] * state.c[j] + gi[j] * gg[j];
    tanh_c[j] = std::tanh(next.c[j]);
    next.h[j] = go[j] * tanh_c[j];
  }

  if (cache) {
    cache->x = x;
    cache->h_prev = state.h;
    cache->c_prev = state.c;
    cache->i = std::move(gi);
    cache->f = std::move(gf);
    cache->g = std::move(gg);
    cache->o = std::move(go);
    cache->c_new = next.c;
    cache->tanh_c_new = std::move(tanh_c);
  }
  return next;
}

LstmGrads lstm_backward(const LstmParams& params, const LstmCache& cache, const NdArray& grad_h,
                        const NdArray& grad_c) {
  const std::size_t din = params.input_dim();
  const std::size_t dh = params.hidden_dim();
  if (grad_h.size() != dh || grad_c.size() != dh)
    throw std::invalid_argument("lstm_backward: gradient size != Dh");

  std::vector<double> dpre(4 * dh);
  LstmGrads g;
  g.c_prev = NdArray({dh});
  for (std::size_t j = 0; j < dh; ++j) {
    const double th = cache.tanh_c_new[j];
    const double dc = grad_c[j] + grad_h[j] * cache.o[j] * (1.0 - th * th);
    const double di = dc * cache.g[j];
    const double df = dc * cache.c_prev[j];
    const double dg = dc * cache.i[j];
    const double do_ = grad_h[j] * th;
    dpre[j] = di * cache.i[j] * (1.0 - cache.i[j]);
    dpre[dh + j] = df * cache.f[j] * (1.0 - cache.f[j]);
    dpre[2 * dh + j] = dg * (1.0 - cache.g[j] * cache.g[j]);
    dpre[3 * dh + j] = do_ * cache.o[j] * (1.0 - cache.o[j]);
    g.c_prev[j] = dc * cache.f[j];
  }

  g.b = NdArray::from_data({4 * dh}, dpre);
  g.x = NdArray({din});
  g.h_prev = NdArray({dh});
  g.wx = NdArray({din, 4 * dh});
  g.wh = NdArray({dh, 4 * dh});

  const double* wx = params.wx.data();
  for (std::size_t d = 0; d < din; ++d) {
    const double* row = wx + d * 4 * dh;
    double* grow = g.wx.data() + d * 4 * dh;
    const double v = cache.x[d];
    double acc = 0.0;
    for (std::size_t j = 0; j < 4 * dh; ++j) {
      grow[j] = v * dpre[j];
      acc += row[j] * dpre[j];
    }
    g.x[d] = acc;
  }
  const double* wh = params.wh.data();
  for (std::size_t d = 0; d < dh; ++d) {
    const double* row = wh + d * 4 * dh;
    double* grow = g.wh.data() + d * 4 * dh;
    const double v = cache.h_prev[d];
    double acc = 0.0;
    for (std::size_t j = 0; j < 4 * dh; ++j) {
      grow[j] = v * dpre[j];
      acc += row[j] * dpre[j];
    }
    g.h_prev[d] = acc;
  }
  return g;
}

NdArray softmax(const NdArray& logits) {
  if (logits.size() < 2) throw std::invalid_argument("softmax: need at least 2 logits");
  NdArray probs = logits;
  const double m = *std::max_element(probs.values().begin(), probs.values().end());
  double sum = 0.0;
  for (double& v : probs.values()) {
    v = std::exp(v - m);
    sum += v;
  }
  for (double& v : probs.values()) v /= sum;
  return probs;
}

SoftmaxXent softmax_cross_entropy(const NdArray& logits, int true_label) {
  const std::size_t n = logits.size();
  if (n < 2) throw std::invalid_argument("softmax_cross_entropy: need at least 2 classes");
  if (true_label < 0 || static_cast<std::size_t>(true_label) >= n)
    throw std::invalid_argument("softmax_cross_entropy: label " + std::to_string(true_label) +
                                " out of range [0, " + std::to_string(n) + ")");

  SoftmaxXent out;
  out.probs = logits;
  const double m = *std::max_element(out.probs.values().begin(), out.probs.values().end());
  double sum = 0.0;
  for (double& v : out.probs.values()) {
    v = std::exp(v - m);
    sum += v;
  }
  const double log_sum = std::log(sum);
  // loss = log(sum exp(z - m)) - (z_label - m), exact in the stabilized frame
  out.loss = log_sum - (logits[static_cast<std::size_t>(true_label)] - m);
  for (double& v : out.probs.values()) v /= sum;
  out.grad_logits = out.probs;
  out.grad_logits[static_cast<std::size_t>(true_label)] -= 1.0;
  return out;
}

AdamState::AdamState(const std::vector<const NdArray*>& params, AdamConfig config)
    : config_(config) {
  m_.reserve(params.size());
  v_.reserve(params.size());
  for (const NdArray* p : params) {
    m_.emplace_back(p->shape());
    v_.emplace_back(p->shape());
  }
}

void adam_step(const std::vector<NdArray*>& params, const std::vector<const NdArray*>& grads,
               AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m_.size())
    throw std::invalid_argument("adam_step: parameter/gradient/state count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k]->same_shape(*grads[k]))
      throw std::invalid_argument("adam_step: gradient shape mismatch at parameter " +
                                  std::to_string(k));
    if (!grads[k]->all_finite())
      throw std::runtime_error("adam_step: non-finite gradient at parameter " +
                               std::to_string(k) + "; state unchanged");
  }

  const AdamConfig& c = state.config_;
  state.step_count_ += 1;
  const double t = static_cast<double>(state.step_count_);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    double* p = params[k]->data();
    const double* g = grads[k]->data();
    double* m = state.m_[k].data();
    double* v = state.v_[k].data();
    const std::size_t n = params[k]->size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      p[i] -= c.learning_rate * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

NdArray dropout(const NdArray& x, double rate, Rng& rng, bool training, NdArray* mask_out) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (!training || rate == 0.0) {
    if (mask_out) {
      *mask_out = NdArray(x.shape());
      mask_out->fill(1.0);
    }
    return x;
  }
  const double scale = 1.0 / (1.0 - rate);
  NdArray out = x;
  NdArray mask(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (rng.uniform() < rate) {
      out[i] = 0.0;
      mask[i] = 0.0;
    } else {
      out[i] *= scale;
      mask[i] = scale;
    }
  }
  if (mask_out) *mask_out = std::move(mask);
  return out;
}

}  // namespace offroad::nn
