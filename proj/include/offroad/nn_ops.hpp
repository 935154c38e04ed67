#pragma once

#include <cstddef>
#include <vector>

#include "offroad/ndarray.hpp"
#include "offroad/rng.hpp"

namespace offroad::nn {

// ---------------------------------------------------------------------------
// Convolution. Layout: input [H][W][Cin], kernels [Kh][Kw][Cin][Cout],
// bias [Cout], output [H'][W'][Cout] with
//   H' = floor((H + 2*pad - Kh) / stride) + 1   (and W' likewise).
// pad adds zero rows/columns symmetrically; the default is no padding.
// ---------------------------------------------------------------------------

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t pad);

NdArray conv2d_forward(const NdArray& input, const NdArray& kernels, const NdArray& bias,
                       std::size_t stride, std::size_t pad = 0);

struct Conv2dGrads {
  NdArray input;  // left empty when need_input_grad is false
  NdArray kernels;
  NdArray bias;
};

Conv2dGrads conv2d_backward(const NdArray& input, const NdArray& kernels, std::size_t stride,
                            std::size_t pad, const NdArray& grad_out,
                            bool need_input_grad = true);

// ---------------------------------------------------------------------------
// ReLU, kept separate so layers can cache pre-activations for the backward
// pass.
// ---------------------------------------------------------------------------

NdArray relu(const NdArray& z);
/// Gradient w.r.t. z given the upstream gradient of relu(z).
NdArray relu_backward(const NdArray& z, const NdArray& grad_out);

// ---------------------------------------------------------------------------
// Dense (affine) layer: y = x * W + b with W shaped [Din][Dout].
// ---------------------------------------------------------------------------

NdArray dense_forward(const NdArray& x, const NdArray& weight, const NdArray& bias);

struct DenseGrads {
  NdArray input;
  NdArray weight;
  NdArray bias;
};

DenseGrads dense_backward(const NdArray& x, const NdArray& weight, const NdArray& grad_out);

// ---------------------------------------------------------------------------
// LSTM cell. Gate pre-activations are packed [i | f | g | o] along the last
// axis: wx [Din][4*Dh], wh [Dh][4*Dh], b [4*Dh].
//   i, f, o = sigmoid(...), g = tanh(...)
//   c' = f*c + i*g,  h' = o * tanh(c')
// ---------------------------------------------------------------------------

struct LstmParams {
  NdArray wx;
  NdArray wh;
  NdArray b;

  std::size_t input_dim() const { return wx.dim(0); }
  std::size_t hidden_dim() const { return wh.dim(0); }
};

struct LstmState {
  NdArray h;
  NdArray c;
};

/// Everything the backward pass needs from one forward step.
struct LstmCache {
  NdArray x, h_prev, c_prev;
  NdArray i, f, g, o;  // post-activation gates
  NdArray c_new, tanh_c_new;
};

LstmState lstm_step(const LstmParams& params, const NdArray& x, const LstmState& state,
                    LstmCache* cache = nullptr);

struct LstmGrads {
  NdArray x, h_prev, c_prev;
  NdArray wx, wh, b;
};

LstmGrads lstm_backward(const LstmParams& params, const LstmCache& cache,
                        const NdArray& grad_h, const NdArray& grad_c);

// ---------------------------------------------------------------------------
// Softmax cross-entropy with max-subtraction stabilization.
// ---------------------------------------------------------------------------

NdArray softmax(const NdArray& logits);

struct SoftmaxXent {
  double loss = 0.0;
  NdArray probs;
  NdArray grad_logits;  // probs - onehot(label)
};

SoftmaxXent softmax_cross_entropy(const NdArray& logits, int true_label);

// ---------------------------------------------------------------------------
// Adam. State carries one pair of moment tensors per parameter, in the order
// the parameters are registered.
// ---------------------------------------------------------------------------

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

class AdamState {
 public:
  AdamState() = default;
  AdamState(const std::vector<const NdArray*>& params, AdamConfig config);

  const AdamConfig& config() const { return config_; }
  std::size_t step_count() const { return step_count_; }
  const std::vector<NdArray>& first_moments() const { return m_; }
  const std::vector<NdArray>& second_moments() const { return v_; }

  friend void adam_step(const std::vector<NdArray*>& params,
                        const std::vector<const NdArray*>& grads, AdamState& state);

 private:
  AdamConfig config_;
  std::vector<NdArray> m_, v_;
  std::size_t step_count_ = 0;
};

/// One bias-corrected Adam update. Rejects non-finite gradients without
/// touching parameters or state.
void adam_step(const std::vector<NdArray*>& params, const std::vector<const NdArray*>& grads,
               AdamState& state);

// ---------------------------------------------------------------------------
// Inverted dropout: training mode zeroes entries with probability rate and
// scales survivors by 1/(1-rate); inference mode is the identity.
// ---------------------------------------------------------------------------

NdArray dropout(const NdArray& x, double rate, Rng& rng, bool training,
                NdArray* mask_out = nullptr);

}  // namespace offroad::nn
