#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "common/gradcheck.hpp"
#include "offroad/nn_ops.hpp"

using namespace offroad;
using gradcheck::max_rel_error;
using gradcheck::random_array;

namespace {

// Naive quadruple-loop convolution, the reference the fast path is checked
// against.
NdArray conv_reference(const NdArray& in, const NdArray& ker, const NdArray& bias,
                       std::size_t stride, std::size_t pad) {
  const std::size_t h = in.dim(0), w = in.dim(1), cin = in.dim(2);
  const std::size_t kh = ker.dim(0), kw = ker.dim(1), cout = ker.dim(3);
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;
  NdArray out({oh, ow, cout});
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x)
      for (std::size_t co = 0; co < cout; ++co) {
        double acc = bias[co];
        for (std::size_t ky = 0; ky < kh; ++ky)
          for (std::size_t kx = 0; kx < kw; ++kx)
            for (std::size_t c = 0; c < cin; ++c) {
              const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
              const long ix = static_cast<long>(x * stride + kx) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(w))
                continue;
              acc += in.at3(static_cast<std::size_t>(iy), static_cast<std::size_t>(ix), c) *
                     ker[((ky * kw + kx) * cin + c) * cout + co];
            }
        out.at3(y, x, co) = acc;
      }
  return out;
}

double weighted_sum(const NdArray& a, const NdArray& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * w[i];
  return s;
}

}  // namespace

TEST_CASE("conv2d paper-profile first layer shape") {
  NdArray in({72, 128, 12});
  NdArray ker({8, 8, 12, 32});
  NdArray bias({32});
  NdArray out = nn::conv2d_forward(in, ker, bias, 4);
  CHECK(out.shape() == std::vector<std::size_t>{17, 31, 32});
}

TEST_CASE("conv2d 1x1 identity kernel") {
  Rng rng(7);
  NdArray in = random_array({5, 6, 1}, rng);
  NdArray ker = NdArray::from_data({1, 1, 1, 1}, {1.0});
  NdArray bias({1});
  NdArray out = nn::conv2d_forward(in, ker, bias, 1);
  REQUIRE(out.shape() == in.shape());
  for (std::size_t i = 0; i < in.size(); ++i) CHECK(out[i] == in[i]);
}

TEST_CASE("conv2d matches naive reference, with and without padding") {
  Rng rng(11);
  for (std::size_t stride : {1u, 2u}) {
    for (std::size_t pad : {0u, 1u}) {
      NdArray in = random_array({7, 9, 3}, rng);
      NdArray ker = random_array({3, 3, 3, 4}, rng);
      NdArray bias = random_array({4}, rng);
      NdArray fast = nn::conv2d_forward(in, ker, bias, stride, pad);
      NdArray ref = conv_reference(in, ker, bias, stride, pad);
      REQUIRE(fast.shape() == ref.shape());
      for (std::size_t i = 0; i < fast.size(); ++i)
        CHECK(fast[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("conv2d output shape obeys the floor formula exhaustively") {
  for (std::size_t h = 1; h <= 16; ++h)
    for (std::size_t w = 1; w <= 16; ++w)
      for (std::size_t k = 1; k <= std::min(h, w); ++k)
        for (std::size_t stride = 1; stride <= 4; ++stride) {
          NdArray in({h, w, 1});
          NdArray ker({k, k, 1, 1});
          NdArray bias({1});
          NdArray out = nn::conv2d_forward(in, ker, bias, stride);
          CHECK(out.dim(0) == (h - k) / stride + 1);
          CHECK(out.dim(1) == (w - k) / stride + 1);
        }
}

TEST_CASE("conv2d rejects shape mismatches before computing") {
  NdArray in({6, 6, 2});
  NdArray bias({3});
  CHECK_THROWS_AS(nn::conv2d_forward(in, NdArray({3, 3, 5, 3}), bias, 1), std::invalid_argument);
  CHECK_THROWS_AS(nn::conv2d_forward(in, NdArray({7, 7, 2, 3}), bias, 1), std::invalid_argument);
  CHECK_THROWS_AS(nn::conv2d_forward(in, NdArray({3, 3, 2, 4}), bias, 1), std::invalid_argument);
}

TEST_CASE("conv2d gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(100 + seed);
    NdArray in = random_array({6, 6, 2}, rng);
    NdArray ker = random_array({3, 3, 2, 3}, rng, 0.5);
    NdArray bias = random_array({3}, rng, 0.1);
    const std::size_t stride = 1 + seed % 2;
    const std::size_t pad = seed % 3 == 0 ? 1 : 0;

    NdArray probe = random_array(
        {nn::conv_out_extent(6, 3, stride, pad), nn::conv_out_extent(6, 3, stride, pad), 3}, rng);
    auto loss = [&] { return weighted_sum(nn::conv2d_forward(in, ker, bias, stride, pad), probe); };
    nn::Conv2dGrads g = nn::conv2d_backward(in, ker, stride, pad, probe);

    CHECK(max_rel_error(ker, g.kernels, loss) < 1e-4);
    CHECK(max_rel_error(bias, g.bias, loss) < 1e-4);
    CHECK(max_rel_error(in, g.input, loss) < 1e-4);
  }
}

TEST_CASE("lstm zero parameters give zero outputs") {
  nn::LstmParams p{NdArray({3, 16}), NdArray({4, 16}), NdArray({16})};
  nn::LstmState s{NdArray({4}), NdArray({4})};
  NdArray x({3});
  x.fill(0.7);
  nn::LstmState next = nn::lstm_step(p, x, s);
  for (std::size_t j = 0; j < 4; ++j) {
    CHECK(next.h[j] == 0.0);
    CHECK(next.c[j] == 0.0);
  }
}

TEST_CASE("lstm shape contract and bounded hidden state") {
  Rng rng(3);
  nn::LstmParams p{random_array({16, 256}, rng), random_array({64, 256}, rng),
                   random_array({256}, rng)};
  nn::LstmState s{random_array({64}, rng, 3.0), random_array({64}, rng, 3.0)};
  NdArray x = random_array({16}, rng, 3.0);
  nn::LstmState next = nn::lstm_step(p, x, s);
  CHECK(next.h.size() == 64);
  CHECK(next.c.size() == 64);
  for (std::size_t j = 0; j < 64; ++j) CHECK(std::fabs(next.h[j]) < 1.0);

  CHECK_THROWS_AS(nn::lstm_step(p, NdArray({5}), s), std::invalid_argument);
  CHECK_THROWS_AS(nn::lstm_step(p, x, nn::LstmState{NdArray({8}), NdArray({8})}),
                  std::invalid_argument);
}

TEST_CASE("lstm gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(200 + seed);
    const std::size_t din = 5, dh = 6;
    nn::LstmParams p{random_array({din, 4 * dh}, rng, 0.6), random_array({dh, 4 * dh}, rng, 0.6),
                     random_array({4 * dh}, rng, 0.3)};
    nn::LstmState s{random_array({dh}, rng, 0.8), random_array({dh}, rng, 0.8)};
    NdArray x = random_array({din}, rng);
    NdArray wh_probe = random_array({dh}, rng);
    NdArray wc_probe = random_array({dh}, rng);

    auto loss = [&] {
      nn::LstmState n = nn::lstm_step(p, x, s);
      return weighted_sum(n.h, wh_probe) + weighted_sum(n.c, wc_probe);
    };
    nn::LstmCache cache;
    nn::lstm_step(p, x, s, &cache);
    nn::LstmGrads g = nn::lstm_backward(p, cache, wh_probe, wc_probe);

    CHECK(max_rel_error(x, g.x, loss) < 1e-4);
    CHECK(max_rel_error(s.h, g.h_prev, loss) < 1e-4);
    CHECK(max_rel_error(s.c, g.c_prev, loss) < 1e-4);
    CHECK(max_rel_error(p.wx, g.wx, loss) < 1e-4);
    CHECK(max_rel_error(p.wh, g.wh, loss) < 1e-4);
    CHECK(max_rel_error(p.b, g.b, loss) < 1e-4);
  }
}

TEST_CASE("dense identity and bias passthrough") {
  NdArray w({3, 3});
  for (std::size_t i = 0; i < 3; ++i) w.at2(i, i) = 1.0;
  NdArray x = NdArray::from_data({3}, {0.5, -2.0, 3.25});
  NdArray y = nn::dense_forward(x, w, NdArray({3}));
  for (std::size_t i = 0; i < 3; ++i) CHECK(y[i] == x[i]);

  NdArray b = NdArray::from_data({4}, {1.0, 2.0, 3.0, 4.0});
  NdArray z = nn::dense_forward(x, NdArray({3, 4}), b);
  for (std::size_t i = 0; i < 4; ++i) CHECK(z[i] == b[i]);

  CHECK_THROWS_AS(nn::dense_forward(NdArray({5}), w, NdArray({3})), std::invalid_argument);
}

TEST_CASE("dense gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(300 + seed);
    NdArray x = random_array({7}, rng);
    NdArray w = random_array({7, 4}, rng);
    NdArray b = random_array({4}, rng);
    NdArray probe = random_array({4}, rng);
    auto loss = [&] { return weighted_sum(nn::dense_forward(x, w, b), probe); };
    nn::DenseGrads g = nn::dense_backward(x, w, probe);
    CHECK(max_rel_error(x, g.input, loss) < 1e-4);
    CHECK(max_rel_error(w, g.weight, loss) < 1e-4);
    CHECK(max_rel_error(b, g.bias, loss) < 1e-4);
  }
}

TEST_CASE("relu backward masks non-positive pre-activations") {
  NdArray z = NdArray::from_data({4}, {-1.0, 0.0, 0.5, 2.0});
  NdArray g = NdArray::from_data({4}, {1.0, 1.0, 1.0, 1.0});
  NdArray out = nn::relu_backward(z, g);
  CHECK(out[0] == 0.0);
  CHECK(out[1] == 0.0);
  CHECK(out[2] == 1.0);
  CHECK(out[3] == 1.0);
}

TEST_CASE("softmax cross entropy: uniform, saturated, normalized") {
  NdArray logits({4});
  logits.fill(1.7);
  nn::SoftmaxXent r = nn::softmax_cross_entropy(logits, 2);
  CHECK(r.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  double sum = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(r.probs[i] >= 0.0);
    sum += r.probs[i];
  }
  CHECK(std::fabs(sum - 1.0) <= 1e-9);

  NdArray hot = NdArray::from_data({3}, {0.0, 50.0, 0.0});
  CHECK(nn::softmax_cross_entropy(hot, 1).loss < 1e-9);

  CHECK_THROWS_AS(nn::softmax_cross_entropy(logits, 4), std::invalid_argument);
  CHECK_THROWS_AS(nn::softmax_cross_entropy(logits, -1), std::invalid_argument);
}

TEST_CASE("softmax cross entropy gradient matches finite differences tightly") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(400 + seed);
    NdArray logits = random_array({6}, rng, 3.0);
    const int label = static_cast<int>(rng.uniform_int(6));
    auto loss = [&] { return nn::softmax_cross_entropy(logits, label).loss; };
    nn::SoftmaxXent r = nn::softmax_cross_entropy(logits, label);
    double worst = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double saved = logits[i];
      logits[i] = saved + 1e-5;
      const double up = loss();
      logits[i] = saved - 1e-5;
      const double down = loss();
      logits[i] = saved;
      const double numeric = (up - down) / 2e-5;
      worst = std::max(worst, std::fabs(numeric - r.grad_logits[i]) /
                                  std::max({std::fabs(numeric), std::fabs(r.grad_logits[i]), 1.0}));
    }
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
  NdArray p = NdArray::from_data({3}, {1.0, -2.0, 0.5});
  const NdArray before = p;
  NdArray g({3});
  nn::AdamState st({&p}, {});
  nn::adam_step({&p}, {&g}, st);
  for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == before[i]);
  CHECK(st.step_count() == 1);
}

TEST_CASE("adam: first step is -lr * sign(g) for large constant gradients") {
  nn::AdamConfig cfg;
  cfg.learning_rate = 1e-3;
  NdArray p = NdArray::from_data({2}, {0.0, 0.0});
  NdArray g = NdArray::from_data({2}, {4.0, -0.5});
  nn::AdamState st({&p}, cfg);
  nn::adam_step({&p}, {&g}, st);
  CHECK(p[0] == doctest::Approx(-cfg.learning_rate).epsilon(1e-6));
  CHECK(p[1] == doctest::Approx(cfg.learning_rate).epsilon(1e-6));
}

TEST_CASE("adam: three fixed-gradient steps match a straight-line reference") {
  nn::AdamConfig cfg;
  cfg.learning_rate = 0.01;
  NdArray p = NdArray::from_data({1}, {0.3});
  NdArray g = NdArray::from_data({1}, {0.7});
  nn::AdamState st({&p}, cfg);

  // reference: scalar Adam unrolled by hand
  double rp = 0.3, m = 0.0, v = 0.0;
  for (int t = 1; t <= 3; ++t) {
    m = cfg.beta1 * m + (1 - cfg.beta1) * 0.7;
    v = cfg.beta2 * v + (1 - cfg.beta2) * 0.7 * 0.7;
    const double mhat = m / (1 - std::pow(cfg.beta1, t));
    const double vhat = v / (1 - std::pow(cfg.beta2, t));
    rp -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
    nn::adam_step({&p}, {&g}, st);
    CHECK(std::fabs(p[0] - rp) < 1e-12);
  }
  CHECK(st.step_count() == 3);
}

TEST_CASE("adam: non-finite gradients are rejected and state is untouched") {
  NdArray p = NdArray::from_data({2}, {1.0, 2.0});
  NdArray g = NdArray::from_data({2}, {0.1, std::numeric_limits<double>::quiet_NaN()});
  nn::AdamState st({&p}, {});
  CHECK_THROWS_AS(nn::adam_step({&p}, {&g}, st), std::runtime_error);
  CHECK(st.step_count() == 0);
  CHECK(p[0] == 1.0);
  CHECK(p[1] == 2.0);
}

TEST_CASE("adam: per-coordinate change bounded near lr for steady gradients") {
  Rng rng(5);
  nn::AdamConfig cfg;
  cfg.learning_rate = 1e-2;
  NdArray p = random_array({32}, rng);
  NdArray g = random_array({32}, rng, 2.0);
  nn::AdamState st({&p}, cfg);
  NdArray prev = p;
  for (int t = 0; t < 10; ++t) {
    nn::adam_step({&p}, {&g}, st);
    for (std::size_t i = 0; i < p.size(); ++i)
      CHECK(std::fabs(p[i] - prev[i]) <= cfg.learning_rate * 1.0001);
    prev = p;
  }
}

TEST_CASE("dropout identity cases and survivor fraction") {
  Rng rng(9);
  NdArray x = random_array({50}, rng);
  NdArray y = nn::dropout(x, 0.0, rng, true);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
  y = nn::dropout(x, 0.8, rng, false);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);

  NdArray big({100000});
  big.fill(1.0);
  NdArray dropped = nn::dropout(big, 0.5, rng, true);
  std::size_t survivors = 0;
  for (std::size_t i = 0; i < dropped.size(); ++i)
    if (dropped[i] != 0.0) {
      CHECK(dropped[i] == doctest::Approx(2.0));
      ++survivors;
    }
  const double frac = static_cast<double>(survivors) / static_cast<double>(dropped.size());
  CHECK(frac > 0.49);
  CHECK(frac < 0.51);

  CHECK_THROWS_AS(nn::dropout(x, 1.0, rng, true), std::invalid_argument);
  CHECK_THROWS_AS(nn::dropout(x, -0.1, rng, true), std::invalid_argument);
}

TEST_CASE("softmax is a probability vector for arbitrary logits") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(500 + seed);
    NdArray logits = random_array({1 + seed % 7 + 1}, rng, 40.0);
    NdArray probs = nn::softmax(logits);
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      CHECK(probs[i] >= 0.0);
      sum += probs[i];
    }
    CHECK(std::fabs(sum - 1.0) <= 1e-9);
  }
}
