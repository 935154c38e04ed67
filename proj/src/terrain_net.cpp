#include "offroad/terrain_net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

#include "offroad/util.hpp"

namespace offroad::net {

InputMode parse_mode(const std::string& name) {
  if (name == "fusion") return InputMode::kFusion;
  if (name == "ground_only") return InputMode::kGroundOnly;
  if (name == "air_only") return InputMode::kAirOnly;
  throw std::invalid_argument("unknown input mode: " + name);
}

std::string mode_name(InputMode mode) {
  switch (mode) {
    case InputMode::kFusion: return "fusion";
    case InputMode::kGroundOnly: return "ground_only";
    case InputMode::kAirOnly: return "air_only";
  }
  return "fusion";
}

std::vector<std::array<int, 3>> ArchDescriptor::branch_shapes(int h, int w) const {
  std::vector<std::array<int, 3>> shapes;
  int ch = input_channels();
  for (const ConvSpec& spec : conv) {
    const auto oh = nn::conv_out_extent(static_cast<std::size_t>(h),
                                        static_cast<std::size_t>(spec.kernel),
                                        static_cast<std::size_t>(spec.stride),
                                        static_cast<std::size_t>(spec.pad));
    const auto ow = nn::conv_out_extent(static_cast<std::size_t>(w),
                                        static_cast<std::size_t>(spec.kernel),
                                        static_cast<std::size_t>(spec.stride),
                                        static_cast<std::size_t>(spec.pad));
    if (oh == 0 || ow == 0)
      throw std::invalid_argument("architecture: conv layer with kernel " +
                                  std::to_string(spec.kernel) + " collapses a " +
                                  std::to_string(h) + "x" + std::to_string(w) + " map");
    h = static_cast<int>(oh);
    w = static_cast<int>(ow);
    ch = spec.channels;
    shapes.push_back({h, w, ch});
  }
  return shapes;
}

int ArchDescriptor::branch_feature_size(int h, int w) const {
  const auto shapes = branch_shapes(h, w);
  const auto& last = shapes.back();
  return last[0] * last[1] * last[2];
}

int ArchDescriptor::fused_feature_size() const {
  int n = 0;
  if (has_ground()) n += branch_feature_size(ground_h, ground_w);
  if (has_aerial()) n += branch_feature_size(aerial_h, aerial_w);
  return n;
}

void ArchDescriptor::check() const {
  if (num_classes < 2) throw std::invalid_argument("architecture: need at least 2 classes");
  if (horizon < 1 || history < 1)
    throw std::invalid_argument("architecture: horizon and history must be positive");
  if (hidden_dim < 1 || action_dim < 1)
    throw std::invalid_argument("architecture: hidden_dim and action_dim must be positive");
  if (dropout < 0.0 || dropout >= 1.0)
    throw std::invalid_argument("architecture: dropout must be in [0, 1)");
  for (const ConvSpec& spec : conv)
    if (spec.channels < 1 || spec.kernel < 1 || spec.stride < 1 || spec.pad < 0)
      throw std::invalid_argument("architecture: malformed conv spec");
  if (has_ground()) branch_shapes(ground_h, ground_w);
  if (has_aerial()) branch_shapes(aerial_h, aerial_w);
}

ArchDescriptor arch_from_config(const cfg::RunConfig& config) {
  ArchDescriptor a;
  a.num_classes = config.world.num_classes;
  a.horizon = config.model.horizon;
  a.history = config.model.history;
  a.ground_h = config.camera.ground_h;
  a.ground_w = config.camera.ground_w;
  a.aerial_h = config.camera.aerial_h;
  a.aerial_w = config.camera.aerial_w;
  a.hidden_dim = config.model.hidden_dim;
  a.action_dim = config.model.action_dim;
  a.mode = parse_mode(config.model.mode);
  a.dropout = config.model.dropout;
  for (int i = 0; i < 4; ++i) {
    a.conv[i] = ConvSpec{config.model.conv_channels[static_cast<std::size_t>(i)],
                         config.model.conv_kernels[static_cast<std::size_t>(i)],
                         config.model.conv_strides[static_cast<std::size_t>(i)],
                         config.model.conv_pads[static_cast<std::size_t>(i)]};
  }
  a.check();
  return a;
}

void ModelParameters::for_each(const std::function<void(const std::string&, NdArray&)>& fn) {
  for (std::size_t i = 0; i < ground_branch.size(); ++i) {
    fn("ground.conv" + std::to_string(i) + ".kernels", ground_branch[i].kernels);
    fn("ground.conv" + std::to_string(i) + ".bias", ground_branch[i].bias);
  }
  for (std::size_t i = 0; i < aerial_branch.size(); ++i) {
    fn("aerial.conv" + std::to_string(i) + ".kernels", aerial_branch[i].kernels);
    fn("aerial.conv" + std::to_string(i) + ".bias", aerial_branch[i].bias);
  }
  fn("fusion.weight", fusion.weight);
  fn("fusion.bias", fusion.bias);
  fn("action_embed.weight", action_embed.weight);
  fn("action_embed.bias", action_embed.bias);
  fn("lstm.wx", lstm.wx);
  fn("lstm.wh", lstm.wh);
  fn("lstm.b", lstm.b);
  fn("head.weight", head.weight);
  fn("head.bias", head.bias);
}

void ModelParameters::for_each(
    const std::function<void(const std::string&, const NdArray&)>& fn) const {
  const_cast<ModelParameters*>(this)->for_each(
      [&](const std::string& name, NdArray& a) { fn(name, a); });
}

std::vector<NdArray*> ModelParameters::param_ptrs() {
  std::vector<NdArray*> ptrs;
  for_each([&](const std::string&, NdArray& a) { ptrs.push_back(&a); });
  return ptrs;
}

std::vector<const NdArray*> ModelParameters::param_ptrs() const {
  std::vector<const NdArray*> ptrs;
  for_each([&](const std::string&, const NdArray& a) { ptrs.push_back(&a); });
  return ptrs;
}

double ModelParameters::squared_norm() const {
  double s = 0.0;
  for_each([&](const std::string&, const NdArray& a) {
    for (double v : a.values()) s += v * v;
  });
  return s;
}

namespace {

NdArray fan_in_uniform(std::vector<std::size_t> shape, std::size_t fan_in, Rng& rng) {
  NdArray a(std::move(shape));
  const double limit = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& v : a.values()) v = rng.uniform(-limit, limit);
  return a;
}

std::vector<ConvLayer> init_branch(const ArchDescriptor& arch, Rng& rng) {
  std::vector<ConvLayer> branch;
  int cin = arch.input_channels();
  for (const ConvSpec& spec : arch.conv) {
    const auto k = static_cast<std::size_t>(spec.kernel);
    const auto ci = static_cast<std::size_t>(cin);
    const auto co = static_cast<std::size_t>(spec.channels);
    ConvLayer layer;
    layer.kernels = fan_in_uniform({k, k, ci, co}, k * k * ci, rng);
    layer.bias = NdArray({co});
    branch.push_back(std::move(layer));
    cin = spec.channels;
  }
  return branch;
}

DenseLayer init_dense(std::size_t din, std::size_t dout, Rng& rng) {
  DenseLayer d;
  d.weight = fan_in_uniform({din, dout}, din, rng);
  d.bias = NdArray({dout});
  return d;
}

}  // namespace

ModelParameters init_model(const ArchDescriptor& arch, std::uint64_t seed) {
  arch.check();
  ModelParameters p;
  p.arch = arch;
  Rng rng = Rng::derive(seed, 0xa11c);
  if (arch.has_ground()) p.ground_branch = init_branch(arch, rng);
  if (arch.has_aerial()) p.aerial_branch = init_branch(arch, rng);
  const auto feat = static_cast<std::size_t>(arch.fused_feature_size());
  const auto dh = static_cast<std::size_t>(arch.hidden_dim);
  const auto din = static_cast<std::size_t>(arch.action_dim);
  p.fusion = init_dense(feat, 2 * dh, rng);
  p.action_embed = init_dense(1, din, rng);
  p.lstm.wx = fan_in_uniform({din, 4 * dh}, din, rng);
  p.lstm.wh = fan_in_uniform({dh, 4 * dh}, dh, rng);
  p.lstm.b = NdArray({4 * dh});
  p.head = init_dense(dh, static_cast<std::size_t>(arch.num_classes), rng);
  return p;
}

ModelParameters zeros_like(const ModelParameters& params) {
  ModelParameters z = params;
  z.for_each([](const std::string&, NdArray& a) { a.fill(0.0); });
  return z;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace {

struct BranchCache {
  std::vector<NdArray> pre;   // pre-activation per layer
  std::vector<NdArray> post;  // relu output per layer
};

NdArray branch_forward(const std::vector<ConvLayer>& branch, const ArchDescriptor& arch,
                       const NdArray& input, BranchCache* cache) {
  NdArray x = input;
  for (std::size_t i = 0; i < branch.size(); ++i) {
    NdArray z = nn::conv2d_forward(x, branch[i].kernels, branch[i].bias,
                                   static_cast<std::size_t>(arch.conv[i].stride),
                                   static_cast<std::size_t>(arch.conv[i].pad));
    x = nn::relu(z);
    if (cache) {
      cache->pre.push_back(std::move(z));
      cache->post.push_back(x);
    }
  }
  return NdArray::from_data({x.size()}, x.values());
}

void branch_backward(const std::vector<ConvLayer>& branch, const ArchDescriptor& arch,
                     const NdArray& input, const BranchCache& cache, NdArray grad_flat,
                     std::vector<ConvLayer>& grads) {
  NdArray grad = NdArray::from_data(cache.post.back().shape(), std::move(grad_flat.values()));
  for (std::size_t i = branch.size(); i-- > 0;) {
    grad = nn::relu_backward(cache.pre[i], grad);
    const NdArray& layer_in = i == 0 ? input : cache.post[i - 1];
    nn::Conv2dGrads g =
        nn::conv2d_backward(layer_in, branch[i].kernels, static_cast<std::size_t>(arch.conv[i].stride),
                            static_cast<std::size_t>(arch.conv[i].pad), grad, i != 0);
    for (std::size_t j = 0; j < g.kernels.size(); ++j) grads[i].kernels[j] += g.kernels[j];
    for (std::size_t j = 0; j < g.bias.size(); ++j) grads[i].bias[j] += g.bias[j];
    if (i != 0) grad = std::move(g.input);
  }
}

struct ForwardCache {
  BranchCache ground, aerial;
  NdArray fused;          // concatenated branch features
  NdArray dropout_mask;   // scale factors applied to fused
  NdArray fused_dropped;  // fusion-layer input
  std::vector<NdArray> embeds;      // per-step action embeddings
  std::vector<nn::LstmCache> steps;
  std::vector<NdArray> hidden;      // h after each step
};

void check_obs(const ArchDescriptor& arch, const ObservationState& obs) {
  const auto ch = static_cast<std::size_t>(arch.input_channels());
  if (arch.has_ground())
    require_shape(obs.ground_stack,
                  {static_cast<std::size_t>(arch.ground_h), static_cast<std::size_t>(arch.ground_w), ch},
                  "ground stack");
  if (arch.has_aerial())
    require_shape(obs.aerial_stack,
                  {static_cast<std::size_t>(arch.aerial_h), static_cast<std::size_t>(arch.aerial_w), ch},
                  "aerial stack");
}

std::pair<NdArray, NdArray> encode_cached(const ModelParameters& params,
                                          const ObservationState& obs, bool training, Rng* rng,
                                          ForwardCache* cache) {
  const ArchDescriptor& arch = params.arch;
  check_obs(arch, obs);

  NdArray fused;
  if (arch.has_ground())
    fused = branch_forward(params.ground_branch, arch, obs.ground_stack,
                           cache ? &cache->ground : nullptr);
  if (arch.has_aerial()) {
    NdArray air = branch_forward(params.aerial_branch, arch, obs.aerial_stack,
                                 cache ? &cache->aerial : nullptr);
    if (fused.empty()) {
      fused = std::move(air);
    } else {
      std::vector<double> joined = std::move(fused.values());
      joined.insert(joined.end(), air.values().begin(), air.values().end());
      const std::size_t total = joined.size();
      fused = NdArray::from_data({total}, std::move(joined));
    }
  }

  NdArray dropped;
  NdArray mask;
  if (training && arch.dropout > 0.0) {
    if (!rng) throw std::invalid_argument("encode: training dropout requires an rng");
    dropped = nn::dropout(fused, arch.dropout, *rng, true, &mask);
  } else {
    dropped = fused;
    mask = NdArray(fused.shape());
    mask.fill(1.0);
  }

  NdArray hc = nn::dense_forward(dropped, params.fusion.weight, params.fusion.bias);
  const auto dh = static_cast<std::size_t>(arch.hidden_dim);
  NdArray h0({dh}), c0({dh});
  for (std::size_t j = 0; j < dh; ++j) {
    h0[j] = hc[j];
    c0[j] = hc[dh + j];
  }
  if (cache) {
    cache->fused = std::move(fused);
    cache->dropout_mask = std::move(mask);
    cache->fused_dropped = std::move(dropped);
  }
  return {std::move(h0), std::move(c0)};
}

RolloutPrediction rollout_cached(const ModelParameters& params, const ObservationState& obs,
                                 const ActionSequence& actions, bool training, Rng* rng,
                                 ForwardCache* cache) {
  const ArchDescriptor& arch = params.arch;
  if (static_cast<int>(actions.size()) != arch.horizon)
    throw std::invalid_argument("predict_rollout: expected " + std::to_string(arch.horizon) +
                                " actions, got " + std::to_string(actions.size()));

  auto [h, c] = encode_cached(params, obs, training, rng, cache);
  nn::LstmState state{std::move(h), std::move(c)};

  RolloutPrediction out;
  out.per_step_probs.reserve(actions.size());
  for (double a : actions) {
    NdArray scalar = NdArray::from_data({1}, {a});
    NdArray embed = nn::dense_forward(scalar, params.action_embed.weight, params.action_embed.bias);
    nn::LstmCache step_cache;
    state = nn::lstm_step(params.lstm, embed, state, cache ? &step_cache : nullptr);
    NdArray logits = nn::dense_forward(state.h, params.head.weight, params.head.bias);
    out.per_step_probs.push_back(nn::softmax(logits));
    if (cache) {
      cache->embeds.push_back(std::move(embed));
      cache->steps.push_back(std::move(step_cache));
      cache->hidden.push_back(state.h);
    }
  }
  return out;
}

/// Summed cross-entropy over the horizon for one item; accumulates parameter
/// gradients into grads.
double item_loss_and_grads(const ModelParameters& params, const ObservationState& obs,
                           const ActionSequence& actions, const std::vector<int>& labels,
                           bool training, Rng* rng, ModelParameters& grads) {
  const ArchDescriptor& arch = params.arch;
  if (static_cast<int>(labels.size()) != arch.horizon)
    throw std::invalid_argument("batch_loss: label sequence length != horizon");

  ForwardCache cache;
  rollout_cached(params, obs, actions, training, rng, &cache);

  const auto dh = static_cast<std::size_t>(arch.hidden_dim);
  const std::size_t horizon = static_cast<std::size_t>(arch.horizon);
  double ce = 0.0;
  NdArray grad_h({dh}), grad_c({dh});
  for (std::size_t i = horizon; i-- > 0;) {
    NdArray logits =
        nn::dense_forward(cache.hidden[i], params.head.weight, params.head.bias);
    nn::SoftmaxXent xent = nn::softmax_cross_entropy(logits, labels[i]);
    ce += xent.loss;

    nn::DenseGrads hg = nn::dense_backward(cache.hidden[i], params.head.weight, xent.grad_logits);
    for (std::size_t j = 0; j < hg.weight.size(); ++j) grads.head.weight[j] += hg.weight[j];
    for (std::size_t j = 0; j < hg.bias.size(); ++j) grads.head.bias[j] += hg.bias[j];
    for (std::size_t j = 0; j < dh; ++j) grad_h[j] += hg.input[j];

    nn::LstmGrads lg = nn::lstm_backward(params.lstm, cache.steps[i], grad_h, grad_c);
    for (std::size_t j = 0; j < lg.wx.size(); ++j) grads.lstm.wx[j] += lg.wx[j];
    for (std::size_t j = 0; j < lg.wh.size(); ++j) grads.lstm.wh[j] += lg.wh[j];
    for (std::size_t j = 0; j < lg.b.size(); ++j) grads.lstm.b[j] += lg.b[j];

    NdArray scalar = NdArray::from_data({1}, {actions[i]});
    nn::DenseGrads eg = nn::dense_backward(scalar, params.action_embed.weight, lg.x);
    for (std::size_t j = 0; j < eg.weight.size(); ++j)
      grads.action_embed.weight[j] += eg.weight[j];
    for (std::size_t j = 0; j < eg.bias.size(); ++j) grads.action_embed.bias[j] += eg.bias[j];

    grad_h = std::move(lg.h_prev);
    grad_c = std::move(lg.c_prev);
  }

  // through the fusion projection into the branches
  NdArray grad_hc({2 * dh});
  for (std::size_t j = 0; j < dh; ++j) {
    grad_hc[j] = grad_h[j];
    grad_hc[dh + j] = grad_c[j];
  }
  nn::DenseGrads fg = nn::dense_backward(cache.fused_dropped, params.fusion.weight, grad_hc);
  for (std::size_t j = 0; j < fg.weight.size(); ++j) grads.fusion.weight[j] += fg.weight[j];
  for (std::size_t j = 0; j < fg.bias.size(); ++j) grads.fusion.bias[j] += fg.bias[j];

  NdArray grad_fused = std::move(fg.input);
  for (std::size_t j = 0; j < grad_fused.size(); ++j) grad_fused[j] *= cache.dropout_mask[j];

  std::size_t offset = 0;
  if (arch.has_ground()) {
    const auto n = static_cast<std::size_t>(arch.branch_feature_size(arch.ground_h, arch.ground_w));
    NdArray part({n});
    std::copy(grad_fused.data(), grad_fused.data() + n, part.data());
    branch_backward(params.ground_branch, arch, obs.ground_stack, cache.ground, std::move(part),
                    grads.ground_branch);
    offset = n;
  }
  if (arch.has_aerial()) {
    const auto n = static_cast<std::size_t>(arch.branch_feature_size(arch.aerial_h, arch.aerial_w));
    NdArray part({n});
    std::copy(grad_fused.data() + offset, grad_fused.data() + offset + n, part.data());
    branch_backward(params.aerial_branch, arch, obs.aerial_stack, cache.aerial, std::move(part),
                    grads.aerial_branch);
  }
  return ce;
}

}  // namespace

std::pair<NdArray, NdArray> encode(const ModelParameters& params, const ObservationState& obs) {
  return encode_cached(params, obs, false, nullptr, nullptr);
}

RolloutPrediction predict_rollout(const ModelParameters& params, const ObservationState& obs,
                                  const ActionSequence& actions, bool training, Rng* rng) {
  return rollout_cached(params, obs, actions, training, rng, nullptr);
}

BatchLossResult batch_loss(const ModelParameters& params, const TrainingBatch& batch, double l2,
                           bool training, std::uint64_t dropout_seed) {
  const std::size_t n = batch.size();
  if (n == 0) throw std::invalid_argument("batch_loss: empty batch");
  if (batch.actions.size() != n || batch.labels.size() != n)
    throw std::invalid_argument("batch_loss: ragged batch");

  std::vector<ModelParameters> item_grads(n, zeros_like(params));
  std::vector<double> item_ce(n, 0.0);
  parallel_for(n, [&](std::size_t i) {
    Rng rng = Rng::derive(dropout_seed, i);
    item_ce[i] = item_loss_and_grads(params, batch.observations[i], batch.actions[i],
                                     batch.labels[i], training, &rng, item_grads[i]);
  });

  BatchLossResult out;
  out.grads = zeros_like(params);
  const double inv = 1.0 / static_cast<double>(n);
  // combined in index order so the reduction is schedule-independent
  for (std::size_t i = 0; i < n; ++i) {
    out.ce += item_ce[i];
    auto dst = out.grads.param_ptrs();
    auto src = item_grads[i].param_ptrs();
    for (std::size_t k = 0; k < dst.size(); ++k)
      for (std::size_t j = 0; j < dst[k]->size(); ++j) (*dst[k])[j] += (*src[k])[j] * inv;
  }
  out.ce *= inv;

  double sq = 0.0;
  auto gptrs = out.grads.param_ptrs();
  auto pptrs = params.param_ptrs();
  for (std::size_t k = 0; k < gptrs.size(); ++k) {
    const NdArray& p = *pptrs[k];
    NdArray& g = *gptrs[k];
    for (std::size_t j = 0; j < p.size(); ++j) {
      sq += p[j] * p[j];
      g[j] += 2.0 * l2 * p[j];
    }
  }
  out.loss = out.ce + l2 * sq;
  if (!std::isfinite(out.loss))
    throw std::runtime_error("batch_loss: non-finite loss (" + std::to_string(out.loss) +
                             "); training step aborted");
  return out;
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

namespace {

TrainingBatch assemble(const SampleSource& source, const std::vector<std::size_t>& indices) {
  TrainingBatch batch;
  batch.observations.resize(indices.size());
  batch.actions.resize(indices.size());
  batch.labels.resize(indices.size());
  parallel_for(indices.size(), [&](std::size_t i) {
    source.get(indices[i], batch.observations[i], batch.actions[i], batch.labels[i]);
  });
  return batch;
}

std::vector<std::size_t> val_subset(std::size_t total, std::size_t cap) {
  std::vector<std::size_t> idx;
  if (cap == 0 || total <= cap) {
    idx.resize(total);
    for (std::size_t i = 0; i < total; ++i) idx[i] = i;
  } else {
    idx.resize(cap);
    for (std::size_t i = 0; i < cap; ++i) idx[i] = i * total / cap;
  }
  return idx;
}

struct ValMetrics {
  double ce = 0.0;
  double horizon1_acc = 0.0;
};

ValMetrics validation_metrics(const ModelParameters& params, const SampleSource& val,
                              const std::vector<std::size_t>& indices) {
  ValMetrics m;
  if (indices.empty()) return m;
  std::vector<double> ce(indices.size(), 0.0);
  std::vector<int> hit1(indices.size(), 0);
  parallel_for(indices.size(), [&](std::size_t i) {
    ObservationState obs;
    ActionSequence actions;
    std::vector<int> labels;
    val.get(indices[i], obs, actions, labels);
    RolloutPrediction pred = predict_rollout(params, obs, actions);
    double sum = 0.0;
    for (std::size_t s = 0; s < pred.per_step_probs.size(); ++s) {
      const NdArray& probs = pred.per_step_probs[s];
      sum += -std::log(std::max(probs[static_cast<std::size_t>(labels[s])], 1e-300));
    }
    ce[i] = sum;
    const NdArray& p1 = pred.per_step_probs.front();
    const std::size_t argmax =
        static_cast<std::size_t>(std::max_element(p1.values().begin(), p1.values().end()) -
                                 p1.values().begin());
    hit1[i] = argmax == static_cast<std::size_t>(labels.front()) ? 1 : 0;
  });
  for (std::size_t i = 0; i < indices.size(); ++i) {
    m.ce += ce[i];
    m.horizon1_acc += hit1[i];
  }
  m.ce /= static_cast<double>(indices.size());
  m.horizon1_acc /= static_cast<double>(indices.size());
  return m;
}

}  // namespace

TrainResult train(ModelParameters& params, const SampleSource& train_set,
                  const SampleSource& val_set, const TrainOptions& options) {
  if (train_set.size() == 0 || val_set.size() == 0)
    throw std::invalid_argument("train: empty dataset split");

  const std::size_t n = train_set.size();
  const std::size_t batch_size = std::min<std::size_t>(static_cast<std::size_t>(options.batch), n);
  Rng shuffle_rng = Rng::derive(options.seed, 0x51u);

  nn::AdamConfig adam_cfg;
  adam_cfg.learning_rate = options.learning_rate;
  nn::AdamState adam(static_cast<const ModelParameters&>(params).param_ptrs(), adam_cfg);
  auto ptrs = params.param_ptrs();

  const auto val_idx = val_subset(val_set.size(), static_cast<std::size_t>(options.val_samples));

  TrainResult result;
  ValMetrics initial = validation_metrics(params, val_set, val_idx);
  result.initial_val_ce = initial.ce;
  result.best_val_ce = initial.ce;
  result.log.push_back({0, 0.0, initial.ce, initial.horizon1_acc});

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::size_t cursor = n;  // forces a shuffle on first use

  for (int step = 1; step <= options.steps; ++step) {
    std::vector<std::size_t> indices(batch_size);
    for (std::size_t b = 0; b < batch_size; ++b) {
      if (cursor >= n) {
        for (std::size_t i = n; i > 1; --i)
          std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        cursor = 0;
      }
      indices[b] = order[cursor++];
    }
    TrainingBatch batch = assemble(train_set, indices);
    BatchLossResult res =
        batch_loss(params, batch, options.l2, true,
                   Rng::derive(options.seed, static_cast<std::uint64_t>(step)).next_u64());

    std::vector<const NdArray*> grad_ptrs;
    res.grads.for_each(
        [&](const std::string&, NdArray& a) { grad_ptrs.push_back(&a); });
    nn::adam_step(ptrs, grad_ptrs, adam);

    if (step % options.eval_every == 0 || step == options.steps) {
      ValMetrics vm = validation_metrics(params, val_set, val_idx);
      result.best_val_ce = std::min(result.best_val_ce, vm.ce);
      result.final_val_ce = vm.ce;
      result.log.push_back({step, res.loss, vm.ce, vm.horizon1_acc});
    }
  }
  return result;
}

HorizonAccuracy horizon_accuracy(const ModelParameters& params, const SampleSource& val_set,
                                 std::size_t max_samples) {
  const auto idx = val_subset(val_set.size(), max_samples);
  if (idx.empty()) throw std::invalid_argument("horizon_accuracy: empty validation set");
  const auto horizon = static_cast<std::size_t>(params.arch.horizon);

  std::vector<std::vector<int>> hits(idx.size(), std::vector<int>(horizon, 0));
  parallel_for(idx.size(), [&](std::size_t i) {
    ObservationState obs;
    ActionSequence actions;
    std::vector<int> labels;
    val_set.get(idx[i], obs, actions, labels);
    RolloutPrediction pred = predict_rollout(params, obs, actions);
    for (std::size_t s = 0; s < horizon; ++s) {
      const NdArray& p = pred.per_step_probs[s];
      const auto argmax = static_cast<std::size_t>(
          std::max_element(p.values().begin(), p.values().end()) - p.values().begin());
      hits[i][s] = argmax == static_cast<std::size_t>(labels[s]) ? 1 : 0;
    }
  });

  HorizonAccuracy acc;
  acc.per_step.assign(horizon, 0.0);
  for (const auto& h : hits)
    for (std::size_t s = 0; s < horizon; ++s) acc.per_step[s] += h[s];
  for (std::size_t s = 0; s < horizon; ++s) acc.per_step[s] /= static_cast<double>(idx.size());

  const std::size_t short_len = (horizon + 1) / 2;
  double short_sum = 0.0, long_sum = 0.0, total = 0.0;
  for (std::size_t s = 0; s < horizon; ++s) {
    total += acc.per_step[s];
    (s < short_len ? short_sum : long_sum) += acc.per_step[s];
  }
  acc.short_bucket = short_sum / static_cast<double>(short_len);
  acc.long_bucket = horizon > short_len
                        ? long_sum / static_cast<double>(horizon - short_len)
                        : acc.short_bucket;
  acc.overall = total / static_cast<double>(horizon);
  return acc;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[] = "OFFROAD_CKPT v1";

void put_u32(std::string& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.append(b, 4);
}

void put_u64(std::string& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.append(b, 8);
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t pos) : bytes_(bytes), pos_(pos) {}

  std::uint32_t u32() {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(byte()) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(byte()) << (8 * i);
    return v;
  }
  std::string str(std::size_t len) {
    need(len);
    std::string s = bytes_.substr(pos_, len);
    pos_ += len;
    return s;
  }
  void doubles(double* dst, std::size_t count) {
    need(count * 8);
    std::memcpy(dst, bytes_.data() + pos_, count * 8);
    pos_ += count * 8;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  unsigned char byte() {
    need(1);
    return static_cast<unsigned char>(bytes_[pos_++]);
  }
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw std::runtime_error("checkpoint: truncated data");
  }
  const std::string& bytes_;
  std::size_t pos_;
};

std::string arch_text(const ArchDescriptor& a) {
  std::ostringstream out;
  out << "num_classes = " << a.num_classes << "\n";
  out << "horizon = " << a.horizon << "\n";
  out << "history = " << a.history << "\n";
  out << "ground_h = " << a.ground_h << "\n";
  out << "ground_w = " << a.ground_w << "\n";
  out << "aerial_h = " << a.aerial_h << "\n";
  out << "aerial_w = " << a.aerial_w << "\n";
  out << "hidden_dim = " << a.hidden_dim << "\n";
  out << "action_dim = " << a.action_dim << "\n";
  out << "mode = " << mode_name(a.mode) << "\n";
  out << "dropout = " << format_double(a.dropout) << "\n";
  for (int i = 0; i < 4; ++i)
    out << "conv" << i << " = " << a.conv[static_cast<std::size_t>(i)].channels << ","
        << a.conv[static_cast<std::size_t>(i)].kernel << ","
        << a.conv[static_cast<std::size_t>(i)].stride << ","
        << a.conv[static_cast<std::size_t>(i)].pad << "\n";
  return out.str();
}

ArchDescriptor arch_from_text(const std::string& text) {
  cfg::KvDoc doc = cfg::KvDoc::parse(text);
  ArchDescriptor a;
  a.num_classes = std::stoi(doc.get("num_classes"));
  a.horizon = std::stoi(doc.get("horizon"));
  a.history = std::stoi(doc.get("history"));
  a.ground_h = std::stoi(doc.get("ground_h"));
  a.ground_w = std::stoi(doc.get("ground_w"));
  a.aerial_h = std::stoi(doc.get("aerial_h"));
  a.aerial_w = std::stoi(doc.get("aerial_w"));
  a.hidden_dim = std::stoi(doc.get("hidden_dim"));
  a.action_dim = std::stoi(doc.get("action_dim"));
  a.mode = parse_mode(doc.get("mode"));
  a.dropout = std::stod(doc.get("dropout"));
  for (int i = 0; i < 4; ++i) {
    const auto parts = split(doc.get("conv" + std::to_string(i)), ',');
    if (parts.size() != 4) throw std::runtime_error("checkpoint: malformed conv spec");
    a.conv[static_cast<std::size_t>(i)] = ConvSpec{std::stoi(parts[0]), std::stoi(parts[1]),
                                                   std::stoi(parts[2]), std::stoi(parts[3])};
  }
  return a;
}

}  // namespace

std::string checkpoint_bytes(const ModelParameters& params) {
  std::string out = std::string(kMagic) + "\n";
  const std::string header = arch_text(params.arch);
  out += "header_bytes = " + std::to_string(header.size()) + "\n";
  out += header;
  out += "BINARY\n";
  params.for_each([&](const std::string& name, const NdArray& a) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(a.rank()));
    for (std::size_t d : a.shape()) put_u64(out, d);
    const std::size_t old = out.size();
    out.resize(old + a.size() * 8);
    std::memcpy(out.data() + old, a.data(), a.size() * 8);
  });
  return out;
}

ModelParameters checkpoint_from_bytes(const std::string& bytes) {
  const std::string magic_line = std::string(kMagic) + "\n";
  if (bytes.rfind(magic_line, 0) != 0)
    throw std::runtime_error("checkpoint: bad magic (not a checkpoint file)");
  std::size_t pos = magic_line.size();
  const std::size_t eol = bytes.find('\n', pos);
  if (eol == std::string::npos) throw std::runtime_error("checkpoint: truncated header");
  const std::string size_line = bytes.substr(pos, eol - pos);
  const auto parts = split(size_line, '=');
  if (parts.size() != 2 || trim(parts[0]) != "header_bytes")
    throw std::runtime_error("checkpoint: missing header_bytes");
  const std::size_t header_len = std::stoul(trim(parts[1]));
  pos = eol + 1;
  if (pos + header_len > bytes.size()) throw std::runtime_error("checkpoint: truncated header");
  const std::string header = bytes.substr(pos, header_len);
  pos += header_len;
  const std::string sep = "BINARY\n";
  if (bytes.compare(pos, sep.size(), sep) != 0)
    throw std::runtime_error("checkpoint: missing BINARY separator");
  pos += sep.size();

  ArchDescriptor arch = arch_from_text(header);
  ModelParameters params = init_model(arch, 0);
  Reader reader(bytes, pos);
  params.for_each([&](const std::string& name, NdArray& a) {
    const std::uint32_t name_len = reader.u32();
    const std::string stored = reader.str(name_len);
    if (stored != name)
      throw std::runtime_error("checkpoint: expected block " + name + ", found " + stored);
    const std::uint32_t rank = reader.u32();
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(reader.u64());
    if (shape != a.shape())
      throw std::runtime_error("checkpoint: shape mismatch in block " + name);
    reader.doubles(a.data(), a.size());
  });
  if (!reader.done()) throw std::runtime_error("checkpoint: trailing bytes");
  return params;
}

void save_checkpoint(const ModelParameters& params, const std::string& path) {
  write_file(path, checkpoint_bytes(params));
}

ModelParameters load_checkpoint(const std::string& path) {
  return checkpoint_from_bytes(read_file(path));
}

}  // namespace offroad::net
