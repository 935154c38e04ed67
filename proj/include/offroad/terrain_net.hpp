#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "offroad/config.hpp"
#include "offroad/ndarray.hpp"
#include "offroad/nn_ops.hpp"
#include "offroad/rng.hpp"

namespace offroad::net {

enum class InputMode { kFusion, kGroundOnly, kAirOnly };

InputMode parse_mode(const std::string& name);
std::string mode_name(InputMode mode);

struct ConvSpec {
  int channels = 0;
  int kernel = 0;
  int stride = 1;
  int pad = 0;
  bool operator==(const ConvSpec&) const = default;
};

/// Everything that determines parameter shapes. Serialized into checkpoints.
struct ArchDescriptor {
  int num_classes = 4;
  int horizon = 8;    // H
  int history = 4;    // M
  int ground_h = 24, ground_w = 32;
  int aerial_h = 24, aerial_w = 32;
  int hidden_dim = 64;   // Dh
  int action_dim = 16;   // Din
  InputMode mode = InputMode::kFusion;
  double dropout = 0.0;
  std::array<ConvSpec, 4> conv{};

  bool operator==(const ArchDescriptor&) const = default;

  int input_channels() const { return 3 * history; }
  bool has_ground() const { return mode != InputMode::kAirOnly; }
  bool has_aerial() const { return mode != InputMode::kGroundOnly; }

  /// Spatial extents after each conv layer for an h x w input.
  /// Throws if any extent collapses to zero.
  std::vector<std::array<int, 3>> branch_shapes(int h, int w) const;
  int branch_feature_size(int h, int w) const;
  int fused_feature_size() const;

  void check() const;
};

ArchDescriptor arch_from_config(const cfg::RunConfig& config);

struct ConvLayer {
  NdArray kernels;  // [K][K][Cin][Cout]
  NdArray bias;     // [Cout]
};

struct DenseLayer {
  NdArray weight;  // [Din][Dout]
  NdArray bias;    // [Dout]
};

struct ModelParameters {
  ArchDescriptor arch;
  std::vector<ConvLayer> ground_branch;  // empty in air_only mode
  std::vector<ConvLayer> aerial_branch;  // empty in ground_only mode
  DenseLayer fusion;        // fused features -> 2*Dh (h0 | c0)
  DenseLayer action_embed;  // scalar -> Din
  nn::LstmParams lstm;
  DenseLayer head;          // Dh -> num_classes

  /// Visits every parameter tensor in declaration order (the checkpoint and
  /// optimizer order).
  void for_each(const std::function<void(const std::string&, NdArray&)>& fn);
  void for_each(const std::function<void(const std::string&, const NdArray&)>& fn) const;

  std::vector<NdArray*> param_ptrs();
  std::vector<const NdArray*> param_ptrs() const;
  double squared_norm() const;
};

/// Deterministic fan-in-scaled uniform initialization, zero biases.
ModelParameters init_model(const ArchDescriptor& arch, std::uint64_t seed);

/// Zero-filled gradient buffers with the same layout as params.
ModelParameters zeros_like(const ModelParameters& params);

// ---------------------------------------------------------------------------
// Observations and predictions
// ---------------------------------------------------------------------------

/// M stacked frames per view, channels-last, pixel values in [0, 1].
struct ObservationState {
  NdArray ground_stack;  // [Hg][Wg][3M]
  NdArray aerial_stack;  // [Ha][Wa][3M]
};

using ActionSequence = std::vector<double>;  // H steering values in [-1, 1]

struct RolloutPrediction {
  std::vector<NdArray> per_step_probs;  // H vectors of length |C|
};

/// Initial recurrent state from the observation (h0, c0).
std::pair<NdArray, NdArray> encode(const ModelParameters& params, const ObservationState& obs);

/// Per-step terrain-class distributions over the action sequence.
RolloutPrediction predict_rollout(const ModelParameters& params, const ObservationState& obs,
                                  const ActionSequence& actions, bool training = false,
                                  Rng* rng = nullptr);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct TrainingBatch {
  std::vector<ObservationState> observations;
  std::vector<ActionSequence> actions;
  std::vector<std::vector<int>> labels;  // H labels per item

  std::size_t size() const { return observations.size(); }
};

struct BatchLossResult {
  double loss = 0.0;      // mean cross-entropy + l2 * ||w||^2
  double ce = 0.0;        // mean summed cross-entropy alone
  ModelParameters grads;
};

/// Mean over the batch of the summed per-step cross-entropy, plus L2.
/// dropout_seed feeds per-item dropout streams when training is true.
BatchLossResult batch_loss(const ModelParameters& params, const TrainingBatch& batch, double l2,
                           bool training = false, std::uint64_t dropout_seed = 0);

/// Abstract training-sample supplier; get(i) must be pure so batches can be
/// assembled in parallel.
class SampleSource {
 public:
  virtual ~SampleSource() = default;
  virtual std::size_t size() const = 0;
  virtual void get(std::size_t index, ObservationState& obs, ActionSequence& actions,
                   std::vector<int>& labels) const = 0;
};

struct TrainOptions {
  int batch = 32;
  double learning_rate = 1e-4;
  double l2 = 1e-6;
  int steps = 8000;
  std::uint64_t seed = 1;
  int eval_every = 250;
  int val_samples = 512;
};

struct TrainLogEntry {
  int step = 0;             // optimizer steps completed
  double train_loss = 0.0;  // batch loss at this step
  double val_ce = 0.0;      // mean summed cross-entropy on the val subset
  double horizon1_acc = 0.0;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  double initial_val_ce = 0.0;
  double best_val_ce = 0.0;
  double final_val_ce = 0.0;
};

TrainResult train(ModelParameters& params, const SampleSource& train_set,
                  const SampleSource& val_set, const TrainOptions& options);

struct HorizonAccuracy {
  std::vector<double> per_step;  // index i = horizon step i+1
  double short_bucket = 0.0;     // first ceil(H/2) steps
  double long_bucket = 0.0;      // remaining steps
  double overall = 0.0;
};

HorizonAccuracy horizon_accuracy(const ModelParameters& params, const SampleSource& val_set,
                                 std::size_t max_samples = 0);

// ---------------------------------------------------------------------------
// Checkpoints: text header with the architecture descriptor, then named
// little-endian f64 blocks in declaration order. Round-trips bit-exactly.
// ---------------------------------------------------------------------------

std::string checkpoint_bytes(const ModelParameters& params);
ModelParameters checkpoint_from_bytes(const std::string& bytes);
void save_checkpoint(const ModelParameters& params, const std::string& path);
ModelParameters load_checkpoint(const std::string& path);

}  // namespace offroad::net
