#pragma once

// Small architectures and in-memory sample sources shared by the unit and
// acceptance suites.

#include <vector>

#include "offroad/rng.hpp"
#include "offroad/terrain_net.hpp"

namespace testutil {

inline offroad::net::ArchDescriptor tiny_arch(int num_classes = 3, int horizon = 2,
                                              int history = 2,
                                              offroad::net::InputMode mode =
                                                  offroad::net::InputMode::kFusion) {
  offroad::net::ArchDescriptor a;
  a.num_classes = num_classes;
  a.horizon = horizon;
  a.history = history;
  a.ground_h = a.aerial_h = 8;
  a.ground_w = a.aerial_w = 8;
  a.hidden_dim = 8;
  a.action_dim = 4;
  a.mode = mode;
  for (auto& spec : a.conv) spec = offroad::net::ConvSpec{2, 2, 1, 0};
  return a;
}

struct Sample {
  offroad::net::ObservationState obs;
  offroad::net::ActionSequence actions;
  std::vector<int> labels;
};

class VectorSource : public offroad::net::SampleSource {
 public:
  explicit VectorSource(std::vector<Sample> samples) : samples_(std::move(samples)) {}

  std::size_t size() const override { return samples_.size(); }

  void get(std::size_t index, offroad::net::ObservationState& obs,
           offroad::net::ActionSequence& actions, std::vector<int>& labels) const override {
    obs = samples_[index].obs;
    actions = samples_[index].actions;
    labels = samples_[index].labels;
  }

 private:
  std::vector<Sample> samples_;
};

inline offroad::net::ObservationState random_obs(const offroad::net::ArchDescriptor& arch,
                                                 offroad::Rng& rng) {
  const auto ch = static_cast<std::size_t>(arch.input_channels());
  offroad::net::ObservationState obs;
  obs.ground_stack = offroad::NdArray(
      {static_cast<std::size_t>(arch.ground_h), static_cast<std::size_t>(arch.ground_w), ch});
  obs.aerial_stack = offroad::NdArray(
      {static_cast<std::size_t>(arch.aerial_h), static_cast<std::size_t>(arch.aerial_w), ch});
  for (double& v : obs.ground_stack.values()) v = rng.uniform();
  for (double& v : obs.aerial_stack.values()) v = rng.uniform();
  return obs;
}

inline Sample random_sample(const offroad::net::ArchDescriptor& arch, offroad::Rng& rng) {
  Sample s;
  s.obs = random_obs(arch, rng);
  for (int i = 0; i < arch.horizon; ++i) s.actions.push_back(rng.uniform(-1.0, 1.0));
  for (int i = 0; i < arch.horizon; ++i)
    s.labels.push_back(static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(arch.num_classes))));
  return s;
}

/// Separable synthetic task: the label of every horizon step is 1 when
/// pixel(0,0,0) of the ground view plus half the first action exceeds 0.5.
inline std::vector<Sample> separable_dataset(const offroad::net::ArchDescriptor& arch,
                                             std::size_t count, std::uint64_t seed) {
  std::vector<Sample> out;
  offroad::Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    Sample s;
    s.obs.ground_stack = offroad::NdArray({static_cast<std::size_t>(arch.ground_h),
                                           static_cast<std::size_t>(arch.ground_w),
                                           static_cast<std::size_t>(arch.input_channels())},
                                          0.3);
    s.obs.aerial_stack = offroad::NdArray({static_cast<std::size_t>(arch.aerial_h),
                                           static_cast<std::size_t>(arch.aerial_w),
                                           static_cast<std::size_t>(arch.input_channels())},
                                          0.3);
    const double pixel = rng.uniform();
    for (int m = 0; m < arch.input_channels(); ++m)
      s.obs.ground_stack[static_cast<std::size_t>(m)] = pixel;
    const double first_action = rng.uniform(-1.0, 1.0);
    const int label = pixel + 0.5 * first_action > 0.5 ? 1 : 0;
    for (int h = 0; h < arch.horizon; ++h) {
      s.actions.push_back(h == 0 ? first_action : rng.uniform(-1.0, 1.0));
      s.labels.push_back(label);
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace testutil
