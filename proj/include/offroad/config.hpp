#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace offroad::cfg {

/// Parsed view of a plain-text config document: `key = value` lines grouped
/// under `[section]` headers, `#` comments, blank lines ignored. Keys are
/// stored fully qualified as "section.key".
class KvDoc {
 public:
  static KvDoc parse(const std::string& text);
  static KvDoc parse_file(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  void set(const std::string& key, const std::string& value);

  /// Keys in first-seen order.
  const std::vector<std::string>& keys() const { return order_; }

 private:
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

struct WorldConfig {
  int cells_x = 240;
  int cells_y = 240;
  double cell_size = 0.25;         // meters per cell
  int num_classes = 4;             // includes the obstacle class
  std::vector<double> terrain_fracs = {0.55, 0.25, 0.20};
  double terrain_scale = 8.0;      // noise wavelength, meters
  double obstacle_frac = 0.05;
  int obstacle_clusters = 24;
  double tree_cluster_frac = 0.6;  // clusters that grow a canopy
  double canopy_frac = 0.20;
  double grass_frac = 0.25;
  double grass_roughness_bias = 0.5;
  int border_cells = 2;
  int connect_retries = 20;
};

struct VehicleConfig {
  double speed = 1.6667;           // m/s, ~6 km/h
  double wheelbase = 0.5;
  double max_steer_deg = 30.0;
  double control_rate = 6.0;       // Hz
  double collision_range = 0.4;    // meters
};

struct CameraConfig {
  int ground_h = 24;
  int ground_w = 32;
  double ground_fov_deg = 90.0;
  double ground_cam_height = 0.4;
  double ground_max_depth = 18.0;
  double grass_view_depth = 2.0;
  double obstacle_height = 1.5;
  int aerial_h = 24;
  int aerial_w = 32;
  double patch_forward = 9.0;      // meters covered top-to-bottom
  double patch_lateral = 12.0;     // meters covered left-to-right
  double patch_ahead = 1.5;        // patch center, meters ahead of vehicle
  double noise_amp = 0.0784;       // per-cell texture noise, ~20/255
};

struct ImuConfig {
  int window = 20;
  double rate = 60.0;
  std::vector<double> class_rms = {0.3, 1.0, 2.0};   // per non-obstacle class
  std::vector<double> class_freq = {6.0, 12.0, 18.0};
  double noise_frac = 0.08;
  double speed_ref = 1.6667;
};

struct LabelingConfig {
  int clusters = 3;                // = num_classes - 1
  int bins = 15;
  double obstacle_range = 0.75;
  int restarts = 10;
  int max_iter = 100;
};

struct ExploreConfig {
  double hold_mean = 1.5;  // seconds
  double hold_std = 0.5;
  double hold_min = 0.2;
  double jitter_std = 0.05;
};

struct CollectConfig {
  int episodes = 60;
  int max_records = 720;
  std::string sample_mode = "time";  // time | distance
  double sample_distance = 0.35;
  double val_fraction = 0.25;
  double spawn_clearance = 1.0;
};

struct ModelConfig {
  int history = 4;    // M
  int horizon = 8;    // H
  int hidden_dim = 64;
  int action_dim = 16;
  std::string mode = "fusion";  // fusion | ground_only | air_only
  double dropout = 0.0;
  std::vector<int> conv_channels = {16, 32, 32, 32};
  std::vector<int> conv_kernels = {4, 3, 3, 3};
  std::vector<int> conv_strides = {2, 2, 1, 1};
  std::vector<int> conv_pads = {0, 0, 0, 0};
};

struct TrainConfig {
  int batch = 32;
  double learning_rate = 1e-4;
  double l2 = 1e-6;
  int steps = 8000;
  int eval_every = 250;
  int val_samples = 512;
};

struct PlannerConfig {
  int rollouts = 128;  // K
  std::string scheme = "held_interval";  // held_interval | per_step_uniform
  int max_steps = 720;
  bool collision_veto = false;
  double veto_threshold = 0.9;
};

struct EvalConfig {
  int episodes = 30;
  double spawn_clearance = 2.0;
};

/// Fully resolved run configuration. Every field has a profile default;
/// apply() rejects unknown keys; serialize() echoes the resolved document so
/// artifacts can embed it.
struct RunConfig {
  std::string profile = "desk";
  std::uint64_t seed = 1;

  WorldConfig world;
  VehicleConfig vehicle;
  CameraConfig camera;
  ImuConfig imu;
  LabelingConfig labeling;
  ExploreConfig explore;
  CollectConfig collect;
  ModelConfig model;
  TrainConfig train;
  PlannerConfig planner;
  EvalConfig eval;

  static RunConfig for_profile(const std::string& name);

  /// Overlays a parsed document. Throws std::invalid_argument naming the
  /// first unknown key or malformed value.
  void apply(const KvDoc& doc);

  /// Convenience: profile from the document's "profile" key (if any), then
  /// overlay the rest.
  static RunConfig load(const KvDoc& doc);
  static RunConfig load_file(const std::string& path);

  std::string serialize() const;
  void validate() const;
};

}  // namespace offroad::cfg
