#include "offroad/config.hpp"

#include <cstdlib>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <variant>

#include "offroad/util.hpp"

namespace offroad::cfg {

KvDoc KvDoc::parse(const std::string& text) {
  KvDoc doc;
  std::string section;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (t.front() == '[') {
      if (t.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": malformed section header: " + t);
      section = trim(t.substr(1, t.size() - 2));
      continue;
    }
    const std::size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value, got: " + t);
    std::string key = trim(t.substr(0, eq));
    const std::string value = trim(t.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    if (!section.empty()) key = section + "." + key;
    doc.set(key, value);
  }
  return doc;
}

KvDoc KvDoc::parse_file(const std::string& path) { return parse(read_file(path)); }

const std::string& KvDoc::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw std::invalid_argument("config: missing key " + key);
  return it->second;
}

void KvDoc::set(const std::string& key, const std::string& value) {
  if (values_.emplace(key, value).second)
    order_.push_back(key);
  else
    values_[key] = value;
}

namespace {

using FieldRef = std::variant<int*, double*, bool*, std::string*, std::uint64_t*,
                              std::vector<int>*, std::vector<double>*>;

struct Field {
  std::string key;
  FieldRef ref;
};

// Single declaration point for every config key; apply() and serialize()
// both walk this table so they cannot drift apart.
std::vector<Field> fields(RunConfig& c) {
  return {
      {"profile", &c.profile},
      {"seed", &c.seed},
      {"world.cells_x", &c.world.cells_x},
      {"world.cells_y", &c.world.cells_y},
      {"world.cell_size", &c.world.cell_size},
      {"world.num_classes", &c.world.num_classes},
      {"world.terrain_fracs", &c.world.terrain_fracs},
      {"world.terrain_scale", &c.world.terrain_scale},
      {"world.obstacle_frac", &c.world.obstacle_frac},
      {"world.obstacle_clusters", &c.world.obstacle_clusters},
      {"world.tree_cluster_frac", &c.world.tree_cluster_frac},
      {"world.canopy_frac", &c.world.canopy_frac},
      {"world.grass_frac", &c.world.grass_frac},
      {"world.grass_roughness_bias", &c.world.grass_roughness_bias},
      {"world.border_cells", &c.world.border_cells},
      {"world.connect_retries", &c.world.connect_retries},
      {"vehicle.speed", &c.vehicle.speed},
      {"vehicle.wheelbase", &c.vehicle.wheelbase},
      {"vehicle.max_steer_deg", &c.vehicle.max_steer_deg},
      {"vehicle.control_rate", &c.vehicle.control_rate},
      {"vehicle.collision_range", &c.vehicle.collision_range},
      {"camera.ground_h", &c.camera.ground_h},
      {"camera.ground_w", &c.camera.ground_w},
      {"camera.ground_fov_deg", &c.camera.ground_fov_deg},
      {"camera.ground_cam_height", &c.camera.ground_cam_height},
      {"camera.ground_max_depth", &c.camera.ground_max_depth},
      {"camera.grass_view_depth", &c.camera.grass_view_depth},
      {"camera.obstacle_height", &c.camera.obstacle_height},
      {"camera.aerial_h", &c.camera.aerial_h},
      {"camera.aerial_w", &c.camera.aerial_w},
      {"camera.patch_forward", &c.camera.patch_forward},
      {"camera.patch_lateral", &c.camera.patch_lateral},
      {"camera.patch_ahead", &c.camera.patch_ahead},
      {"camera.noise_amp", &c.camera.noise_amp},
      {"imu.window", &c.imu.window},
      {"imu.rate", &c.imu.rate},
      {"imu.class_rms", &c.imu.class_rms},
      {"imu.class_freq", &c.imu.class_freq},
      {"imu.noise_frac", &c.imu.noise_frac},
      {"imu.speed_ref", &c.imu.speed_ref},
      {"labeling.clusters", &c.labeling.clusters},
      {"labeling.bins", &c.labeling.bins},
      {"labeling.obstacle_range", &c.labeling.obstacle_range},
      {"labeling.restarts", &c.labeling.restarts},
      {"labeling.max_iter", &c.labeling.max_iter},
      {"explore.hold_mean", &c.explore.hold_mean},
      {"explore.hold_std", &c.explore.hold_std},
      {"explore.hold_min", &c.explore.hold_min},
      {"explore.jitter_std", &c.explore.jitter_std},
      {"collect.episodes", &c.collect.episodes},
      {"collect.max_records", &c.collect.max_records},
      {"collect.sample_mode", &c.collect.sample_mode},
      {"collect.sample_distance", &c.collect.sample_distance},
      {"collect.val_fraction", &c.collect.val_fraction},
      {"collect.spawn_clearance", &c.collect.spawn_clearance},
      {"model.history", &c.model.history},
      {"model.horizon", &c.model.horizon},
      {"model.hidden_dim", &c.model.hidden_dim},
      {"model.action_dim", &c.model.action_dim},
      {"model.mode", &c.model.mode},
      {"model.dropout", &c.model.dropout},
      {"model.conv_channels", &c.model.conv_channels},
      {"model.conv_kernels", &c.model.conv_kernels},
      {"model.conv_strides", &c.model.conv_strides},
      {"model.conv_pads", &c.model.conv_pads},
      {"train.batch", &c.train.batch},
      {"train.learning_rate", &c.train.learning_rate},
      {"train.l2", &c.train.l2},
      {"train.steps", &c.train.steps},
      {"train.eval_every", &c.train.eval_every},
      {"train.val_samples", &c.train.val_samples},
      {"planner.rollouts", &c.planner.rollouts},
      {"planner.scheme", &c.planner.scheme},
      {"planner.max_steps", &c.planner.max_steps},
      {"planner.collision_veto", &c.planner.collision_veto},
      {"planner.veto_threshold", &c.planner.veto_threshold},
      {"eval.episodes", &c.eval.episodes},
      {"eval.spawn_clearance", &c.eval.spawn_clearance},
  };
}

int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int n = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return n;
  } catch (...) {
    throw std::invalid_argument("config key " + key + ": not an integer: " + v);
  }
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (...) {
    throw std::invalid_argument("config key " + key + ": not a number: " + v);
  }
}

void assign(const std::string& key, const std::string& value, FieldRef ref) {
  if (auto* p = std::get_if<int*>(&ref)) {
    **p = parse_int(key, value);
  } else if (auto* p = std::get_if<double*>(&ref)) {
    **p = parse_double(key, value);
  } else if (auto* p = std::get_if<bool*>(&ref)) {
    if (value == "true" || value == "1")
      **p = true;
    else if (value == "false" || value == "0")
      **p = false;
    else
      throw std::invalid_argument("config key " + key + ": not a boolean: " + value);
  } else if (auto* p = std::get_if<std::string*>(&ref)) {
    **p = value;
  } else if (auto* p = std::get_if<std::uint64_t*>(&ref)) {
    try {
      **p = std::stoull(value);
    } catch (...) {
      throw std::invalid_argument("config key " + key + ": not an unsigned integer: " + value);
    }
  } else if (auto* p = std::get_if<std::vector<int>*>(&ref)) {
    std::vector<int> out;
    for (const std::string& item : split(value, ','))
      out.push_back(parse_int(key, trim(item)));
    **p = std::move(out);
  } else if (auto* p = std::get_if<std::vector<double>*>(&ref)) {
    std::vector<double> out;
    for (const std::string& item : split(value, ','))
      out.push_back(parse_double(key, trim(item)));
    **p = std::move(out);
  }
}

std::string render(FieldRef ref) {
  if (auto* p = std::get_if<int*>(&ref)) return std::to_string(**p);
  if (auto* p = std::get_if<double*>(&ref)) return format_double(**p);
  if (auto* p = std::get_if<bool*>(&ref)) return **p ? "true" : "false";
  if (auto* p = std::get_if<std::string*>(&ref)) return **p;
  if (auto* p = std::get_if<std::uint64_t*>(&ref)) return std::to_string(**p);
  if (auto* p = std::get_if<std::vector<int>*>(&ref)) {
    std::string s;
    for (std::size_t i = 0; i < (*p)->size(); ++i)
      s += (i ? "," : "") + std::to_string((**p)[i]);
    return s;
  }
  if (auto* p = std::get_if<std::vector<double>*>(&ref)) {
    std::string s;
    for (std::size_t i = 0; i < (*p)->size(); ++i) s += (i ? "," : "") + format_double((**p)[i]);
    return s;
  }
  return {};
}

}  // namespace

RunConfig RunConfig::for_profile(const std::string& name) {
  RunConfig c;  // defaults are the desk profile
  c.profile = name;
  if (name == "desk") return c;
  if (name == "paper") {
    c.world.cells_x = 320;
    c.world.cells_y = 320;
    c.camera.ground_h = 72;
    c.camera.ground_w = 128;
    c.camera.aerial_h = 72;
    c.camera.aerial_w = 128;
    c.model.horizon = 12;
    c.model.conv_channels = {32, 64, 64, 64};
    c.model.conv_kernels = {8, 4, 4, 3};
    c.model.conv_strides = {4, 2, 2, 1};
    // valid convolution leaves a 2x6 map after layer 3; the final 3x3
    // stride-1 layer needs one ring of padding to fit
    c.model.conv_pads = {0, 0, 0, 1};
    return c;
  }
  throw std::invalid_argument("unknown profile: " + name + " (expected desk or paper)");
}

void RunConfig::apply(const KvDoc& doc) {
  auto table = fields(*this);
  for (const std::string& key : doc.keys()) {
    if (key == "profile") continue;  // consumed by load()
    bool found = false;
    for (auto& f : table) {
      if (f.key == key) {
        assign(key, doc.get(key), f.ref);
        found = true;
        break;
      }
    }
    if (!found) throw std::invalid_argument("unknown config key: " + key);
  }
  validate();
}

RunConfig RunConfig::load(const KvDoc& doc) {
  RunConfig c = for_profile(doc.has("profile") ? doc.get("profile") : "desk");
  c.apply(doc);
  return c;
}

RunConfig RunConfig::load_file(const std::string& path) { return load(KvDoc::parse_file(path)); }

std::string RunConfig::serialize() const {
  auto table = fields(const_cast<RunConfig&>(*this));
  std::string out;
  std::string section;
  for (const auto& f : table) {
    const std::size_t dot = f.key.find('.');
    const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
    const std::string name = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    out += name + " = " + render(f.ref) + "\n";
  }
  return out;
}

void RunConfig::validate() const {
  auto bad = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (world.cells_x < 8 || world.cells_y < 8) bad("world extents too small");
  if (world.cell_size <= 0) bad("world.cell_size must be positive");
  if (world.num_classes < 2) bad("world.num_classes must be at least 2");
  if (static_cast<int>(world.terrain_fracs.size()) != world.num_classes - 1)
    bad("world.terrain_fracs needs one entry per non-obstacle class");
  if (vehicle.speed <= 0 || vehicle.wheelbase <= 0 || vehicle.control_rate <= 0)
    bad("vehicle parameters must be positive");
  if (camera.ground_h < 2 || camera.ground_w < 2 || camera.aerial_h < 2 || camera.aerial_w < 2)
    bad("camera extents too small");
  if (imu.window < 2) bad("imu.window too small");
  if (static_cast<int>(imu.class_rms.size()) < world.num_classes - 1 ||
      static_cast<int>(imu.class_freq.size()) < world.num_classes - 1)
    bad("imu needs class_rms/class_freq per non-obstacle class");
  if (labeling.bins < 1) bad("labeling.bins must be positive");
  if (model.history < 1 || model.horizon < 1) bad("model history/horizon must be positive");
  if (model.mode != "fusion" && model.mode != "ground_only" && model.mode != "air_only")
    bad("model.mode must be fusion, ground_only, or air_only");
  if (model.conv_channels.size() != 4 || model.conv_kernels.size() != 4 ||
      model.conv_strides.size() != 4 || model.conv_pads.size() != 4)
    bad("model conv_* lists must have 4 entries");
  if (model.dropout < 0 || model.dropout >= 1) bad("model.dropout must be in [0, 1)");
  if (collect.sample_mode != "time" && collect.sample_mode != "distance")
    bad("collect.sample_mode must be time or distance");
  if (planner.scheme != "held_interval" && planner.scheme != "per_step_uniform")
    bad("planner.scheme must be held_interval or per_step_uniform");
  if (planner.rollouts < 1) bad("planner.rollouts must be at least 1");
  if (train.batch < 1) bad("train.batch must be at least 1");
}

}  // namespace offroad::cfg
