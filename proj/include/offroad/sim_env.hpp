#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "offroad/config.hpp"
#include "offroad/ndarray.hpp"
#include "offroad/rng.hpp"

namespace offroad::sim {

/// Procedural 2-D world. Obstacle cells carry class num_classes-1 in the
/// grid; canopy blocks the aerial view, tall grass shortens the ground view.
struct WorldMap {
  int width = 0;   // cells
  int height = 0;
  double cell_size = 0.25;  // meters
  int num_classes = 4;
  std::uint64_t seed = 0;
  std::vector<std::uint8_t> grid;           // terrain class per cell
  std::vector<std::uint8_t> obstacle_mask;  // 0/1
  std::vector<std::uint8_t> canopy_mask;
  std::vector<std::uint8_t> grass_mask;
  std::string config_echo;  // generating config, key = value text

  std::size_t index(int cx, int cy) const {
    return static_cast<std::size_t>(cy) * static_cast<std::size_t>(width) +
           static_cast<std::size_t>(cx);
  }
  bool cell_in_bounds(int cx, int cy) const {
    return cx >= 0 && cy >= 0 && cx < width && cy < height;
  }
  bool in_bounds(double x, double y) const {
    return x >= 0.0 && y >= 0.0 && x < width_m() && y < height_m();
  }
  double width_m() const { return width * cell_size; }
  double height_m() const { return height * cell_size; }
  int cell_x(double x) const { return static_cast<int>(x / cell_size); }
  int cell_y(double y) const { return static_cast<int>(y / cell_size); }

  int class_at(double x, double y) const;      // obstacle class when masked
  bool obstacle_at(double x, double y) const;  // false out of bounds
  bool canopy_at(double x, double y) const;
  bool grass_at(double x, double y) const;
};

struct VehicleState {
  double x = 0.0;
  double y = 0.0;
  double heading = 0.0;  // radians, CCW from +x
  double speed = 1.6667;
  double wheelbase = 0.5;
};

struct StepEvent {
  bool collided = false;
  int traversed_class = 0;
  double min_range = 0.0;  // forward-fan reading at the new pose
};

/// Layout by thresholded value noise, obstacle clusters with a border wall,
/// canopy grown over tree clusters, grass correlated with rough terrain.
/// Deterministic per seed; retries derived seeds until the free space is
/// fully connected.
WorldMap generate_world(const cfg::WorldConfig& config, std::uint64_t seed);

/// Kinematic bicycle step at fixed speed. Out-of-bounds poses are clamped
/// and flagged as collisions; the collision step itself reports the obstacle
/// class.
std::pair<VehicleState, StepEvent> step(const WorldMap& world, const VehicleState& state,
                                        double action, double dt,
                                        const cfg::VehicleConfig& vehicle);

/// Minimum raycast distance to an obstacle over a forward fan.
double sense_range(const WorldMap& world, const VehicleState& state, int n_beams,
                   double fov_deg, double max_range);

/// Perspective column-raycast view: per-class colors with seeded per-cell
/// noise, obstacles as tall blockers, view truncated after crossing
/// grass_view_depth meters of tall grass. Pixels in [0, 1].
NdArray render_ground(const WorldMap& world, const VehicleState& state,
                      const cfg::CameraConfig& camera);

/// Top-down orthographic patch, vehicle-oriented, centered patch_ahead meters
/// in front. Canopy hides the terrain beneath it; out-of-world texels use a
/// border color.
NdArray render_aerial(const WorldMap& world, const VehicleState& state,
                      const cfg::CameraConfig& camera);

/// Ground-normal acceleration window: per-class sine (amplitude scaling with
/// speed and class roughness) plus white noise. Requires non-obstacle
/// terrain under the vehicle.
std::vector<double> synth_imu(const WorldMap& world, const VehicleState& state,
                              const cfg::ImuConfig& imu, Rng& rng);

// Color bands. Base colors are separated by >= 60/255 in at least one
// channel so classes stay recoverable under the +-noise_amp cell texture.
struct Rgb {
  double r = 0.0, g = 0.0, b = 0.0;
};
Rgb class_base_color(int terrain_class, int num_classes);
Rgb canopy_color();
Rgb grass_color();
Rgb sky_color();
Rgb border_color();
/// Deterministic per-cell texture jitter in [-1, 1].
double cell_noise(const WorldMap& world, int cx, int cy);

/// Nearest base color over the num_classes terrain bands; used by tests and
/// audits to recover classes from rendered pixels.
int classify_pixel(double r, double g, double b, int num_classes);

// World persistence: text header with the generating config, then the raw
// grid and mask bytes.
std::string world_to_bytes(const WorldMap& world);
WorldMap world_from_bytes(const std::string& bytes);
void save_world(const WorldMap& world, const std::string& path);
WorldMap load_world(const std::string& path);

/// Binary PPM (P6) export for visual inspection of rendered views.
void write_ppm(const NdArray& image, const std::string& path);

/// Spawn pose with at least `clearance` meters of obstacle-free space
/// around it, sampled deterministically from rng.
VehicleState sample_spawn(const WorldMap& world, const cfg::VehicleConfig& vehicle,
                          double clearance, Rng& rng);

}  // namespace offroad::sim
