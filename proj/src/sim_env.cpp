#include "offroad/sim_env.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <sstream>
#include <stdexcept>

#include "offroad/util.hpp"

namespace offroad::sim {

namespace {

constexpr double kPi = 3.14159265358979323846;

double deg2rad(double d) { return d * kPi / 180.0; }

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

double hash_unit(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t salt) {
  const std::uint64_t h = mix64(seed ^ mix64(a * 0x9e3779b97f4a7c15ull + salt) ^
                                mix64(b * 0xc2b2ae3d27d4eb4full + salt * 31));
  return static_cast<double>(h >> 11) * 0x1.0p-53;  // [0, 1)
}

/// Smooth value noise: bilinear interpolation of a seeded lattice, two
/// octaves.
double value_noise(std::uint64_t seed, double cx, double cy, double lattice_cells,
                   std::uint64_t salt) {
  double total = 0.0;
  double weight = 1.0;
  double scale = lattice_cells;
  double norm = 0.0;
  for (int octave = 0; octave < 2; ++octave) {
    const double fx = cx / scale;
    const double fy = cy / scale;
    const auto x0 = static_cast<std::int64_t>(std::floor(fx));
    const auto y0 = static_cast<std::int64_t>(std::floor(fy));
    const double tx = fx - static_cast<double>(x0);
    const double ty = fy - static_cast<double>(y0);
    const double sx = tx * tx * (3.0 - 2.0 * tx);
    const double sy = ty * ty * (3.0 - 2.0 * ty);
    const std::uint64_t os = salt + static_cast<std::uint64_t>(octave) * 1013;
    const double v00 = hash_unit(seed, static_cast<std::uint64_t>(x0), static_cast<std::uint64_t>(y0), os);
    const double v10 = hash_unit(seed, static_cast<std::uint64_t>(x0 + 1), static_cast<std::uint64_t>(y0), os);
    const double v01 = hash_unit(seed, static_cast<std::uint64_t>(x0), static_cast<std::uint64_t>(y0 + 1), os);
    const double v11 = hash_unit(seed, static_cast<std::uint64_t>(x0 + 1), static_cast<std::uint64_t>(y0 + 1), os);
    const double v = (v00 * (1 - sx) + v10 * sx) * (1 - sy) + (v01 * (1 - sx) + v11 * sx) * sy;
    total += weight * v;
    norm += weight;
    weight *= 0.4;
    scale *= 0.5;
  }
  return total / norm;
}

/// Threshold at the value whose rank matches `fraction` of all entries.
double quantile_threshold(std::vector<double> values, double fraction) {
  if (values.empty()) return 0.0;
  const auto rank = static_cast<std::size_t>(
      std::clamp(fraction, 0.0, 1.0) * static_cast<double>(values.size()));
  const std::size_t k = std::min(rank, values.size() - 1);
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), values.end());
  return values[k];
}

/// Steps a ray through the grid, invoking visit(cx, cy, t_entry, t_exit) for
/// every cell crossed, in order, until visit returns false or max_dist is
/// reached. Returns the distance at which marching stopped.
template <typename Visit>
double march_ray(const WorldMap& world, double x, double y, double dx, double dy, double max_dist,
                 Visit&& visit) {
  int cx = world.cell_x(x);
  int cy = world.cell_y(y);
  if (!world.cell_in_bounds(cx, cy)) return 0.0;

  const double inv_dx = dx != 0.0 ? 1.0 / dx : 0.0;
  const double inv_dy = dy != 0.0 ? 1.0 / dy : 0.0;
  const int step_x = dx > 0.0 ? 1 : (dx < 0.0 ? -1 : 0);
  const int step_y = dy > 0.0 ? 1 : (dy < 0.0 ? -1 : 0);

  auto boundary_t = [&](int cell, double origin, double inv, int step) {
    if (step == 0) return std::numeric_limits<double>::infinity();
    const double edge = (static_cast<double>(cell) + (step > 0 ? 1.0 : 0.0)) * world.cell_size;
    return (edge - origin) * inv;
  };

  double t = 0.0;
  double tx = boundary_t(cx, x, inv_dx, step_x);
  double ty = boundary_t(cy, y, inv_dy, step_y);
  while (t < max_dist) {
    const double t_next = std::min({tx, ty, max_dist});
    if (!visit(cx, cy, t, t_next)) return t_next;
    t = t_next;
    if (t >= max_dist) break;
    if (tx <= ty) {
      cx += step_x;
      tx = boundary_t(cx, x, inv_dx, step_x);
    } else {
      cy += step_y;
      ty = boundary_t(cy, y, inv_dy, step_y);
    }
    if (!world.cell_in_bounds(cx, cy)) return t;  // left the world
  }
  return max_dist;
}

Rgb textured(Rgb base, double noise, double amp) {
  const double n = noise * amp;
  return {std::clamp(base.r + n, 0.0, 1.0), std::clamp(base.g + n, 0.0, 1.0),
          std::clamp(base.b + n, 0.0, 1.0)};
}

void put_pixel(NdArray& image, int row, int col, Rgb c) {
  image.at3(static_cast<std::size_t>(row), static_cast<std::size_t>(col), 0) = c.r;
  image.at3(static_cast<std::size_t>(row), static_cast<std::size_t>(col), 1) = c.g;
  image.at3(static_cast<std::size_t>(row), static_cast<std::size_t>(col), 2) = c.b;
}

}  // namespace

int WorldMap::class_at(double x, double y) const {
  if (!in_bounds(x, y)) return num_classes - 1;
  return grid[index(cell_x(x), cell_y(y))];
}

bool WorldMap::obstacle_at(double x, double y) const {
  if (!in_bounds(x, y)) return false;
  return obstacle_mask[index(cell_x(x), cell_y(y))] != 0;
}

bool WorldMap::canopy_at(double x, double y) const {
  if (!in_bounds(x, y)) return false;
  return canopy_mask[index(cell_x(x), cell_y(y))] != 0;
}

bool WorldMap::grass_at(double x, double y) const {
  if (!in_bounds(x, y)) return false;
  return grass_mask[index(cell_x(x), cell_y(y))] != 0;
}

// ---------------------------------------------------------------------------
// Colors
// ---------------------------------------------------------------------------

namespace {
// smooth green, medium tan, rough gray; channel gaps >= 60/255
constexpr Rgb kTerrainPalette[3] = {{90.0 / 255, 200.0 / 255, 90.0 / 255},
                                    {180.0 / 255, 150.0 / 255, 60.0 / 255},
                                    {120.0 / 255, 120.0 / 255, 120.0 / 255}};
constexpr Rgb kObstacle{70.0 / 255, 45.0 / 255, 20.0 / 255};
}  // namespace

Rgb class_base_color(int terrain_class, int num_classes) {
  if (terrain_class < 0 || terrain_class >= num_classes)
    throw std::invalid_argument("class_base_color: class out of range");
  if (terrain_class == num_classes - 1) return kObstacle;
  const int bands = num_classes - 1;  // non-obstacle classes
  const int idx = bands <= 1 ? 0 : terrain_class * 2 / (bands - 1);
  return kTerrainPalette[std::min(idx, 2)];
}

Rgb canopy_color() { return {20.0 / 255, 90.0 / 255, 30.0 / 255}; }
Rgb grass_color() { return {150.0 / 255, 190.0 / 255, 80.0 / 255}; }
Rgb sky_color() { return {140.0 / 255, 180.0 / 255, 230.0 / 255}; }
Rgb border_color() { return {200.0 / 255, 60.0 / 255, 200.0 / 255}; }

double cell_noise(const WorldMap& world, int cx, int cy) {
  return 2.0 * hash_unit(mix64(world.seed ^ 0x7e47u), static_cast<std::uint64_t>(cx),
                         static_cast<std::uint64_t>(cy), 0x71u) -
         1.0;
}

int classify_pixel(double r, double g, double b, int num_classes) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < num_classes; ++c) {
    const Rgb base = class_base_color(c, num_classes);
    const double d = (r - base.r) * (r - base.r) + (g - base.g) * (g - base.g) +
                     (b - base.b) * (b - base.b);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// World generation
// ---------------------------------------------------------------------------

namespace {

std::string world_config_echo(const cfg::WorldConfig& c, std::uint64_t seed) {
  std::ostringstream out;
  out << "cells_x = " << c.cells_x << "\n";
  out << "cells_y = " << c.cells_y << "\n";
  out << "cell_size = " << format_double(c.cell_size) << "\n";
  out << "num_classes = " << c.num_classes << "\n";
  out << "terrain_fracs = ";
  for (std::size_t i = 0; i < c.terrain_fracs.size(); ++i)
    out << (i ? "," : "") << format_double(c.terrain_fracs[i]);
  out << "\n";
  out << "terrain_scale = " << format_double(c.terrain_scale) << "\n";
  out << "obstacle_frac = " << format_double(c.obstacle_frac) << "\n";
  out << "obstacle_clusters = " << c.obstacle_clusters << "\n";
  out << "tree_cluster_frac = " << format_double(c.tree_cluster_frac) << "\n";
  out << "canopy_frac = " << format_double(c.canopy_frac) << "\n";
  out << "grass_frac = " << format_double(c.grass_frac) << "\n";
  out << "grass_roughness_bias = " << format_double(c.grass_roughness_bias) << "\n";
  out << "border_cells = " << c.border_cells << "\n";
  out << "seed = " << seed << "\n";
  return out.str();
}

std::vector<std::uint32_t> free_components(const WorldMap& world) {
  const auto total = static_cast<std::size_t>(world.width) * static_cast<std::size_t>(world.height);
  std::vector<std::uint32_t> label(total, 0);  // 0 = obstacle/unvisited
  std::uint32_t next = 0;
  for (std::size_t s = 0; s < total; ++s) {
    if (world.obstacle_mask[s] || label[s]) continue;
    ++next;
    std::deque<std::size_t> queue{s};
    label[s] = next;
    while (!queue.empty()) {
      const std::size_t i = queue.front();
      queue.pop_front();
      const int cx = static_cast<int>(i % static_cast<std::size_t>(world.width));
      const int cy = static_cast<int>(i / static_cast<std::size_t>(world.width));
      const int nx[4] = {cx + 1, cx - 1, cx, cx};
      const int ny[4] = {cy, cy, cy + 1, cy - 1};
      for (int k = 0; k < 4; ++k) {
        if (!world.cell_in_bounds(nx[k], ny[k])) continue;
        const std::size_t j = world.index(nx[k], ny[k]);
        if (label[j] || world.obstacle_mask[j]) continue;
        label[j] = next;
        queue.push_back(j);
      }
    }
  }
  return label;
}

/// Obstacle blobs with noisy edges enclose small free pockets; absorb every
/// free component except the largest into the obstacles so the remaining
/// free space is one connected region.
void absorb_enclosed_pockets(WorldMap& world) {
  const auto label = free_components(world);
  std::uint32_t max_label = 0;
  for (std::uint32_t l : label) max_label = std::max(max_label, l);
  if (max_label <= 1) return;
  std::vector<std::size_t> count(max_label + 1, 0);
  for (std::uint32_t l : label) ++count[l];
  std::uint32_t keep = 1;
  for (std::uint32_t l = 2; l <= max_label; ++l)
    if (count[l] > count[keep]) keep = l;
  for (std::size_t i = 0; i < label.size(); ++i)
    if (label[i] != 0 && label[i] != keep) {
      world.obstacle_mask[i] = 1;
      world.grid[i] = static_cast<std::uint8_t>(world.num_classes - 1);
    }
}

bool free_space_connected(const WorldMap& world) {
  const auto label = free_components(world);
  std::uint32_t max_label = 0;
  bool any_free = false;
  for (std::uint32_t l : label) {
    max_label = std::max(max_label, l);
    any_free = any_free || l != 0;
  }
  return any_free && max_label == 1;
}

WorldMap generate_attempt(const cfg::WorldConfig& config, std::uint64_t seed,
                          std::uint64_t attempt) {
  WorldMap world;
  world.width = config.cells_x;
  world.height = config.cells_y;
  world.cell_size = config.cell_size;
  world.num_classes = config.num_classes;
  world.seed = seed;
  const auto total = static_cast<std::size_t>(world.width) * static_cast<std::size_t>(world.height);
  world.grid.assign(total, 0);
  world.obstacle_mask.assign(total, 0);
  world.canopy_mask.assign(total, 0);
  world.grass_mask.assign(total, 0);

  const std::uint64_t gen_seed = mix64(seed + attempt * 0x9e3779b97f4a7c15ull);
  Rng rng = Rng::derive(gen_seed, 1);
  const double lattice = std::max(2.0, config.terrain_scale / config.cell_size);

  // terrain classes from quantile-thresholded noise
  std::vector<double> terrain_field(total);
  for (int cy = 0; cy < world.height; ++cy)
    for (int cx = 0; cx < world.width; ++cx)
      terrain_field[world.index(cx, cy)] =
          value_noise(gen_seed, cx + 0.5, cy + 0.5, lattice, 0x7e44);
  const int bands = config.num_classes - 1;
  std::vector<double> cuts;
  double cumulative = 0.0;
  for (int c = 0; c + 1 < bands; ++c) {
    cumulative += config.terrain_fracs[static_cast<std::size_t>(c)];
    cuts.push_back(quantile_threshold(terrain_field, cumulative));
  }
  for (std::size_t i = 0; i < total; ++i) {
    int cls = 0;
    while (cls < static_cast<int>(cuts.size()) && terrain_field[i] > cuts[static_cast<std::size_t>(cls)])
      ++cls;
    world.grid[i] = static_cast<std::uint8_t>(cls);
  }

  // obstacle clusters; a share of them are trees that later grow canopy
  struct Cluster {
    double x, y, r;
    bool tree;
  };
  std::vector<Cluster> clusters;
  const double budget = config.obstacle_frac * static_cast<double>(total);
  const int n_clusters = std::max(1, config.obstacle_clusters);
  const double mean_r =
      std::sqrt(budget / (kPi * static_cast<double>(n_clusters)));
  for (int k = 0; k < n_clusters; ++k) {
    Cluster c;
    c.x = rng.uniform(0.0, static_cast<double>(world.width));
    c.y = rng.uniform(0.0, static_cast<double>(world.height));
    c.r = mean_r * rng.uniform(0.6, 1.4);
    c.tree = rng.uniform() < config.tree_cluster_frac;
    clusters.push_back(c);
  }
  for (const Cluster& c : clusters) {
    const int lo_x = std::max(0, static_cast<int>(c.x - c.r - 1));
    const int hi_x = std::min(world.width - 1, static_cast<int>(c.x + c.r + 1));
    const int lo_y = std::max(0, static_cast<int>(c.y - c.r - 1));
    const int hi_y = std::min(world.height - 1, static_cast<int>(c.y + c.r + 1));
    for (int cy = lo_y; cy <= hi_y; ++cy)
      for (int cx = lo_x; cx <= hi_x; ++cx) {
        const double dx = cx + 0.5 - c.x;
        const double dy = cy + 0.5 - c.y;
        const double edge =
            c.r * (0.8 + 0.4 * hash_unit(gen_seed, static_cast<std::uint64_t>(cx),
                                         static_cast<std::uint64_t>(cy), 0xb10b));
        if (dx * dx + dy * dy <= edge * edge) world.obstacle_mask[world.index(cx, cy)] = 1;
      }
  }

  // border wall so collisions at the edge look like any other obstacle
  for (int cy = 0; cy < world.height; ++cy)
    for (int cx = 0; cx < world.width; ++cx)
      if (cx < config.border_cells || cy < config.border_cells ||
          cx >= world.width - config.border_cells || cy >= world.height - config.border_cells)
        world.obstacle_mask[world.index(cx, cy)] = 1;

  for (std::size_t i = 0; i < total; ++i)
    if (world.obstacle_mask[i]) world.grid[i] = static_cast<std::uint8_t>(config.num_classes - 1);
  absorb_enclosed_pockets(world);

  // canopy: bumps over tree clusters blended with noise, thresholded at the
  // requested coverage
  std::vector<double> canopy_field(total);
  for (int cy = 0; cy < world.height; ++cy)
    for (int cx = 0; cx < world.width; ++cx) {
      double bump = 0.0;
      for (const Cluster& c : clusters) {
        if (!c.tree) continue;
        const double dx = cx + 0.5 - c.x;
        const double dy = cy + 0.5 - c.y;
        const double spread = 2.5 * c.r;
        bump = std::max(bump, std::exp(-(dx * dx + dy * dy) / (2.0 * spread * spread)));
      }
      canopy_field[world.index(cx, cy)] =
          bump + 0.45 * value_noise(gen_seed, cx + 0.5, cy + 0.5, lattice * 0.7, 0xca11);
    }
  const double canopy_cut = quantile_threshold(canopy_field, 1.0 - config.canopy_frac);
  for (std::size_t i = 0; i < total; ++i)
    world.canopy_mask[i] = canopy_field[i] > canopy_cut ? 1 : 0;

  // grass: correlated with terrain roughness by the configured bias
  std::vector<double> grass_field(total);
  for (int cy = 0; cy < world.height; ++cy)
    for (int cx = 0; cx < world.width; ++cx) {
      const std::size_t i = world.index(cx, cy);
      grass_field[i] = config.grass_roughness_bias * terrain_field[i] +
                       (1.0 - config.grass_roughness_bias) *
                           value_noise(gen_seed, cx + 0.5, cy + 0.5, lattice * 0.9, 0x99a5);
    }
  const double grass_cut = quantile_threshold(grass_field, 1.0 - config.grass_frac);
  for (std::size_t i = 0; i < total; ++i)
    world.grass_mask[i] = grass_field[i] > grass_cut ? 1 : 0;

  world.config_echo = world_config_echo(config, seed);
  return world;
}

}  // namespace

WorldMap generate_world(const cfg::WorldConfig& config, std::uint64_t seed) {
  if (config.cells_x < 8 || config.cells_y < 8)
    throw std::invalid_argument("generate_world: world extents too small");
  for (int attempt = 0; attempt <= config.connect_retries; ++attempt) {
    WorldMap world = generate_attempt(config, seed, static_cast<std::uint64_t>(attempt));
    if (free_space_connected(world)) return world;
  }
  throw std::runtime_error("generate_world: free space not connected after " +
                           std::to_string(config.connect_retries) + " retries");
}

// ---------------------------------------------------------------------------
// Vehicle
// ---------------------------------------------------------------------------

std::pair<VehicleState, StepEvent> step(const WorldMap& world, const VehicleState& state,
                                        double action, double dt,
                                        const cfg::VehicleConfig& vehicle) {
  if (std::fabs(action) > 1.0 + 1e-12)
    throw std::invalid_argument("step: |action| must be <= 1");
  if (dt <= 0.0) throw std::invalid_argument("step: dt must be positive");

  VehicleState next = state;
  const double wheel = deg2rad(vehicle.max_steer_deg) * action;
  next.heading += state.speed / state.wheelbase * std::tan(wheel) * dt;
  if (next.heading > kPi) next.heading -= 2.0 * kPi;
  if (next.heading < -kPi) next.heading += 2.0 * kPi;
  next.x = state.x + state.speed * std::cos(next.heading) * dt;
  next.y = state.y + state.speed * std::sin(next.heading) * dt;

  StepEvent event;
  const double margin = world.cell_size * 0.5;
  if (!world.in_bounds(next.x, next.y)) {
    next.x = std::clamp(next.x, margin, world.width_m() - margin);
    next.y = std::clamp(next.y, margin, world.height_m() - margin);
    event.collided = true;
  }
  event.min_range = sense_range(world, next, 21, 120.0, 6.0);
  if (event.min_range < vehicle.collision_range) event.collided = true;
  if (world.obstacle_at(next.x, next.y)) event.collided = true;
  event.traversed_class =
      event.collided ? world.num_classes - 1 : world.class_at(next.x, next.y);
  return {next, event};
}

double sense_range(const WorldMap& world, const VehicleState& state, int n_beams, double fov_deg,
                   double max_range) {
  if (n_beams < 1) throw std::invalid_argument("sense_range: need at least one beam");
  if (world.obstacle_at(state.x, state.y)) return 0.0;
  const double fov = deg2rad(fov_deg);
  double min_dist = max_range;
  for (int b = 0; b < n_beams; ++b) {
    const double frac = n_beams == 1 ? 0.5 : static_cast<double>(b) / (n_beams - 1);
    const double angle = state.heading + (frac - 0.5) * fov;
    const double dx = std::cos(angle);
    const double dy = std::sin(angle);
    double hit = max_range;
    march_ray(world, state.x, state.y, dx, dy, max_range,
              [&](int cx, int cy, double t_entry, double) {
                if (world.obstacle_mask[world.index(cx, cy)]) {
                  hit = t_entry;
                  return false;
                }
                return true;
              });
    min_dist = std::min(min_dist, hit);
  }
  return min_dist;
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

NdArray render_ground(const WorldMap& world, const VehicleState& state,
                      const cfg::CameraConfig& camera) {
  const int rows = camera.ground_h;
  const int cols = camera.ground_w;
  NdArray image({static_cast<std::size_t>(rows), static_cast<std::size_t>(cols), 3});
  const double f = (cols / 2.0) / std::tan(deg2rad(camera.ground_fov_deg) / 2.0);
  const double fx = std::cos(state.heading), fy = std::sin(state.heading);
  const double rx = std::sin(state.heading), ry = -std::cos(state.heading);
  const double amp = camera.noise_amp;

  for (int col = 0; col < cols; ++col) {
    const double u = col + 0.5 - cols / 2.0;
    const double dirx = fx + u / f * rx;
    const double diry = fy + u / f * ry;
    const double norm = std::sqrt(dirx * dirx + diry * diry);
    const double ux = dirx / norm, uy = diry / norm;
    const double ray_len = std::sqrt(f * f + u * u);

    // one march per column: first obstacle, grass view-depth cutoff, border
    double d_obstacle = std::numeric_limits<double>::infinity();
    double d_grass_cut = std::numeric_limits<double>::infinity();
    int obs_cx = 0, obs_cy = 0, grass_cx = 0, grass_cy = 0;
    double grass_seen = 0.0;
    const double d_border =
        march_ray(world, state.x, state.y, ux, uy, camera.ground_max_depth,
                  [&](int cx, int cy, double t_entry, double t_exit) {
                    if (world.obstacle_mask[world.index(cx, cy)]) {
                      d_obstacle = t_entry;
                      obs_cx = cx;
                      obs_cy = cy;
                      return false;
                    }
                    if (world.grass_mask[world.index(cx, cy)] &&
                        d_grass_cut == std::numeric_limits<double>::infinity()) {
                      const double remaining = camera.grass_view_depth - grass_seen;
                      if (t_exit - t_entry >= remaining) {
                        d_grass_cut = t_entry + remaining;
                        grass_cx = cx;
                        grass_cy = cy;
                      } else {
                        grass_seen += t_exit - t_entry;
                      }
                    }
                    return true;
                  });
    // grass truncation hides obstacles standing behind it
    if (d_obstacle > d_grass_cut) d_obstacle = std::numeric_limits<double>::infinity();

    for (int row = 0; row < rows; ++row) {
      const double v = row + 0.5 - rows / 2.0;
      Rgb pixel;
      if (v > 0.0) {
        const double d_ground = camera.ground_cam_height * ray_len / v;
        if (d_ground >= d_obstacle) {
          pixel = textured(kObstacle, cell_noise(world, obs_cx, obs_cy), amp);
        } else if (d_ground >= d_grass_cut) {
          pixel = textured(grass_color(), cell_noise(world, grass_cx, grass_cy), amp);
        } else if (d_ground > d_border) {
          pixel = border_color();
        } else if (d_ground > camera.ground_max_depth) {
          pixel = sky_color();
        } else {
          const double gx = state.x + ux * d_ground;
          const double gy = state.y + uy * d_ground;
          const int cls = world.class_at(gx, gy);
          pixel = textured(class_base_color(cls, world.num_classes),
                           cell_noise(world, world.cell_x(gx), world.cell_y(gy)), amp);
        }
      } else {
        const double z_at_obs =
            camera.ground_cam_height - v * d_obstacle / ray_len;  // v <= 0 so z rises
        if (std::isfinite(d_obstacle) && z_at_obs <= camera.obstacle_height)
          pixel = textured(kObstacle, cell_noise(world, obs_cx, obs_cy), amp);
        else
          pixel = sky_color();
      }
      put_pixel(image, row, col, pixel);
    }
  }
  return image;
}

NdArray render_aerial(const WorldMap& world, const VehicleState& state,
                      const cfg::CameraConfig& camera) {
  const int rows = camera.aerial_h;
  const int cols = camera.aerial_w;
  NdArray image({static_cast<std::size_t>(rows), static_cast<std::size_t>(cols), 3});
  const double fx = std::cos(state.heading), fy = std::sin(state.heading);
  const double rx = std::sin(state.heading), ry = -std::cos(state.heading);
  const double amp = camera.noise_amp;

  for (int row = 0; row < rows; ++row) {
    // top row looks farthest ahead
    const double forward =
        camera.patch_ahead + (rows / 2.0 - (row + 0.5)) * camera.patch_forward / rows;
    for (int col = 0; col < cols; ++col) {
      const double lateral = ((col + 0.5) - cols / 2.0) * camera.patch_lateral / cols;
      const double wx = state.x + forward * fx + lateral * rx;
      const double wy = state.y + forward * fy + lateral * ry;
      Rgb pixel;
      if (!world.in_bounds(wx, wy)) {
        pixel = border_color();
      } else {
        const int cx = world.cell_x(wx), cy = world.cell_y(wy);
        const double noise = cell_noise(world, cx, cy);
        if (world.canopy_mask[world.index(cx, cy)])
          pixel = textured(canopy_color(), noise, amp);
        else
          pixel = textured(class_base_color(world.grid[world.index(cx, cy)], world.num_classes),
                           noise, amp);
      }
      put_pixel(image, row, col, pixel);
    }
  }
  return image;
}

// ---------------------------------------------------------------------------
// Vibration
// ---------------------------------------------------------------------------

std::vector<double> synth_imu(const WorldMap& world, const VehicleState& state,
                              const cfg::ImuConfig& imu, Rng& rng) {
  const int cls = world.class_at(state.x, state.y);
  if (cls == world.num_classes - 1)
    throw std::invalid_argument("synth_imu: vehicle is on obstacle terrain");
  const double speed_scale = state.speed / imu.speed_ref;
  const double rms = imu.class_rms[static_cast<std::size_t>(cls)] * speed_scale;
  const double amplitude = rms * std::sqrt(2.0);
  const double freq = imu.class_freq[static_cast<std::size_t>(cls)];
  const double sigma = imu.noise_frac * rms;
  const double phase = rng.uniform(0.0, 2.0 * kPi);

  std::vector<double> samples(static_cast<std::size_t>(imu.window));
  for (int i = 0; i < imu.window; ++i) {
    const double t = static_cast<double>(i) / imu.rate;
    samples[static_cast<std::size_t>(i)] =
        amplitude * std::sin(2.0 * kPi * freq * t + phase) + sigma * rng.normal();
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

std::string world_to_bytes(const WorldMap& world) {
  std::string out = "OFFROAD_WORLD v1\n";
  out += "config_bytes = " + std::to_string(world.config_echo.size()) + "\n";
  out += world.config_echo;
  out += "BINARY\n";
  auto put_u32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put_u32(static_cast<std::uint32_t>(world.width));
  put_u32(static_cast<std::uint32_t>(world.height));
  put_u32(static_cast<std::uint32_t>(world.num_classes));
  char cs[8];
  std::memcpy(cs, &world.cell_size, 8);
  out.append(cs, 8);
  char sd[8];
  std::memcpy(sd, &world.seed, 8);
  out.append(sd, 8);
  for (const auto* mask : {&world.grid, &world.obstacle_mask, &world.canopy_mask, &world.grass_mask})
    out.append(reinterpret_cast<const char*>(mask->data()), mask->size());
  return out;
}

WorldMap world_from_bytes(const std::string& bytes) {
  const std::string magic = "OFFROAD_WORLD v1\n";
  if (bytes.rfind(magic, 0) != 0) throw std::runtime_error("world file: bad magic");
  std::size_t pos = magic.size();
  const std::size_t eol = bytes.find('\n', pos);
  if (eol == std::string::npos) throw std::runtime_error("world file: truncated");
  const auto parts = split(bytes.substr(pos, eol - pos), '=');
  if (parts.size() != 2 || trim(parts[0]) != "config_bytes")
    throw std::runtime_error("world file: missing config_bytes");
  const std::size_t config_len = std::stoul(trim(parts[1]));
  pos = eol + 1;
  if (pos + config_len > bytes.size()) throw std::runtime_error("world file: truncated config");
  WorldMap world;
  world.config_echo = bytes.substr(pos, config_len);
  pos += config_len;
  const std::string sep = "BINARY\n";
  if (bytes.compare(pos, sep.size(), sep) != 0)
    throw std::runtime_error("world file: missing BINARY separator");
  pos += sep.size();

  auto get_u32 = [&]() {
    if (pos + 4 > bytes.size()) throw std::runtime_error("world file: truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos++])) << (8 * i);
    return v;
  };
  world.width = static_cast<int>(get_u32());
  world.height = static_cast<int>(get_u32());
  world.num_classes = static_cast<int>(get_u32());
  if (pos + 16 > bytes.size()) throw std::runtime_error("world file: truncated");
  std::memcpy(&world.cell_size, bytes.data() + pos, 8);
  pos += 8;
  std::memcpy(&world.seed, bytes.data() + pos, 8);
  pos += 8;
  const auto total = static_cast<std::size_t>(world.width) * static_cast<std::size_t>(world.height);
  for (auto* mask : {&world.grid, &world.obstacle_mask, &world.canopy_mask, &world.grass_mask}) {
    if (pos + total > bytes.size()) throw std::runtime_error("world file: truncated grid");
    mask->assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                 bytes.begin() + static_cast<std::ptrdiff_t>(pos + total));
    pos += total;
  }
  if (pos != bytes.size()) throw std::runtime_error("world file: trailing bytes");
  return world;
}

void save_world(const WorldMap& world, const std::string& path) {
  write_file(path, world_to_bytes(world));
}

WorldMap load_world(const std::string& path) { return world_from_bytes(read_file(path)); }

void write_ppm(const NdArray& image, const std::string& path) {
  if (image.rank() != 3 || image.dim(2) != 3)
    throw std::invalid_argument("write_ppm: expected an HxWx3 image");
  std::string out = "P6\n" + std::to_string(image.dim(1)) + " " + std::to_string(image.dim(0)) +
                    "\n255\n";
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double v = std::clamp(image[i], 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<int>(std::lround(v * 255.0))));
  }
  write_file(path, out);
}

VehicleState sample_spawn(const WorldMap& world, const cfg::VehicleConfig& vehicle,
                          double clearance, Rng& rng) {
  for (int tries = 0; tries < 10000; ++tries) {
    VehicleState state;
    state.speed = vehicle.speed;
    state.wheelbase = vehicle.wheelbase;
    state.x = rng.uniform(clearance, world.width_m() - clearance);
    state.y = rng.uniform(clearance, world.height_m() - clearance);
    state.heading = rng.uniform(-kPi, kPi);
    if (world.obstacle_at(state.x, state.y)) continue;

    // cheap clearance check over the cell box around the pose
    const int r = static_cast<int>(std::ceil(clearance / world.cell_size));
    const int cx = world.cell_x(state.x), cy = world.cell_y(state.y);
    bool clear = true;
    for (int dy = -r; clear && dy <= r; ++dy)
      for (int dx = -r; clear && dx <= r; ++dx) {
        const int nx = cx + dx, ny = cy + dy;
        if (!world.cell_in_bounds(nx, ny)) continue;
        if (!world.obstacle_mask[world.index(nx, ny)]) continue;
        const double ox = (nx + 0.5) * world.cell_size - state.x;
        const double oy = (ny + 0.5) * world.cell_size - state.y;
        if (ox * ox + oy * oy < clearance * clearance) clear = false;
      }
    if (clear) return state;
  }
  throw std::runtime_error("sample_spawn: no spawn pose with the requested clearance");
}

}  // namespace offroad::sim
