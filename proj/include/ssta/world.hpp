#pragma once

#include <algorithm>
#include <compare>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "ssta/tensor.hpp"

namespace ssta::world {

/// Frame palette.
inline constexpr double kBackground = 0.0;
inline constexpr double kRoad = 0.3;
inline constexpr double kVehicle = 1.0;

using Rng = std::mt19937_64;

/// Uniform index in [0, n). std::uniform_int_distribution is implementation-defined, so use
/// rejection sampling on the raw engine output to keep datasets identical across standard libraries.
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  const std::uint64_t range = static_cast<std::uint64_t>(n);
  const std::uint64_t limit = Rng::max() - Rng::max() % range;
  std::uint64_t r;
  do r = rng(); while (r >= limit);
  return static_cast<std::size_t>(r % range);
}

enum class Heading : std::uint8_t { N, S, E, W };

inline constexpr Heading kAllHeadings[] = {Heading::N, Heading::S, Heading::E, Heading::W};

inline Heading reverse(Heading h) {
  switch (h) {
    case Heading::N: return Heading::S;
    case Heading::S: return Heading::N;
    case Heading::E: return Heading::W;
    case Heading::W: return Heading::E;
  }
  return h;
}

inline char heading_char(Heading h) { return "NSEW"[static_cast<int>(h)]; }

inline Heading heading_from_char(char c) {
  switch (c) {
    case 'N': return Heading::N;
    case 'S': return Heading::S;
    case 'E': return Heading::E;
    case 'W': return Heading::W;
    default: throw std::invalid_argument(std::string("bad heading '") + c + "'");
  }
}

/// Global grid cell; x grows east, y grows south.
struct Cell {
  int x = 0;
  int y = 0;
  auto operator<=>(const Cell&) const = default;
};

inline Cell advance(Cell c, Heading h) {
  switch (h) {
    case Heading::N: return {c.x, c.y - 1};
    case Heading::S: return {c.x, c.y + 1};
    case Heading::E: return {c.x + 1, c.y};
    case Heading::W: return {c.x - 1, c.y};
  }
  return c;
}

inline int manhattan(Cell a, Cell b) { return std::abs(a.x - b.x) + std::abs(a.y - b.y); }

struct SpawnPoint {
  Cell cell;
  Heading heading = Heading::E;
};

/**
 * Static road layout. Intersections are derived from the road mask: every road
 * cell that is not a plain straight segment (two opposite road neighbours) is a
 * decision point, which covers junctions, bends and dead ends.
 */
class RoadMap {
 public:
  RoadMap() = default;
  RoadMap(int width, int height) : width_(width), height_(height), road_(std::size_t(width * height), 0) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("road map extents must be positive");
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }

  bool in_bounds(Cell c) const noexcept { return c.x >= 0 && c.y >= 0 && c.x < width_ && c.y < height_; }
  bool is_road(Cell c) const noexcept { return in_bounds(c) && road_[idx(c)] != 0; }

  void add_road(Cell c) {
    if (!in_bounds(c)) throw std::out_of_range("road cell outside grid");
    road_[idx(c)] = 1;
  }
  void add_segment(Cell a, Cell b) {
    if (a.x != b.x && a.y != b.y) throw std::invalid_argument("road segments must be axis-aligned");
    for (int y = std::min(a.y, b.y); y <= std::max(a.y, b.y); ++y)
      for (int x = std::min(a.x, b.x); x <= std::max(a.x, b.x); ++x) add_road({x, y});
  }
  void add_spawn(SpawnPoint s) {
    if (!is_road(s.cell)) throw std::invalid_argument("spawn point must lie on a road cell");
    spawns_.push_back(s);
  }

  const std::vector<SpawnPoint>& spawns() const noexcept { return spawns_; }

  /// Directions that lead to an adjacent road cell or off the grid from a road cell at the border.
  std::vector<Heading> exits(Cell c) const {
    std::vector<Heading> out;
    for (Heading h : kAllHeadings) {
      const Cell n = advance(c, h);
      if (is_road(n) || (!in_bounds(n) && is_road(c))) out.push_back(h);
    }
    return out;
  }

  bool is_intersection(Cell c) const {
    if (!is_road(c)) return false;
    const auto ex = exits(c);
    if (ex.size() != 2) return true;
    return ex[0] != reverse(ex[1]);
  }

  std::vector<Cell> road_cells() const {
    std::vector<Cell> out;
    for (int y = 0; y < height_; ++y)
      for (int x = 0; x < width_; ++x)
        if (road_[idx({x, y})]) out.push_back({x, y});
    return out;
  }

  std::vector<Cell> intersection_cells() const {
    std::vector<Cell> out;
    for (Cell c : road_cells())
      if (is_intersection(c)) out.push_back(c);
    return out;
  }

  /// Legal headings when leaving cell c while travelling with heading h: no U-turns unless it is a dead end.
  std::vector<Heading> continuations(Cell c, Heading h) const {
    std::vector<Heading> out;
    for (Heading e : exits(c))
      if (e != reverse(h)) out.push_back(e);
    if (out.empty()) out.push_back(reverse(h));
    return out;
  }

 private:
  std::size_t idx(Cell c) const { return std::size_t(c.y) * std::size_t(width_) + std::size_t(c.x); }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> road_;
  std::vector<SpawnPoint> spawns_;
};

struct Vehicle {
  int id = 0;
  Cell pos;
  Heading heading = Heading::E;
  int speed = 1;
};

struct WorldState {
  long t = 0;
  std::vector<Vehicle> vehicles;
};

/// One camera's window onto the global grid. Ids are 1..N.
struct ViewSpec {
  int id = 0;
  Cell origin;  // top-left cell of the window
  int height = 16;
  int width = 16;

  Cell center() const { return {origin.x + width / 2, origin.y + height / 2}; }
  bool contains(Cell c) const {
    return c.x >= origin.x && c.y >= origin.y && c.x < origin.x + width && c.y < origin.y + height;
  }
};

class WorldError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline void validate_views(const RoadMap& map, const std::vector<ViewSpec>& views) {
  std::vector<int> ids;
  for (const auto& v : views) {
    if (v.height <= 0 || v.width <= 0 || !map.in_bounds(v.origin) ||
        !map.in_bounds({v.origin.x + v.width - 1, v.origin.y + v.height - 1}))
      throw std::invalid_argument("view " + std::to_string(v.id) + " window lies outside the grid");
    ids.push_back(v.id);
  }
  std::sort(ids.begin(), ids.end());
  if (std::adjacent_find(ids.begin(), ids.end()) != ids.end())
    throw std::invalid_argument("view ids must be distinct");
}

inline void check_vehicle(const RoadMap& map, const Vehicle& v) {
  if (!map.is_road(v.pos))
    throw WorldError("vehicle " + std::to_string(v.id) + " off road at (" + std::to_string(v.pos.x) + "," +
                     std::to_string(v.pos.y) + ")");
  if (v.speed < 1) throw WorldError("vehicle " + std::to_string(v.id) + " has speed < 1");
}

/**
 * Advances every vehicle `speed` cells. Decisions happen cell by cell: on an
 * intersection the outgoing heading is drawn uniformly from the legal
 * continuations. A vehicle that would leave the grid respawns at a uniformly
 * chosen spawn point and stops for this step.
 */
inline WorldState step_world(const RoadMap& map, WorldState state, Rng& rng) {
  for (Vehicle& v : state.vehicles) {
    check_vehicle(map, v);
    for (int s = 0; s < v.speed; ++s) {
      if (map.is_intersection(v.pos)) {
        const auto opts = map.continuations(v.pos, v.heading);
        v.heading = opts[opts.size() == 1 ? 0 : uniform_index(rng, opts.size())];
      }
      const Cell next = advance(v.pos, v.heading);
      if (!map.in_bounds(next)) {
        if (map.spawns().empty()) throw WorldError("vehicle left the grid but the map has no spawn points");
        const SpawnPoint& sp = map.spawns()[uniform_index(rng, map.spawns().size())];
        v.pos = sp.cell;
        v.heading = sp.heading;
        break;
      }
      v.pos = next;
      check_vehicle(map, v);
    }
  }
  ++state.t;
  return state;
}

/// Static road mask of a view: road cells at kRoad, everything else background.
inline Tensor<double> road_mask(const RoadMap& map, const ViewSpec& view) {
  Tensor<double> f(Shape{std::size_t(view.height), std::size_t(view.width)}, kBackground);
  for (int y = 0; y < view.height; ++y)
    for (int x = 0; x < view.width; ++x)
      if (map.is_road({view.origin.x + x, view.origin.y + y})) f[std::size_t(y * view.width + x)] = kRoad;
  return f;
}

/// Grayscale frame [H,W] of the view at the current state.
inline Tensor<double> render(const RoadMap& map, const WorldState& state, const ViewSpec& view) {
  Tensor<double> f = road_mask(map, view);
  for (const Vehicle& v : state.vehicles)
    if (view.contains(v.pos))
      f[std::size_t((v.pos.y - view.origin.y) * view.width + (v.pos.x - view.origin.x))] = kVehicle;
  return f;
}

using Topology = std::map<int, std::vector<int>>;

/**
 * k-nearest directed communication graph: K^i holds the k other views whose
 * centers are closest to view i in Manhattan distance, ties broken by lower id.
 * Self is never included.
 */
inline Topology build_topology(const std::vector<ViewSpec>& views, std::size_t k) {
  if (!views.empty() && k >= views.size())
    throw std::invalid_argument("neighbour count k=" + std::to_string(k) + " must be < N=" +
                                std::to_string(views.size()));
  Topology topo;
  for (const auto& vi : views) {
    std::vector<std::pair<int, int>> cand;  // (distance, id)
    for (const auto& vj : views)
      if (vj.id != vi.id) cand.emplace_back(manhattan(vi.center(), vj.center()), vj.id);
    std::sort(cand.begin(), cand.end());
    std::vector<int> nbrs;
    for (std::size_t n = 0; n < k; ++n) nbrs.push_back(cand[n].second);
    std::sort(nbrs.begin(), nbrs.end());
    topo[vi.id] = std::move(nbrs);
  }
  return topo;
}

/// Nodes k that receive i's message, i.e. {k : i in K^k}.
inline std::vector<int> receivers_of(const Topology& topo, int sender) {
  std::vector<int> out;
  for (const auto& [k, nbrs] : topo)
    if (std::find(nbrs.begin(), nbrs.end(), sender) != nbrs.end()) out.push_back(k);
  return out;
}

struct WorldConfig {
  int grid = 64;
  int view_size = 16;
  int views = 8;           // 2, 4 or 8 on the ladder layout
  int vehicles = 16;
  int speed = 1;
  int burn_in = 16;        // steps simulated before the first recorded frame
  int transit_bound = 12;  // max steps between leaving one view and entering another
  std::uint64_t seed = 42;
};

/**
 * Default layout: two horizontal roads (rows 20 and 44) joined by four vertical
 * rungs, forming a closed ladder. Views are 16x16 windows tiling two bands of
 * the grid, so horizontal traffic hands over directly between adjacent views and
 * vertical traffic crosses an 8-cell gap. A 2-view world keeps the two left
 * views of the top band; a 4-view world keeps the left half of both bands.
 */
struct Layout {
  RoadMap map;
  std::vector<ViewSpec> views;
};

inline Layout ladder_layout(const WorldConfig& cfg) {
  if (cfg.grid != 64 || cfg.view_size != 16)
    throw std::invalid_argument("ladder layout is defined for a 64x64 grid with 16x16 views");
  Layout L{RoadMap(cfg.grid, cfg.grid), {}};
  const int rows[] = {20, 44};
  const int cols[] = {8, 24, 40, 56};
  for (int r : rows) L.map.add_segment({8, r}, {56, r});
  for (int c : cols) L.map.add_segment({c, 20}, {c, 44});
  L.map.add_spawn({{8, 20}, Heading::E});
  L.map.add_spawn({{56, 44}, Heading::W});

  std::vector<std::pair<int, int>> cells;  // (band, column) of each view
  switch (cfg.views) {
    case 2: cells = {{0, 0}, {0, 1}}; break;
    case 4: cells = {{0, 0}, {0, 1}, {1, 0}, {1, 1}}; break;
    case 8: cells = {{0, 0}, {0, 1}, {0, 2}, {0, 3}, {1, 0}, {1, 1}, {1, 2}, {1, 3}}; break;
    default: throw std::invalid_argument("ladder layout supports 2, 4 or 8 views");
  }
  int id = 1;
  for (auto [band, col] : cells)
    L.views.push_back(ViewSpec{id++, {col * 16, band == 0 ? 12 : 36}, 16, 16});
  validate_views(L.map, L.views);
  return L;
}

/// Places vehicles on uniformly drawn road cells, heading along the road.
inline WorldState initial_state(const RoadMap& map, int vehicles, int speed, Rng& rng) {
  const auto roads = map.road_cells();
  if (roads.empty() && vehicles > 0) throw std::invalid_argument("map has no road cells");
  WorldState s;
  for (int i = 0; i < vehicles; ++i) {
    const Cell c = roads[uniform_index(rng, roads.size())];
    const auto ex = map.exits(c);
    s.vehicles.push_back(Vehicle{i, c, ex[uniform_index(rng, ex.size())], speed});
  }
  return s;
}

inline nlohmann::json to_json(const ViewSpec& v) {
  return {{"id", v.id}, {"x", v.origin.x}, {"y", v.origin.y}, {"height", v.height}, {"width", v.width}};
}

inline ViewSpec view_from_json(const nlohmann::json& j) {
  return ViewSpec{j.at("id").get<int>(), {j.at("x").get<int>(), j.at("y").get<int>()},
                  j.at("height").get<int>(), j.at("width").get<int>()};
}

inline nlohmann::json to_json(const WorldConfig& c) {
  return {{"grid", c.grid},     {"view_size", c.view_size}, {"views", c.views},
          {"vehicles", c.vehicles}, {"speed", c.speed},   {"burn_in", c.burn_in},
          {"transit_bound", c.transit_bound}, {"seed", c.seed}, {"layout", "ladder"}};
}

inline WorldConfig world_config_from_json(const nlohmann::json& j) {
  WorldConfig c;
  c.grid = j.value("grid", c.grid);
  c.view_size = j.value("view_size", c.view_size);
  c.views = j.value("views", c.views);
  c.vehicles = j.value("vehicles", c.vehicles);
  c.speed = j.value("speed", c.speed);
  c.burn_in = j.value("burn_in", c.burn_in);
  c.transit_bound = j.value("transit_bound", c.transit_bound);
  c.seed = j.value("seed", c.seed);
  return c;
}

}  // namespace ssta::world
