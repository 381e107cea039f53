#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "ssta/serialize.hpp"
#include "ssta/world.hpp"

namespace ssta {

/// Rendered multi-view frame sequences: frames[v][t] is view v's [H,W] frame at time t.
struct Dataset {
  world::WorldConfig config;
  std::vector<world::ViewSpec> views;
  std::vector<std::vector<Tensor<double>>> frames;

  std::size_t num_views() const { return views.size(); }
  std::size_t length() const { return frames.empty() ? 0 : frames.front().size(); }
  std::size_t height() const { return views.empty() ? 0 : std::size_t(views.front().height); }
  std::size_t width() const { return views.empty() ? 0 : std::size_t(views.front().width); }

  /// Time slice [begin, end) of every view.
  Dataset slice(std::size_t begin, std::size_t end) const {
    Dataset out{config, views, {}};
    for (const auto& seq : frames)
      out.frames.emplace_back(seq.begin() + long(begin), seq.begin() + long(std::min(end, seq.size())));
    return out;
  }
};

/// Runs the world forward and renders every view at every step.
inline Dataset generate_dataset(const world::WorldConfig& cfg, std::size_t timesteps) {
  auto layout = world::ladder_layout(cfg);
  world::Rng rng(cfg.seed);
  auto state = world::initial_state(layout.map, cfg.vehicles, cfg.speed, rng);
  for (int i = 0; i < cfg.burn_in; ++i) state = world::step_world(layout.map, std::move(state), rng);
  Dataset ds{cfg, layout.views, std::vector<std::vector<Tensor<double>>>(layout.views.size())};
  for (std::size_t t = 0; t < timesteps; ++t) {
    for (std::size_t v = 0; v < layout.views.size(); ++v)
      ds.frames[v].push_back(world::render(layout.map, state, layout.views[v]));
    state = world::step_world(layout.map, std::move(state), rng);
  }
  return ds;
}

/**
 * Writes `config.json`, one tensor file per view per chunk ([Tc,H,W], f64) and
 * `manifest.json` listing the chunks.
 */
inline void write_dataset(const Dataset& ds, const std::filesystem::path& dir, std::size_t chunk = 100) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json views = nlohmann::json::array();
  for (const auto& v : ds.views) views.push_back(world::to_json(v));
  write_json(dir / "config.json", {{"world", world::to_json(ds.config)}, {"views", views},
                                   {"seed", ds.config.seed}});
  const std::size_t L = ds.length(), H = ds.height(), W = ds.width();
  nlohmann::json chunks = nlohmann::json::array();
  for (std::size_t c = 0, t0 = 0; t0 < L; ++c, t0 += chunk) {
    const std::size_t n = std::min(chunk, L - t0);
    nlohmann::json files = nlohmann::json::object();
    for (std::size_t v = 0; v < ds.num_views(); ++v) {
      Tensor<double> block(Shape{n, H, W});
      for (std::size_t t = 0; t < n; ++t)
        std::copy(ds.frames[v][t0 + t].data().begin(), ds.frames[v][t0 + t].data().end(),
                  block.data().begin() + long(t * H * W));
      const std::string name = "view" + std::to_string(ds.views[v].id) + "_chunk" + std::to_string(c);
      save_tensors<double>(dir / (name + ".tensor"), {{name, std::move(block)}});
      files[std::to_string(ds.views[v].id)] = name + ".tensor";
    }
    chunks.push_back({{"index", c}, {"t0", t0}, {"length", n}, {"files", files}});
  }
  write_json(dir / "manifest.json", {{"timesteps", L}, {"height", H}, {"width", W}, {"chunks", chunks}});
}

inline Dataset read_dataset(const std::filesystem::path& dir) {
  const auto cfg = read_json(dir / "config.json");
  const auto manifest = read_json(dir / "manifest.json");
  Dataset ds;
  ds.config = world::world_config_from_json(cfg.at("world"));
  for (const auto& v : cfg.at("views")) ds.views.push_back(world::view_from_json(v));
  ds.frames.resize(ds.views.size());
  const std::size_t H = manifest.at("height"), W = manifest.at("width");
  for (const auto& ch : manifest.at("chunks")) {
    for (std::size_t v = 0; v < ds.views.size(); ++v) {
      const std::string file = ch.at("files").at(std::to_string(ds.views[v].id));
      auto recs = load_tensors<double>(dir / file);
      if (recs.size() != 1) throw FormatError(file + ": expected one tensor record");
      const auto& block = recs[0].tensor;
      if (block.rank() != 3 || block.dim(1) != H || block.dim(2) != W)
        throw FormatError(file + ": unexpected shape " + shape_str(block.shape()));
      for (std::size_t t = 0; t < block.dim(0); ++t)
        ds.frames[v].emplace_back(Shape{H, W}, std::vector<double>(block.data().begin() + long(t * H * W),
                                                                   block.data().begin() + long((t + 1) * H * W)));
    }
  }
  if (ds.length() != manifest.at("timesteps").get<std::size_t>())
    throw FormatError("manifest timestep count does not match chunk contents");
  return ds;
}

}  // namespace ssta
