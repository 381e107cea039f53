#pragma once

#include <random>

#include "ssta/protocol.hpp"
#include "test_util.hpp"

namespace ssta::test {

/// A small random co-learning instance: N nodes on 8x8 frames with random weights,
/// random frames and (optionally) random carried state so h_t depends on theta.
struct SmallInstance {
  std::vector<world::ViewSpec> views;
  world::Topology topo;
  model::ModelConfig mcfg;
  protocol::ProtocolConfig pcfg;
  std::vector<protocol::NodeState<double>> nodes;
  protocol::RoundFrames<double> frames;
};

inline SmallInstance make_instance(std::uint64_t seed, world::Topology topo, std::size_t horizon,
                                   std::size_t lanes = 1, bool carried = true,
                                   protocol::MessageMode mode = protocol::MessageMode::emerged) {
  std::mt19937_64 rng(seed);
  SmallInstance inst;
  inst.topo = std::move(topo);
  inst.mcfg.height = inst.mcfg.width = 8;
  inst.pcfg.horizon = horizon;
  inst.pcfg.mode = mode;
  for (const auto& [id, nbrs] : inst.topo) inst.views.push_back(world::ViewSpec{id, {0, 0}, 8, 8});
  inst.nodes = protocol::make_nodes<double>(inst.views, inst.topo, inst.mcfg, AdamConfig{}, seed);
  // Non-zero output weights so every path carries gradient.
  for (auto& ns : inst.nodes) {
    for (auto& s : ns.model.params().slices())
      for (double& v : s.tensor.data()) v += std::uniform_real_distribution<double>(-0.3, 0.3)(rng);
    ns.lanes.resize(lanes);
    if (carried)
      for (auto& c : ns.lanes) {
        c.valid = true;
        c.x_prev = random_tensor({1, 8, 8}, rng, 0.0, 1.0);
        c.h_prev = random_tensor({inst.mcfg.hidden_channels, 8, 8}, rng);
        if (!ns.model.neighbors().empty()) c.mbar_prev = random_tensor({inst.mcfg.msg_dim}, rng);
      }
  }
  inst.frames.resize(inst.nodes.size());
  for (auto& per_node : inst.frames) {
    per_node.resize(lanes);
    for (auto& window : per_node)
      for (std::size_t s = 0; s <= horizon; ++s) window.push_back(random_tensor({1, 8, 8}, rng, 0.0, 1.0));
  }
  return inst;
}

inline double max_rel_discrepancy(const std::map<std::string, Tensor<double>>& a,
                                  const std::map<std::string, Tensor<double>>& b) {
  // Relative to the largest entry of the reference slice, so tiny entries are not amplified.
  double worst = 0;
  for (const auto& [name, ta] : a) {
    const auto& tb = b.at(name);
    double scale = 1e-30;
    for (double v : tb.data()) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < ta.size(); ++i) worst = std::max(worst, std::abs(ta[i] - tb[i]) / scale);
  }
  return worst;
}

}  // namespace ssta::test
