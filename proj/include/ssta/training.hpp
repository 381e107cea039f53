#pragma once

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

#include "ssta/dataset.hpp"
#include "ssta/lifelong.hpp"
#include "ssta/metrics.hpp"
#include "ssta/protocol.hpp"

namespace ssta::training {

namespace fs = std::filesystem;

struct TrainConfig {
  std::size_t nodes = 0;  // 0: every view in the dataset
  std::size_t k = 1;
  std::size_t horizon = 5;
  std::size_t epochs = 40;
  double lr = 1e-3;
  std::size_t batch = 10;  // parallel sequences per round, or replay batch when streaming
  protocol::MessageMode mode = protocol::MessageMode::emerged;
  std::string scheduler = "serial";
  std::uint64_t seed = 1;
  double val_fraction = 0.2;
  std::size_t warmup = 4;  // context steps before the first scored validation step
  std::size_t pretrain_epochs = 5;
  model::Init init = model::Init::random;  // zero: all-zero parameters, no pretraining
  std::optional<lifelong::Strategy> lifelong;
  std::size_t buffer = 300;
  lifelong::Eviction eviction = lifelong::Eviction::smallest_norm;
  model::ModelConfig model;
};

inline nlohmann::json to_json(const model::ModelConfig& m) {
  return {{"hidden_channels", m.hidden_channels}, {"msg_dim", m.msg_dim},   {"kernel", m.kernel},
          {"height", m.height},                   {"width", m.width},
          {"rollout_msgs", m.rollout_msgs == model::RolloutMessages::hold ? "hold" : "zero"},
          {"self_message", m.self_message},       {"freeze_msg_head", m.freeze_msg_head}};
}

inline model::ModelConfig model_config_from_json(const nlohmann::json& j) {
  model::ModelConfig m;
  m.hidden_channels = j.at("hidden_channels");
  m.msg_dim = j.at("msg_dim");
  m.kernel = j.at("kernel");
  m.height = j.at("height");
  m.width = j.at("width");
  m.rollout_msgs = j.at("rollout_msgs") == "hold" ? model::RolloutMessages::hold : model::RolloutMessages::zero;
  m.self_message = j.at("self_message");
  m.freeze_msg_head = j.at("freeze_msg_head");
  return m;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"nodes", c.nodes},
          {"k", c.k},
          {"horizon", c.horizon},
          {"epochs", c.epochs},
          {"lr", c.lr},
          {"batch", c.batch},
          {"msg_mode", protocol::to_string(c.mode)},
          {"scheduler", c.scheduler},
          {"seed", c.seed},
          {"val_fraction", c.val_fraction},
          {"warmup", c.warmup},
          {"pretrain_epochs", c.pretrain_epochs},
          {"init", c.init == model::Init::zero ? "zero" : "random"},
          {"lifelong", c.lifelong ? lifelong::to_string(*c.lifelong) : "none"},
          {"buffer", c.buffer},
          {"eviction", c.eviction == lifelong::Eviction::fifo ? "fifo" : "smallest_norm"},
          {"model", to_json(c.model)}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.nodes = j.at("nodes");
  c.k = j.at("k");
  c.horizon = j.at("horizon");
  c.epochs = j.at("epochs");
  c.lr = j.at("lr");
  c.batch = j.at("batch");
  c.mode = protocol::parse_message_mode(j.at("msg_mode"));
  c.scheduler = j.at("scheduler");
  c.seed = j.at("seed");
  c.val_fraction = j.at("val_fraction");
  c.warmup = j.at("warmup");
  c.pretrain_epochs = j.at("pretrain_epochs");
  c.init = j.value("init", "random") == "zero" ? model::Init::zero : model::Init::random;
  const std::string ll = j.at("lifelong");
  if (ll != "none") c.lifelong = lifelong::parse_strategy(ll);
  c.buffer = j.at("buffer");
  c.eviction = j.at("eviction") == "fifo" ? lifelong::Eviction::fifo : lifelong::Eviction::smallest_norm;
  c.model = model_config_from_json(j.at("model"));
  return c;
}

/// Indices into ds.views for an N-node run: all views, or the views of the N-view layout.
inline std::vector<std::size_t> select_views(const Dataset& ds, std::size_t n) {
  std::vector<std::size_t> out;
  if (n == 0 || n == ds.num_views()) {
    for (std::size_t i = 0; i < ds.num_views(); ++i) out.push_back(i);
    return out;
  }
  if (n > ds.num_views())
    throw std::invalid_argument("dataset has " + std::to_string(ds.num_views()) + " views, " + std::to_string(n) +
                                " nodes requested");
  auto wc = ds.config;
  wc.views = int(n);
  for (const auto& v : world::ladder_layout(wc).views) {
    auto it = std::find_if(ds.views.begin(), ds.views.end(),
                           [&](const world::ViewSpec& d) { return d.origin == v.origin; });
    if (it == ds.views.end())
      throw std::invalid_argument("dataset has no view at the " + std::to_string(n) + "-view layout position");
    out.push_back(std::size_t(it - ds.views.begin()));
  }
  return out;
}

struct Split {
  std::size_t train_end = 0;  // train is [0, train_end), validation is [train_end, length)
  std::size_t length = 0;
};

inline Split split_of(std::size_t length, double val_fraction) {
  const auto val = std::size_t(double(length) * val_fraction);
  return {length - val, length};
}

/// One node's view of the dataset, as model inputs [1,H,W].
template <Real T>
using Stream = std::vector<Tensor<T>>;

template <Real T>
std::vector<Stream<T>> streams_of(const Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<Stream<T>> out;
  for (std::size_t v : idx) {
    Stream<T> s;
    for (const auto& f : ds.frames[v]) s.push_back(model::frame_input<T>(f));
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------- evaluation

template <Real T>
Tensor<T> initial_message(const model::NodeModel<T>& m) {
  ad::Tape<T> tape;
  model::Theta<T> th;
  for (const auto& s : m.params().slices()) th.emplace(s.name, tape.constant(s.tensor));
  const auto& c = m.config();
  return model::message_head(th, tape.constant(Tensor<T>(Shape{c.hidden_channels, c.height, c.width}))).value();
}

/**
 * Runs every node's receding-horizon predictor over the stream for t in
 * [start, last], exchanging messages each step, and hands each rollout to
 * `visit(t, node index, rollout)`.
 */
template <Real T, typename Visit>
void stream_network(const std::vector<model::NodeModel<T>>& models, const std::vector<Stream<T>>& streams,
                    std::size_t start, std::size_t last, std::size_t horizon, protocol::MessageMode mode,
                    std::uint64_t seed, Visit&& visit) {
  const std::size_t N = models.size();
  std::map<int, std::size_t> index;
  for (std::size_t i = 0; i < N; ++i) index[models[i].id()] = i;
  std::vector<model::RecedingPredictor<T>> pred;
  std::vector<world::Rng> rng;
  for (std::size_t i = 0; i < N; ++i) {
    pred.emplace_back(models[i], horizon);
    rng.emplace_back(seed * 6364136223846793005ULL + std::uint64_t(models[i].id()));
  }
  std::vector<Tensor<T>> payload(N);
  for (std::size_t t = start; t <= last; ++t) {
    for (std::size_t i = 0; i < N; ++i) {
      const auto& c = models[i].config();
      switch (mode) {
        case protocol::MessageMode::emerged:
          payload[i] = pred[i].has_rollout() ? pred[i].last().messages.front().payload : initial_message(models[i]);
          break;
        case protocol::MessageMode::zero: payload[i] = Tensor<T>(Shape{c.msg_dim}); break;
        case protocol::MessageMode::random:
          payload[i] = Tensor<T>(Shape{c.msg_dim});
          for (T& v : payload[i].data()) v = model::standard_normal<T>(rng[i]);
          break;
      }
    }
    for (std::size_t i = 0; i < N; ++i) {
      model::MessageSet<T> set{models[i].id(), long(t), {}};
      for (int s : models[i].expected_senders())
        set.messages.emplace(s, model::Message<T>{s, long(t), 0, payload[index.at(s)]});
      const auto& r = pred[i].has_rollout() ? pred[i].advance(streams[i][t], set)
                                            : pred[i].start(streams[i][t], set, long(t));
      visit(t, i, r);
    }
  }
}

/**
 * Streaming receding-horizon evaluation of the whole network over [begin, end).
 * Nodes start from zero state `warmup` steps before `begin` (unscored), exchange
 * messages every step and are scored on every full horizon inside the range.
 */
template <Real T>
metrics::MetricReport evaluate(const std::vector<model::NodeModel<T>>& models, const std::vector<Stream<T>>& streams,
                               std::size_t begin, std::size_t end, std::size_t horizon, std::size_t warmup,
                               protocol::MessageMode mode, std::uint64_t seed) {
  const std::size_t N = models.size();
  if (end < begin + horizon + 1)
    throw std::invalid_argument("evaluation range of " + std::to_string(end - begin) +
                                " steps is shorter than horizon " + std::to_string(horizon) + " + 1");
  std::vector<metrics::MetricAccumulator> acc(N);
  const std::size_t start = begin >= warmup ? begin - warmup : 0;
  stream_network(models, streams, start, end - horizon - 1, horizon, mode, seed,
                 [&](std::size_t t, std::size_t i, const model::RolloutResult<T>& r) {
                   if (t < begin) return;
                   for (std::size_t s = 0; s < horizon; ++s) acc[i].add(streams[i][t + 1 + s], r.predictions[s]);
                 });
  metrics::MetricReport rep;
  for (std::size_t i = 0; i < N; ++i) rep.views.push_back(acc[i].row(models[i].id()));
  rep.finalize();
  return rep;
}

// ---------------------------------------------------------------- checkpoints

struct RunState {
  std::size_t epochs_done = 0;
  std::size_t stream_position = 0;
};

template <Real T>
void save_checkpoint(const fs::path& dir, const std::vector<protocol::NodeState<T>>& nodes, const TrainConfig& cfg,
                     const RunState& st) {
  const fs::path tmp = dir.string() + ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);
  write_json(tmp / "run.json", {{"config", to_json(cfg)},
                                {"epochs_done", st.epochs_done},
                                {"stream_position", st.stream_position},
                                {"nodes", nodes.size()}});
  for (const auto& ns : nodes) {
    const fs::path nd = tmp / ("node" + std::to_string(ns.id()));
    fs::create_directories(nd);
    std::ostringstream rng;
    rng << ns.msg_rng;
    write_json(nd / "manifest.json", {{"node_id", ns.id()},
                                      {"neighbors", ns.model.neighbors()},
                                      {"model", to_json(ns.model.config())},
                                      {"horizon", cfg.horizon},
                                      {"msg_mode", protocol::to_string(cfg.mode)},
                                      {"lr", ns.opt.config().lr},
                                      {"optimizer_steps", ns.opt.steps()},
                                      {"params_version", ns.model.params().version()},
                                      {"msg_rng", rng.str()},
                                      {"slices", "params.tensor"}});
    std::vector<NamedTensor<T>> slices;
    for (const auto& s : ns.model.params().slices()) slices.push_back({s.name, s.tensor});
    for (auto& s : ns.opt.state()) slices.push_back(std::move(s));
    save_tensors<T>(nd / "params.tensor", slices);
  }
  fs::remove_all(dir);
  fs::rename(tmp, dir);
}

template <Real T>
struct Checkpoint {
  TrainConfig config;
  RunState state;
  std::vector<protocol::NodeState<T>> nodes;

  world::Topology topology() const {
    world::Topology topo;
    for (const auto& ns : nodes) topo[ns.id()] = ns.model.neighbors();
    return topo;
  }
  std::vector<model::NodeModel<T>> models() const {
    std::vector<model::NodeModel<T>> out;
    for (const auto& ns : nodes) out.push_back(ns.model);
    return out;
  }
};

template <Real T>
Checkpoint<T> load_checkpoint(const fs::path& dir) {
  if (!fs::exists(dir / "run.json")) throw std::runtime_error("no checkpoint at " + dir.string());
  const auto run = read_json(dir / "run.json");
  Checkpoint<T> cp;
  cp.config = train_config_from_json(run.at("config"));
  cp.state = {run.at("epochs_done"), run.at("stream_position")};
  std::vector<int> ids;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory() && e.path().filename().string().rfind("node", 0) == 0)
      ids.push_back(std::stoi(e.path().filename().string().substr(4)));
  std::sort(ids.begin(), ids.end());
  if (ids.size() != run.at("nodes").get<std::size_t>())
    throw std::runtime_error("checkpoint " + dir.string() + " is missing node directories");
  for (int id : ids) {
    const fs::path nd = dir / ("node" + std::to_string(id));
    const auto man = read_json(nd / "manifest.json");
    const auto mcfg = model_config_from_json(man.at("model"));
    ParameterSet<T> params;
    std::vector<NamedTensor<T>> adam;
    for (auto& s : load_tensors<T>(nd / "params.tensor")) {
      if (s.name.rfind("adam.", 0) == 0)
        adam.push_back(std::move(s));
      else
        params.add(s.name, std::move(s.tensor));
    }
    params.set_version(man.at("params_version"));
    Adam<T> opt(AdamConfig{man.at("lr").get<double>()});
    opt.load_state(adam);
    world::Rng rng;
    std::istringstream(man.at("msg_rng").get<std::string>()) >> rng;
    cp.nodes.push_back(protocol::NodeState<T>{
        model::NodeModel<T>(id, man.at("neighbors").get<std::vector<int>>(), mcfg, std::move(params)), std::move(opt),
        {}, rng});
  }
  return cp;
}

// ---------------------------------------------------------------- metric log

inline const char* kCsvHeader = "epoch,node,mse,psnr,ssim,loss";

inline std::string fmt_real(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct EpochRow {
  std::size_t epoch = 0;
  int node = 0;
  double mse = 0, psnr = 0, ssim = 0, loss = 0;

  std::string csv() const {
    return std::to_string(epoch) + "," + std::to_string(node) + "," + fmt_real(mse) + "," + fmt_real(psnr) + "," +
           fmt_real(ssim) + "," + fmt_real(loss);
  }
};

/// Keeps the header and rows of epochs <= `epochs`; used when resuming.
inline void truncate_log(const fs::path& path, std::size_t epochs) {
  std::vector<std::string> keep{kCsvHeader};
  if (std::ifstream in(path); in) {
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty() && std::stoul(line.substr(0, line.find(','))) <= epochs) keep.push_back(line);
  }
  std::ofstream out(path, std::ios::trunc);
  for (const auto& l : keep) out << l << '\n';
}

// ---------------------------------------------------------------- training

template <Real T>
struct TrainResult {
  std::vector<protocol::NodeState<T>> nodes;
  world::Topology topology;
  std::vector<EpochRow> rows;
  std::vector<std::vector<T>> round_losses;  // [round][node]
  metrics::MetricReport final_report;
  std::size_t rounds = 0;
  double seconds_in_rounds = 0;
};

/// Stored replay sample: the loss window plus the state it started from.
template <Real T>
struct Sample {
  std::vector<Tensor<T>> window;
  Tensor<T> hidden;
  std::optional<Tensor<T>> mbar;
};

/// Local gradient of a stored sample; incoming messages are the recorded constants.
template <Real T>
std::map<std::string, Tensor<T>> replay_gradient(const model::NodeModel<T>& m, const Sample<T>& s,
                                                 std::size_t horizon) {
  ad::Tape<T> tape;
  auto th = m.params().bind(tape);
  std::optional<ad::Var<T>> mbar;
  if (s.mbar) mbar = tape.constant(*s.mbar);
  auto loss = protocol::rollout_loss(th, tape.constant(s.hidden), mbar, s.window, horizon, m.config().rollout_msgs);
  return protocol::theta_only(tape.backward(loss), m.params());
}

template <Real T>
std::vector<protocol::NodeState<T>> initial_nodes(const Dataset& ds, const std::vector<std::size_t>& idx,
                                                  const world::Topology& topo, const TrainConfig& cfg,
                                                  std::size_t train_end) {
  std::vector<world::ViewSpec> views;
  for (std::size_t v : idx) views.push_back(ds.views[v]);
  auto mcfg = cfg.model;
  mcfg.height = ds.height();
  mcfg.width = ds.width();
  auto nodes = protocol::make_nodes<T>(views, topo, mcfg, AdamConfig{cfg.lr}, cfg.seed, cfg.init);
  if (cfg.init == model::Init::zero) return nodes;
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    std::vector<Tensor<double>> sample(ds.frames[idx[i]].begin(), ds.frames[idx[i]].begin() + long(train_end));
    auto& p = nodes[i].model.params();
    if (cfg.pretrain_epochs > 0)
      model::pretrain_message_ae(p, mcfg, sample, cfg.pretrain_epochs, 1e-3, cfg.seed * 31 + std::uint64_t(nodes[i].id()));
    // output bias starts at the logit of the mean training intensity
    double mean = 0;
    for (const auto& f : sample) mean += std::accumulate(f.data().begin(), f.data().end(), 0.0) / double(f.size());
    mean = std::clamp(mean / double(sample.size()), 1e-3, 1 - 1e-3);
    p["out_bias"][0] = static_cast<T>(std::log(mean / (1 - mean)));
    p.set_version(0);
  }
  return nodes;
}

/**
 * Trains every node on the dataset's training split and scores the validation
 * split after each epoch. With `out`, writes `metrics.csv` and `checkpoint/`
 * there; with `resume`, continues from the checkpoint found in `out`.
 */
template <Real T>
TrainResult<T> run_training(const Dataset& ds, const TrainConfig& cfg, const std::optional<fs::path>& out = {},
                            bool resume = false, std::ostream* log = nullptr) {
  const auto idx = select_views(ds, cfg.nodes);
  std::vector<world::ViewSpec> views;
  for (std::size_t v : idx) views.push_back(ds.views[v]);
  const auto topo = world::build_topology(views, cfg.k);
  const Split sp = split_of(ds.length(), cfg.val_fraction);
  const auto streams = streams_of<T>(ds, idx);
  const std::size_t H = cfg.horizon, N = idx.size();
  if (H == 0) throw std::invalid_argument("horizon must be >= 1");
  if (cfg.batch == 0) throw std::invalid_argument("batch must be >= 1");

  TrainResult<T> res;
  res.topology = topo;
  RunState st;
  std::vector<protocol::NodeState<T>> nodes;
  const fs::path ckdir = out ? *out / "checkpoint" : fs::path{};
  if (out) fs::create_directories(*out);
  if (resume && out && fs::exists(ckdir / "run.json")) {
    auto cp = load_checkpoint<T>(ckdir);
    auto a = to_json(cp.config), b = to_json(cfg);
    a.erase("epochs");
    b.erase("epochs");
    if (a != b) throw std::invalid_argument("--resume with a different configuration");
    nodes = std::move(cp.nodes);
    st = cp.state;
    truncate_log(*out / "metrics.csv", st.epochs_done);
  } else {
    nodes = initial_nodes<T>(ds, idx, topo, cfg, sp.train_end);
    if (out) {
      truncate_log(*out / "metrics.csv", 0);
      save_checkpoint(ckdir, nodes, cfg, st);
    }
  }

  protocol::ProtocolConfig pcfg{H, cfg.mode};
  protocol::Network<T> net(std::move(nodes), topo, pcfg, protocol::make_scheduler(cfg.scheduler, N));

  auto score = [&](std::size_t epoch, const std::vector<double>& loss) {
    std::vector<model::NodeModel<T>> models;
    for (const auto& ns : net.nodes()) models.push_back(ns.model);
    res.final_report = evaluate(models, streams, sp.train_end, sp.length, H, cfg.warmup, cfg.mode, cfg.seed);
    std::vector<EpochRow> rows;
    for (std::size_t i = 0; i < N; ++i) {
      const auto& r = res.final_report.views[i];
      rows.push_back({epoch, r.view, r.mse, r.psnr, r.ssim, loss[i]});
    }
    if (out) {
      std::ofstream f(*out / "metrics.csv", std::ios::app);
      for (const auto& r : rows) f << r.csv() << '\n';
    }
    if (log) *log << "epoch " << epoch << " val mse " << fmt_real(res.final_report.mean.mse) << '\n';
    res.rows.insert(res.rows.end(), rows.begin(), rows.end());
  };
  auto round = [&](long t, const protocol::RoundFrames<T>& frames, bool apply) {
    const auto t0 = std::chrono::steady_clock::now();
    auto rep = net.training_round(t, frames, apply);
    res.seconds_in_rounds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.round_losses.push_back(rep.node_loss);
    ++res.rounds;
    return rep;
  };

  if (!cfg.lifelong) {
    const std::size_t seg = sp.train_end / cfg.batch;
    if (seg <= H)
      throw std::invalid_argument("training split of " + std::to_string(sp.train_end) + " steps is too short for " +
                                  std::to_string(cfg.batch) + " sequences of horizon " + std::to_string(H));
    const std::size_t rounds = seg - H;
    for (std::size_t e = st.epochs_done; e < cfg.epochs; ++e) {
      net.reset_lanes(cfg.batch);
      std::vector<double> loss(N, 0.0);
      for (std::size_t r = 0; r < rounds; ++r) {
        protocol::RoundFrames<T> frames(N, std::vector<std::vector<Tensor<T>>>(cfg.batch));
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t b = 0; b < cfg.batch; ++b)
            frames[i][b].assign(streams[i].begin() + long(b * seg + r), streams[i].begin() + long(b * seg + r + H + 1));
        const auto rep = round(long(e * rounds + r), frames, true);
        for (std::size_t i = 0; i < N; ++i) loss[i] += double(rep.node_loss[i]);
      }
      for (double& l : loss) l /= double(rounds);
      score(e + 1, loss);
      st.epochs_done = e + 1;
      if (out) save_checkpoint(ckdir, net.nodes(), cfg, st);
    }
  } else if (st.epochs_done == 0 && cfg.epochs > 0) {
    // Single pass over the training stream; each node keeps its own buffer.
    if (sp.train_end <= H) throw std::invalid_argument("training stream shorter than the horizon");
    std::vector<lifelong::ReplayBuffer<Sample<T>>> buf(N, lifelong::ReplayBuffer<Sample<T>>(cfg.buffer, cfg.eviction));
    std::vector<world::Rng> rng;
    for (const auto& ns : net.nodes()) rng.emplace_back(cfg.seed * 104729ULL + std::uint64_t(ns.id()));
    net.reset_lanes(1);
    std::vector<double> loss(N, 0.0);
    const std::size_t steps = sp.train_end - H;
    for (std::size_t t = 0; t < steps; ++t) {
      protocol::RoundFrames<T> frames(N, std::vector<std::vector<Tensor<T>>>(1));
      for (std::size_t i = 0; i < N; ++i)
        frames[i][0].assign(streams[i].begin() + long(t), streams[i].begin() + long(t + H + 1));
      const auto rep = round(long(t), frames, false);
      net.scheduler().run_phase(N, [&](std::size_t i) {
        auto& ns = net.nodes()[i];
        Sample<T> s{frames[i][0], rep.start_hidden[i][0], rep.mbar[i][0]};
        bool stored = true;
        if (*cfg.lifelong == lifelong::Strategy::sw)
          buf[i].sw_offer(t, std::move(s));
        else
          stored = buf[i].id_offer(t, std::move(s), double(rep.local_norm[i]));
        // the batch always carries the sample just received, stored or not
        std::map<std::string, Tensor<T>> g = rep.assembled[i];
        const std::size_t draws = stored ? cfg.batch : cfg.batch - 1;
        if (!buf[i].empty() && draws > 0)
          for (std::size_t j : buf[i].draw_batch(draws, rng[i])) {
            const auto& e = buf[i].entries()[j];
            if (e.id == t) continue;
            accumulate(g, replay_gradient(ns.model, e.sample, H));
          }
        net.apply_update(i, g);
      });
      for (std::size_t i = 0; i < N; ++i) loss[i] += double(rep.node_loss[i]);
    }
    for (double& l : loss) l /= double(steps);
    score(1, loss);
    st.epochs_done = 1;
    st.stream_position = steps;
    if (out) save_checkpoint(ckdir, net.nodes(), cfg, st);
  }
  res.nodes = net.nodes();
  return res;
}

}  // namespace ssta::training
