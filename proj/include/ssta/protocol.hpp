#pragma once

#include <atomic>
#include <condition_variable>
#include <deque>
#include <exception>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>

#include "ssta/node_model.hpp"
#include "ssta/serialize.hpp"

/**
 * @file protocol.hpp
 * @brief Networked co-learning rounds.
 *
 * A round at time t runs five barrier-separated phases over all nodes:
 *
 *  1. broadcast: node i recomputes h_t from its carried (x_{t-1}, h_{t-1}, m_{t-1})
 *     on a fresh tape, emits y_t = head(h_t) and sends it to every k with i in K^k.
 *  2. rollout:   node i collects its message set, rolls out T steps from (x_t, h_t)
 *     and records L_t^i = sum_tau ||x_tau - xhat_tau||_F^2.
 *  3. backprop:  node i differentiates L_t^i, giving grad_theta L_t^i and one
 *     GradPacket grad_{y_t^k} L_t^i per incoming message.
 *  4. exchange:  packets go back to the message senders.
 *  5. step:      node i adds (d y_t^i / d theta^i)^T sum_k grad_{y_t^i} L_t^k to its
 *     local gradient (a VJP on its own tape) and takes one optimizer step.
 *
 * Incoming payloads are tape leaves inside the receiver and never feed the
 * receiver's own outgoing message, so the one-hop exchange above is the exact
 * gradient of the summed loss.
 */
namespace ssta::protocol {

using model::Message;
using model::MessageSet;
using model::ProtocolError;

enum class MessageMode { emerged, zero, random };

inline const char* to_string(MessageMode m) {
  switch (m) {
    case MessageMode::emerged: return "emerged";
    case MessageMode::zero: return "zero";
    case MessageMode::random: return "random";
  }
  return "?";
}

inline MessageMode parse_message_mode(const std::string& s) {
  if (s == "emerged") return MessageMode::emerged;
  if (s == "zero") return MessageMode::zero;
  if (s == "random") return MessageMode::random;
  throw std::invalid_argument("unknown message mode '" + s + "'");
}

enum class Phase { broadcast, rollout, backprop, exchange, step };

template <Real T>
struct GradPacket {
  int producer = 0;  // receiver k that computed the gradient
  int consumer = 0;  // original message sender i
  long t = 0;
  std::size_t lane = 0;
  Tensor<T> payload;  // grad of L_t^k w.r.t. y_t^i, [d_msg]
};

// Wire format: one JSON envelope line followed by one tensor record.

template <Real T>
std::string encode_message(const Message<T>& m, int receiver) {
  nlohmann::json env = {{"kind", "message"}, {"sender", m.sender}, {"receiver", receiver}, {"t", m.t},
                        {"lane", m.lane}};
  return env.dump() + "\n" + to_bytes(m.payload, "y/" + std::to_string(m.sender));
}

template <Real T>
std::string encode_packet(const GradPacket<T>& p) {
  nlohmann::json env = {{"kind", "grad"}, {"producer", p.producer}, {"consumer", p.consumer}, {"t", p.t},
                        {"lane", p.lane}};
  return env.dump() + "\n" + to_bytes(p.payload, "dy/" + std::to_string(p.consumer));
}

namespace detail {
inline std::pair<nlohmann::json, std::string> split_envelope(const std::string& bytes, const char* kind) {
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw FormatError("envelope without payload");
  auto env = nlohmann::json::parse(bytes.substr(0, nl));
  if (env.at("kind") != kind) throw FormatError(std::string("expected ") + kind + " envelope");
  return {std::move(env), bytes.substr(nl + 1)};
}
}  // namespace detail

template <Real T>
std::pair<Message<T>, int> decode_message(const std::string& bytes) {
  auto [env, rest] = detail::split_envelope(bytes, "message");
  Message<T> m{env.at("sender"), env.at("t"), env.at("lane"), from_bytes<T>(rest).tensor};
  return {std::move(m), env.at("receiver").get<int>()};
}

template <Real T>
GradPacket<T> decode_packet(const std::string& bytes) {
  auto [env, rest] = detail::split_envelope(bytes, "grad");
  return {env.at("producer"), env.at("consumer"), env.at("t"), env.at("lane"), from_bytes<T>(rest).tensor};
}

/// Bounded FIFO of serialized payloads. Overflow is a protocol violation, never a silent drop.
class Mailbox {
 public:
  explicit Mailbox(std::size_t capacity = 0) : capacity_(capacity) {}
  Mailbox(Mailbox&& o) noexcept : capacity_(o.capacity_), items_(std::move(o.items_)) {}

  void set_capacity(std::size_t c) {
    std::lock_guard lock(mu_);
    capacity_ = c;
  }

  void push(std::string item) {
    std::lock_guard lock(mu_);
    if (items_.size() >= capacity_)
      throw ProtocolError("mailbox overflow (capacity " + std::to_string(capacity_) + ")");
    items_.push_back(std::move(item));
  }

  std::vector<std::string> drain() {
    std::lock_guard lock(mu_);
    std::vector<std::string> out(std::make_move_iterator(items_.begin()), std::make_move_iterator(items_.end()));
    items_.clear();
    return out;
  }

  void clear() {
    std::lock_guard lock(mu_);
    items_.clear();
  }

 private:
  std::mutex mu_;
  std::size_t capacity_;
  std::deque<std::string> items_;
};

/// Runs one phase body for every node and returns only when all have finished.
class Scheduler {
 public:
  virtual ~Scheduler() = default;
  virtual void run_phase(std::size_t nodes, const std::function<void(std::size_t)>& body) = 0;
  virtual const char* name() const = 0;
};

class SerialScheduler final : public Scheduler {
 public:
  void run_phase(std::size_t nodes, const std::function<void(std::size_t)>& body) override {
    for (std::size_t i = 0; i < nodes; ++i) body(i);
  }
  const char* name() const override { return "serial"; }
};

/**
 * One persistent worker thread per node. The coordinator publishes a phase,
 * every worker runs it for its own node, and the coordinator waits for all of
 * them before publishing the next phase. The first failure (by node order) is
 * rethrown on the coordinator thread after the phase completes.
 */
class ParallelScheduler final : public Scheduler {
 public:
  explicit ParallelScheduler(std::size_t workers) : errors_(workers) {
    for (std::size_t i = 0; i < workers; ++i) threads_.emplace_back([this, i] { worker(i); });
  }
  ~ParallelScheduler() override {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }
  ParallelScheduler(const ParallelScheduler&) = delete;
  ParallelScheduler& operator=(const ParallelScheduler&) = delete;

  void run_phase(std::size_t nodes, const std::function<void(std::size_t)>& body) override {
    if (nodes != threads_.size())
      throw std::invalid_argument("parallel scheduler has " + std::to_string(threads_.size()) +
                                  " workers, phase needs " + std::to_string(nodes));
    {
      std::unique_lock lock(mu_);
      body_ = &body;
      pending_ = threads_.size();
      ++generation_;
    }
    cv_.notify_all();
    std::unique_lock lock(mu_);
    done_cv_.wait(lock, [this] { return pending_ == 0; });
    body_ = nullptr;
    for (auto& e : errors_)
      if (e) {
        auto err = std::exchange(e, nullptr);
        for (auto& other : errors_) other = nullptr;
        std::rethrow_exception(err);
      }
  }
  const char* name() const override { return "parallel"; }

 private:
  void worker(std::size_t i) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::size_t)>* body;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        body = body_;
      }
      try {
        (*body)(i);
      } catch (...) {
        errors_[i] = std::current_exception();
      }
      {
        std::lock_guard lock(mu_);
        if (--pending_ == 0) done_cv_.notify_one();
      }
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> threads_;
  std::vector<std::exception_ptr> errors_;
  const std::function<void(std::size_t)>* body_ = nullptr;
  std::size_t pending_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
};

inline std::unique_ptr<Scheduler> make_scheduler(const std::string& name, std::size_t nodes) {
  if (name == "serial") return std::make_unique<SerialScheduler>();
  if (name == "parallel") return std::make_unique<ParallelScheduler>(nodes);
  throw std::invalid_argument("unknown scheduler '" + name + "'");
}

/// What a node carries from round t-1 into round t for one mini-batch sequence.
template <Real T>
struct LaneCarry {
  bool valid = false;
  Tensor<T> x_prev;                      // [1,H,W]
  Tensor<T> h_prev;                      // [C,H,W]
  std::optional<Tensor<T>> mbar_prev;    // [d], absent when the node has no senders
};

template <Real T>
struct NodeState {
  model::NodeModel<T> model;
  Adam<T> opt;
  std::vector<LaneCarry<T>> lanes;
  world::Rng msg_rng{0};

  int id() const { return model.id(); }
};

struct ProtocolConfig {
  std::size_t horizon = 5;
  MessageMode mode = MessageMode::emerged;
};

/// frames[node index][lane] holds the T+1 frames x_t..x_{t+T}, each [1,H,W].
template <Real T>
using RoundFrames = std::vector<std::vector<std::vector<Tensor<T>>>>;

template <Real T>
struct RoundReport {
  long t = 0;
  std::vector<T> node_loss;                              // L_t^i summed over lanes
  T total_loss{0};                                       // sum over nodes in id order
  std::vector<std::map<std::string, Tensor<T>>> local;   // grad_theta L_t^i
  std::vector<std::map<std::string, Tensor<T>>> assembled;
  std::vector<T> local_norm;
  std::vector<std::vector<T>> lane_loss;
  std::vector<std::vector<Tensor<T>>> start_hidden;      // h_t per node per lane
  std::vector<std::vector<std::optional<Tensor<T>>>> mbar;
  std::vector<std::vector<Tensor<T>>> sent_payload;      // y_t as broadcast, per node per lane
  std::size_t packets = 0;
};

/// Hidden state h_t for a lane on `tape`: recomputed from the carry, or zeros at the start of a sequence.
template <Real T>
ad::Var<T> start_state(ad::Tape<T>& tape, const model::Theta<T>& th, const LaneCarry<T>& carry,
                       const model::ModelConfig& cfg) {
  if (!carry.valid) return tape.constant(Tensor<T>(Shape{cfg.hidden_channels, cfg.height, cfg.width}));
  std::optional<ad::Var<T>> mb;
  if (carry.mbar_prev) mb = tape.constant(*carry.mbar_prev);
  return model::cell(th, tape.constant(carry.x_prev), tape.constant(carry.h_prev), mb);
}

template <Real T>
ad::Var<T> rollout_loss(const model::Theta<T>& th, ad::Var<T> h, std::optional<ad::Var<T>> mbar,
                        const std::vector<Tensor<T>>& window, std::size_t horizon, model::RolloutMessages mode) {
  ad::Tape<T>& tape = *h.tape;
  if (window.size() != horizon + 1)
    throw std::invalid_argument("round window has " + std::to_string(window.size()) + " frames, expected " +
                                std::to_string(horizon + 1));
  auto rv = model::rollout_vars(th, tape.constant(window[0]), h, mbar, horizon, mode);
  std::optional<ad::Var<T>> loss;
  for (std::size_t s = 0; s < horizon; ++s) {
    ad::Var<T> l = ad::sse_loss(rv.predictions[s], tape.constant(window[s + 1]));
    loss = loss ? ad::add(*loss, l) : l;
  }
  return *loss;
}

template <Real T>
std::map<std::string, Tensor<T>> theta_only(const std::map<std::string, Tensor<T>>& grads,
                                            const ParameterSet<T>& params) {
  std::map<std::string, Tensor<T>> out;
  for (const auto& s : params.slices()) out.emplace(s.name, grads.at(s.name));
  return out;
}

/**
 * The co-learning system: node states, directed topology and a scheduler that
 * drives the five phases. Node i's inbox only ever receives serialized copies.
 */
template <Real T>
class Network {
 public:
  Network(std::vector<NodeState<T>> nodes, world::Topology topo, ProtocolConfig cfg,
          std::unique_ptr<Scheduler> scheduler)
      : nodes_(std::move(nodes)), topo_(std::move(topo)), cfg_(cfg), sched_(std::move(scheduler)) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) index_[nodes_[i].id()] = i;
    for (const auto& ns : nodes_) {
      auto it = topo_.find(ns.id());
      const std::vector<int> k = it == topo_.end() ? std::vector<int>{} : it->second;
      if (k != ns.model.neighbors())
        throw std::invalid_argument("node " + std::to_string(ns.id()) + " neighbour list disagrees with topology");
      for (int s : k)
        if (!index_.contains(s)) throw std::invalid_argument("topology references unknown node " + std::to_string(s));
      receivers_.push_back(world::receivers_of(topo_, ns.id()));
    }
    msg_box_.resize(nodes_.size());
    grad_box_.resize(nodes_.size());
    scratch_.resize(nodes_.size());
  }

  std::vector<NodeState<T>>& nodes() noexcept { return nodes_; }
  const std::vector<NodeState<T>>& nodes() const noexcept { return nodes_; }
  const world::Topology& topology() const noexcept { return topo_; }
  const ProtocolConfig& config() const noexcept { return cfg_; }
  Scheduler& scheduler() noexcept { return *sched_; }
  std::size_t index_of(int id) const { return index_.at(id); }

  /// Drops every lane carry and sizes the node states for `lanes` parallel sequences.
  void reset_lanes(std::size_t lanes) {
    for (auto& ns : nodes_) ns.lanes.assign(lanes, LaneCarry<T>{});
  }

  /**
   * One lockstep round at time t. With apply_update=false the assembled
   * gradients are returned without an optimizer step (carries still advance).
   */
  RoundReport<T> training_round(long t, const RoundFrames<T>& frames, bool apply_update = true) {
    const std::size_t N = nodes_.size();
    if (frames.size() != N) throw std::invalid_argument("round frames must cover every node");
    const std::size_t lanes = frames.front().size();
    for (std::size_t i = 0; i < N; ++i) {
      if (frames[i].size() != lanes) throw std::invalid_argument("every node needs the same lane count");
      if (nodes_[i].lanes.size() != lanes) nodes_[i].lanes.assign(lanes, LaneCarry<T>{});
      msg_box_[i].clear();
      grad_box_[i].clear();
      const std::size_t senders = nodes_[i].model.neighbors().size();
      msg_box_[i].set_capacity(senders * lanes);
      grad_box_[i].set_capacity(receivers_[i].size() * lanes);
    }
    t_ = t;
    frames_ = &frames;
    apply_ = apply_update;
    report_ = RoundReport<T>{};
    report_.t = t;
    report_.node_loss.assign(N, T{0});
    report_.local.assign(N, {});
    report_.assembled.assign(N, {});
    report_.local_norm.assign(N, T{0});
    report_.lane_loss.assign(N, {});
    report_.start_hidden.assign(N, {});
    report_.mbar.assign(N, {});
    report_.sent_payload.assign(N, {});

    sched_->run_phase(N, [this](std::size_t i) { broadcast(i); });
    sched_->run_phase(N, [this](std::size_t i) { rollout(i); });
    sched_->run_phase(N, [this](std::size_t i) { backprop(i); });
    sched_->run_phase(N, [this](std::size_t i) { exchange(i); });
    sched_->run_phase(N, [this](std::size_t i) { step(i); });

    report_.total_loss = T{0};
    for (std::size_t i = 0; i < N; ++i) report_.total_loss += report_.node_loss[i];
    for (auto& s : scratch_) s = NodeScratch{};
    frames_ = nullptr;
    return std::move(report_);
  }

  void apply_update(std::size_t i, const std::map<std::string, Tensor<T>>& grads) {
    auto& ns = nodes_[i];
    static const std::vector<std::string> none;
    ns.opt.step(ns.model.params(), grads, ns.model.config().freeze_msg_head ? model::msg_head_slices() : none);
  }

  Phase last_phase() const noexcept { return phase_; }

 private:
  struct NodeScratch {
    std::unique_ptr<ad::Tape<T>> tape;
    model::Theta<T> theta;
    std::vector<ad::Var<T>> h;
    std::vector<ad::Var<T>> y;
    std::vector<Tensor<T>> sent;
    std::vector<std::optional<ad::Var<T>>> mbar;
    std::optional<ad::Var<T>> loss;
    std::map<std::string, Tensor<T>> grads;
    std::vector<GradPacket<T>> outgoing;
  };

  static std::string msg_leaf(int sender, std::size_t lane) {
    return "msg/" + std::to_string(sender) + "/" + std::to_string(lane);
  }

  void broadcast(std::size_t i) {
    phase_ = Phase::broadcast;
    auto& ns = nodes_[i];
    auto& sc = scratch_[i];
    const auto& cfg = ns.model.config();
    sc.tape = std::make_unique<ad::Tape<T>>();
    sc.theta = ns.model.params().bind(*sc.tape);
    for (std::size_t b = 0; b < ns.lanes.size(); ++b) {
      ad::Var<T> h = start_state(*sc.tape, sc.theta, ns.lanes[b], cfg);
      ad::Var<T> y = model::message_head(sc.theta, h);
      Tensor<T> payload(Shape{cfg.msg_dim});
      switch (cfg_.mode) {
        case MessageMode::emerged: payload = y.value(); break;
        case MessageMode::zero: break;
        case MessageMode::random:
          for (T& v : payload.data()) v = model::standard_normal<T>(ns.msg_rng);
          break;
      }
      for (int k : receivers_[i])
        msg_box_[index_.at(k)].push(encode_message(Message<T>{ns.id(), t_, b, payload}, k));
      sc.h.push_back(h);
      sc.y.push_back(y);
      sc.sent.push_back(std::move(payload));
    }
  }

  void rollout(std::size_t i) {
    phase_ = Phase::rollout;
    auto& ns = nodes_[i];
    auto& sc = scratch_[i];
    const auto& cfg = ns.model.config();
    const std::size_t lanes = ns.lanes.size();
    std::vector<MessageSet<T>> sets(lanes);
    for (std::size_t b = 0; b < lanes; ++b) sets[b] = MessageSet<T>{ns.id(), t_, {}};
    for (const auto& bytes : msg_box_[i].drain()) {
      auto [m, receiver] = decode_message<T>(bytes);
      if (receiver != ns.id() || m.lane >= lanes)
        throw ProtocolError("misrouted message from " + std::to_string(m.sender) + " at node " +
                            std::to_string(ns.id()));
      const int sender = m.sender;
      if (!sets[m.lane].messages.emplace(sender, std::move(m)).second)
        throw ProtocolError("duplicate message from " + std::to_string(sender) + " at node " +
                            std::to_string(ns.id()));
    }
    if (cfg.self_message)
      for (std::size_t b = 0; b < lanes; ++b) sets[b].messages.emplace(ns.id(), Message<T>{ns.id(), t_, b, sc.sent[b]});

    T node_loss{0};
    std::optional<ad::Var<T>> total;
    for (std::size_t b = 0; b < lanes; ++b) {
      model::check_message_set(sets[b], ns.model.expected_senders(), cfg.msg_dim);
      std::vector<ad::Var<T>> vars;
      for (const auto& [sender, m] : sets[b].messages) {
        if (sender == ns.id())
          vars.push_back(cfg_.mode == MessageMode::emerged ? sc.y[b] : sc.tape->constant(m.payload));
        else if (cfg_.mode == MessageMode::emerged)
          vars.push_back(sc.tape->input(msg_leaf(sender, b), m.payload));
        else
          vars.push_back(sc.tape->constant(m.payload));
      }
      std::optional<ad::Var<T>> mbar;
      if (!vars.empty()) mbar = model::mean_payload(vars);
      sc.mbar.push_back(mbar);
      ad::Var<T> l = rollout_loss(sc.theta, sc.h[b], mbar, (*frames_)[i][b], cfg_.horizon, cfg.rollout_msgs);
      report_.lane_loss[i].push_back(l.value().item());
      total = total ? ad::add(*total, l) : l;
    }
    sc.loss = total;
    node_loss = total->value().item();
    report_.node_loss[i] = node_loss;
  }

  void backprop(std::size_t i) {
    phase_ = Phase::backprop;
    auto& ns = nodes_[i];
    auto& sc = scratch_[i];
    sc.grads = sc.tape->backward(*sc.loss);
    report_.local[i] = theta_only(sc.grads, ns.model.params());
    T sq{0};
    for (const auto& [name, g] : report_.local[i])
      for (T v : g.data()) sq += v * v;
    report_.local_norm[i] = std::sqrt(sq);
    if (cfg_.mode != MessageMode::emerged) return;
    for (std::size_t b = 0; b < ns.lanes.size(); ++b)
      for (int sender : ns.model.neighbors())
        sc.outgoing.push_back(
            GradPacket<T>{ns.id(), sender, t_, b, sc.grads.at(msg_leaf(sender, b))});
  }

  void exchange(std::size_t i) {
    phase_ = Phase::exchange;
    for (const auto& p : scratch_[i].outgoing) grad_box_[index_.at(p.consumer)].push(encode_packet(p));
  }

  void step(std::size_t i) {
    phase_ = Phase::step;
    auto& ns = nodes_[i];
    auto& sc = scratch_[i];
    const std::size_t lanes = ns.lanes.size();
    // seeds[b] accumulates packets for lane b in producer id order
    std::vector<std::map<int, Tensor<T>>> by_lane(lanes);
    std::size_t received = 0;
    for (const auto& bytes : grad_box_[i].drain()) {
      auto p = decode_packet<T>(bytes);
      if (p.consumer != ns.id() || p.t != t_ || p.lane >= lanes ||
          std::find(receivers_[i].begin(), receivers_[i].end(), p.producer) == receivers_[i].end())
        throw ProtocolError("unexpected GradPacket " + std::to_string(p.producer) + "->" +
                            std::to_string(p.consumer) + " at t=" + std::to_string(p.t));
      if (!p.payload.all_finite())
        throw NumericError("round " + std::to_string(t_) + " aborted: non-finite GradPacket " +
                           std::to_string(p.producer) + "->" + std::to_string(p.consumer));
      by_lane[p.lane].emplace(p.producer, std::move(p.payload));
      ++received;
    }
    if (cfg_.mode == MessageMode::emerged)
      for (std::size_t b = 0; b < lanes; ++b)
        for (int k : receivers_[i])
          if (!by_lane[b].contains(k))
            throw ProtocolError("missing GradPacket for edge " + std::to_string(ns.id()) + "->" + std::to_string(k) +
                                " (lane " + std::to_string(b) + ", t=" + std::to_string(t_) + ")");

    std::vector<std::pair<ad::Var<T>, Tensor<T>>> seeds;
    for (std::size_t b = 0; b < lanes; ++b) {
      if (by_lane[b].empty()) continue;
      Tensor<T> g(Shape{ns.model.config().msg_dim});
      for (const auto& [k, payload] : by_lane[b]) g += payload;
      seeds.emplace_back(sc.y[b], std::move(g));
    }
    auto assembled = report_.local[i];
    if (!seeds.empty()) {
      try {
        const auto corr = theta_only(sc.tape->vjp(seeds), ns.model.params());
        accumulate(assembled, corr);
      } catch (const NumericError& e) {
        throw NumericError("round " + std::to_string(t_) + " aborted at node " + std::to_string(ns.id()) + ": " +
                           e.what());
      }
    }
    for (const auto& [name, g] : assembled)
      if (!g.all_finite())
        throw NumericError("round " + std::to_string(t_) + " aborted: node " + std::to_string(ns.id()) +
                           " gradient for " + name + " is non-finite");
    if (apply_) apply_update(i, assembled);

    for (std::size_t b = 0; b < lanes; ++b) {
      auto& c = ns.lanes[b];
      report_.start_hidden[i].push_back(sc.h[b].value());
      report_.mbar[i].push_back(sc.mbar[b] ? std::optional<Tensor<T>>(sc.mbar[b]->value()) : std::nullopt);
      report_.sent_payload[i].push_back(sc.sent[b]);
      c.valid = true;
      c.x_prev = (*frames_)[i][b][0];
      c.h_prev = sc.h[b].value();
      c.mbar_prev = report_.mbar[i].back();
    }
    report_.assembled[i] = std::move(assembled);
    std::lock_guard lock(report_mu_);
    report_.packets += received;
  }

  std::vector<NodeState<T>> nodes_;
  world::Topology topo_;
  ProtocolConfig cfg_;
  std::unique_ptr<Scheduler> sched_;
  std::map<int, std::size_t> index_;
  std::vector<std::vector<int>> receivers_;
  std::vector<Mailbox> msg_box_;
  std::vector<Mailbox> grad_box_;
  std::vector<NodeScratch> scratch_;
  std::mutex report_mu_;
  RoundReport<T> report_;
  const RoundFrames<T>* frames_ = nullptr;
  long t_ = 0;
  bool apply_ = true;
  std::atomic<Phase> phase_{Phase::broadcast};
};

template <Real T>
struct OracleResult {
  std::vector<std::map<std::string, Tensor<T>>> grads;  // per node index, theta slices
  std::vector<T> node_loss;
  T total_loss{0};
};

/**
 * Reference gradient for tests: every node's computation on one joint tape,
 * with each receiver consuming the sender's message variable directly, then a
 * single backward pass of the summed loss. Supports emerged and zero modes.
 */
template <Real T>
OracleResult<T> centralized_oracle(const std::vector<NodeState<T>>& nodes, const world::Topology& topo,
                                   const ProtocolConfig& cfg, const RoundFrames<T>& frames) {
  if (cfg.mode == MessageMode::random) throw std::invalid_argument("oracle does not model random messages");
  ad::Tape<T> tape;
  const std::size_t N = nodes.size();
  std::map<int, std::size_t> index;
  for (std::size_t i = 0; i < N; ++i) index[nodes[i].id()] = i;
  const std::size_t lanes = frames.front().size();

  std::vector<model::Theta<T>> theta(N);
  std::vector<std::vector<ad::Var<T>>> h(N), y(N);
  for (std::size_t i = 0; i < N; ++i) {
    const std::string prefix = "n" + std::to_string(nodes[i].id()) + "/";
    for (const auto& s : nodes[i].model.params().slices())
      theta[i].emplace(s.name, tape.input(prefix + s.name, s.tensor));
    for (std::size_t b = 0; b < lanes; ++b) {
      const auto& carry = b < nodes[i].lanes.size() ? nodes[i].lanes[b] : LaneCarry<T>{};
      h[i].push_back(start_state(tape, theta[i], carry, nodes[i].model.config()));
      y[i].push_back(model::message_head(theta[i], h[i].back()));
    }
  }
  OracleResult<T> res;
  std::optional<ad::Var<T>> total;
  for (std::size_t i = 0; i < N; ++i) {
    const auto& mcfg = nodes[i].model.config();
    auto it = topo.find(nodes[i].id());
    std::vector<int> senders = it == topo.end() ? std::vector<int>{} : it->second;
    if (mcfg.self_message) senders.push_back(nodes[i].id());
    std::sort(senders.begin(), senders.end());
    std::optional<ad::Var<T>> node_total;
    for (std::size_t b = 0; b < lanes; ++b) {
      std::vector<ad::Var<T>> vars;
      for (int s : senders)
        vars.push_back(cfg.mode == MessageMode::emerged ? y[index.at(s)][b]
                                                        : tape.constant(Tensor<T>(Shape{mcfg.msg_dim})));
      std::optional<ad::Var<T>> mbar;
      if (!vars.empty()) mbar = model::mean_payload(vars);
      ad::Var<T> l = rollout_loss(theta[i], h[i][b], mbar, frames[i][b], cfg.horizon, mcfg.rollout_msgs);
      node_total = node_total ? ad::add(*node_total, l) : l;
    }
    res.node_loss.push_back(node_total->value().item());
    total = total ? ad::add(*total, *node_total) : *node_total;
  }
  res.total_loss = total->value().item();
  auto g = tape.backward(*total);
  for (std::size_t i = 0; i < N; ++i) {
    const std::string prefix = "n" + std::to_string(nodes[i].id()) + "/";
    std::map<std::string, Tensor<T>> gi;
    for (const auto& s : nodes[i].model.params().slices()) gi.emplace(s.name, g.at(prefix + s.name));
    res.grads.push_back(std::move(gi));
  }
  return res;
}

/// Node states with fresh parameters and optimizer, one per view, wired per topology.
template <Real T>
std::vector<NodeState<T>> make_nodes(const std::vector<world::ViewSpec>& views, const world::Topology& topo,
                                     const model::ModelConfig& mcfg, const AdamConfig& acfg, std::uint64_t seed,
                                     model::Init init = model::Init::random) {
  std::vector<NodeState<T>> out;
  for (const auto& v : views) {
    world::Rng rng(seed * 1000003ULL + std::uint64_t(v.id));
    auto params = model::make_params<T>(mcfg, init, rng);
    auto it = topo.find(v.id);
    out.push_back(NodeState<T>{model::NodeModel<T>(v.id, it == topo.end() ? std::vector<int>{} : it->second, mcfg,
                                                   std::move(params)),
                               Adam<T>(acfg), {}, world::Rng(seed * 7919ULL + std::uint64_t(v.id) + 17)});
  }
  return out;
}

}  // namespace ssta::protocol
