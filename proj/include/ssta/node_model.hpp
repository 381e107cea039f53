#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ssta/autodiff.hpp"
#include "ssta/params.hpp"
#include "ssta/world.hpp"

/**
 * @file node_model.hpp
 * @brief Per-node recurrent frame predictor and message generator.
 *
 * One step of the cell:
 *
 *   m = mean of incoming payloads                       (skipped when K^i is empty)
 *   h' = tanh(conv(x, enc) + conv(h, rec) + bcast(dense(m, msg_in)))
 *   prediction = sigmoid(conv(h', out))
 *   message    = dense(gap(h'), msg_head)
 *
 * Desk-scale defaults are 8 hidden channels, 16-dim messages and 3x3 kernels.
 * The reference large-scale configuration used 128 hidden channels and 5x5
 * kernels; those values are kept in ModelConfig::paper_scale().
 */
namespace ssta::model {

class ProtocolError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// What the rollout feeds as message input for steps after the first.
enum class RolloutMessages { hold, zero };

struct ModelConfig {
  std::size_t hidden_channels = 8;
  std::size_t msg_dim = 16;
  std::size_t kernel = 3;
  std::size_t height = 16;
  std::size_t width = 16;
  RolloutMessages rollout_msgs = RolloutMessages::hold;
  bool self_message = false;
  bool freeze_msg_head = false;

  static ModelConfig paper_scale() {
    ModelConfig c;
    c.hidden_channels = 128;
    c.kernel = 5;
    c.height = 128;
    c.width = 128;
    return c;
  }
};

inline const std::vector<std::string>& msg_head_slices() {
  static const std::vector<std::string> names{"msg_head_weight", "msg_head_bias"};
  return names;
}

template <Real T>
T uniform_real(world::Rng& rng, T lo, T hi) {
  const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return static_cast<T>(lo + (hi - lo) * u);
}

template <Real T>
T standard_normal(world::Rng& rng) {
  // Box-Muller on our own uniform draws keeps streams identical across standard libraries.
  double u1 = 0.0;
  while (u1 <= 0.0) u1 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  const double u2 = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return static_cast<T>(std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2));
}

enum class Init { random, zero };

/**
 * Builds the named parameter slices. Random init draws Glorot-uniform weights
 * and zero biases; the output conv starts at zero so an untrained model
 * predicts a uniform 0.5 frame.
 */
template <Real T>
ParameterSet<T> make_params(const ModelConfig& c, Init init, world::Rng& rng) {
  const std::size_t C = c.hidden_channels, D = c.msg_dim, k = c.kernel;
  ParameterSet<T> p;
  auto glorot = [&](Shape shape, std::size_t fan_in, std::size_t fan_out) {
    Tensor<T> t(std::move(shape));
    if (init == Init::random) {
      const T a = static_cast<T>(std::sqrt(6.0 / double(fan_in + fan_out)));
      for (T& v : t.data()) v = uniform_real<T>(rng, -a, a);
    }
    return t;
  };
  p.add("enc_kernel", glorot({C, 1, k, k}, k * k, C * k * k));
  p.add("enc_bias", Tensor<T>(Shape{C}));
  p.add("rec_kernel", glorot({C, C, k, k}, C * k * k, C * k * k));
  p.add("rec_bias", Tensor<T>(Shape{C}));
  p.add("msg_in_weight", glorot({C, D}, D, C));
  p.add("msg_in_bias", Tensor<T>(Shape{C}));
  p.add("out_kernel", Tensor<T>(Shape{1, C, k, k}));
  p.add("out_bias", Tensor<T>(Shape{1}));
  p.add("msg_head_weight", glorot({D, C}, C, D));
  p.add("msg_head_bias", Tensor<T>(Shape{D}));
  return p;
}

/// Checks that a parameter set has exactly the slice shapes the config implies.
template <Real T>
void validate_params(const ParameterSet<T>& p, const ModelConfig& c) {
  world::Rng rng(0);
  const auto ref = make_params<T>(c, Init::zero, rng);
  if (p.slices().size() != ref.slices().size())
    throw ShapeError("parameter set has " + std::to_string(p.slices().size()) + " slices, expected " +
                     std::to_string(ref.slices().size()));
  for (const auto& s : ref.slices())
    if (p[s.name].shape() != s.tensor.shape())
      throw ShapeError("slice " + s.name + " has shape " + shape_str(p[s.name].shape()) + ", expected " +
                       shape_str(s.tensor.shape()));
}

template <Real T>
struct HiddenState {
  Tensor<T> grid;  // [C_h,H,W]
  int node = 0;
  long t = 0;

  static HiddenState zeros(const ModelConfig& c, int node, long t = 0) {
    return {Tensor<T>(Shape{c.hidden_channels, c.height, c.width}), node, t};
  }
};

template <Real T>
struct Message {
  int sender = 0;
  long t = 0;
  std::size_t lane = 0;  // mini-batch sequence index
  Tensor<T> payload;     // [d_msg]
};

template <Real T>
struct MessageSet {
  int receiver = 0;
  long t = 0;
  std::map<int, Message<T>> messages;  // keyed by sender id; iteration order is id order
};

/// Rejects a message set whose senders differ from `expected`, naming missing and extra ids.
template <Real T>
void check_message_set(const MessageSet<T>& set, const std::vector<int>& expected, std::size_t msg_dim) {
  std::set<int> want(expected.begin(), expected.end()), have;
  for (const auto& [id, m] : set.messages) have.insert(id);
  if (want != have) {
    std::string missing, extra;
    for (int id : want)
      if (!have.contains(id)) missing += (missing.empty() ? "" : ",") + std::to_string(id);
    for (int id : have)
      if (!want.contains(id)) extra += (extra.empty() ? "" : ",") + std::to_string(id);
    throw ProtocolError("node " + std::to_string(set.receiver) + " message set mismatch: missing {" + missing +
                        "} extra {" + extra + "}");
  }
  for (const auto& [id, m] : set.messages) {
    if (m.t != set.t)
      throw ProtocolError("message from " + std::to_string(id) + " has timestep " + std::to_string(m.t) +
                          ", receiver is at " + std::to_string(set.t));
    if (m.payload.rank() != 1 || m.payload.dim(0) != msg_dim)
      throw ShapeError("message payload from " + std::to_string(id) + " has shape " +
                       shape_str(m.payload.shape()) + ", expected [" + std::to_string(msg_dim) + "]");
    if (!m.payload.all_finite()) throw NumericError("non-finite message payload from " + std::to_string(id));
  }
}

template <Real T>
using Theta = std::map<std::string, ad::Var<T>>;

/// Mean over payload vars, summed in the given order. Requires at least one payload.
template <Real T>
ad::Var<T> mean_payload(const std::vector<ad::Var<T>>& payloads) {
  if (payloads.empty()) throw std::invalid_argument("mean_payload of no messages");
  ad::Var<T> acc = payloads.front();
  for (std::size_t i = 1; i < payloads.size(); ++i) acc = ad::add(acc, payloads[i]);
  return payloads.size() == 1 ? acc : ad::scale(acc, T{1} / static_cast<T>(payloads.size()));
}

/// Hidden update h' from input [1,H,W], previous h [C,H,W] and optional aggregated message [d].
template <Real T>
ad::Var<T> cell(const Theta<T>& th, ad::Var<T> input, ad::Var<T> h, std::optional<ad::Var<T>> mbar) {
  ad::Var<T> pre = ad::add(ad::conv2d(input, th.at("enc_kernel"), th.at("enc_bias")),
                           ad::conv2d(h, th.at("rec_kernel"), th.at("rec_bias")));
  if (mbar) {
    ad::Var<T> m = ad::dense(*mbar, th.at("msg_in_weight"), th.at("msg_in_bias"));
    pre = ad::add(pre, ad::broadcast_spatial(m, input.shape()[1], input.shape()[2]));
  }
  return ad::tanh(pre);
}

template <Real T>
ad::Var<T> prediction_head(const Theta<T>& th, ad::Var<T> h) {
  return ad::sigmoid(ad::conv2d(h, th.at("out_kernel"), th.at("out_bias")));
}

template <Real T>
ad::Var<T> message_head(const Theta<T>& th, ad::Var<T> h) {
  return ad::dense(ad::global_avg_pool(h), th.at("msg_head_weight"), th.at("msg_head_bias"));
}

template <Real T>
struct StepVars {
  ad::Var<T> prediction;  // [1,H,W]
  ad::Var<T> hidden;      // [C,H,W]
  ad::Var<T> message;     // [d]
};

template <Real T>
StepVars<T> step_vars(const Theta<T>& th, ad::Var<T> input, ad::Var<T> h, std::optional<ad::Var<T>> mbar) {
  ad::Var<T> h2 = cell(th, input, h, mbar);
  return {prediction_head(th, h2), h2, message_head(th, h2)};
}

template <Real T>
struct RolloutVars {
  std::vector<ad::Var<T>> predictions;
  std::vector<ad::Var<T>> hiddens;
  std::vector<ad::Var<T>> messages;
};

/**
 * Recursive rollout: the first step consumes the observed frame, each later
 * step consumes the previous prediction. The message input is held at mbar for
 * every step (or zero-filled after the first under RolloutMessages::zero).
 */
template <Real T>
RolloutVars<T> rollout_vars(const Theta<T>& th, ad::Var<T> x, ad::Var<T> h, std::optional<ad::Var<T>> mbar,
                            std::size_t horizon, RolloutMessages mode = RolloutMessages::hold) {
  if (horizon == 0) throw std::invalid_argument("rollout horizon must be >= 1");
  RolloutVars<T> out;
  ad::Var<T> input = x, state = h;
  std::optional<ad::Var<T>> zero_msg;
  for (std::size_t s = 0; s < horizon; ++s) {
    std::optional<ad::Var<T>> m = mbar;
    if (s > 0 && mbar && mode == RolloutMessages::zero) {
      if (!zero_msg) zero_msg = x.tape->constant(Tensor<T>(mbar->shape()));
      m = zero_msg;
    }
    StepVars<T> sv = step_vars(th, input, state, m);
    out.predictions.push_back(sv.prediction);
    out.hiddens.push_back(sv.hidden);
    out.messages.push_back(sv.message);
    input = sv.prediction;
    state = sv.hidden;
  }
  return out;
}

/// Frame [H,W] to model input [1,H,W].
template <Real T>
Tensor<T> frame_input(const Tensor<double>& frame) {
  if (frame.rank() == 3) return frame.template cast<T>();
  return frame.template cast<T>().reshaped({1, frame.dim(0), frame.dim(1)});
}

template <Real T>
struct StepResult {
  Tensor<T> prediction;  // [1,H,W]
  HiddenState<T> hidden;
  Message<T> message;
};

template <Real T>
struct RolloutResult {
  std::vector<Tensor<T>> predictions;
  std::vector<HiddenState<T>> hiddens;
  std::vector<Message<T>> messages;
};

/**
 * A single node's predictor: id, incoming neighbour set K^i, hyperparameters and
 * weights. Stateless apart from the weights; runtime state lives in callers.
 */
template <Real T>
class NodeModel {
 public:
  NodeModel(int id, std::vector<int> neighbors, ModelConfig cfg, ParameterSet<T> params)
      : id_(id), neighbors_(std::move(neighbors)), cfg_(cfg), params_(std::move(params)) {
    validate_params(params_, cfg_);
    std::sort(neighbors_.begin(), neighbors_.end());
  }

  int id() const noexcept { return id_; }
  const std::vector<int>& neighbors() const noexcept { return neighbors_; }
  const ModelConfig& config() const noexcept { return cfg_; }
  ParameterSet<T>& params() noexcept { return params_; }
  const ParameterSet<T>& params() const noexcept { return params_; }

  /// Sender ids a message set for this node must contain.
  std::vector<int> expected_senders() const {
    std::vector<int> s = neighbors_;
    if (cfg_.self_message) {
      s.push_back(id_);
      std::sort(s.begin(), s.end());
    }
    return s;
  }

  /// Aggregated message var on `tape` for a validated set; nullopt when the node has no senders.
  std::optional<ad::Var<T>> aggregate(ad::Tape<T>& tape, const MessageSet<T>& msgs) const {
    check_message_set(msgs, expected_senders(), cfg_.msg_dim);
    if (msgs.messages.empty()) return std::nullopt;
    std::vector<ad::Var<T>> vars;
    for (const auto& [id, m] : msgs.messages) vars.push_back(tape.constant(m.payload));
    return mean_payload(vars);
  }

  StepResult<T> step(const Tensor<T>& input, const HiddenState<T>& h, const MessageSet<T>& msgs) const {
    auto r = rollout(input, h, msgs, 1);
    return {std::move(r.predictions[0]), std::move(r.hiddens[0]), std::move(r.messages[0])};
  }

  RolloutResult<T> rollout(const Tensor<T>& x, const HiddenState<T>& h, const MessageSet<T>& msgs,
                           std::size_t horizon) const {
    if (horizon == 0) throw std::invalid_argument("rollout horizon must be >= 1");
    if (!x.all_finite()) throw NumericError("rollout input frame has non-finite entries");
    ad::Tape<T> tape;
    Theta<T> th;
    for (const auto& s : params_.slices()) th.emplace(s.name, tape.constant(s.tensor));
    auto mbar = aggregate(tape, msgs);
    auto rv = rollout_vars(th, tape.constant(x), tape.constant(h.grid), mbar, horizon, cfg_.rollout_msgs);
    RolloutResult<T> out;
    for (std::size_t s = 0; s < horizon; ++s) {
      const long t = h.t + long(s) + 1;
      out.predictions.push_back(tape.value(rv.predictions[s]));
      out.hiddens.push_back({tape.value(rv.hiddens[s]), id_, t});
      out.messages.push_back({id_, t, 0, tape.value(rv.messages[s])});
    }
    return out;
  }

 private:
  int id_;
  std::vector<int> neighbors_;
  ModelConfig cfg_;
  ParameterSet<T> params_;
};

/**
 * Receding-horizon runtime for deployment. Each new observation re-predicts the
 * full horizon starting from the hidden state produced by the first step of the
 * previous rollout; every other state of that rollout is dropped.
 */
template <Real T>
class RecedingPredictor {
 public:
  explicit RecedingPredictor(const NodeModel<T>& model, std::size_t horizon) : model_(&model), horizon_(horizon) {
    if (horizon == 0) throw std::invalid_argument("rollout horizon must be >= 1");
  }

  /// First rollout from the all-zero hidden state.
  const RolloutResult<T>& start(const Tensor<T>& x, const MessageSet<T>& msgs, long t = 0) {
    last_ = model_->rollout(x, HiddenState<T>::zeros(model_->config(), model_->id(), t), msgs, horizon_);
    return *last_;
  }

  const RolloutResult<T>& advance(const Tensor<T>& x_next, const MessageSet<T>& msgs) {
    if (!last_) throw std::logic_error("receding advance called before any rollout");
    HiddenState<T> h = last_->hiddens.front();
    last_ = model_->rollout(x_next, h, msgs, horizon_);
    return *last_;
  }

  bool has_rollout() const noexcept { return last_.has_value(); }
  const RolloutResult<T>& last() const { return *last_; }

  /// State the next advance will start from.
  const HiddenState<T>& retained_state() const {
    if (!last_) throw std::logic_error("no rollout yet");
    return last_->hiddens.front();
  }

 private:
  const NodeModel<T>* model_;
  std::size_t horizon_;
  std::optional<RolloutResult<T>> last_;
};

struct PretrainResult {
  double initial_mse = 0;
  double final_mse = 0;
};

/**
 * Pre-trains a small autoencoder on frames and copies its encoder into the
 * message pathway: conv encoder (shared shape with enc_kernel/enc_bias), global
 * pooling, dense to d_msg (msg_head_*), then a dense decoder back to H*W pixels
 * with a sigmoid. Trained by MSE reconstruction with Adam over mini-batches of 10.
 */
template <Real T>
PretrainResult pretrain_message_ae(ParameterSet<T>& params, const ModelConfig& cfg,
                                   const std::vector<Tensor<double>>& frames, std::size_t epochs, double lr,
                                   std::uint64_t seed) {
  if (frames.empty()) throw std::invalid_argument("pretrain_message_ae: empty frame sample");
  const std::size_t HW = cfg.height * cfg.width;
  world::Rng rng(seed);
  ParameterSet<T> ae;
  for (const char* n : {"enc_kernel", "enc_bias", "msg_head_weight", "msg_head_bias"}) ae.add(n, params[n]);
  {
    Tensor<T> w(Shape{HW, cfg.msg_dim});
    const T a = static_cast<T>(std::sqrt(6.0 / double(HW + cfg.msg_dim)));
    for (T& v : w.data()) v = uniform_real<T>(rng, -a, a);
    ae.add("dec_weight", std::move(w));
    ae.add("dec_bias", Tensor<T>(Shape{HW}));
  }
  std::vector<Tensor<T>> inputs;
  for (const auto& f : frames) inputs.push_back(frame_input<T>(f));

  auto batch_loss = [&](const ParameterSet<T>& p, std::size_t begin, std::size_t end,
                        std::map<std::string, Tensor<T>>* grads) {
    ad::Tape<T> tape;
    auto th = grads ? p.bind(tape) : Theta<T>{};
    if (!grads)
      for (const auto& s : p.slices()) th.emplace(s.name, tape.constant(s.tensor));
    std::optional<ad::Var<T>> total;
    for (std::size_t i = begin; i < end; ++i) {
      ad::Var<T> x = tape.constant(inputs[i]);
      ad::Var<T> h = ad::tanh(ad::conv2d(x, th.at("enc_kernel"), th.at("enc_bias")));
      ad::Var<T> z = message_head(th, h);
      ad::Var<T> r = ad::sigmoid(ad::reshape(ad::dense(z, th.at("dec_weight"), th.at("dec_bias")),
                                             {1, cfg.height, cfg.width}));
      ad::Var<T> l = ad::mse_loss(r, x);
      total = total ? ad::add(*total, l) : l;
    }
    ad::Var<T> loss = ad::scale(*total, T{1} / static_cast<T>(end - begin));
    if (grads) *grads = tape.backward(loss);
    return static_cast<double>(tape.value(loss).item());
  };
  auto full_mse = [&] { return batch_loss(ae, 0, inputs.size(), nullptr); };

  PretrainResult res;
  res.initial_mse = full_mse();
  Adam<T> opt(AdamConfig{lr});
  constexpr std::size_t kBatch = 10;
  for (std::size_t e = 0; e < epochs; ++e)
    for (std::size_t b = 0; b < inputs.size(); b += kBatch) {
      std::map<std::string, Tensor<T>> g;
      batch_loss(ae, b, std::min(inputs.size(), b + kBatch), &g);
      opt.step(ae, g);
    }
  res.final_mse = epochs ? full_mse() : res.initial_mse;
  for (const char* n : {"enc_kernel", "enc_bias", "msg_head_weight", "msg_head_bias"}) params[n] = ae[n];
  return res;
}

}  // namespace ssta::model
