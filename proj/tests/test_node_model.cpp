#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ssta/node_model.hpp"
#include "test_util.hpp"

using namespace ssta;
using namespace ssta::model;
using test::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.height = c.width = 6;
  c.hidden_channels = 3;
  c.msg_dim = 4;
  return c;
}

ParameterSet<double> random_params(const ModelConfig& c, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  world::Rng wr(seed);
  auto p = make_params<double>(c, Init::zero, wr);
  for (auto& s : p.slices()) s.tensor = random_tensor(s.tensor.shape(), rng, -scale, scale);
  return p;
}

MessageSet<double> random_messages(const std::vector<int>& senders, int receiver, long t, std::size_t d,
                                   std::mt19937_64& rng) {
  MessageSet<double> set{receiver, t, {}};
  for (int s : senders) set.messages.emplace(s, Message<double>{s, t, 0, random_tensor({d}, rng)});
  return set;
}

// Straight-line transcription of the cell equations with explicit loops.
struct Reference {
  Tensor<double> pred, h, y;
};

Reference reference_step(const ParameterSet<double>& p, const ModelConfig& c, const Tensor<double>& x,
                         const Tensor<double>& h, const std::vector<Tensor<double>>& msgs) {
  const std::size_t C = c.hidden_channels, D = c.msg_dim, H = c.height, W = c.width, K = c.kernel;
  const long r = long(K / 2);
  auto conv_at = [&](const Tensor<double>& in, std::size_t cin, const Tensor<double>& k, std::size_t co,
                     std::size_t y, std::size_t xx) {
    double s = 0;
    for (std::size_t ci = 0; ci < cin; ++ci)
      for (long dy = -r; dy <= r; ++dy)
        for (long dx = -r; dx <= r; ++dx) {
          const long yy = long(y) + dy, xs = long(xx) + dx;
          if (yy < 0 || xs < 0 || yy >= long(H) || xs >= long(W)) continue;
          s += k[((co * cin + ci) * K + std::size_t(dy + r)) * K + std::size_t(dx + r)] *
               in[(ci * H + std::size_t(yy)) * W + std::size_t(xs)];
        }
    return s;
  };
  std::vector<double> mi(C, 0.0);
  if (!msgs.empty()) {
    std::vector<double> mbar(D, 0.0);
    for (const auto& m : msgs)
      for (std::size_t d = 0; d < D; ++d) mbar[d] += m[d];
    for (double& v : mbar) v /= double(msgs.size());
    for (std::size_t ch = 0; ch < C; ++ch) {
      mi[ch] = p["msg_in_bias"][ch];
      for (std::size_t d = 0; d < D; ++d) mi[ch] += p["msg_in_weight"][ch * D + d] * mbar[d];
    }
  }
  Reference out{Tensor<double>(Shape{1, H, W}), Tensor<double>(Shape{C, H, W}), Tensor<double>(Shape{D})};
  for (std::size_t ch = 0; ch < C; ++ch)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx)
        out.h[(ch * H + y) * W + xx] =
            std::tanh(conv_at(x, 1, p["enc_kernel"], ch, y, xx) + p["enc_bias"][ch] +
                      conv_at(h, C, p["rec_kernel"], ch, y, xx) + p["rec_bias"][ch] + mi[ch]);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t xx = 0; xx < W; ++xx)
      out.pred[y * W + xx] = 1.0 / (1.0 + std::exp(-(conv_at(out.h, C, p["out_kernel"], 0, y, xx) + p["out_bias"][0])));
  for (std::size_t d = 0; d < D; ++d) {
    double s = p["msg_head_bias"][d];
    for (std::size_t ch = 0; ch < C; ++ch) {
      double g = 0;
      for (std::size_t i = 0; i < H * W; ++i) g += out.h[ch * H * W + i];
      s += p["msg_head_weight"][d * C + ch] * g / double(H * W);
    }
    out.y[d] = s;
  }
  return out;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Step, ZeroParametersGiveHalfGrayAndZeroState) {
  auto c = small_config();
  world::Rng rng(1);
  NodeModel<double> m(1, {2}, c, make_params<double>(c, Init::zero, rng));
  std::mt19937_64 r(1);
  auto res = m.step(random_tensor({1, 6, 6}, r, 0, 1), HiddenState<double>::zeros(c, 1), random_messages({2}, 1, 0, 4, r));
  EXPECT_EQ(res.prediction, Tensor<double>(Shape{1, 6, 6}, 0.5));
  EXPECT_EQ(res.hidden.grid, Tensor<double>(Shape{3, 6, 6}));
  EXPECT_EQ(res.message.payload, Tensor<double>(Shape{4}));
}

TEST(Step, MatchesStraightLineFormula) {
  auto c = small_config();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 r(seed + 50);
    const auto p = random_params(c, seed);
    NodeModel<double> m(3, {1, 2}, c, p);
    const auto x = random_tensor({1, 6, 6}, r, 0, 1);
    const HiddenState<double> h{random_tensor({3, 6, 6}, r), 3, 0};
    const auto msgs = random_messages({1, 2}, 3, 0, 4, r);
    const auto got = m.step(x, h, msgs);
    const auto want = reference_step(p, c, x, h.grid, {msgs.messages.at(1).payload, msgs.messages.at(2).payload});
    EXPECT_LT(max_abs_diff(got.prediction, want.pred), 1e-12);
    EXPECT_LT(max_abs_diff(got.hidden.grid, want.h), 1e-12);
    EXPECT_LT(max_abs_diff(got.message.payload, want.y), 1e-12);
  }
}

TEST(Step, NoSendersMeansMessageSlicesHaveZeroGradient) {
  auto c = small_config();
  const auto p = random_params(c, 3);
  std::mt19937_64 r(3);
  ad::Tape<double> tape;
  auto th = p.bind(tape);
  auto sv = step_vars<double>(th, tape.constant(random_tensor({1, 6, 6}, r, 0, 1)),
                              tape.constant(random_tensor({3, 6, 6}, r)), std::nullopt);
  auto g = tape.backward(ad::add(ad::sum(sv.prediction), ad::sum(sv.message)));
  EXPECT_EQ(g.at("msg_in_weight"), Tensor<double>(Shape{3, 4}));
  EXPECT_EQ(g.at("msg_in_bias"), Tensor<double>(Shape{3}));
}

TEST(Step, MessageSetMismatchNamesSenders) {
  auto c = small_config();
  NodeModel<double> m(1, {2, 3}, c, random_params(c, 4));
  std::mt19937_64 r(4);
  try {
    m.step(random_tensor({1, 6, 6}, r, 0, 1), HiddenState<double>::zeros(c, 1), random_messages({2, 5}, 1, 0, 4, r));
    FAIL() << "expected ProtocolError";
  } catch (const ProtocolError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("missing {3}"), std::string::npos) << msg;
    EXPECT_NE(msg.find("extra {5}"), std::string::npos) << msg;
  }
}

TEST(Step, PredictionsStrictlyInsideUnitInterval) {
  auto c = small_config();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 r(seed);
    NodeModel<double> m(1, {2}, c, random_params(c, seed, 1.0));
    const auto res = m.step(random_tensor({1, 6, 6}, r, 0, 1), {random_tensor({3, 6, 6}, r), 1, 0},
                            random_messages({2}, 1, 0, 4, r));
    for (double v : res.prediction.data()) {
      EXPECT_GT(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
}

TEST(Step, SenderOrderDoesNotMatter) {
  auto c = small_config();
  NodeModel<double> m(1, {2, 3, 4}, c, random_params(c, 5));
  std::mt19937_64 r(5);
  const auto x = random_tensor({1, 6, 6}, r, 0, 1);
  const auto msgs = random_messages({2, 3, 4}, 1, 0, 4, r);
  MessageSet<double> reordered{1, 0, {}};
  for (int s : {4, 2, 3}) reordered.messages.emplace(s, msgs.messages.at(s));
  const auto a = m.step(x, HiddenState<double>::zeros(c, 1), msgs);
  const auto b = m.step(x, HiddenState<double>::zeros(c, 1), reordered);
  EXPECT_EQ(a.prediction, b.prediction);
  EXPECT_EQ(a.hidden.grid, b.hidden.grid);
}

TEST(Step, IncomingMessageGradientIsNonzero) {
  auto c = small_config();
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 r(seed);
    const auto p = random_params(c, seed + 100);
    ad::Tape<double> tape;
    auto th = p.bind(tape);
    auto msg = tape.input("msg", random_tensor({4}, r));
    auto target = tape.constant(random_tensor({1, 6, 6}, r, 0, 1));
    auto sv = step_vars<double>(th, tape.constant(random_tensor({1, 6, 6}, r, 0, 1)),
                                tape.constant(Tensor<double>(Shape{3, 6, 6})), msg);
    const auto g = tape.backward(ad::sse_loss(sv.prediction, target));
    double n = 0;
    for (double v : g.at("msg").data()) n += v * v;
    EXPECT_GT(n, 0.0) << "seed " << seed;
  }
}

TEST(Rollout, HorizonOneEqualsStep) {
  auto c = small_config();
  NodeModel<double> m(1, {2}, c, random_params(c, 6));
  std::mt19937_64 r(6);
  const auto x = random_tensor({1, 6, 6}, r, 0, 1);
  const HiddenState<double> h{random_tensor({3, 6, 6}, r), 1, 0};
  const auto msgs = random_messages({2}, 1, 0, 4, r);
  const auto ro = m.rollout(x, h, msgs, 1);
  const auto st = m.step(x, h, msgs);
  EXPECT_EQ(ro.predictions[0], st.prediction);
  EXPECT_EQ(ro.hiddens[0].grid, st.hidden.grid);
  EXPECT_EQ(ro.messages[0].payload, st.message.payload);
}

TEST(Rollout, ZeroParametersGiveHalfGrayEveryStep) {
  auto c = small_config();
  world::Rng wr(0);
  NodeModel<double> m(1, {}, c, make_params<double>(c, Init::zero, wr));
  std::mt19937_64 r(7);
  const auto ro = m.rollout(random_tensor({1, 6, 6}, r, 0, 1), HiddenState<double>::zeros(c, 1), {1, 0, {}}, 3);
  ASSERT_EQ(ro.predictions.size(), 3u);
  for (const auto& p : ro.predictions) EXPECT_EQ(p, Tensor<double>(Shape{1, 6, 6}, 0.5));
}

TEST(Rollout, EqualsManualChainOfSteps) {
  auto c = small_config();
  NodeModel<double> m(1, {2, 3}, c, random_params(c, 8));
  std::mt19937_64 r(8);
  const auto x = random_tensor({1, 6, 6}, r, 0, 1);
  const auto msgs = random_messages({2, 3}, 1, 0, 4, r);
  HiddenState<double> h{random_tensor({3, 6, 6}, r), 1, 0};
  const auto ro = m.rollout(x, h, msgs, 4);
  Tensor<double> input = x;
  for (std::size_t s = 0; s < 4; ++s) {
    const auto st = m.step(input, h, msgs);
    EXPECT_EQ(ro.predictions[s], st.prediction) << s;
    EXPECT_EQ(ro.hiddens[s].grid, st.hidden.grid) << s;
    input = st.prediction;
    h = st.hidden;
  }
}

TEST(Rollout, ZeroHorizonRejected) {
  auto c = small_config();
  NodeModel<double> m(1, {}, c, random_params(c, 9));
  EXPECT_THROW(m.rollout(Tensor<double>(Shape{1, 6, 6}), HiddenState<double>::zeros(c, 1), {1, 0, {}}, 0),
               std::invalid_argument);
}

TEST(Receding, AdvanceBeforeRolloutRejected) {
  auto c = small_config();
  NodeModel<double> m(1, {}, c, random_params(c, 10));
  RecedingPredictor<double> rp(m, 3);
  EXPECT_THROW(rp.advance(Tensor<double>(Shape{1, 6, 6}), {1, 0, {}}), std::logic_error);
}

TEST(Receding, ZeroParametersKeepZeroState) {
  auto c = small_config();
  world::Rng wr(0);
  NodeModel<double> m(1, {}, c, make_params<double>(c, Init::zero, wr));
  RecedingPredictor<double> rp(m, 2);
  std::mt19937_64 r(11);
  rp.start(random_tensor({1, 6, 6}, r, 0, 1), {1, 0, {}});
  rp.advance(random_tensor({1, 6, 6}, r, 0, 1), {1, 1, {}});
  rp.advance(random_tensor({1, 6, 6}, r, 0, 1), {1, 2, {}});
  EXPECT_EQ(rp.retained_state().grid, Tensor<double>(Shape{3, 6, 6}));
}

TEST(Receding, StreamingEqualsHandThreadedRollouts) {
  auto c = small_config();
  NodeModel<double> m(1, {2}, c, random_params(c, 12));
  std::mt19937_64 r(12);
  std::vector<Tensor<double>> xs;
  std::vector<MessageSet<double>> ms;
  for (long t = 0; t < 5; ++t) {
    xs.push_back(random_tensor({1, 6, 6}, r, 0, 1));
    ms.push_back(random_messages({2}, 1, t, 4, r));
  }
  RecedingPredictor<double> rp(m, 3);
  std::vector<RolloutResult<double>> streamed;
  streamed.push_back(rp.start(xs[0], ms[0]));
  for (std::size_t t = 1; t < 5; ++t) {
    const auto prev_first = rp.last().hiddens.front().grid;
    streamed.push_back(rp.advance(xs[t], ms[t]));
    EXPECT_EQ(rp.retained_state().grid, streamed.back().hiddens.front().grid);
    (void)prev_first;
  }
  HiddenState<double> h = HiddenState<double>::zeros(c, 1);
  for (std::size_t t = 0; t < 5; ++t) {
    const auto manual = m.rollout(xs[t], h, ms[t], 3);
    for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(streamed[t].predictions[s], manual.predictions[s]);
    h = manual.hiddens.front();
  }
}

TEST(Pretrain, ConstantFramesReconstructed) {
  auto c = small_config();
  c.height = c.width = 8;
  world::Rng wr(1);
  auto p = make_params<double>(c, Init::random, wr);
  std::vector<Tensor<double>> frames(100, Tensor<double>(Shape{8, 8}, 0.3));
  const auto res = pretrain_message_ae(p, c, frames, 200, 1e-3, 7);
  EXPECT_LT(res.final_mse, 1e-3);
  EXPECT_LT(res.final_mse, res.initial_mse);
}

TEST(Pretrain, ZeroEpochsLeavesWeights) {
  auto c = small_config();
  world::Rng wr(2);
  auto p = make_params<double>(c, Init::random, wr);
  const auto before = p;
  std::vector<Tensor<double>> frames(10, Tensor<double>(Shape{6, 6}, 0.5));
  pretrain_message_ae(p, c, frames, 0, 1e-3, 1);
  EXPECT_EQ(p, before);
  EXPECT_THROW(pretrain_message_ae(p, c, {}, 1, 1e-3, 1), std::invalid_argument);
}

TEST(Pretrain, SeededRunsAgree) {
  auto c = small_config();
  std::mt19937_64 r(3);
  std::vector<Tensor<double>> frames;
  for (int i = 0; i < 20; ++i) frames.push_back(random_tensor({6, 6}, r, 0, 1));
  auto run = [&] {
    world::Rng wr(4);
    auto p = make_params<double>(c, Init::random, wr);
    pretrain_message_ae(p, c, frames, 3, 1e-3, 9);
    return p;
  };
  EXPECT_EQ(run(), run());
}
