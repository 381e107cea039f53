#pragma once

#include <cmath>
#include <cstdio>
#include <functional>

#include "ssta/training.hpp"

namespace ssta::experiments {

namespace fs = std::filesystem;

/// One arm of a comparison: a training configuration applied to every seed.
struct Arm {
  std::string name;
  training::TrainConfig train;
};

struct ExperimentSpec {
  std::string name;
  world::WorldConfig world;  // seed is replaced per repetition
  std::size_t timesteps = 250;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<Arm> arms;
};

struct Stat {
  double mean = 0;
  double sd = 0;
};

inline Stat stat_of(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= double(v.size());
  if (v.size() > 1) {
    for (double x : v) s.sd += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(s.sd / double(v.size() - 1));
  }
  return s;
}

struct RunRow {
  std::string arm;
  std::uint64_t seed = 0;
  metrics::MetricReport::Row metrics;
  double seconds = 0;
};

struct ArmSummary {
  std::string arm;
  Stat mse, psnr, ssim;
};

struct SuiteResult {
  std::string suite;
  std::vector<RunRow> runs;
  std::vector<ArmSummary> arms;
  bool passed = true;
  std::string verdict;

  const ArmSummary& arm(const std::string& name) const {
    for (const auto& a : arms)
      if (a.arm == name) return a;
    throw std::out_of_range("no arm '" + name + "' in suite " + suite);
  }
};

/// The world every arm of one repetition trains on.
inline Dataset dataset_for(const ExperimentSpec& spec, std::uint64_t seed) {
  auto wc = spec.world;
  wc.seed = seed;
  return generate_dataset(wc, spec.timesteps);
}

/// Runs every arm on every seed with paired datasets and summarizes mean and sd.
template <Real T>
SuiteResult run_suite(const ExperimentSpec& spec, std::ostream* log = nullptr) {
  if (spec.seeds.empty()) throw std::invalid_argument(spec.name + ": no seeds");
  SuiteResult res;
  res.suite = spec.name;
  for (std::uint64_t seed : spec.seeds) {
    const Dataset ds = dataset_for(spec, seed);
    for (const auto& arm : spec.arms) {
      auto cfg = arm.train;
      cfg.seed = seed;
      const auto t0 = std::chrono::steady_clock::now();
      const auto r = training::run_training<T>(ds, cfg);
      const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      res.runs.push_back({arm.name, seed, r.final_report.mean, dt});
      if (log)
        *log << spec.name << " " << arm.name << " seed " << seed << " mse " << training::fmt_real(r.final_report.mean.mse)
             << " (" << std::lround(dt) << " s)\n";
    }
  }
  for (const auto& arm : spec.arms) {
    std::vector<double> mse, psnr, ssim;
    for (const auto& r : res.runs)
      if (r.arm == arm.name) {
        mse.push_back(r.metrics.mse);
        psnr.push_back(r.metrics.psnr);
        ssim.push_back(r.metrics.ssim);
      }
    res.arms.push_back({arm.name, stat_of(mse), stat_of(psnr), stat_of(ssim)});
  }
  return res;
}

// ---------------------------------------------------------------- suites

/// Desk-scale sizes of the three ablation suites.
struct SuiteSizes {
  std::size_t message_nodes = 4;
  std::size_t message_k = 3;
  std::size_t message_timesteps = 250;
  std::size_t connectivity_timesteps = 250;
  std::size_t lifelong_nodes = 2;
  std::size_t lifelong_timesteps = 1500;
  std::size_t epochs = 40;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

inline ExperimentSpec messages_spec(const SuiteSizes& z) {
  ExperimentSpec s{"messages", {}, z.message_timesteps, z.seeds, {}};
  for (auto m : {protocol::MessageMode::emerged, protocol::MessageMode::zero, protocol::MessageMode::random}) {
    training::TrainConfig c;
    c.nodes = z.message_nodes;
    c.k = z.message_k;
    c.epochs = z.epochs;
    c.mode = m;
    s.arms.push_back({protocol::to_string(m), c});
  }
  return s;
}

inline ExperimentSpec connectivity_spec(const SuiteSizes& z) {
  ExperimentSpec s{"connectivity", {}, z.connectivity_timesteps, z.seeds, {}};
  for (std::size_t k : {2, 4, 7}) {
    training::TrainConfig c;
    c.nodes = 8;
    c.k = k;
    c.epochs = z.epochs;
    s.arms.push_back({"k=" + std::to_string(k), c});
  }
  return s;
}

inline ExperimentSpec lifelong_spec(const SuiteSizes& z) {
  ExperimentSpec s{"lifelong", {}, z.lifelong_timesteps, z.seeds, {}};
  auto arm = [&](lifelong::Strategy st, std::size_t D) {
    training::TrainConfig c;
    c.nodes = z.lifelong_nodes;
    c.k = z.lifelong_nodes - 1;
    c.epochs = 1;
    c.lifelong = st;
    c.buffer = D;
    return Arm{std::string(st == lifelong::Strategy::sw ? "SW" : "ID") + "(" + std::to_string(D) + ")", c};
  };
  s.arms = {arm(lifelong::Strategy::sw, 50), arm(lifelong::Strategy::sw, 150), arm(lifelong::Strategy::sw, 300),
            arm(lifelong::Strategy::id, 300)};
  return s;
}

inline std::string fmt_mean(double m) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", m);
  return buf;
}

/// Applies the suite's ordering check and fills `passed` / `verdict`.
inline void judge(SuiteResult& r) {
  auto m = [&](const char* a) { return r.arm(a).mse.mean; };
  std::ostringstream v;
  if (r.suite == "messages") {
    r.passed = m("emerged") < m("zero") && m("emerged") < m("random");
    v << "emerged " << fmt_mean(m("emerged")) << " vs zero " << fmt_mean(m("zero")) << ", random "
      << fmt_mean(m("random"));
  } else if (r.suite == "connectivity") {
    r.passed = m("k=7") <= m("k=2");
    const bool monotone = m("k=7") <= m("k=4") && m("k=4") <= m("k=2");
    v << "k=7 " << fmt_mean(m("k=7")) << " vs k=2 " << fmt_mean(m("k=2")) << " (k=4 " << fmt_mean(m("k=4"))
      << ", trend " << (monotone ? "monotone" : "not monotone") << ")";
  } else if (r.suite == "lifelong") {
    r.passed = m("ID(300)") < m("SW(300)") && m("SW(300)") < m("SW(50)");
    v << "ID(300) " << fmt_mean(m("ID(300)")) << " vs SW(300) " << fmt_mean(m("SW(300)")) << ", SW(50) "
      << fmt_mean(m("SW(50)")) << " (SW(150) " << fmt_mean(m("SW(150)")) << ")";
  } else {
    throw std::invalid_argument("unknown suite '" + r.suite + "'");
  }
  r.verdict = v.str();
}

inline ExperimentSpec suite_spec(const std::string& name, const SuiteSizes& z) {
  if (name == "messages") return messages_spec(z);
  if (name == "connectivity") return connectivity_spec(z);
  if (name == "lifelong") return lifelong_spec(z);
  throw std::invalid_argument("unknown suite '" + name + "' (messages|connectivity|lifelong|all)");
}

template <Real T>
SuiteResult run_named_suite(const std::string& name, const SuiteSizes& z, std::ostream* log = nullptr) {
  auto r = run_suite<T>(suite_spec(name, z), log);
  judge(r);
  return r;
}

// ---------------------------------------------------------------- output

inline std::string pm(const Stat& s, int prec) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f +- %.*f", prec, s.mean, prec, s.sd);
  return buf;
}

inline std::string render_table(const SuiteResult& r) {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof line, "%-12s %-26s %-20s %-20s\n", r.suite.c_str(), "MSE", "PSNR", "SSIM");
  os << line;
  for (const auto& a : r.arms) {
    std::snprintf(line, sizeof line, "%-12s %-26s %-20s %-20s\n", a.arm.c_str(), pm(a.mse, 6).c_str(),
                  pm(a.psnr, 2).c_str(), pm(a.ssim, 4).c_str());
    os << line;
  }
  return os.str();
}

/// Appends per-run rows and arm summaries to `runs.csv` and `summary.csv` in dir.
inline void write_csv(const SuiteResult& r, const fs::path& dir) {
  fs::create_directories(dir);
  const bool fresh_runs = !fs::exists(dir / "runs.csv"), fresh_sum = !fs::exists(dir / "summary.csv");
  std::ofstream runs(dir / "runs.csv", std::ios::app), sum(dir / "summary.csv", std::ios::app);
  using training::fmt_real;
  if (fresh_runs) runs << "suite,arm,seed,mse,psnr,ssim,seconds\n";
  for (const auto& x : r.runs)
    runs << r.suite << ',' << x.arm << ',' << x.seed << ',' << fmt_real(x.metrics.mse) << ','
         << fmt_real(x.metrics.psnr) << ',' << fmt_real(x.metrics.ssim) << ',' << fmt_real(x.seconds) << '\n';
  if (fresh_sum) sum << "suite,arm,mse_mean,mse_sd,psnr_mean,psnr_sd,ssim_mean,ssim_sd\n";
  for (const auto& a : r.arms)
    sum << r.suite << ',' << a.arm << ',' << fmt_real(a.mse.mean) << ',' << fmt_real(a.mse.sd) << ','
        << fmt_real(a.psnr.mean) << ',' << fmt_real(a.psnr.sd) << ',' << fmt_real(a.ssim.mean) << ','
        << fmt_real(a.ssim.sd) << '\n';
}

// ---------------------------------------------------------------- frame dumps

/// Binary 8-bit PGM of a [H,W] or [1,H,W] frame with intensities in [0,1].
template <Real T>
std::string encode_pgm(const Tensor<T>& f) {
  const std::size_t H = f.dim(f.rank() - 2), W = f.dim(f.rank() - 1);
  std::string out = "P5\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n";
  for (T v : f.data()) out.push_back(char(static_cast<unsigned char>(std::lround(std::clamp(double(v), 0.0, 1.0) * 255))));
  return out;
}

/**
 * Writes ground truth and predicted frames x_{t+1..t+T} for every view of the
 * checkpoint, predicted from time t after streaming from max(0, t - warmup).
 * Files are `view<i>_t<step>_{gt,pred}.pgm` plus `index.json`.
 */
template <Real T>
std::size_t dump_frames(const fs::path& checkpoint, const Dataset& ds, std::size_t t, std::size_t horizon,
                        const fs::path& out, std::size_t warmup = 4) {
  if (!fs::exists(checkpoint / "run.json")) throw std::invalid_argument("no checkpoint at " + checkpoint.string());
  if (horizon == 0) throw std::invalid_argument("dump horizon must be >= 1");
  const auto cp = training::load_checkpoint<T>(checkpoint);
  const auto models = cp.models();
  std::vector<std::size_t> idx;
  for (const auto& m : models) {
    auto it = std::find_if(ds.views.begin(), ds.views.end(), [&](const world::ViewSpec& v) { return v.id == m.id(); });
    if (it == ds.views.end()) throw std::invalid_argument("dataset has no view " + std::to_string(m.id()));
    idx.push_back(std::size_t(it - ds.views.begin()));
  }
  if (t + horizon >= ds.length())
    throw std::invalid_argument("t + horizon exceeds the dataset length " + std::to_string(ds.length()));
  const auto streams = training::streams_of<T>(ds, idx);
  fs::create_directories(out);
  nlohmann::json index = nlohmann::json::array();
  std::size_t files = 0;
  auto put = [&](const std::string& name, const std::string& bytes) {
    std::ofstream f(out / name, std::ios::binary);
    f << bytes;
    if (!f) throw FormatError("cannot write " + (out / name).string());
    ++files;
  };
  training::stream_network(models, streams, t >= warmup ? t - warmup : 0, t, horizon, cp.config.mode, cp.config.seed,
                           [&](std::size_t now, std::size_t i, const model::RolloutResult<T>& r) {
                             if (now != t) return;
                             const int id = models[i].id();
                             for (std::size_t s = 0; s < horizon; ++s) {
                               const std::string stem = "view" + std::to_string(id) + "_t" + std::to_string(t + 1 + s);
                               put(stem + "_gt.pgm", encode_pgm(ds.frames[idx[i]][t + 1 + s]));
                               put(stem + "_pred.pgm", encode_pgm(r.predictions[s]));
                               index.push_back({{"view", id}, {"t", t + 1 + s}, {"step", s + 1},
                                                {"gt", stem + "_gt.pgm"}, {"pred", stem + "_pred.pgm"}});
                             }
                           });
  write_json(out / "index.json", {{"checkpoint", checkpoint.string()}, {"t", t}, {"horizon", horizon}, {"frames", index}});
  return files;
}

}  // namespace ssta::experiments
