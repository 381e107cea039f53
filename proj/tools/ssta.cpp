#include <iostream>

#include "CLI11.hpp"
#include "ssta/experiments.hpp"

using namespace ssta;
namespace fs = std::filesystem;

namespace {

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  for (std::string tok; std::getline(ss, tok, ',');)
    if (!tok.empty()) out.push_back(std::stoull(tok));
  if (out.empty()) throw std::invalid_argument("--seeds needs at least one seed");
  return out;
}

void print_report(const metrics::MetricReport& rep) {
  using training::fmt_real;
  std::cout << "view,mse,psnr,ssim,lpips\n";
  for (const auto& r : rep.views)
    std::cout << r.view << ',' << fmt_real(r.mse) << ',' << fmt_real(r.psnr) << ',' << fmt_real(r.ssim) << ",\n";
  std::cout << "mean," << fmt_real(rep.mean.mse) << ',' << fmt_real(rep.mean.psnr) << ',' << fmt_real(rep.mean.ssim)
            << ",\n\n";
  std::printf("%-6s %-12s %-10s %-8s\n", "view", "MSE", "PSNR", "SSIM");
  for (const auto& r : rep.views) std::printf("%-6d %-12.6f %-10.2f %-8.4f\n", r.view, r.mse, r.psnr, r.ssim);
  std::printf("%-6s %-12.6f %-10.2f %-8.4f\n", "mean", rep.mean.mse, rep.mean.psnr, rep.mean.ssim);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-supervised traffic advisor simulator"};
  app.require_subcommand(1);

  // gen-world
  auto* gen = app.add_subcommand("gen-world", "Generate a multi-view dataset directory");
  world::WorldConfig wc;
  std::size_t timesteps = 250, chunk = 100;
  std::string gen_out;
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--timesteps", timesteps, "Frames per view")->capture_default_str();
  gen->add_option("--views", wc.views, "2, 4 or 8")->capture_default_str();
  gen->add_option("--vehicles", wc.vehicles)->capture_default_str();
  gen->add_option("--seed", wc.seed)->capture_default_str();
  gen->add_option("--chunk", chunk, "Frames per chunk file")->capture_default_str();

  // train
  auto* train = app.add_subcommand("train", "Train a node network on a dataset");
  training::TrainConfig tc;
  std::string dataset, train_out, msg_mode = "emerged", lifelong_mode, precision = "f64", init = "random";
  bool resume = false;
  train->add_option("--dataset", dataset)->required();
  train->add_option("--nodes", tc.nodes, "0 = every view")->capture_default_str();
  train->add_option("--k", tc.k)->capture_default_str();
  train->add_option("--horizon", tc.horizon)->capture_default_str();
  train->add_option("--epochs", tc.epochs)->capture_default_str();
  train->add_option("--lr", tc.lr)->capture_default_str();
  train->add_option("--batch", tc.batch)->capture_default_str();
  train->add_option("--msg-mode", msg_mode)->check(CLI::IsMember({"emerged", "zero", "random"}))->capture_default_str();
  train->add_option("--scheduler", tc.scheduler)->check(CLI::IsMember({"serial", "parallel"}))->capture_default_str();
  train->add_option("--seed", tc.seed)->capture_default_str();
  train->add_option("--out", train_out)->required();
  train->add_flag("--resume", resume);
  train->add_option("--lifelong", lifelong_mode, "Streaming mode with a replay buffer")->check(CLI::IsMember({"sw", "id"}));
  train->add_option("--buffer", tc.buffer, "Replay buffer capacity D")->capture_default_str();
  train->add_option("--pretrain-epochs", tc.pretrain_epochs)->capture_default_str();
  train->add_option("--init", init)->check(CLI::IsMember({"random", "zero"}))->capture_default_str();
  train->add_option("--precision", precision)->check(CLI::IsMember({"f64", "f32"}))->capture_default_str();

  // eval
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on a dataset's validation split");
  std::string eval_ckpt, eval_ds;
  std::size_t eval_h = 0;
  eval->add_option("--checkpoint", eval_ckpt)->required();
  eval->add_option("--dataset", eval_ds)->required();
  eval->add_option("--horizon", eval_h, "Defaults to the training horizon");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Run ablation suites");
  std::string suite = "all", seeds = "1,2,3", ablate_out;
  bool assert_order = false;
  experiments::SuiteSizes sizes;
  ablate->add_option("--suite", suite)->check(CLI::IsMember({"messages", "connectivity", "lifelong", "all"}))
      ->capture_default_str();
  ablate->add_flag("--assert", assert_order, "Exit nonzero on an ordering violation");
  ablate->add_option("--seeds", seeds)->capture_default_str();
  ablate->add_option("--out", ablate_out);
  ablate->add_option("--epochs", sizes.epochs)->capture_default_str();

  // dump-frames
  auto* dump = app.add_subcommand("dump-frames", "Write ground truth and predicted frames as PGM images");
  std::string dump_ckpt, dump_ds, dump_out;
  std::size_t dump_t = 0, dump_h = 1;
  dump->add_option("--checkpoint", dump_ckpt)->required();
  dump->add_option("--dataset", dump_ds)->required();
  dump->add_option("--t", dump_t)->required();
  dump->add_option("--horizon", dump_h)->capture_default_str();
  dump->add_option("--out", dump_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      write_dataset(generate_dataset(wc, timesteps), gen_out, chunk);
      std::cout << "wrote " << timesteps << " steps x " << wc.views << " views to " << gen_out << '\n';
    } else if (*train) {
      tc.mode = protocol::parse_message_mode(msg_mode);
      if (!lifelong_mode.empty()) tc.lifelong = lifelong::parse_strategy(lifelong_mode);
      tc.init = init == "zero" ? model::Init::zero : model::Init::random;
      const auto ds = read_dataset(dataset);
      auto go = [&]<typename T>(T) {
        const auto r = training::run_training<T>(ds, tc, fs::path(train_out), resume, &std::cout);
        std::cout << "final val mse " << training::fmt_real(r.final_report.mean.mse) << '\n';
      };
      if (precision == "f32")
        go(float{});
      else
        go(double{});
    } else if (*eval) {
      const auto cp = training::load_checkpoint<double>(eval_ckpt);
      const auto ds = read_dataset(eval_ds);
      std::vector<std::size_t> idx;
      for (const auto& ns : cp.nodes) {
        auto it = std::find_if(ds.views.begin(), ds.views.end(), [&](const world::ViewSpec& v) { return v.id == ns.id(); });
        if (it == ds.views.end()) throw std::invalid_argument("dataset has no view " + std::to_string(ns.id()));
        idx.push_back(std::size_t(it - ds.views.begin()));
      }
      const auto sp = training::split_of(ds.length(), cp.config.val_fraction);
      const std::size_t H = eval_h ? eval_h : cp.config.horizon;
      print_report(training::evaluate(cp.models(), training::streams_of<double>(ds, idx), sp.train_end, sp.length, H,
                                      cp.config.warmup, cp.config.mode, cp.config.seed));
    } else if (*ablate) {
      sizes.seeds = parse_seeds(seeds);
      std::vector<std::string> names = suite == "all" ? std::vector<std::string>{"messages", "connectivity", "lifelong"}
                                                      : std::vector<std::string>{suite};
      bool ok = true;
      for (const auto& n : names) {
        const auto r = experiments::run_named_suite<double>(n, sizes, &std::cerr);
        std::cout << experiments::render_table(r) << (r.passed ? "ordering holds: " : "ORDERING VIOLATED: ")
                  << r.verdict << "\n\n";
        if (!ablate_out.empty()) experiments::write_csv(r, ablate_out);
        ok = ok && r.passed;
      }
      if (assert_order && !ok) return 2;
    } else if (*dump) {
      const auto n = experiments::dump_frames<double>(dump_ckpt, read_dataset(dump_ds), dump_t, dump_h, dump_out);
      std::cout << "wrote " << n << " frames to " << dump_out << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
