// Command-line front end: train / sweep / sharpness / analyze / plot.
// Exit code 0 on success; failures print a machine-readable JSON object on
// stderr and exit nonzero.

#include "wdlab/harness.hpp"
#include "wdlab/plot.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <glob.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;

namespace {

std::vector<std::string> expand_glob(const std::string& pattern) {
  glob_t g{};
  const int rc = glob(pattern.c_str(), 0, nullptr, &g);
  std::vector<std::string> out;
  if (rc == 0) {
    for (std::size_t i = 0; i < g.gl_pathc; ++i) out.emplace_back(g.gl_pathv[i]);
  }
  globfree(&g);
  if (rc != 0 && rc != GLOB_NOMATCH)
    throw std::runtime_error("glob failed for pattern " + pattern);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::string> run_dirs_from_glob(const std::string& pattern) {
  std::vector<std::string> dirs;
  for (const auto& p : expand_glob(pattern)) {
    if (fs::is_directory(p)) dirs.push_back(p);
  }
  if (dirs.empty())
    throw std::runtime_error("no run directories match '" + pattern + "'");
  return dirs;
}

int fail(const std::string& type, const std::string& message) {
  nlohmann::json err;
  err["error"] = {{"type", type}, {"message", message}};
  std::cerr << err.dump() << std::endl;
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"weight-decay training dynamics lab"};
  app.require_subcommand(1);

  std::string config_path;
  auto* train_cmd = app.add_subcommand("train", "run one training config");
  train_cmd->add_option("--config", config_path, "run config file")->required();

  std::string config_dir;
  int parallel = 1;
  auto* sweep_cmd = app.add_subcommand("sweep", "run every config in a directory");
  sweep_cmd->add_option("--config-dir", config_dir, "directory of *.ini configs")->required();
  sweep_cmd->add_option("--parallel", parallel, "worker threads");

  std::string checkpoint_path, data_spec, sharp_out;
  double gamma = 0.1;
  int samples = 64;
  std::uint64_t sharp_seed = 0;
  auto* sharp_cmd = app.add_subcommand("sharpness", "evaluate sharpness metrics of a checkpoint");
  sharp_cmd->add_option("--checkpoint", checkpoint_path, "model checkpoint file")->required();
  sharp_cmd->add_option("--data", data_spec, "config file holding a [data] section")->required();
  sharp_cmd->add_option("--gamma", gamma, "perturbation scale");
  sharp_cmd->add_option("--samples", samples, "Monte-Carlo samples");
  sharp_cmd->add_option("--seed", sharp_seed, "perturbation seed");
  sharp_cmd->add_option("--out", sharp_out, "report path (default stdout)");

  std::string runs_glob, report_path;
  auto* analyze_cmd = app.add_subcommand("analyze", "summarize finished runs");
  analyze_cmd->add_option("--runs", runs_glob, "glob of run directories")->required();
  analyze_cmd->add_option("--report", report_path, "report output file")->required();

  std::string plot_glob, plot_kind, plot_out;
  auto* plot_cmd = app.add_subcommand("plot", "render metric logs");
  plot_cmd->add_option("--runs", plot_glob, "glob of run directories")->required();
  plot_cmd->add_option("--kind", plot_kind, "norm_curves|accuracy_curves|decomposition|cosines|quantile_band|sharpness_bars")->required();
  plot_cmd->add_option("--out", plot_out, "output image path (.svg)")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      const wdlab::RunConfig config = wdlab::load_run_config(config_path);
      const wdlab::RunArtifact art = wdlab::train(config);
      std::cout << "run " << art.run_id << " -> " << art.run_dir
                << (art.failed ? " [FAILED: " + art.error + "]" : "") << "\n";
      if (art.failed) return fail("run_failed", art.error);
      return 0;
    }

    if (*sweep_cmd) {
      std::vector<wdlab::RunConfig> configs;
      for (const auto& p : expand_glob(config_dir + "/*.ini"))
        configs.push_back(wdlab::load_run_config(p));
      if (configs.empty())
        return fail("no_configs", "no *.ini files under " + config_dir);
      const auto arts = wdlab::sweep(configs, parallel);
      bool any_failed = false;
      for (const auto& art : arts) {
        std::cout << "run " << art.run_id
                  << (art.failed ? " [FAILED: " + art.error + "]" : " ok") << "\n";
        any_failed = any_failed || art.failed;
      }
      return any_failed ? fail("sweep_partial_failure", "one or more runs failed") : 0;
    }

    if (*sharp_cmd) {
      wdlab::Model model = wdlab::load_checkpoint(checkpoint_path);
      const wdlab::RunConfig data_cfg = wdlab::load_run_config(data_spec);
      const wdlab::LoadedData data = wdlab::load_dataset(data_cfg.data);

      wdlab::SharpnessEval eval = data_cfg.sharpness;
      eval.perturb.gamma = gamma;
      eval.perturb.samples = samples;
      eval.perturb.seed = sharp_seed;

      const wdlab::Dataset& surface_data =
          (eval.surface == "test" && data.test) ? *data.test : data.train;
      wdlab::ModelLossSurface surface(model, surface_data, eval.eval_batch);

      const auto mult = wdlab::multiplicative_sharpness(surface, eval.perturb);
      const auto addv = wdlab::additive_sharpness(surface, eval.perturb);
      const auto keskar = wdlab::keskar_sharpness(surface, eval.keskar);
      const auto eig =
          wdlab::hessian_top_eigenvalue(surface, eval.hessian_iters, eval.hessian_tol);

      nlohmann::json j;
      j["checkpoint"] = checkpoint_path;
      j["surface"] = eval.surface;
      j["config"] = {{"gamma", eval.perturb.gamma},
                     {"samples", eval.perturb.samples},
                     {"seed", eval.perturb.seed},
                     {"keskar_epsilon", eval.keskar.epsilon},
                     {"keskar_steps", eval.keskar.ascent_steps},
                     {"hessian_iters", eval.hessian_iters},
                     {"hessian_tol", eval.hessian_tol}};
      j["multiplicative"] = {{"mean", mult.mean},
                             {"stderr", mult.stderr_mean},
                             {"base_loss", mult.base_loss},
                             {"delta", mult.delta},
                             {"non_finite", mult.non_finite}};
      j["additive"] = {{"mean", addv.mean},
                       {"stderr", addv.stderr_mean},
                       {"base_loss", addv.base_loss},
                       {"delta", addv.delta},
                       {"non_finite", addv.non_finite}};
      j["keskar"] = {{"value", keskar.value}, {"lower_bound", true}};
      j["hessian_top_eigenvalue"] = {{"value", eig.value},
                                     {"converged", eig.converged},
                                     {"iterations", eig.iterations}};
      if (sharp_out.empty()) {
        std::cout << j.dump(2) << "\n";
      } else {
        std::ofstream out(sharp_out);
        if (!out) return fail("io", "cannot write " + sharp_out);
        out << j.dump(2) << "\n";
      }
      return 0;
    }

    if (*analyze_cmd) {
      const std::string report = wdlab::analyze_runs_report(run_dirs_from_glob(runs_glob));
      std::ofstream out(report_path);
      if (!out) return fail("io", "cannot write " + report_path);
      out << report;
      std::cout << report;
      return 0;
    }

    if (*plot_cmd) {
      wdlab::plot_runs(run_dirs_from_glob(plot_glob),
                       wdlab::plot_kind_from_string(plot_kind), plot_out);
      std::cout << "wrote " << plot_out << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    return fail("exception", e.what());
  }
  return fail("usage", "no subcommand");
}
