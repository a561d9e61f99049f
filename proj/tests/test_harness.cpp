#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "wdlab/harness.hpp"
#include "wdlab/plot.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace wdlab;

namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempRoot {
  fs::path dir;
  explicit TempRoot(const std::string& tag)
      : dir(fs::temp_directory_path() / ("wdlab_test_" + tag)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~TempRoot() { fs::remove_all(dir); }
  std::string str() const { return dir.string(); }
};

RunConfig tiny_config(const std::string& out_root, const std::string& id,
                      std::uint64_t seed = 7) {
  RunConfig cfg;
  cfg.run_id = id;
  cfg.seed = seed;
  cfg.epochs = 3;
  cfg.batch_size = 16;
  cfg.out_root = out_root;
  cfg.model.layer_widths = {6, 8, 3};
  cfg.model.use_batch_norm = true;
  cfg.data.kind = DatasetSpec::Kind::Blobs;
  cfg.data.classes = 3;
  cfg.data.dim = 6;
  cfg.data.per_class_train = 20;
  cfg.data.per_class_test = 30;
  cfg.data.spread = 1.0;
  cfg.data.seed = 5;
  cfg.cadence.per_step_every = 2;
  return cfg;
}

}  // namespace

TEST_CASE("config text round-trips through parse and serialize") {
  RunConfig cfg = tiny_config("unused", "roundtrip");
  cfg.optimizer = OptimizerKind::Adam;
  cfg.adam.mode = AdamMode::Separated;
  cfg.adam.lambda = 3e-4;
  cfg.schedule = WdSchedule::every_k(32, true);
  cfg.sharpness.epochs = {1, 2};
  cfg.norm_match.reference_run_dir = "some/run";

  const std::string text = serialize_run_config(cfg);
  const RunConfig parsed = parse_run_config_text(text);
  CHECK(parsed.run_id == cfg.run_id);
  CHECK(parsed.seed == cfg.seed);
  CHECK(parsed.optimizer == OptimizerKind::Adam);
  CHECK(parsed.adam.mode == AdamMode::Separated);
  CHECK(parsed.adam.lambda == cfg.adam.lambda);
  CHECK(parsed.schedule.policy == WdSchedule::Policy::EveryKSteps);
  CHECK(parsed.schedule.k == 32);
  CHECK(parsed.schedule.boost);
  CHECK(parsed.sharpness.epochs == cfg.sharpness.epochs);
  CHECK(parsed.norm_match.reference_run_dir == "some/run");
  CHECK(parsed.model.layer_widths == cfg.model.layer_widths);
  // Canonical text is a fixed point.
  CHECK(serialize_run_config(parsed) == text);
}

TEST_CASE("shuffled-label configs default to a 10x lower learning rate") {
  const RunConfig shuffled = parse_run_config_text(
      "[data]\nshuffle_labels = true\n[optimizer]\nkind = sgd\n");
  const RunConfig plain = parse_run_config_text("[optimizer]\nkind = sgd\n");
  CHECK(shuffled.sgd.alpha == doctest::Approx(plain.sgd.alpha / 10.0));

  const RunConfig explicit_alpha = parse_run_config_text(
      "[data]\nshuffle_labels = true\n[optimizer]\nkind = sgd\nalpha = 0.2\n");
  CHECK(explicit_alpha.sgd.alpha == 0.2);
}

TEST_CASE("per-step lr decay unit is accepted and trains") {
  TempRoot root("perstep");
  RunConfig cfg = tiny_config(root.str(), "per_step");
  cfg.sgd.lr_decay = 0.999;
  cfg.sgd.lr_decay_unit = LrDecayUnit::PerStep;
  const RunArtifact art = train(cfg);
  CHECK_FALSE(art.failed);
  const RunConfig parsed = parse_run_config_text(serialize_run_config(cfg));
  CHECK(parsed.sgd.lr_decay_unit == LrDecayUnit::PerStep);
}

TEST_CASE("config parser rejects unknown keys and bad values") {
  CHECK_THROWS_AS(parse_run_config_text("[run]\nmystery = 1\n"), std::runtime_error);
  CHECK_THROWS_AS(parse_run_config_text("[run]\nepochs = soon\n"), std::runtime_error);
  CHECK_THROWS_AS(parse_run_config_text("[optimizer]\nkind = adagrad\n"),
                  std::runtime_error);
  CHECK_THROWS_AS(parse_run_config_text("orphan = 1\n"), std::runtime_error);
  CHECK_THROWS_AS(parse_run_config_text("[wd_schedule]\npolicy = every_k\nk = 0\n"),
                  std::runtime_error);
}

TEST_CASE("train writes a complete artifact and a byte-exact config snapshot") {
  TempRoot root("artifact");
  RunConfig cfg = tiny_config(root.str(), "basic");
  const std::string original_text = serialize_run_config(cfg);
  cfg.source_text = original_text;

  const RunArtifact art = train(cfg);
  CHECK_FALSE(art.failed);
  CHECK(art.epochs_completed == 3);
  CHECK(art.final_train_acc > 0.0);
  CHECK(art.final_test_acc.has_value());
  CHECK(art.epoch_norms.size() == 3);

  CHECK(read_file(fs::path(art.run_dir) / "config.ini") == original_text);
  CHECK(fs::exists(art.metrics_jsonl_path));
  CHECK(fs::exists(art.metrics_csv_path));
  CHECK(fs::exists(art.checkpoint_path));
  CHECK(fs::exists(fs::path(art.run_dir) / "summary.json"));
  CHECK(fs::exists(fs::path(art.run_dir) / "epoch_norms.csv"));
}

TEST_CASE("zero-epoch run leaves an initialization-only artifact") {
  TempRoot root("zero");
  RunConfig cfg = tiny_config(root.str(), "init_only");
  cfg.epochs = 0;
  const RunArtifact art = train(cfg);
  CHECK_FALSE(art.failed);
  CHECK(art.epochs_completed == 0);
  CHECK(art.final_train_acc > 0.0);  // evaluated at init
  const std::string metrics = read_file(art.metrics_jsonl_path);
  CHECK(metrics.find("\"epoch\":-1") != std::string::npos);
}

TEST_CASE("identical config and seed give bitwise-identical metric logs") {
  TempRoot root("determinism");
  RunConfig a = tiny_config(root.str(), "det_a");
  RunConfig b = tiny_config(root.str(), "det_b");
  b.run_id = "det_b";

  const RunArtifact ra = train(a);
  const RunArtifact rb = train(b);

  auto strip_run_id = [](std::string text, const std::string& id) {
    std::string needle = "\"run_id\":\"" + id + "\"";
    for (std::size_t pos = text.find(needle); pos != std::string::npos;
         pos = text.find(needle, pos))
      text.replace(pos, needle.size(), "\"run_id\":\"X\"");
    return text;
  };
  CHECK(strip_run_id(read_file(ra.metrics_jsonl_path), "det_a") ==
        strip_run_id(read_file(rb.metrics_jsonl_path), "det_b"));

  // Different seed changes the log.
  RunConfig c = tiny_config(root.str(), "det_c", 8);
  const RunArtifact rc = train(c);
  CHECK(strip_run_id(read_file(ra.metrics_jsonl_path), "det_a") !=
        strip_run_id(read_file(rc.metrics_jsonl_path), "det_c"));
}

TEST_CASE("single-config sweep equals train; parallelism does not matter") {
  TempRoot root("sweep");
  RunConfig base = tiny_config(root.str(), "s_single");
  const RunArtifact direct = train(base);

  RunConfig again = base;
  again.run_id = "s_single2";
  const auto arts = sweep({again}, 1);
  REQUIRE(arts.size() == 1);
  CHECK_FALSE(arts[0].failed);
  CHECK(arts[0].final_train_acc == direct.final_train_acc);
  CHECK(arts[0].epoch_norms == direct.epoch_norms);

  // 4 configs, parallel 1 vs 4: identical artifacts in order.
  std::vector<RunConfig> batch1, batch4;
  for (int i = 0; i < 4; ++i) {
    RunConfig c = tiny_config(root.str(), "p1_" + std::to_string(i),
                              10 + static_cast<std::uint64_t>(i));
    batch1.push_back(c);
    c.run_id = "p4_" + std::to_string(i);
    batch4.push_back(c);
  }
  const auto seq = sweep(batch1, 1);
  const auto par = sweep(batch4, 4);
  REQUIRE(seq.size() == 4);
  REQUIRE(par.size() == 4);
  for (int i = 0; i < 4; ++i) {
    CHECK(seq[static_cast<std::size_t>(i)].final_train_acc ==
          par[static_cast<std::size_t>(i)].final_train_acc);
    CHECK(seq[static_cast<std::size_t>(i)].epoch_norms ==
          par[static_cast<std::size_t>(i)].epoch_norms);
  }
}

TEST_CASE("sweep isolates per-run failures") {
  TempRoot root("failures");
  RunConfig good = tiny_config(root.str(), "ok");
  RunConfig bad = tiny_config(root.str(), "broken");
  bad.model.layer_widths = {5, 8, 3};  // input width != data dim

  const auto arts = sweep({good, bad}, 2);
  CHECK_FALSE(arts[0].failed);
  CHECK(arts[1].failed);
  CHECK_FALSE(arts[1].error.empty());
}

TEST_CASE("lambda-grid times mode sweep runs all nine configs") {
  TempRoot root("grid");
  std::vector<RunConfig> configs;
  for (double lambda : {1e-3, 1e-4, 1e-5}) {
    for (AdamMode mode : {AdamMode::CoupledL2, AdamMode::Decoupled, AdamMode::Separated}) {
      RunConfig c = tiny_config(root.str(), "grid_" + std::to_string(configs.size()));
      c.epochs = 1;
      c.optimizer = OptimizerKind::Adam;
      c.adam.lambda = lambda;
      c.adam.mode = mode;
      configs.push_back(c);
    }
  }
  const auto arts = sweep(configs, 3);
  REQUIRE(arts.size() == 9);
  for (const auto& a : arts) CHECK_FALSE(a.failed);
  const std::string report = analyze_runs_report(
      {arts[0].run_dir, arts[1].run_dir, arts[2].run_dir});
  CHECK(report.find("\"lambda\"") != std::string::npos);
}

TEST_CASE("divergence flags the artifact as failed rather than throwing") {
  TempRoot root("diverge");
  RunConfig cfg = tiny_config(root.str(), "hot");
  cfg.model.use_batch_norm = false;
  cfg.sgd.alpha = 1e300;  // first update overflows
  cfg.sgd.lr_decay = 1.0;
  const RunArtifact art = train(cfg);
  CHECK(art.failed);
  CHECK_FALSE(art.error.empty());
  CHECK(fs::exists(fs::path(art.run_dir) / "summary.json"));
}

TEST_CASE("norm matching reproduces the reference epoch norms") {
  TempRoot root("match");
  RunConfig ref = tiny_config(root.str(), "reference");
  ref.epochs = 4;
  ref.sgd.lambda = 5e-3;
  const RunArtifact ref_art = train(ref);

  RunConfig matched = tiny_config(root.str(), "matched");
  matched.epochs = 4;
  matched.schedule = WdSchedule::never();
  matched.norm_match.reference_run_dir = ref_art.run_dir;
  const RunArtifact m_art = train(matched);
  CHECK_FALSE(m_art.failed);
  REQUIRE(m_art.epoch_norms.size() == ref_art.epoch_norms.size());
  for (std::size_t e = 0; e < m_art.epoch_norms.size(); ++e) {
    CHECK(std::abs(m_art.epoch_norms[e] - ref_art.epoch_norms[e]) /
              ref_art.epoch_norms[e] <
          1e-6);
  }
}

TEST_CASE("sharpness reports are written at the configured epochs") {
  TempRoot root("sharp");
  RunConfig cfg = tiny_config(root.str(), "with_sharpness");
  cfg.sharpness.epochs = {1};
  cfg.sharpness.perturb.samples = 8;
  cfg.sharpness.hessian_iters = 10;
  const RunArtifact art = train(cfg);
  CHECK(fs::exists(fs::path(art.run_dir) / "sharpness_epoch1.json"));
  const std::string body = read_file(fs::path(art.run_dir) / "sharpness_epoch1.json");
  CHECK(body.find("multiplicative") != std::string::npos);
  CHECK(body.find("hessian_top_eigenvalue") != std::string::npos);
}

TEST_CASE("plot: errors and determinism") {
  CHECK_THROWS_AS(plot_runs({}, PlotKind::NormCurves, "x.svg"), std::invalid_argument);
  CHECK_THROWS_AS(plot_kind_from_string("spiral"), std::invalid_argument);

  TempRoot root("plots");
  RunConfig cfg = tiny_config(root.str(), "plotted");
  cfg.optimizer = OptimizerKind::Adam;  // quantiles present
  const RunArtifact art = train(cfg);

  const std::string out = (root.dir / "norms.svg").string();
  plot_runs({art.run_dir}, PlotKind::NormCurves, out);
  CHECK(fs::exists(out));
  CHECK(fs::exists(root.dir / "norms.csv"));
  const std::string first = read_file(out);
  plot_runs({art.run_dir}, PlotKind::NormCurves, out);
  CHECK(read_file(out) == first);  // byte-identical rerun

  for (PlotKind kind : {PlotKind::AccuracyCurves, PlotKind::Decomposition,
                        PlotKind::Cosines, PlotKind::QuantileBand}) {
    const std::string path = (root.dir / "k.svg").string();
    plot_runs({art.run_dir}, kind, path);
    CHECK(fs::exists(path));
  }

  // Missing columns are reported by name: sgd runs have no sharpness reports.
  RunConfig sgd_cfg = tiny_config(root.str(), "no_sharp");
  const RunArtifact sgd_art = train(sgd_cfg);
  try {
    plot_runs({sgd_art.run_dir}, PlotKind::SharpnessBars, (root.dir / "s.svg").string());
    CHECK(false);
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("sharpness") != std::string::npos);
  }
}

TEST_CASE("csv dataset spec trains end to end") {
  TempRoot root("csvdata");
  const std::string csv = (root.dir / "train.csv").string();
  {
    std::ofstream out(csv);
    out << "f0,f1,label\n";
    for (int i = 0; i < 40; ++i)
      out << (i % 2 ? 1.0 + 0.01 * i : -1.0 - 0.01 * i) << ","
          << (i % 2 ? -0.8 : 0.9) << "," << i % 2 << "\n";
  }
  RunConfig cfg = tiny_config(root.str(), "from_csv");
  cfg.model.layer_widths = {2, 6, 2};
  cfg.data.kind = DatasetSpec::Kind::Csv;
  cfg.data.path = csv;
  const RunArtifact art = train(cfg);
  CHECK_FALSE(art.failed);
  CHECK_FALSE(art.final_test_acc.has_value());  // no test_path given
  CHECK(art.final_train_acc > 0.9);             // trivially separable
}
