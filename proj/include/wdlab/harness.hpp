#pragma once

#include "wdlab/data.hpp"
#include "wdlab/instrument.hpp"
#include "wdlab/model.hpp"
#include "wdlab/optim.hpp"
#include "wdlab/sharpness.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace wdlab {

enum class OptimizerKind { Sgd, Adam };

struct DatasetSpec {
  enum class Kind { Blobs, Csv, Idx };
  Kind kind = Kind::Blobs;

  // blobs
  int classes = 5;
  int dim = 10;
  int per_class_train = 50;
  int per_class_test = 400;
  double spread = 2.0;
  std::uint64_t seed = 0;

  // csv / idx
  std::string path;
  std::string test_path;

  bool shuffle_train_labels = false;
  std::uint64_t shuffle_seed = 0;
};

struct MetricCadence {
  long per_step_every = 10;    // 0 disables per-step records
  long test_every_epochs = 1;  // 0 = final epoch only
  std::vector<double> quantiles = {0.1, 0.25, 0.5, 0.75, 0.9};
};

struct SharpnessEval {
  std::vector<long> epochs;  // evaluate after these epochs (empty = never)
  std::string surface = "train";
  PerturbationSpec perturb;
  KeskarConfig keskar;
  int hessian_iters = 100;
  double hessian_tol = 1e-6;
  Index eval_batch = 128;
};

struct NormMatchSpec {
  std::string reference_run_dir;  // empty = no matching
  NormMatchScope scope = NormMatchScope::All;
};

struct RunConfig {
  std::string run_id = "run";
  std::uint64_t seed = 1;
  long epochs = 10;
  Index batch_size = 32;
  std::string out_root;  // empty -> $WDLAB_OUT_ROOT, then "runs"

  MlpConfig model;                  // empty widths -> [input_dim, 32, classes]
  bool model_seed_from_run = true;  // init_seed follows the run seed

  OptimizerKind optimizer = OptimizerKind::Sgd;
  SgdConfig sgd;
  AdamConfig adam;
  WdSchedule schedule;

  DatasetSpec data;
  MetricCadence cadence;
  SharpnessEval sharpness;
  NormMatchSpec norm_match;

  /// Byte-exact text this config was parsed from; regenerated canonically
  /// for programmatic configs. Snapshotted verbatim into the artifact.
  std::string source_text;
};

RunConfig parse_run_config_text(const std::string& text);
RunConfig load_run_config(const std::string& path);
std::string serialize_run_config(const RunConfig& cfg);

struct RunArtifact {
  std::string run_id;
  std::string run_dir;
  bool failed = false;
  std::string error;

  long epochs_completed = 0;
  double initial_weight_norm = 0.0;
  double final_weight_norm = 0.0;
  double final_train_loss = 0.0;
  double final_train_acc = 0.0;
  std::optional<double> final_test_loss;
  std::optional<double> final_test_acc;
  std::optional<double> best_test_acc;
  std::vector<double> epoch_norms;  // post-epoch (post-match) global norms

  std::string metrics_jsonl_path;
  std::string metrics_csv_path;
  std::string checkpoint_path;
};

/// Run one config end to end: deterministic per (config, seed); writes the
/// config snapshot, metric logs (JSONL + CSV), per-epoch norms, checkpoints,
/// sharpness reports, and a summary under <out_root>/<run_id>/. Divergence
/// (non-finite loss or update) stops the run and flags the artifact failed.
RunArtifact train(const RunConfig& config);

/// Independent seeded runs, optionally in parallel; results keep config
/// order and per-run failures are isolated.
std::vector<RunArtifact> sweep(const std::vector<RunConfig>& configs,
                               int parallelism);

std::string default_out_root();

struct EvalMetrics {
  double loss = 0.0;
  double loss_pos = 0.0;
  double loss_neg = 0.0;
  double accuracy = 0.0;
};

/// Batched loss/accuracy over a dataset (batch statistics recomputed per
/// batch; a trailing singleton row is merged into the previous batch so
/// batch norm stays defined).
EvalMetrics evaluate(Model& model, const Dataset& data, Index batch_size);

/// Materialize train/test from a DatasetSpec. Test is absent when none is
/// provided (csv/idx without test_path). Label shuffling permutes train only.
struct LoadedData {
  Dataset train;
  std::optional<Dataset> test;
};
LoadedData load_dataset(const DatasetSpec& spec);

/// The loss surface sharpness metrics evaluate: flat weights -> mean loss
/// over a fixed batched dataset, differentiable via the tape.
class ModelLossSurface final : public LossSurface {
 public:
  ModelLossSurface(const Model& model, const Dataset& data, Index batch_size);

  Eigen::Index dim() const override;
  Eigen::VectorXd weights() const override;
  double loss(const Eigen::VectorXd& w) const override;
  Eigen::VectorXd gradient(const Eigen::VectorXd& w) const override;

 private:
  mutable Model model_;       // scratch for probes
  Eigen::VectorXd center_;    // weights() stays pinned to construction time
  std::vector<Tensor> batch_x_;
  std::vector<std::vector<int>> batch_labels_;
  Index total_ = 0;
};

/// Aggregated table over finished runs, for the analyze subcommand.
std::string analyze_runs_report(const std::vector<std::string>& run_dirs);

}  // namespace wdlab
