#pragma once

#include "wdlab/optim.hpp"
#include "wdlab/param_set.hpp"

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace wdlab {

/// One row of training telemetry. Optional fields are logged only at their
/// cadence (test metrics, quantiles) and serialize as absent.
struct MetricRecord {
  std::string run_id;
  long epoch = 0;
  long step = 0;
  std::string phase = "step";  // "step" or "epoch"

  double weight_norm_sq = 0.0;
  double square_term = 0.0;
  double cross_term = 0.0;
  // Realized ||w_{t+1}||^2 - ||w_t||^2 for the step actually taken; equals
  // square + cross only for a plain SGD step, logged so the discrepancy
  // under momentum/decay is visible.
  std::optional<double> realized_norm_change;

  // cos(w, -grad) of the split loss components under the minimized-loss
  // convention; the *_ascent fields carry the opposite sign convention.
  std::optional<double> cos_pos;
  std::optional<double> cos_neg;
  std::optional<double> cos_pos_ascent;
  std::optional<double> cos_neg_ascent;

  double grad_norm = 0.0;
  double dist_from_init = 0.0;
  std::vector<std::pair<double, double>> ratio_quantiles;  // (q, value)
  std::vector<std::pair<std::string, double>> per_layer_norms;

  std::optional<double> train_loss;
  std::optional<double> train_acc;
  std::optional<double> test_loss;
  std::optional<double> test_acc;

  std::string to_json_line() const;
  static std::string csv_header(const std::vector<double>& quantiles);
  std::string to_csv_row(const std::vector<double>& quantiles) const;
};

struct NormDecomposition {
  double square_term = 0.0;  // alpha^2 ||grad||^2
  double cross_term = 0.0;   // 2 alpha <-grad, w>
};

/// Split of the squared-norm change a plain SGD step of size alpha would
/// produce, computed from the gradients currently held in `params`. For that
/// step, ||w'||^2 - ||w||^2 == square_term + cross_term exactly.
NormDecomposition norm_decomposition(const ParamSet& params, double alpha);

struct CosinePair {
  double cos_pos = 0.0;
  double cos_neg = 0.0;
  bool pos_zero_norm = false;
  bool neg_zero_norm = false;
};

/// Cosines of the flattened weights with -grad_pos and -grad_neg. A
/// zero-norm operand reports cosine 0 with its flag set.
CosinePair pos_neg_cosines(const ParamSet& params,
                           const Eigen::VectorXd& grad_pos,
                           const Eigen::VectorXd& grad_neg);

/// Nearest-rank quantiles of log(|m_i| / (|w_i| + eps) + eps) across every
/// scalar weight, m being the first-moment buffer. Quantiles are returned in
/// the order requested.
std::vector<double> buffer_ratio_quantiles(const AdamState& state,
                                           const ParamSet& params,
                                           const std::vector<double>& quantiles,
                                           double eps = 1e-12);

enum class NormMatchScope { All, NonNormParams };

/// Scale every in-scope parameter by target_norm / current_norm and return
/// the factor. The post-scale global norm of the scoped set equals the
/// target. NonNormParams leaves batch-norm gamma/beta untouched.
double norm_match_scale(double target_norm, ParamSet& params,
                        NormMatchScope scope = NormMatchScope::All);

/// Global l2 distance between the current weights and a flattened snapshot.
double dist_from_init(const ParamSet& params, const Eigen::VectorXd& w0);

std::vector<std::pair<std::string, double>> per_entry_norms(const ParamSet& params);

}  // namespace wdlab
