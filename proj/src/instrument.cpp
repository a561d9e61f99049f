#include "wdlab/instrument.hpp"

#include "wdlab/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace wdlab {

namespace {

// Shortest round-trip formatting so logs are bitwise stable per build.
std::string fmt(double v) {
  nlohmann::json j = v;
  return j.dump();
}

void put(nlohmann::json& j, const char* key, const std::optional<double>& v) {
  if (v) j[key] = *v;
}

std::string opt_cell(const std::optional<double>& v) {
  return v ? fmt(*v) : std::string();
}

}  // namespace

std::string MetricRecord::to_json_line() const {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["run_id"] = run_id;
  j["epoch"] = epoch;
  j["step"] = step;
  j["phase"] = phase;
  j["weight_norm_sq"] = weight_norm_sq;
  j["square_term"] = square_term;
  j["cross_term"] = cross_term;
  put(j, "realized_norm_change", realized_norm_change);
  put(j, "cos_pos", cos_pos);
  put(j, "cos_neg", cos_neg);
  put(j, "cos_pos_ascent", cos_pos_ascent);
  put(j, "cos_neg_ascent", cos_neg_ascent);
  j["grad_norm"] = grad_norm;
  j["dist_from_init"] = dist_from_init;
  if (!ratio_quantiles.empty()) {
    auto& q = j["ratio_quantiles"] = nlohmann::json::array();
    for (const auto& [p, v] : ratio_quantiles) q.push_back({p, v});
  }
  if (!per_layer_norms.empty()) {
    auto& n = j["per_layer_norms"] = nlohmann::json::object();
    for (const auto& [name, v] : per_layer_norms) n[name] = v;
  }
  put(j, "train_loss", train_loss);
  put(j, "train_acc", train_acc);
  put(j, "test_loss", test_loss);
  put(j, "test_acc", test_acc);
  return j.dump();
}

std::string MetricRecord::csv_header(const std::vector<double>& quantiles) {
  std::string h =
      "run_id,epoch,step,phase,weight_norm_sq,square_term,cross_term,"
      "realized_norm_change,cos_pos,cos_neg,cos_pos_ascent,cos_neg_ascent,"
      "grad_norm,dist_from_init";
  for (double q : quantiles) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), ",ratio_q%g", q);
    h += buf;
  }
  h += ",train_loss,train_acc,test_loss,test_acc";
  return h;
}

std::string MetricRecord::to_csv_row(const std::vector<double>& quantiles) const {
  std::string r = run_id + "," + std::to_string(epoch) + "," +
                  std::to_string(step) + "," + phase + "," +
                  fmt(weight_norm_sq) + "," + fmt(square_term) + "," +
                  fmt(cross_term) + "," + opt_cell(realized_norm_change) + "," +
                  opt_cell(cos_pos) + "," + opt_cell(cos_neg) + "," +
                  opt_cell(cos_pos_ascent) + "," + opt_cell(cos_neg_ascent) +
                  "," + fmt(grad_norm) + "," + fmt(dist_from_init);
  for (double q : quantiles) {
    r += ",";
    for (const auto& [p, v] : ratio_quantiles) {
      if (p == q) {
        r += fmt(v);
        break;
      }
    }
  }
  r += "," + opt_cell(train_loss) + "," + opt_cell(train_acc) + "," +
       opt_cell(test_loss) + "," + opt_cell(test_acc);
  return r;
}

NormDecomposition norm_decomposition(const ParamSet& params, double alpha) {
  double grad_sq = 0.0;
  double dot = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& g = params.grad(i).array();
    const auto& w = params.value(i).array();
    grad_sq += g.matrix().squaredNorm();
    dot += (g * w).sum();
  }
  return {alpha * alpha * grad_sq, -2.0 * alpha * dot};
}

CosinePair pos_neg_cosines(const ParamSet& params,
                           const Eigen::VectorXd& grad_pos,
                           const Eigen::VectorXd& grad_neg) {
  const Eigen::VectorXd w = params.flat_values();
  if (grad_pos.size() != w.size() || grad_neg.size() != w.size())
    throw std::invalid_argument("pos_neg_cosines: gradient size mismatch");

  CosinePair out;
  const double wn = w.norm();
  auto cosine = [&](const Eigen::VectorXd& g, bool& zero_flag) {
    const double gn = g.norm();
    if (wn == 0.0 || gn == 0.0) {
      zero_flag = true;
      return 0.0;
    }
    return -w.dot(g) / (wn * gn);
  };
  out.cos_pos = cosine(grad_pos, out.pos_zero_norm);
  out.cos_neg = cosine(grad_neg, out.neg_zero_norm);
  return out;
}

std::vector<double> buffer_ratio_quantiles(const AdamState& state,
                                           const ParamSet& params,
                                           const std::vector<double>& quantiles,
                                           double eps) {
  if (params.empty()) throw std::invalid_argument("buffer_ratio_quantiles: empty parameter set");
  if (state.m.size() != params.size() || state.t < 1)
    throw std::logic_error("buffer_ratio_quantiles: state not populated");

  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(params.scalar_count()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& m = state.m[i].array();
    const auto& w = params.value(i).array();
    for (Index k = 0; k < m.size(); ++k)
      values.push_back(std::log(std::abs(m[k]) / (std::abs(w[k]) + eps) + eps));
  }
  std::sort(values.begin(), values.end());

  std::vector<double> out;
  out.reserve(quantiles.size());
  const double n = static_cast<double>(values.size());
  for (double q : quantiles) {
    if (q < 0.0 || q > 1.0) throw std::invalid_argument("buffer_ratio_quantiles: bad quantile");
    // nearest rank
    auto rank = static_cast<std::size_t>(std::ceil(q * n));
    if (rank > 0) rank -= 1;
    out.push_back(values[std::min(rank, values.size() - 1)]);
  }
  return out;
}

double norm_match_scale(double target_norm, ParamSet& params, NormMatchScope scope) {
  double current_sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (scope == NormMatchScope::NonNormParams && is_norm_param(params.name(i)))
      continue;
    current_sq += params.value(i).squared_norm();
  }
  const double current = std::sqrt(current_sq);
  if (current == 0.0) throw std::runtime_error("norm_match_scale: current norm is zero");

  const double factor = target_norm / current;
  if (factor == 1.0) return factor;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (scope == NormMatchScope::NonNormParams && is_norm_param(params.name(i)))
      continue;
    params.value(i).array() *= factor;
  }
  return factor;
}

double dist_from_init(const ParamSet& params, const Eigen::VectorXd& w0) {
  if (w0.size() != params.scalar_count())
    throw std::invalid_argument("dist_from_init: snapshot size mismatch");
  return (params.flat_values() - w0).norm();
}

std::vector<std::pair<std::string, double>> per_entry_norms(const ParamSet& params) {
  std::vector<std::pair<std::string, double>> out;
  out.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    out.emplace_back(params.name(i), params.value(i).norm());
  return out;
}

}  // namespace wdlab
