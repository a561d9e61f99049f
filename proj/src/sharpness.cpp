#include "wdlab/sharpness.hpp"

#include "wdlab/rng.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace wdlab {

Eigen::VectorXd CallableSurface::gradient(const Eigen::VectorXd& w) const {
  if (grad_) return grad_(w);
  Eigen::VectorXd g(w.size());
  Eigen::VectorXd probe = w;
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    probe[i] = w[i] + fd_step_;
    const double up = loss_(probe);
    probe[i] = w[i] - fd_step_;
    const double down = loss_(probe);
    probe[i] = w[i];
    g[i] = (up - down) / (2.0 * fd_step_);
  }
  return g;
}

namespace {

PerturbationReport perturbation_expectation(const LossSurface& surface,
                                            const PerturbationSpec& spec,
                                            bool multiplicative) {
  if (spec.gamma < 0.0) throw std::invalid_argument("perturbation: gamma must be >= 0");
  if (spec.samples < 1) throw std::invalid_argument("perturbation: samples must be >= 1");

  PerturbationReport report;
  const Eigen::VectorXd w = surface.weights();
  report.base_loss = surface.loss(w);

  if (spec.gamma == 0.0) {
    report.mean = report.base_loss;
    report.samples = spec.samples;
    return report;
  }

  Rng rng(spec.seed);
  double sum = 0.0, sum_sq = 0.0;
  int kept = 0;
  for (int s = 0; s < spec.samples; ++s) {
    const Eigen::VectorXd delta = rng.normal_vector(w.size());
    Eigen::VectorXd probe;
    if (multiplicative) {
      probe = (w.array() * (1.0 + spec.gamma * delta.array())).matrix();
    } else {
      probe = w + spec.gamma * delta;
    }
    const double l = surface.loss(probe);
    if (!std::isfinite(l)) {
      ++report.non_finite;
      continue;
    }
    sum += l;
    sum_sq += l * l;
    ++kept;
  }
  if (kept == 0)
    throw std::runtime_error("perturbation: every sampled loss was non-finite");

  report.samples = kept;
  report.mean = sum / kept;
  if (kept > 1) {
    const double var = (sum_sq - sum * sum / kept) / (kept - 1);
    report.stderr_mean = std::sqrt(std::max(0.0, var) / kept);
  }
  report.delta = report.mean - report.base_loss;
  return report;
}

}  // namespace

PerturbationReport multiplicative_sharpness(const LossSurface& surface,
                                            const PerturbationSpec& spec) {
  return perturbation_expectation(surface, spec, true);
}

PerturbationReport additive_sharpness(const LossSurface& surface,
                                      const PerturbationSpec& spec) {
  return perturbation_expectation(surface, spec, false);
}

KeskarReport keskar_sharpness(const LossSurface& surface, const KeskarConfig& cfg) {
  if (cfg.epsilon <= 0.0) throw std::invalid_argument("keskar_sharpness: epsilon must be > 0");
  if (cfg.restarts < 1) throw std::invalid_argument("keskar_sharpness: restarts must be >= 1");

  const Eigen::VectorXd x = surface.weights();
  const double base = surface.loss(x);
  if (!std::isfinite(base))
    throw std::runtime_error("keskar_sharpness: loss not finite at the center");

  const Eigen::ArrayXd box = cfg.epsilon * (1.0 + x.array().abs());
  const double step_size = cfg.ascent_step_size > 0.0 ? cfg.ascent_step_size
                                                      : cfg.epsilon / 10.0;
  const Eigen::ArrayXd step = (step_size / cfg.epsilon) * box;

  Rng rng(cfg.restart_seed);
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(cfg.restarts));

  for (int r = 0; r < cfg.restarts; ++r) {
    Eigen::ArrayXd y = Eigen::ArrayXd::Zero(x.size());
    if (r > 0) {
      for (Eigen::Index i = 0; i < y.size(); ++i)
        y[i] = (2.0 * rng.uniform() - 1.0) * box[i];
    }

    double best = 0.0;  // y = 0 is feasible, so the bound starts at 0
    for (int it = 0; it < cfg.ascent_steps; ++it) {
      const Eigen::VectorXd g = surface.gradient(x + y.matrix());
      if (!g.array().isFinite().all())
        throw std::runtime_error("keskar_sharpness: ascent diverged (non-finite gradient)");
      // Sign ascent; an exactly zero coordinate steps positive so ascent can
      // leave critical points (y starts at 0).
      y += (g.array() >= 0.0).select(step, -step);
      y = y.min(box).max(-box);
      const double l = surface.loss(x + y.matrix());
      if (!std::isfinite(l))
        throw std::runtime_error("keskar_sharpness: ascent diverged (non-finite loss)");
      best = std::max(best, (l - base) / (1.0 + base));
    }
    values.push_back(best);
  }

  KeskarReport report;
  report.restarts = cfg.restarts;
  for (double v : values) report.value = std::max(report.value, v);
  if (values.size() > 1) {
    double mean = 0.0;
    for (double v : values) mean += v;
    mean /= static_cast<double>(values.size());
    double var = 0.0;
    for (double v : values) var += (v - mean) * (v - mean);
    report.restart_spread = std::sqrt(var / static_cast<double>(values.size() - 1));
  }
  return report;
}

EigenvalueReport hessian_top_eigenvalue(const LossSurface& surface, int iters,
                                        double tol, std::uint64_t seed) {
  const Eigen::VectorXd w = surface.weights();
  const Eigen::Index n = w.size();

  Rng rng(seed);
  Eigen::VectorXd v = rng.normal_vector(n);
  v.normalize();

  auto hvp = [&](const Eigen::VectorXd& dir) {
    const double h = 1e-4 / dir.norm();
    return ((surface.gradient(w + h * dir) - surface.gradient(w - h * dir)) /
            (2.0 * h))
        .eval();
  };

  EigenvalueReport report;
  double prev = 0.0;
  for (int it = 0; it < iters; ++it) {
    const Eigen::VectorXd hv = hvp(v);
    const double rayleigh = v.dot(hv);
    report.value = rayleigh;
    report.iterations = it + 1;
    if (it > 0 && std::abs(rayleigh - prev) < tol) {
      report.converged = true;
      return report;
    }
    prev = rayleigh;
    const double norm = hv.norm();
    if (norm == 0.0) {  // zero curvature along v; nothing to iterate toward
      report.converged = true;
      report.value = 0.0;
      return report;
    }
    v = hv / norm;
  }
  return report;
}

}  // namespace wdlab
