#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>

namespace wdlab {

/// A loss as a function of a flat weight vector, with its gradient. Sharpness
/// metrics probe the surface around `weights()` without mutating it.
class LossSurface {
 public:
  virtual ~LossSurface() = default;
  virtual Eigen::Index dim() const = 0;
  virtual Eigen::VectorXd weights() const = 0;
  virtual double loss(const Eigen::VectorXd& w) const = 0;
  virtual Eigen::VectorXd gradient(const Eigen::VectorXd& w) const = 0;
};

/// Adapter over plain callables; gradient falls back to central finite
/// differences when no closed form is supplied.
class CallableSurface final : public LossSurface {
 public:
  using LossFn = std::function<double(const Eigen::VectorXd&)>;
  using GradFn = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

  CallableSurface(Eigen::VectorXd at, LossFn loss, GradFn grad = nullptr,
                  double fd_step = 1e-6)
      : at_(std::move(at)), loss_(std::move(loss)), grad_(std::move(grad)),
        fd_step_(fd_step) {}

  Eigen::Index dim() const override { return at_.size(); }
  Eigen::VectorXd weights() const override { return at_; }
  double loss(const Eigen::VectorXd& w) const override { return loss_(w); }
  Eigen::VectorXd gradient(const Eigen::VectorXd& w) const override;

 private:
  Eigen::VectorXd at_;
  LossFn loss_;
  GradFn grad_;
  double fd_step_;
};

struct PerturbationSpec {
  double gamma = 0.1;
  int samples = 64;
  std::uint64_t seed = 0;
};

struct PerturbationReport {
  double mean = 0.0;        // E[L(perturbed w)] over finite samples
  double stderr_mean = 0.0; // standard error of that mean
  double base_loss = 0.0;   // L(w)
  double delta = 0.0;       // mean - base_loss
  int samples = 0;
  int non_finite = 0;       // perturbations with non-finite loss, excluded
};

/// Monte-Carlo E[L(w .* (1 + gamma*delta))], delta ~ N(0, I) per scalar
/// weight. Identical seeds draw identical delta sequences (common random
/// numbers). gamma = 0 returns the base loss exactly with stderr 0.
PerturbationReport multiplicative_sharpness(const LossSurface& surface,
                                            const PerturbationSpec& spec);

/// Same estimator for additive perturbations w + gamma*delta.
PerturbationReport additive_sharpness(const LossSurface& surface,
                                      const PerturbationSpec& spec);

struct KeskarConfig {
  double epsilon = 5e-4;
  int ascent_steps = 20;
  // Per-coordinate step is ascent_step_size * (1 + |x_i|); <= 0 selects the
  // default epsilon / 10.
  double ascent_step_size = -1.0;
  // Extra ascents from seeded random box points; restart 0 always starts at
  // y = 0. > 1 exposes the spread of the lower bound.
  int restarts = 1;
  std::uint64_t restart_seed = 0;
};

struct KeskarReport {
  double value = 0.0;          // best over restarts (a lower bound on the max)
  double restart_spread = 0.0; // sample stddev across restarts (0 if single)
  int restarts = 1;
};

/// Box-constrained relative sharpness max_{|y_i| <= eps(1+|x_i|)}
/// (L(x+y) - L(x)) / (1 + L(x)), approximated by projected sign-gradient
/// ascent with best-so-far tracking; never negative (y = 0 is feasible).
KeskarReport keskar_sharpness(const LossSurface& surface, const KeskarConfig& cfg);

struct EigenvalueReport {
  double value = 0.0;
  bool converged = false;
  int iterations = 0;
};

/// Top Hessian eigenvalue by power iteration on finite-difference
/// Hessian-vector products Hv ~ (grad(w + hv) - grad(w - hv)) / 2h with
/// h = 1e-4 / ||v||. Returns the last Rayleigh quotient; `converged` is false
/// when |change| >= tol after `iters` iterations.
EigenvalueReport hessian_top_eigenvalue(const LossSurface& surface, int iters,
                                        double tol, std::uint64_t seed = 0);

}  // namespace wdlab
