#include "wdlab/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace wdlab {

bool wd_active(const WdSchedule& schedule, long epoch, long step) {
  if (epoch < 0 || step < 0)
    throw std::invalid_argument("wd_active: negative epoch/step");
  switch (schedule.policy) {
    case WdSchedule::Policy::Always:
      return true;
    case WdSchedule::Policy::Never:
      return false;
    case WdSchedule::Policy::BeforeEpoch:
      return epoch < schedule.cutoff_epoch;
    case WdSchedule::Policy::AfterEpoch:
      return epoch >= schedule.cutoff_epoch;
    case WdSchedule::Policy::EveryKSteps:
      return step % schedule.k == 0;
  }
  return false;
}

WdStep wd_step_for(const WdSchedule& schedule, long epoch, long step) {
  WdStep out;
  out.active = wd_active(schedule, epoch, step);
  if (out.active && schedule.policy == WdSchedule::Policy::EveryKSteps &&
      schedule.boost) {
    out.compound = static_cast<double>(schedule.k);
  }
  return out;
}

double lr_schedule(double base_alpha, double decay_per_epoch, long epoch) {
  if (epoch < 0) throw std::invalid_argument("lr_schedule: negative epoch");
  return base_alpha * std::pow(decay_per_epoch, static_cast<double>(epoch));
}

double lr_schedule(const SgdConfig& cfg, long epoch) {
  return lr_schedule(cfg.alpha, cfg.lr_decay, epoch);
}

double lr_schedule(const AdamConfig& cfg, long epoch) {
  return lr_schedule(cfg.alpha, cfg.lr_decay, epoch);
}

namespace {

void ensure_like(std::vector<Tensor>& buffers, const ParamSet& params) {
  if (buffers.size() == params.size()) return;
  if (!buffers.empty())
    throw std::logic_error("optimizer state does not match parameter set");
  buffers.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    buffers.push_back(Tensor::zeros(params.value(i).shape()));
}

[[noreturn]] void throw_non_finite(const char* op, const std::string& name) {
  throw std::runtime_error(std::string(op) + ": non-finite update in parameter '" +
                           name + "'");
}

}  // namespace

void sgd_step(ParamSet& params, SgdState& state, const SgdConfig& cfg,
              const WdStep& wd, double alpha) {
  ensure_like(state.velocity, params);
  const double lam = wd.active ? cfg.lambda : 0.0;
  const bool boosted = wd.active && wd.compound != 1.0 && lam != 0.0;

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params.value(i).array();
    const auto& g = params.grad(i).array();

    // Decay and gradient both read the pre-step weights. A boosted firing
    // applies the compounded factor directly instead of entering the
    // momentum buffer.
    Eigen::ArrayXd g_eff = g;
    if (lam != 0.0 && !boosted) g_eff += lam * w;
    if (boosted) w *= std::pow(1.0 - alpha * lam, wd.compound);

    if (cfg.momentum != 0.0) {
      auto& v = state.velocity[i].array();
      v = cfg.momentum * v + g_eff;
      w -= alpha * v;
    } else {
      w -= alpha * g_eff;
    }
    if (!params.value(i).all_finite()) throw_non_finite("sgd_step", params.name(i));
  }
}

void adam_step(ParamSet& params, AdamState& state, const AdamConfig& cfg,
               const WdStep& wd, double alpha) {
  ensure_like(state.m, params);
  ensure_like(state.v, params);
  if (cfg.mode == AdamMode::Separated) {
    ensure_like(state.m_prime, params);
    ensure_like(state.v_prime, params);
  }

  const double lam = wd.active ? cfg.lambda : 0.0;
  const bool boosted = wd.active && wd.compound != 1.0 && lam != 0.0;
  const double alpha_d = cfg.decay_uses_scheduled_lr ? alpha : cfg.alpha;

  state.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));

  double decay_update_sq = 0.0;

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& w = params.value(i).array();
    const auto& g = params.grad(i).array();
    auto& m = state.m[i].array();
    auto& v = state.v[i].array();

    if (cfg.mode == AdamMode::CoupledL2 && lam != 0.0 && !boosted) {
      Eigen::ArrayXd g_eff = g + lam * w;
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g_eff;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g_eff.square();
    } else {
      m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
      v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.square();
    }

    // Decoupled decay and the adaptive term both read the pre-update
    // weights: w <- (1 - alpha_d*lam) w - alpha mhat/(sqrt(vhat) + eps).
    // A boosted firing compounds the factor; coupled mode then takes the
    // same pre-update factor since a one-shot multiple cannot pass through
    // the moment buffers.
    if (cfg.mode == AdamMode::Decoupled && lam != 0.0) {
      w *= boosted ? std::pow(1.0 - alpha_d * lam, wd.compound)
                   : 1.0 - alpha_d * lam;
    } else if (cfg.mode == AdamMode::CoupledL2 && boosted) {
      w *= std::pow(1.0 - alpha_d * lam, wd.compound);
    }
    w -= alpha * (m / bc1) / ((v / bc2).sqrt() + cfg.eps);

    if (cfg.mode == AdamMode::Separated) {
      // Second optimizer over the decay signal, composed sequentially: its
      // buffers and update read the once-updated weights.
      auto& mp = state.m_prime[i].array();
      auto& vp = state.v_prime[i].array();
      mp = cfg.beta1 * mp + (1.0 - cfg.beta1) * w;
      vp = cfg.beta2 * vp + (1.0 - cfg.beta2) * w.square();
      if (boosted) {
        w *= std::pow(1.0 - alpha_d * lam, wd.compound);
      } else if (lam != 0.0) {
        Eigen::ArrayXd upd = (alpha_d * lam) * (mp / bc1) / ((vp / bc2).sqrt() + cfg.eps);
        decay_update_sq += upd.matrix().squaredNorm();
        w -= upd;
      }
    }

    if (!params.value(i).all_finite()) throw_non_finite("adam_step", params.name(i));
  }
  state.last_decay_update_norm = std::sqrt(decay_update_sq);
}

}  // namespace wdlab
