#pragma once

#include "wdlab/param_set.hpp"

#include <cstdint>
#include <vector>

namespace wdlab {

enum class LrDecayUnit { PerEpoch, PerStep };

struct SgdConfig {
  double alpha = 0.1;
  double momentum = 0.9;
  double lambda = 5e-4;
  double lr_decay = 0.97;
  LrDecayUnit lr_decay_unit = LrDecayUnit::PerEpoch;
};

struct SgdState {
  std::vector<Tensor> velocity;  // sized on first step
};

enum class AdamMode { CoupledL2, Decoupled, Separated };

struct AdamConfig {
  double alpha = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lambda = 1e-4;
  AdamMode mode = AdamMode::Decoupled;
  // Whether the decoupled/separated decay uses the scheduled or the base
  // learning rate for its alpha*lambda.
  bool decay_uses_scheduled_lr = true;
  double lr_decay = 1.0;
  LrDecayUnit lr_decay_unit = LrDecayUnit::PerEpoch;
};

/// Moment buffers. m/v track the objective gradient; m_prime/v_prime track
/// the weight signal and exist for the separated mode only.
struct AdamState {
  std::vector<Tensor> m, v, m_prime, v_prime;
  long t = 0;
  // l2 norm of the most recent separated-mode decay update, for telemetry.
  double last_decay_update_norm = 0.0;
};

/// Temporal weight-decay policy.
struct WdSchedule {
  enum class Policy { Always, Never, BeforeEpoch, AfterEpoch, EveryKSteps };

  Policy policy = Policy::Always;
  long cutoff_epoch = 0;  // BeforeEpoch / AfterEpoch
  long k = 1;             // EveryKSteps
  bool boost = false;     // compensate skipped steps with a one-shot factor

  static WdSchedule always() { return {}; }
  static WdSchedule never() { return {Policy::Never, 0, 1, false}; }
  static WdSchedule before_epoch(long e) { return {Policy::BeforeEpoch, e, 1, false}; }
  static WdSchedule after_epoch(long e) { return {Policy::AfterEpoch, e, 1, false}; }
  static WdSchedule every_k(long k, bool boost = false) {
    return {Policy::EveryKSteps, 0, k, boost};
  }
};

/// Whether decay applies at (epoch, step). BeforeEpoch(E): epoch < E;
/// AfterEpoch(E): epoch >= E; EveryKSteps(k): step % k == 0.
bool wd_active(const WdSchedule& schedule, long epoch, long step);

/// Per-step decay directive: `compound` > 1 on boosted every-k firings, where
/// the decay is applied as the one-shot factor (1 - alpha*lambda)^compound
/// instead of entering the gradient path.
struct WdStep {
  bool active = false;
  double compound = 1.0;
};
WdStep wd_step_for(const WdSchedule& schedule, long epoch, long step);

/// alpha * decay^epoch.
double lr_schedule(double base_alpha, double decay_per_epoch, long epoch);
double lr_schedule(const SgdConfig& cfg, long epoch);
double lr_schedule(const AdamConfig& cfg, long epoch);

/// One SGD step from the gradients currently held in `params`. When decay is
/// active the effective gradient is grad + lambda*w fed through momentum
/// (v <- mu v + g, w <- w - alpha v); an inactive step runs with lambda = 0.
/// Throws on a non-finite update.
void sgd_step(ParamSet& params, SgdState& state, const SgdConfig& cfg,
              const WdStep& wd, double alpha);

/// One Adam step in the configured mode.
///   coupled_l2: moment buffers fed grad + lambda*w.
///   decoupled:  buffers fed the raw grad; weights decayed by the factor
///               (1 - alpha_d*lambda) outside the adaptive update.
///   separated:  main buffers as decoupled; a second buffer pair tracks the
///               weights and drives the update w -= alpha_d*lambda *
///               mhat'/(sqrt(vhat') + eps). Bias correction everywhere.
/// All modes coincide exactly at lambda = 0. Throws on a non-finite update.
void adam_step(ParamSet& params, AdamState& state, const AdamConfig& cfg,
               const WdStep& wd, double alpha);

}  // namespace wdlab
