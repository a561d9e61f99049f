#pragma once

#include "wdlab/param_set.hpp"
#include "wdlab/tape.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace wdlab {

struct MlpConfig {
  std::vector<Index> layer_widths;  // input, hidden..., output
  bool use_batch_norm = false;
  std::uint64_t init_seed = 0;
  // Everything runs in float64, so the variance guard can sit far below the
  // rescale-invariance tolerances instead of at the usual float32 1e-5.
  double bn_eps = 1e-12;
};

/// Feed-forward classifier. Hidden linear layers are followed by batch norm
/// (when enabled) and relu; batch-normed hidden layers carry no linear bias
/// (redundant with beta). The output layer always has a bias.
///
/// Parameter names: "l<i>.w", "l<i>.b", "l<i>.bn.gamma", "l<i>.bn.beta".
struct Model {
  ParamSet params;
  MlpConfig config;
};

/// He-style initialization: weights ~ N(0, 2/fan_in), biases 0, gamma 1,
/// beta 0. Deterministic per init_seed.
Model build_mlp(const MlpConfig& config);

/// Record the forward pass on `tape`, binding every parameter, and return
/// the logits node ([batch x output_width]).
Var mlp_forward(Model& model, Tape& tape, const Tensor& x);

/// True when the parameter is a normalization affine (gamma/beta), the set
/// excluded by the non_norm_params rescaling scope.
bool is_norm_param(const std::string& name);

// Checkpoints: a JSON header (config, tensor names and shapes) followed by
// the raw little-endian float64 buffers in header order.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace wdlab
