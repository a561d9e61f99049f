#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"

#include "wdlab/model.hpp"

#include <cstdio>
#include <filesystem>

using namespace wdlab;
using namespace wdlab::testing;

TEST_CASE("build_mlp parameter layout with batch norm") {
  Model m = build_mlp({{4, 8, 3}, true, 1});
  // hidden: 4x8 weights + gamma(8) + beta(8); output: 8x3 weights + bias(3)
  CHECK(m.params.scalar_count() == 4 * 8 + (8 + 8) + 8 * 3 + 3);
  CHECK(m.params.find("l0.w").has_value());
  CHECK(m.params.find("l0.bn.gamma").has_value());
  CHECK(m.params.find("l0.bn.beta").has_value());
  CHECK_FALSE(m.params.find("l0.b").has_value());
  CHECK(m.params.find("l1.b").has_value());
  CHECK(m.params.value(*m.params.find("l0.bn.gamma")).array().minCoeff() == 1.0);
}

TEST_CASE("build_mlp is deterministic per seed") {
  const Model a = build_mlp({{5, 7, 2}, false, 42});
  const Model b = build_mlp({{5, 7, 2}, false, 42});
  const Model c = build_mlp({{5, 7, 2}, false, 43});
  CHECK((a.params.flat_values() - b.params.flat_values()).cwiseAbs().maxCoeff() == 0.0);
  CHECK((a.params.flat_values() - c.params.flat_values()).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("two widths give a bias-only linear classifier") {
  Model m = build_mlp({{2, 2}, false, 0});
  CHECK(m.params.size() == 2);  // weights + output bias
  CHECK(m.params.scalar_count() == 2 * 2 + 2);
}

TEST_CASE("build_mlp rejects bad widths") {
  CHECK_THROWS_AS(build_mlp({{4}, false, 0}), std::invalid_argument);
  CHECK_THROWS_AS(build_mlp({{4, 0, 2}, false, 0}), std::invalid_argument);
}

TEST_CASE("zero weights and zero input give zero logits") {
  Model m = build_mlp({{3, 4, 2}, true, 9});
  for (std::size_t i = 0; i < m.params.size(); ++i)
    m.params.value(i).array().setZero();
  Tape t;
  const Var logits = mlp_forward(m, t, Tensor::zeros({4, 3}));
  CHECK(t.value(logits).array().abs().maxCoeff() == 0.0);
}

TEST_CASE("forward rejects input width mismatch") {
  Model m = build_mlp({{3, 4, 2}, false, 9});
  Tape t;
  CHECK_THROWS_AS(mlp_forward(m, t, Tensor::zeros({4, 5})), std::invalid_argument);
}

TEST_CASE("batch norm makes logits invariant to hidden weight rescaling") {
  Rng rng(21);
  Model m = build_mlp({{6, 10, 4}, true, 77});
  const Tensor x = random_tensor({12, 6}, rng);

  auto logits_of = [&](Model& model) {
    Tape t;
    return t.value(mlp_forward(model, t, x));
  };
  const Tensor base = logits_of(m);

  Model scaled = build_mlp({{6, 10, 4}, true, 77});
  scaled.params.value(*scaled.params.find("l0.w")).array() *= 3.0;
  const Tensor after = logits_of(scaled);
  CHECK((base.array() - after.array()).abs().maxCoeff() < 1e-9);
}

TEST_CASE("without batch norm the same rescaling changes logits") {
  Rng rng(22);
  Model m = build_mlp({{6, 10, 4}, false, 77});
  const Tensor x = random_tensor({12, 6}, rng);
  Tape t1;
  const Tensor base = t1.value(mlp_forward(m, t1, x));
  m.params.value(*m.params.find("l0.w")).array() *= 3.0;
  Tape t2;
  const Tensor after = t2.value(mlp_forward(m, t2, x));
  CHECK((base.array() - after.array()).abs().maxCoeff() > 1e-3);
}

TEST_CASE("mlp gradients match finite differences") {
  Rng rng(33);
  Model m = build_mlp({{4, 6, 3}, true, 5});
  const Tensor x = random_tensor({8, 4}, rng);
  const std::vector<int> labels = {0, 1, 2, 0, 1, 2, 0, 1};

  auto loss_at = [&](const Eigen::VectorXd& flat) {
    m.params.set_flat_values(flat);
    Tape t;
    return t.value(cross_entropy_split(t, mlp_forward(m, t, x), labels).loss).value();
  };
  const Eigen::VectorXd flat = m.params.flat_values();
  const Eigen::VectorXd fd = fd_gradient(loss_at, flat);

  m.params.set_flat_values(flat);
  Tape t;
  const auto parts = cross_entropy_split(t, mlp_forward(m, t, x), labels);
  m.params.zero_grads();
  t.backward(parts.loss);
  CHECK(max_rel_error(m.params.flat_grads(), fd) < 1e-5);
}

TEST_CASE("checkpoint round-trip is bitwise") {
  Model m = build_mlp({{5, 8, 3}, true, 123});
  const std::string path =
      (std::filesystem::temp_directory_path() / "wdlab_ck_test.wdck").string();
  save_checkpoint(m, path);
  Model loaded = load_checkpoint(path);
  std::remove(path.c_str());

  CHECK(loaded.config.layer_widths == m.config.layer_widths);
  CHECK(loaded.config.use_batch_norm == m.config.use_batch_norm);
  CHECK(loaded.params.size() == m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i)
    CHECK(loaded.params.name(i) == m.params.name(i));
  CHECK((loaded.params.flat_values() - m.params.flat_values()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("load_checkpoint rejects garbage") {
  const std::string path =
      (std::filesystem::temp_directory_path() / "wdlab_ck_bad.wdck").string();
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    std::fputs("not a checkpoint", f);
    std::fclose(f);
  }
  CHECK_THROWS_AS(load_checkpoint(path), std::runtime_error);
  std::remove(path.c_str());
}
