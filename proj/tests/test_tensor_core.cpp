#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_util.hpp"

#include "wdlab/tape.hpp"

#include <cmath>

using namespace wdlab;
using namespace wdlab::testing;

namespace {

// Loss of a parameter vector through a user-supplied tape program, as a plain
// function of flat inputs. Used to drive the finite-difference oracle.
double eval_loss(const std::function<Var(Tape&, ParamSet&)>& program,
                 ParamSet& params, const Eigen::VectorXd& flat) {
  params.set_flat_values(flat);
  Tape tape;
  return tape.value(program(tape, params)).value();
}

Eigen::VectorXd tape_gradient(const std::function<Var(Tape&, ParamSet&)>& program,
                              ParamSet& params, const Eigen::VectorXd& flat) {
  params.set_flat_values(flat);
  Tape tape;
  const Var loss = program(tape, params);
  params.zero_grads();
  tape.backward(loss);
  return params.flat_grads();
}

void check_gradients(const std::function<Var(Tape&, ParamSet&)>& program,
                     ParamSet& params, double tol) {
  const Eigen::VectorXd flat = params.flat_values();
  auto f = [&](const Eigen::VectorXd& x) { return eval_loss(program, params, x); };
  const Eigen::VectorXd fd = fd_gradient(f, flat);
  const Eigen::VectorXd ad = tape_gradient(program, params, flat);
  CHECK(max_rel_error(ad, fd) < tol);
}

}  // namespace

TEST_CASE("matmul forward") {
  Tape t;
  const Var a = t.leaf(Tensor::of({2, 2}, {1, 0, 0, 1}));
  const Var b = t.leaf(Tensor::of({2, 2}, {2, 3, 4, 5}));
  const Var c = matmul(t, a, b);
  CHECK(t.value(c).at(0, 0) == 2);
  CHECK(t.value(c).at(0, 1) == 3);
  CHECK(t.value(c).at(1, 0) == 4);
  CHECK(t.value(c).at(1, 1) == 5);

  const Var r = matmul(t, t.leaf(Tensor::of({1, 2}, {1, 2})),
                       t.leaf(Tensor::of({2, 1}, {3, 4})));
  CHECK(t.value(r).value() == 11);
}

TEST_CASE("matmul shape mismatch") {
  Tape t;
  const Var a = t.leaf(Tensor::zeros({2, 3}));
  const Var b = t.leaf(Tensor::zeros({2, 3}));
  CHECK_THROWS_AS(matmul(t, a, b), std::invalid_argument);
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(7);
  ParamSet params;
  params.add("a", random_tensor({3, 4}, rng));
  params.add("b", random_tensor({4, 2}, rng));
  auto program = [](Tape& t, ParamSet& p) {
    const Var prod = matmul(t, t.param(p, 0), t.param(p, 1));
    return sum(t, square(t, prod));  // scalar with nontrivial output grads
  };
  check_gradients(program, params, 1e-6);
}

TEST_CASE("relu forward and zero gradient on negatives") {
  Tape t;
  const Var x = t.leaf(Tensor::of({3}, {-1, 0, 2}));
  const Var y = relu(t, x);
  CHECK(t.value(y)[0] == 0);
  CHECK(t.value(y)[1] == 0);
  CHECK(t.value(y)[2] == 2);

  ParamSet params;
  params.add("w", Tensor::of({3}, {-1, -2, -0.5}));
  Tape t2;
  const Var loss = sum(t2, relu(t2, t2.param(params, 0)));
  CHECK(t2.value(loss).value() == 0);
  params.zero_grads();
  t2.backward(loss);
  CHECK(params.flat_grads().norm() == 0);
}

TEST_CASE("relu gradient matches finite differences away from zero") {
  Rng rng(11);
  ParamSet params;
  Tensor w = random_tensor({8}, rng);
  for (Index i = 0; i < w.size(); ++i)  // keep away from the kink
    if (std::abs(w[i]) < 0.05) w[i] = 0.1;
  params.add("w", std::move(w));
  auto program = [](Tape& t, ParamSet& p) {
    return sum(t, square(t, relu(t, t.param(p, 0))));
  };
  check_gradients(program, params, 1e-6);
}

TEST_CASE("batch_norm standardized input is a near no-op") {
  // Columns already have mean 0 and biased variance 1.
  Tape t;
  const Var x = t.leaf(Tensor::of({2, 2}, {-1, 1, 1, -1}));
  const Var gamma = t.leaf(Tensor::of({2}, {1, 1}));
  const Var beta = t.leaf(Tensor::zeros({2}));
  const double eps = 1e-5;
  const Var y = batch_norm(t, x, gamma, beta, eps);
  for (Index i = 0; i < 4; ++i)
    CHECK(std::abs(t.value(y)[i] - t.value(x)[i]) < eps);
}

TEST_CASE("batch_norm kills input scale") {
  Rng rng(3);
  const Tensor x = random_tensor({6, 4}, rng);
  Tensor x3(x.shape(), 3.0 * x.array());
  const Tensor gamma = random_tensor({4}, rng, 0.5, 1.5);
  const Tensor beta = random_tensor({4}, rng, -0.5, 0.5);

  auto run = [&](const Tensor& input) {
    Tape t;
    return t.value(batch_norm(t, t.leaf(input), t.leaf(gamma), t.leaf(beta), 1e-12));
  };
  const Tensor a = run(x);
  const Tensor b = run(x3);
  CHECK((a.array() - b.array()).abs().maxCoeff() < 1e-9);
}

TEST_CASE("batch_norm rejects singleton batches") {
  Tape t;
  const Var x = t.leaf(Tensor::zeros({1, 3}));
  const Var gamma = t.leaf(Tensor::zeros({3}));
  const Var beta = t.leaf(Tensor::zeros({3}));
  CHECK_THROWS_AS(batch_norm(t, x, gamma, beta, 1e-5), std::invalid_argument);
}

TEST_CASE("batch_norm gradients match finite differences") {
  Rng rng(5);
  ParamSet params;
  params.add("x", random_tensor({5, 3}, rng));
  params.add("gamma", random_tensor({3}, rng, 0.5, 1.5));
  params.add("beta", random_tensor({3}, rng, -0.5, 0.5));
  // Project through a fixed matrix: a plain sum of squares of the output is
  // almost x-independent (standardization pins the per-column norm), which
  // would leave only O(eps) gradients to compare.
  const Tensor proj = random_tensor({3, 4}, rng);
  auto program = [&proj](Tape& t, ParamSet& p) {
    const Var y = batch_norm(t, t.param(p, 0), t.param(p, 1), t.param(p, 2), 1e-5);
    return sum(t, square(t, matmul(t, y, t.leaf(proj))));
  };
  check_gradients(program, params, 1e-5);
}

TEST_CASE("cross_entropy_split uniform logits give ln(num_classes)") {
  Tape t;
  const Var logits = t.leaf(Tensor::zeros({4, 10}));
  const auto parts = cross_entropy_split(t, logits, {0, 3, 7, 9});
  CHECK(t.value(parts.loss).value() == doctest::Approx(std::log(10.0)).epsilon(1e-12));
  CHECK(t.value(parts.loss_pos).value() == 0.0);
}

TEST_CASE("cross_entropy_split additivity of loss and gradient") {
  Rng rng(13);
  ParamSet params;
  params.add("logits", random_tensor({6, 5}, rng));
  std::vector<int> labels = {0, 4, 2, 2, 1, 3};

  Tape t;
  const Var logits = t.param(params, 0);
  const auto parts = cross_entropy_split(t, logits, labels);
  CHECK(std::abs(t.value(parts.loss).value() - (t.value(parts.loss_pos).value() +
                                                t.value(parts.loss_neg).value())) <
        1e-12);

  params.zero_grads();
  t.backward(parts.loss_pos);
  const Eigen::VectorXd gpos = params.flat_grads();
  params.zero_grads();
  t.backward(parts.loss_neg);
  const Eigen::VectorXd gneg = params.flat_grads();
  params.zero_grads();
  t.backward(parts.loss);
  const Eigen::VectorXd gtotal = params.flat_grads();
  CHECK((gtotal - (gpos + gneg)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("cross_entropy_split loss_neg ignores label permutations bitwise") {
  Rng rng(17);
  ParamSet params;
  params.add("logits", random_tensor({8, 4}, rng));
  std::vector<int> labels = {0, 1, 2, 3, 0, 1, 2, 3};

  auto neg_and_grad = [&](const std::vector<int>& lab) {
    Tape t;
    const auto parts = cross_entropy_split(t, t.param(params, 0), lab);
    params.zero_grads();
    t.backward(parts.loss_neg);
    return std::pair{t.value(parts.loss_neg).value(), params.flat_grads()};
  };

  const auto [base_neg, base_grad] = neg_and_grad(labels);
  Rng shuffler(99);
  for (int rep = 0; rep < 5; ++rep) {
    std::vector<int> permuted = labels;
    shuffler.shuffle(permuted);
    const auto [neg, grad] = neg_and_grad(permuted);
    CHECK(neg == base_neg);                       // bitwise
    CHECK((grad - base_grad).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("cross_entropy_split rejects out-of-range labels") {
  Tape t;
  const Var logits = t.leaf(Tensor::zeros({2, 3}));
  CHECK_THROWS_AS(cross_entropy_split(t, logits, {0, 3}), std::out_of_range);
  Tape t2;
  const Var logits2 = t2.leaf(Tensor::zeros({2, 3}));
  CHECK_THROWS_AS(cross_entropy_split(t2, logits2, {-1, 0}), std::out_of_range);
}

TEST_CASE("backward on sum gives ones, on half squared norm gives w") {
  ParamSet params;
  params.add("w", Tensor::of({4}, {0.5, -1.5, 2.0, 0.0}));

  Tape t;
  const Var loss = sum(t, t.param(params, 0));
  params.zero_grads();
  t.backward(loss);
  for (Index i = 0; i < 4; ++i) CHECK(params.grad(0)[i] == 1.0);

  Tape t2;
  const Var half_sq = scale(t2, sum(t2, square(t2, t2.param(params, 0))), 0.5);
  params.zero_grads();
  t2.backward(half_sq);
  for (Index i = 0; i < 4; ++i) CHECK(params.grad(0)[i] == params.value(0)[i]);
}

TEST_CASE("backward rejects non-scalar roots") {
  Tape t;
  const Var x = t.leaf(Tensor::zeros({2, 2}));
  CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("gradients accumulate across repeated parameter uses") {
  ParamSet params;
  params.add("w", Tensor::of({2}, {1.0, 2.0}));
  Tape t;
  const Var a = t.param(params, 0);
  const Var b = t.param(params, 0);  // same slot bound twice
  const Var loss = sum(t, add(t, a, b));
  params.zero_grads();
  t.backward(loss);
  CHECK(params.grad(0)[0] == 2.0);
  CHECK(params.grad(0)[1] == 2.0);
}

TEST_CASE("two-layer network gradients match finite differences") {
  Rng rng(23);
  ParamSet params;
  params.add("w1", random_tensor({3, 6}, rng, -0.8, 0.8));
  params.add("b1", random_tensor({6}, rng, -0.3, 0.3));
  params.add("w2", random_tensor({6, 4}, rng, -0.8, 0.8));
  params.add("b2", random_tensor({4}, rng, -0.3, 0.3));

  Rng data_rng(31);
  const Tensor x = random_tensor({8, 3}, data_rng);
  const std::vector<int> labels = {0, 1, 2, 3, 0, 1, 2, 3};

  auto program = [&](Tape& t, ParamSet& p) {
    Var h = matmul(t, t.leaf(x), t.param(p, 0));
    h = add_row_broadcast(t, h, t.param(p, 1));
    h = relu(t, h);
    h = matmul(t, h, t.param(p, 2));
    h = add_row_broadcast(t, h, t.param(p, 3));
    return cross_entropy_split(t, h, labels).loss;
  };
  check_gradients(program, params, 1e-5);
}

TEST_CASE("property: gradient correctness over random programs") {
  // Mixed pipeline: matmul -> batch_norm -> relu -> cross-entropy.
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    Rng rng(100 + trial);
    ParamSet params;
    params.add("w1", random_tensor({4, 5}, rng, -1.0, 1.0));
    params.add("gamma", random_tensor({5}, rng, 0.5, 1.5));
    params.add("beta", random_tensor({5}, rng, -0.5, 0.5));
    params.add("w2", random_tensor({5, 3}, rng, -1.0, 1.0));

    const Tensor x = random_tensor({6, 4}, rng);
    const std::vector<int> labels = {0, 1, 2, 0, 1, 2};
    auto program = [&](Tape& t, ParamSet& p) {
      Var h = matmul(t, t.leaf(x), t.param(p, 0));
      h = batch_norm(t, h, t.param(p, 1), t.param(p, 2), 1e-5);
      h = relu(t, h);
      h = matmul(t, h, t.param(p, 3));
      return cross_entropy_split(t, h, labels).loss;
    };

    params.set_flat_values(params.flat_values());
    const Eigen::VectorXd flat = params.flat_values();
    auto f = [&](const Eigen::VectorXd& v) { return eval_loss(program, params, v); };
    const Eigen::VectorXd fd = fd_gradient(f, flat);
    const Eigen::VectorXd ad = tape_gradient(program, params, flat);
    CHECK(max_rel_error(ad, fd) < 1e-4);
  }
}

TEST_CASE("determinism: identical inputs give bitwise-identical results") {
  auto run = [] {
    Rng rng(42);
    ParamSet params;
    params.add("w", random_tensor({4, 4}, rng));
    const Tensor x = random_tensor({4, 4}, rng);
    Tape t;
    const Var h = matmul(t, t.leaf(x), t.param(params, 0));
    const auto parts = cross_entropy_split(t, h, {0, 1, 2, 3});
    params.zero_grads();
    t.backward(parts.loss);
    return std::pair{t.value(parts.loss).value(), params.flat_grads()};
  };
  const auto [l1, g1] = run();
  const auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK((g1 - g2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, Eigen::ArrayXd::Zero(3)), std::invalid_argument);
  Tensor t = Tensor::of({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  CHECK_FALSE(t.all_finite());
  CHECK(Tensor::scalar(3.0).value() == 3.0);
}
