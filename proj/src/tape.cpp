#include "wdlab/tape.hpp"

#include <cmath>
#include <memory>

namespace wdlab {

Var Tape::leaf(Tensor value) {
  return record(std::move(value), {}, nullptr);
}

Var Tape::param(ParamSet& params, std::size_t index) {
  Var v = record(params.value(index), {}, nullptr);
  Node& n = node(v);
  n.bound = &params;
  n.bound_index = index;
  return v;
}

Var Tape::record(Tensor value, std::vector<Index> inputs, BackwardFn backward) {
  for (Index in : inputs) {
    if (in < 0 || in >= size())
      throw std::out_of_range("Tape::record: input id not on tape");
  }
  Node n;
  n.grad = Tensor::zeros(value.shape());
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{size() - 1};
}

void Tape::backward(Var loss) {
  Node& root = node(loss);
  if (root.value.size() != 1)
    throw std::invalid_argument("Tape::backward: loss must be scalar, got " +
                                Tensor::shape_string(root.value.shape()));
  for (auto& n : nodes_) n.grad.array().setZero();
  root.grad.array()[0] = 1.0;
  for (Index id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backward) n.backward(*this, id);
    if (n.bound) n.bound->grad(n.bound_index).array() += n.grad.array();
  }
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                Tensor::shape_string(a.shape()) + " vs " +
                                Tensor::shape_string(b.shape()));
  }
}

}  // namespace

Var matmul(Tape& t, Var a, Var b) {
  const Tensor& ta = t.value(a);
  const Tensor& tb = t.value(b);
  if (ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows()) {
    throw std::invalid_argument("matmul: incompatible shapes " +
                                Tensor::shape_string(ta.shape()) + " * " +
                                Tensor::shape_string(tb.shape()));
  }
  Tensor out({ta.rows(), tb.cols()});
  out.mat() = ta.mat() * tb.mat();
  return t.record(std::move(out), {a.id, b.id}, [a, b](Tape& tp, Index self) {
    ConstMatView g = tp.grad(Var{self}).mat();
    tp.grad_mut(a).mat() += g * tp.value(b).mat().transpose();
    tp.grad_mut(b).mat() += tp.value(a).mat().transpose() * g;
  });
}

Var add(Tape& t, Var a, Var b) {
  const Tensor& ta = t.value(a);
  require_same_shape(ta, t.value(b), "add");
  Tensor out(ta.shape(), ta.array() + t.value(b).array());
  return t.record(std::move(out), {a.id, b.id}, [a, b](Tape& tp, Index self) {
    const auto& g = tp.grad(Var{self}).array();
    tp.grad_mut(a).array() += g;
    tp.grad_mut(b).array() += g;
  });
}

Var add_row_broadcast(Tape& t, Var x, Var row) {
  const Tensor& tx = t.value(x);
  const Tensor& tr = t.value(row);
  if (tx.rank() != 2 || tr.rank() != 1 || tr.dim(0) != tx.cols()) {
    throw std::invalid_argument("add_row_broadcast: shapes " +
                                Tensor::shape_string(tx.shape()) + " + " +
                                Tensor::shape_string(tr.shape()));
  }
  Tensor out({tx.rows(), tx.cols()});
  out.mat() = tx.mat().rowwise() + tr.array().matrix().transpose();
  return t.record(std::move(out), {x.id, row.id}, [x, row](Tape& tp, Index self) {
    ConstMatView g = tp.grad(Var{self}).mat();
    tp.grad_mut(x).mat() += g;
    tp.grad_mut(row).array().matrix() += g.colwise().sum().transpose();
  });
}

Var relu(Tape& t, Var x) {
  const Tensor& tx = t.value(x);
  Tensor out(tx.shape(), tx.array().max(0.0));
  return t.record(std::move(out), {x.id}, [x](Tape& tp, Index self) {
    const auto& xin = tp.value(x).array();
    tp.grad_mut(x).array() +=
        (xin > 0.0).select(tp.grad(Var{self}).array(), 0.0);
  });
}

Var batch_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  using RowArray = Eigen::Array<double, 1, Eigen::Dynamic>;
  using ArrayRM = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  const Tensor& tx = t.value(x);
  const Tensor& tg = t.value(gamma);
  const Tensor& tb = t.value(beta);
  if (tx.rank() != 2) throw std::invalid_argument("batch_norm: x must be rank 2");
  const Index b = tx.rows(), d = tx.cols();
  if (b < 2) throw std::invalid_argument("batch_norm: batch size must be >= 2");
  if (tg.rank() != 1 || tg.dim(0) != d || tb.rank() != 1 || tb.dim(0) != d)
    throw std::invalid_argument("batch_norm: gamma/beta must have length d");

  ArrayRM xa = tx.mat().array();
  RowArray mean = xa.colwise().sum() / double(b);
  ArrayRM centered = xa.rowwise() - mean;
  RowArray var = centered.square().colwise().sum() / double(b);  // biased
  auto istd = std::make_shared<RowArray>((var + eps).rsqrt());
  auto xhat = std::make_shared<ArrayRM>(centered.rowwise() * (*istd));

  RowArray gamma_row = tg.array().transpose();
  RowArray beta_row = tb.array().transpose();
  Tensor out({b, d});
  out.mat() = ((xhat->rowwise() * gamma_row).rowwise() + beta_row).matrix();

  return t.record(std::move(out), {x.id, gamma.id, beta.id},
                  [x, gamma, beta, xhat, istd, b](Tape& tp, Index self) {
                    ArrayRM g = tp.grad(Var{self}).mat().array();
                    RowArray gamma_row = tp.value(gamma).array().transpose();

                    tp.grad_mut(beta).array() +=
                        g.colwise().sum().transpose();
                    tp.grad_mut(gamma).array() +=
                        (g * (*xhat)).colwise().sum().transpose();

                    // dL/dxhat, then the standardization backward for biased
                    // batch statistics.
                    ArrayRM gx = g.rowwise() * gamma_row;
                    RowArray mean_g = gx.colwise().sum() / double(b);
                    RowArray mean_gx = (gx * (*xhat)).colwise().sum() / double(b);
                    tp.grad_mut(x).mat().array() +=
                        ((gx.rowwise() - mean_g) -
                         (xhat->rowwise() * mean_gx))
                            .rowwise() *
                        (*istd);
                  });
}

Var sum(Tape& t, Var x) {
  Tensor out = Tensor::scalar(t.value(x).array().sum());
  return t.record(std::move(out), {x.id}, [x](Tape& tp, Index self) {
    tp.grad_mut(x).array() += tp.grad(Var{self}).array()[0];
  });
}

Var scale(Tape& t, Var x, double c) {
  const Tensor& tx = t.value(x);
  Tensor out(tx.shape(), tx.array() * c);
  return t.record(std::move(out), {x.id}, [x, c](Tape& tp, Index self) {
    tp.grad_mut(x).array() += c * tp.grad(Var{self}).array();
  });
}

Var square(Tape& t, Var x) {
  const Tensor& tx = t.value(x);
  Tensor out(tx.shape(), tx.array().square());
  return t.record(std::move(out), {x.id}, [x](Tape& tp, Index self) {
    tp.grad_mut(x).array() +=
        2.0 * tp.value(x).array() * tp.grad(Var{self}).array();
  });
}

CrossEntropyParts cross_entropy_split(Tape& t, Var logits,
                                      const std::vector<int>& labels) {
  const Tensor& tl = t.value(logits);
  if (tl.rank() != 2) throw std::invalid_argument("cross_entropy_split: logits must be rank 2");
  const Index b = tl.rows(), c = tl.cols();
  if (static_cast<Index>(labels.size()) != b)
    throw std::invalid_argument("cross_entropy_split: labels size != batch size");
  for (Index i = 0; i < b; ++i) {
    if (labels[static_cast<std::size_t>(i)] < 0 ||
        labels[static_cast<std::size_t>(i)] >= c) {
      throw std::out_of_range("cross_entropy_split: label out of range at row " +
                              std::to_string(i));
    }
  }

  ConstMatView lm = tl.mat();
  Eigen::VectorXd row_max = lm.rowwise().maxCoeff();
  RowMajorMatrix shifted = lm.colwise() - row_max;
  auto softmax = std::make_shared<RowMajorMatrix>(shifted.array().exp().matrix());
  Eigen::VectorXd row_sum = softmax->rowwise().sum();
  softmax->array() = softmax->array().colwise() / row_sum.array();

  double pos = 0.0;
  for (Index i = 0; i < b; ++i) pos -= lm(i, labels[static_cast<std::size_t>(i)]);
  pos /= double(b);

  const double neg =
      (row_max.array() + row_sum.array().log()).sum() / double(b);

  auto labels_copy = std::make_shared<std::vector<int>>(labels);

  Var loss_pos = t.record(
      Tensor::scalar(pos), {logits.id}, [logits, labels_copy, b](Tape& tp, Index self) {
        const double g = tp.grad(Var{self}).array()[0];
        MatView gl = tp.grad_mut(logits).mat();
        const double w = -g / double(b);
        for (Index i = 0; i < b; ++i)
          gl(i, (*labels_copy)[static_cast<std::size_t>(i)]) += w;
      });

  Var loss_neg = t.record(
      Tensor::scalar(neg), {logits.id}, [logits, softmax, b](Tape& tp, Index self) {
        const double g = tp.grad(Var{self}).array()[0];
        tp.grad_mut(logits).mat() += (g / double(b)) * (*softmax);
      });

  Var loss = add(t, loss_pos, loss_neg);
  return {loss, loss_pos, loss_neg};
}

}  // namespace wdlab
