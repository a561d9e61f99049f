#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace wdlab {

using Index = Eigen::Index;

using RowMajorMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatView = Eigen::Map<RowMajorMatrix>;
using ConstMatView = Eigen::Map<const RowMajorMatrix>;

/// Dense n-dimensional float64 array, row-major. Rank 0 (empty shape) is a
/// scalar. The flat buffer is an Eigen array so elementwise expressions work
/// directly on `array()`; 2-d tensors expose a row-major matrix view via
/// `mat()` for products.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<Index> shape)
      : shape_(std::move(shape)), data_(Eigen::ArrayXd::Zero(count(shape_))) {}

  Tensor(std::vector<Index> shape, Eigen::ArrayXd data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_)) {
      throw std::invalid_argument("Tensor: shape/data size mismatch (" +
                                  std::to_string(count(shape_)) + " vs " +
                                  std::to_string(data_.size()) + ")");
    }
  }

  static Tensor zeros(std::vector<Index> shape) { return Tensor(std::move(shape)); }

  static Tensor scalar(double v) {
    Tensor t{std::vector<Index>{}};
    t.data_[0] = v;
    return t;
  }

  static Tensor of(std::vector<Index> shape, std::initializer_list<double> values) {
    Eigen::ArrayXd d(static_cast<Index>(values.size()));
    Index i = 0;
    for (double v : values) d[i++] = v;
    return Tensor(std::move(shape), std::move(d));
  }

  static Tensor from_matrix(const Eigen::MatrixXd& m) {
    Tensor t{{m.rows(), m.cols()}};
    t.mat() = m;
    return t;
  }

  const std::vector<Index>& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return data_.size(); }

  Index rows() const { return dim(0); }
  Index cols() const { return dim(1); }
  Index dim(std::size_t i) const {
    if (i >= shape_.size()) throw std::out_of_range("Tensor::dim: axis out of range");
    return shape_[i];
  }

  Eigen::ArrayXd& array() { return data_; }
  const Eigen::ArrayXd& array() const { return data_; }

  double& operator[](Index i) { return data_[i]; }
  double operator[](Index i) const { return data_[i]; }

  double& at(Index r, Index c) { return data_[r * cols() + c]; }
  double at(Index r, Index c) const { return data_[r * cols() + c]; }

  double value() const {
    if (size() != 1) throw std::logic_error("Tensor::value: not a scalar");
    return data_[0];
  }

  /// Row-major matrix view. Rank must be 2.
  MatView mat() {
    require_rank2();
    return MatView(data_.data(), shape_[0], shape_[1]);
  }
  ConstMatView mat() const {
    require_rank2();
    return ConstMatView(data_.data(), shape_[0], shape_[1]);
  }

  bool all_finite() const { return data_.isFinite().all(); }

  double squared_norm() const { return data_.matrix().squaredNorm(); }
  double norm() const { return data_.matrix().norm(); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  static Index count(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index d : shape) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  static std::string shape_string(const std::vector<Index>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }

 private:
  void require_rank2() const {
    if (shape_.size() != 2) {
      throw std::logic_error("Tensor: matrix view requires rank 2, have " +
                             shape_string(shape_));
    }
  }

  // Default state is a rank-0 scalar zero so product(shape) == size always holds.
  std::vector<Index> shape_;
  Eigen::ArrayXd data_ = Eigen::ArrayXd::Zero(1);
};

}  // namespace wdlab
