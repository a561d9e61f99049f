#pragma once

#include "wdlab/tensor.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace wdlab {

/// Named, ordered collection of trainable parameters, each with a gradient
/// slot of identical shape. Gradients accumulate additively; callers zero
/// them explicitly so instrumentation can read them between steps.
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor value) {
    if (find(name)) throw std::invalid_argument("ParamSet: duplicate name '" + name + "'");
    Entry e;
    e.name = std::move(name);
    e.grad = Tensor::zeros(value.shape());
    e.value = std::move(value);
    entries_.push_back(std::move(e));
    return entries_.size() - 1;
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  const std::string& name(std::size_t i) const { return entries_.at(i).name; }
  Tensor& value(std::size_t i) { return entries_.at(i).value; }
  const Tensor& value(std::size_t i) const { return entries_.at(i).value; }
  Tensor& grad(std::size_t i) { return entries_.at(i).grad; }
  const Tensor& grad(std::size_t i) const { return entries_.at(i).grad; }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i)
      if (entries_[i].name == name) return i;
    return std::nullopt;
  }

  void zero_grads() {
    for (auto& e : entries_) e.grad.array().setZero();
  }

  /// Total number of scalar weights.
  Index scalar_count() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  Eigen::VectorXd flat_values() const { return flatten(&Entry::value); }
  Eigen::VectorXd flat_grads() const { return flatten(&Entry::grad); }

  void set_flat_values(const Eigen::VectorXd& flat) {
    if (flat.size() != scalar_count())
      throw std::invalid_argument("ParamSet: flat vector size mismatch");
    Index off = 0;
    for (auto& e : entries_) {
      e.value.array() = flat.segment(off, e.value.size()).array();
      off += e.value.size();
    }
  }

  double values_norm() const {
    double sq = 0;
    for (const auto& e : entries_) sq += e.value.squared_norm();
    return std::sqrt(sq);
  }

  double grads_norm() const {
    double sq = 0;
    for (const auto& e : entries_) sq += e.grad.squared_norm();
    return std::sqrt(sq);
  }

 private:
  struct Entry {
    std::string name;
    Tensor value;
    Tensor grad;
  };

  Eigen::VectorXd flatten(Tensor Entry::* field) const {
    Eigen::VectorXd out(scalar_count());
    Index off = 0;
    for (const auto& e : entries_) {
      const Tensor& t = e.*field;
      out.segment(off, t.size()) = t.array().matrix();
      off += t.size();
    }
    return out;
  }

  std::vector<Entry> entries_;
};

}  // namespace wdlab
