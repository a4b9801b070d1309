#pragma once

#include "mpt/types.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace mpt {

template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;
};

/// Named parameter tensors in registration order, each with a gradient
/// buffer of the same shape.
template <typename Scalar>
class ParamSet {
 public:
  std::size_t add(const std::string& name, Matrix<Scalar> value) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    Parameter<Scalar> p{name, std::move(value), {}};
    p.grad = Matrix<Scalar>::Zero(p.value.rows(), p.value.cols());
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return params_.size() - 1;
  }

  std::size_t size() const { return params_.size(); }
  Parameter<Scalar>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<Scalar>& operator[](std::size_t i) const { return params_[i]; }

  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }
  Parameter<Scalar>& at(const std::string& name) { return params_[index_of(name)]; }
  const Parameter<Scalar>& at(const std::string& name) const { return params_[index_of(name)]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  void zero_grad() {
    for (auto& p : params_) p.grad.setZero();
  }

  Index count() const {
    Index n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  /// Global L2 norm over every gradient buffer, accumulated in double.
  double grad_norm() const {
    double s = 0;
    for (const auto& p : params_) s += p.grad.template cast<double>().squaredNorm();
    return std::sqrt(s);
  }

  /// Adds another set's gradients (same layout) into this one.
  void accumulate_grads(const ParamSet& other) {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].grad += other.params_[i].grad;
  }

  template <typename To>
  ParamSet<To> cast() const {
    ParamSet<To> out;
    for (const auto& p : params_) out.add(p.name, p.value.template cast<To>());
    return out;
  }

 private:
  std::vector<Parameter<Scalar>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace mpt
