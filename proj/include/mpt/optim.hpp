#pragma once

// AdamW with decoupled weight decay, and global-norm gradient clipping.

#include "mpt/params.hpp"

#include <cmath>
#include <vector>

namespace mpt {

struct AdamWOptions {
  double lr = 1e-4;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
class AdamW {
 public:
  AdamW(const ParamSet<Scalar>& params, AdamWOptions options) : options_(options) {
    for (const auto& p : params) {
      m_.push_back(Matrix<Scalar>::Zero(p.value.rows(), p.value.cols()));
      v_.push_back(Matrix<Scalar>::Zero(p.value.rows(), p.value.cols()));
    }
  }

  /// One update from the gradients currently stored in `params`.
  void step(ParamSet<Scalar>& params) {
    if (params.size() != m_.size()) throw ShapeError("optimizer state does not match the parameter set");
    ++steps_;
    const double c1 = 1 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1 - std::pow(options_.beta2, static_cast<double>(steps_));
    const auto b1 = static_cast<Scalar>(options_.beta1), b2 = static_cast<Scalar>(options_.beta2);
    const auto lr = static_cast<Scalar>(options_.lr);
    const auto decay = static_cast<Scalar>(1 - options_.lr * options_.weight_decay);
    const auto eps = static_cast<Scalar>(options_.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i];
      if (p.grad.rows() != m_[i].rows() || p.grad.cols() != m_[i].cols())
        throw ShapeError("gradient of '" + p.name + "' has shape " + shape_str(p.grad));
      m_[i] = b1 * m_[i] + (1 - b1) * p.grad;
      v_[i] = b2 * v_[i] + (1 - b2) * p.grad.cwiseAbs2();
      const Matrix<Scalar> m_hat = m_[i] / static_cast<Scalar>(c1);
      const Matrix<Scalar> v_hat = v_[i] / static_cast<Scalar>(c2);
      p.value = decay * p.value - lr * (m_hat.array() / (v_hat.array().sqrt() + eps)).matrix();
    }
  }

  long steps() const { return steps_; }
  const AdamWOptions& options() const { return options_; }

 private:
  AdamWOptions options_;
  std::vector<Matrix<Scalar>> m_, v_;
  long steps_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename Scalar>
double clip_grad_norm(ParamSet<Scalar>& params, double max_norm) {
  const double norm = params.grad_norm();
  if (!std::isfinite(norm)) throw NumericError("gradient norm is not finite");
  if (norm > max_norm) {
    const auto s = static_cast<Scalar>(max_norm / norm);
    for (auto& p : params) p.grad *= s;
  }
  return norm;
}

}  // namespace mpt
