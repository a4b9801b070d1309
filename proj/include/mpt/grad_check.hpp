#pragma once

#include "mpt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace mpt {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0;
  double max_abs_error = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_rel_error = 0;
  bool passed = false;
};

template <typename Scalar>
using LossFn = std::function<Var<Scalar>(Tape<Scalar>&, ParamSet<Scalar>&)>;

/// Compares reverse-mode gradients of a scalar loss against central finite
/// differences with step h. Relative error per entry is
/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
template <typename Scalar>
GradCheckReport grad_check(const LossFn<Scalar>& f, ParamSet<Scalar>& params, double h = 1e-4, double tol = 1e-3,
                           double floor = 1e-6) {
  const auto evaluate = [&]() {
    Tape<Scalar> tape(false);
    const double v = static_cast<double>(f(tape, params).value()(0, 0));
    if (!std::isfinite(v)) throw NumericError("grad_check loss is not finite");
    return v;
  };

  params.zero_grad();
  {
    Tape<Scalar> tape(true);
    Var<Scalar> loss = f(tape, params);
    if (!std::isfinite(static_cast<double>(loss.value()(0, 0)))) throw NumericError("grad_check loss is not finite");
    tape.backward(loss);
  }

  GradCheckReport report;
  for (auto& p : params) {
    GradCheckEntry e;
    e.name = p.name;
    for (Index i = 0; i < p.value.size(); ++i) {
      const Scalar saved = p.value(i);
      p.value(i) = static_cast<Scalar>(static_cast<double>(saved) + h);
      const double up = evaluate();
      p.value(i) = static_cast<Scalar>(static_cast<double>(saved) - h);
      const double down = evaluate();
      p.value(i) = saved;
      const double numeric = (up - down) / (2 * h);
      const double analytic = static_cast<double>(p.grad(i));
      const double abs_err = std::abs(analytic - numeric);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
      e.max_abs_error = std::max(e.max_abs_error, abs_err);
      e.max_rel_error = std::max(e.max_rel_error, abs_err / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, e.max_rel_error);
    report.entries.push_back(std::move(e));
  }
  report.passed = report.max_rel_error < tol;
  return report;
}

}  // namespace mpt
