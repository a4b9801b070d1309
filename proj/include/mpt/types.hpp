#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace mpt {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using MatrixXd = Matrix<double>;
using MatrixXf = Matrix<float>;
using Index = Eigen::Index;
using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

/// Base of every error raised by the library. `exit_code` follows the CLI
/// convention: 1 usage/config, 2 data, 3 numeric.
class Error : public std::runtime_error {
 public:
  Error(const std::string& what, int exit_code) : std::runtime_error(what), exit_code_(exit_code) {}
  int exit_code() const noexcept { return exit_code_; }

 private:
  int exit_code_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config error: " + what, 1) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data error: " + what, 2) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error("shape error: " + what, 1) {}
};

class AttentionError : public Error {
 public:
  explicit AttentionError(const std::string& what) : Error("attention error: " + what, 3) {}
};

class NumericError : public Error {
 public:
  explicit NumericError(const std::string& what) : Error("numeric error: " + what, 3) {}
};

/// Prompt budget exhausted; a data error for exit-code purposes.
class BudgetError : public DataError {
 public:
  explicit BudgetError(const std::string& what) : DataError("prompt budget: " + what) {}
};

inline std::string shape_str(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename Derived>
std::string shape_str(const Eigen::EigenBase<Derived>& m) {
  return shape_str(m.rows(), m.cols());
}

}  // namespace mpt
