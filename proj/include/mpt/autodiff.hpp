#pragma once

// Tape-based reverse-mode differentiation over dense 2-D matrices.
//
// Every value flowing through the model is a rows x cols matrix (tokens x
// features). Ops are free functions that append a node to the tape holding
// the forward value and a closure that propagates the node's gradient to
// its parents. `Tape::backward` walks the nodes in reverse creation order.

#include "mpt/params.hpp"
#include "mpt/types.hpp"

#include <functional>
#include <optional>
#include <random>
#include <vector>

namespace mpt {

template <typename Scalar>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename Scalar>
struct Var {
  Tape<Scalar>* tape = nullptr;
  int id = -1;

  const Matrix<Scalar>& value() const { return tape->value(*this); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Backward = std::function<void(Tape&, int)>;

  /// `record` false builds an inference-only tape: no closures, no grads.
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Dropout is active only in training mode, and needs an rng.
  void set_training(bool training, std::mt19937_64* rng = nullptr) {
    training_ = training;
    rng_ = rng;
  }
  bool training() const { return training_; }
  std::mt19937_64& rng();
  bool recording() const { return record_; }

  Var<Scalar> constant(Mat value);
  /// Differentiable input whose gradient can be read back with `grad`.
  Var<Scalar> input(Mat value);
  /// Parameter leaf; gradients are accumulated into `params` on backward.
  /// Repeated calls for one parameter return the same node.
  Var<Scalar> param(ParamSet<Scalar>& params, std::size_t index);

  /// Appends a node. `parents` decide whether the node needs a gradient.
  Var<Scalar> push(Mat value, std::initializer_list<Var<Scalar>> parents, Backward backward, const char* op);
  Var<Scalar> push(Mat value, const std::vector<Var<Scalar>>& parents, Backward backward, const char* op);

  const Mat& value(Var<Scalar> v) const { return nodes_[static_cast<std::size_t>(v.id)].value; }
  bool needs_grad(Var<Scalar> v) const { return nodes_[static_cast<std::size_t>(v.id)].needs_grad; }
  /// Gradient of the last backward pass; zeros when the node was unreached.
  Mat grad(Var<Scalar> v) const;
  /// Adds `g` into the gradient buffer of `v` (used by backward closures).
  void accumulate(Var<Scalar> v, const Mat& g);
  void accumulate(int id, const Mat& g) { accumulate(Var<Scalar>{this, id}, g); }
  const Mat& grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  const Mat& value_of(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool needs_grad_of(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }

  /// Seeds d(loss)/d(loss) = 1 and propagates. `loss` must be 1x1.
  void backward(Var<Scalar> loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    Backward backward;
  };

  bool record_ = true;
  bool training_ = false;
  std::mt19937_64* rng_ = nullptr;
  std::vector<Node> nodes_;
  const ParamSet<Scalar>* param_owner_ = nullptr;
  std::vector<int> param_nodes_;
};

// --- elementwise and structural ops ---------------------------------------

template <typename Scalar>
Var<Scalar> matmul(Var<Scalar> a, Var<Scalar> b);
template <typename Scalar>
Var<Scalar> add(Var<Scalar> a, Var<Scalar> b);
/// Elementwise product.
template <typename Scalar>
Var<Scalar> multiply(Var<Scalar> a, Var<Scalar> b);
/// Adds a 1 x cols row to every row of `a`.
template <typename Scalar>
Var<Scalar> add_row(Var<Scalar> a, Var<Scalar> row);
template <typename Scalar>
Var<Scalar> scale(Var<Scalar> a, Scalar s);
template <typename Scalar>
Var<Scalar> gelu(Var<Scalar> x);
/// Inverted dropout; identity outside training mode.
template <typename Scalar>
Var<Scalar> dropout(Var<Scalar> x, Scalar rate);
template <typename Scalar>
Var<Scalar> concat_rows(const std::vector<Var<Scalar>>& parts);
template <typename Scalar>
Var<Scalar> slice_rows(Var<Scalar> x, Index start, Index count);
/// Sum of all entries, as a 1x1 node.
template <typename Scalar>
Var<Scalar> sum(Var<Scalar> x);

template <typename Scalar>
Var<Scalar> operator+(Var<Scalar> a, Var<Scalar> b) {
  return add(a, b);
}

// --- fused layers -----------------------------------------------------------

/// x * weights + bias, with weights d_in x d_out and bias 1 x d_out.
template <typename Scalar>
Var<Scalar> linear(Var<Scalar> x, Var<Scalar> weights, Var<Scalar> bias);

/// Per-row normalization followed by the affine gain/shift (1 x cols each).
template <typename Scalar>
Var<Scalar> layer_norm(Var<Scalar> x, Var<Scalar> gain, Var<Scalar> shift, Scalar eps = Scalar(1e-5));

/// Scaled dot-product attention split into `heads` column groups, on
/// already projected queries (n_q x D), keys and values (n_k x D).
/// mask(i, j) == false removes key j from query i. A query row with no
/// admissible key raises AttentionError.
template <typename Scalar>
Var<Scalar> attention(Var<Scalar> q, Var<Scalar> k, Var<Scalar> v, int heads, const BoolMatrix* mask = nullptr,
                      Matrix<Scalar>* weights_out = nullptr);

/// Summed softmax cross-entropy of `logits` (n x K) against class indices.
template <typename Scalar>
Var<Scalar> cross_entropy_sum(Var<Scalar> logits, const std::vector<int>& targets);

}  // namespace mpt
