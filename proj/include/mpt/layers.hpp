#pragma once

// Transformer building blocks on top of the tape. Each layer is a small
// struct of parameter indices into a ParamSet; forward functions take the
// tape and the parameter set explicitly so one model description can be
// evaluated on many tapes.

#include "mpt/autodiff.hpp"

#include <cmath>
#include <random>
#include <string>

namespace mpt {

struct LinearLayer {
  std::size_t weight = 0;
  std::size_t bias = 0;
};

struct LayerNormLayer {
  std::size_t gain = 0;
  std::size_t shift = 0;
};

struct AttentionLayer {
  LinearLayer q, k, v, out;
  int heads = 1;
};

struct FeedForwardLayer {
  LinearLayer up, down;
};

/// Fan-in scaled uniform init in [-1/sqrt(d_in), 1/sqrt(d_in)], zero bias.
template <typename Scalar>
LinearLayer make_linear(ParamSet<Scalar>& params, const std::string& name, Index d_in, Index d_out,
                        std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix<Scalar> w(d_in, d_out);
  for (Index j = 0; j < d_out; ++j)
    for (Index i = 0; i < d_in; ++i) w(i, j) = static_cast<Scalar>(u(rng));
  LinearLayer layer;
  layer.weight = params.add(name + ".weight", std::move(w));
  layer.bias = params.add(name + ".bias", Matrix<Scalar>::Zero(1, d_out));
  return layer;
}

/// Embedding-style table drawn from N(0, 0.02^2).
template <typename Scalar>
std::size_t make_embedding(ParamSet<Scalar>& params, const std::string& name, Index rows, Index cols,
                           std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 0.02);
  Matrix<Scalar> e(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) e(i, j) = static_cast<Scalar>(n(rng));
  return params.add(name, std::move(e));
}

template <typename Scalar>
LayerNormLayer make_layer_norm(ParamSet<Scalar>& params, const std::string& name, Index d) {
  LayerNormLayer layer;
  layer.gain = params.add(name + ".gain", Matrix<Scalar>::Ones(1, d));
  layer.shift = params.add(name + ".shift", Matrix<Scalar>::Zero(1, d));
  return layer;
}

template <typename Scalar>
AttentionLayer make_attention(ParamSet<Scalar>& params, const std::string& name, Index d, int heads,
                              std::mt19937_64& rng) {
  if (heads < 1 || d % heads != 0)
    throw ConfigError("embedding width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) + " heads");
  AttentionLayer layer;
  layer.heads = heads;
  layer.q = make_linear(params, name + ".q", d, d, rng);
  layer.k = make_linear(params, name + ".k", d, d, rng);
  layer.v = make_linear(params, name + ".v", d, d, rng);
  layer.out = make_linear(params, name + ".out", d, d, rng);
  return layer;
}

/// Hidden width 4*d with GELU.
template <typename Scalar>
FeedForwardLayer make_feed_forward(ParamSet<Scalar>& params, const std::string& name, Index d, std::mt19937_64& rng) {
  return {make_linear(params, name + ".up", d, 4 * d, rng), make_linear(params, name + ".down", 4 * d, d, rng)};
}

template <typename Scalar>
Var<Scalar> apply(Tape<Scalar>& tape, ParamSet<Scalar>& params, const LinearLayer& layer, Var<Scalar> x) {
  return linear(x, tape.param(params, layer.weight), tape.param(params, layer.bias));
}

template <typename Scalar>
Var<Scalar> apply(Tape<Scalar>& tape, ParamSet<Scalar>& params, const LayerNormLayer& layer, Var<Scalar> x) {
  return layer_norm(x, tape.param(params, layer.gain), tape.param(params, layer.shift));
}

template <typename Scalar>
Var<Scalar> apply(Tape<Scalar>& tape, ParamSet<Scalar>& params, const FeedForwardLayer& layer, Var<Scalar> x) {
  return apply(tape, params, layer.down, gelu(apply(tape, params, layer.up, x)));
}

/// Projects queries from `query_in` and keys/values from `kv_in`, attends
/// per head, then applies the output projection.
template <typename Scalar>
Var<Scalar> multi_head_attention(Tape<Scalar>& tape, ParamSet<Scalar>& params, const AttentionLayer& layer,
                                 Var<Scalar> query_in, Var<Scalar> kv_in, const BoolMatrix* mask = nullptr,
                                 Matrix<Scalar>* weights_out = nullptr) {
  if (query_in.cols() != kv_in.cols())
    throw ShapeError("attention query " + shape_str(query_in.value()) + " against keys " + shape_str(kv_in.value()));
  Var<Scalar> q = apply(tape, params, layer.q, query_in);
  Var<Scalar> k = apply(tape, params, layer.k, kv_in);
  Var<Scalar> v = apply(tape, params, layer.v, kv_in);
  return apply(tape, params, layer.out, attention(q, k, v, layer.heads, mask, weights_out));
}

/// Sinusoidal encoding of arbitrary (possibly fractional) positions:
/// column 2i holds sin(pos / 10000^(2i/D)), column 2i+1 the matching cos.
template <typename Scalar>
Matrix<Scalar> position_encoding(const std::vector<double>& positions, Index d) {
  if (d % 2 != 0) throw ConfigError("sinusoidal encoding needs an even width, got " + std::to_string(d));
  Matrix<Scalar> pe(static_cast<Index>(positions.size()), d);
  for (Index r = 0; r < pe.rows(); ++r) {
    const double pos = positions[static_cast<std::size_t>(r)];
    for (Index i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      pe(r, 2 * i) = static_cast<Scalar>(std::sin(pos * freq));
      pe(r, 2 * i + 1) = static_cast<Scalar>(std::cos(pos * freq));
    }
  }
  return pe;
}

template <typename Scalar>
Matrix<Scalar> sinusoidal_position_encoding(Index length, Index d) {
  std::vector<double> positions(static_cast<std::size_t>(length));
  for (Index i = 0; i < length; ++i) positions[static_cast<std::size_t>(i)] = static_cast<double>(i);
  return position_encoding<Scalar>(positions, d);
}

}  // namespace mpt
