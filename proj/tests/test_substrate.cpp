#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mpt/grad_check.hpp"
#include "mpt/layers.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace mpt;

namespace {

MatrixXd random_matrix(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  MatrixXd m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = n(rng);
  return m;
}

// Single-head reference attention with explicit loops.
MatrixXd brute_attention(const MatrixXd& q, const MatrixXd& k, const MatrixXd& v) {
  MatrixXd out = MatrixXd::Zero(q.rows(), v.cols());
  for (Index i = 0; i < q.rows(); ++i) {
    std::vector<double> logits(static_cast<std::size_t>(k.rows()));
    for (Index j = 0; j < k.rows(); ++j) {
      double dot = 0;
      for (Index d = 0; d < q.cols(); ++d) dot += q(i, d) * k(j, d);
      logits[static_cast<std::size_t>(j)] = dot / std::sqrt(static_cast<double>(q.cols()));
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (double& l : logits) z += (l = std::exp(l - mx));
    for (Index j = 0; j < k.rows(); ++j)
      for (Index d = 0; d < v.cols(); ++d) out(i, d) += logits[static_cast<std::size_t>(j)] / z * v(j, d);
  }
  return out;
}

}  // namespace

TEST_CASE("linear") {
  Tape<double> tape;
  MatrixXd x(1, 2);
  x << 1, 2;
  Var<double> in = tape.constant(x);
  CHECK(linear(in, tape.constant(MatrixXd::Identity(2, 2)), tape.constant(MatrixXd::Zero(1, 2))).value() == x);

  MatrixXd w(2, 3);
  w << 1, 0, 1, 0, 1, 1;
  MatrixXd b(1, 3);
  b << 0.5, -1, 2;
  const MatrixXd y = linear(in, tape.constant(w), tape.constant(b)).value();
  // [1*1 + 2*0 + 0.5, 1*0 + 2*1 - 1, 1*1 + 2*1 + 2]
  CHECK(y(0, 0) == doctest::Approx(1.5));
  CHECK(y(0, 1) == doctest::Approx(1.0));
  CHECK(y(0, 2) == doctest::Approx(5.0));

  CHECK(linear(in, tape.constant(MatrixXd::Zero(2, 3)), tape.constant(b)).value() == b);
  CHECK_THROWS_WITH_AS(linear(in, tape.constant(MatrixXd::Zero(3, 3)), tape.constant(b)),
                       doctest::Contains("[1x2]"), ShapeError);
}

TEST_CASE("attention special cases") {
  std::mt19937_64 rng(1);
  ParamSet<double> params;
  const auto layer = make_attention(params, "attn", 4, 2, rng);
  Tape<double> tape(false);
  const MatrixXd q = random_matrix(3, 4, rng);
  const MatrixXd kv = random_matrix(1, 4, rng);

  // One key: every query receives the projected value.
  const MatrixXd out = multi_head_attention(tape, params, layer, tape.constant(q), tape.constant(kv)).value();
  const MatrixXd expected = (kv * params[layer.v.weight].value + params[layer.v.bias].value) *
                                params[layer.out.weight].value +
                            params[layer.out.bias].value;
  for (Index i = 0; i < 3; ++i) CHECK((out.row(i) - expected).norm() < 1e-12);

  // Identical keys give uniform weights.
  MatrixXd weights;
  const MatrixXd same = kv.replicate(5, 1);
  multi_head_attention(tape, params, layer, tape.constant(q), tape.constant(same), nullptr, &weights);
  CHECK((weights.array() - 0.2).abs().maxCoeff() < 1e-12);
}

TEST_CASE("attention matches a brute-force softmax") {
  std::mt19937_64 rng(2);
  Tape<double> tape(false);
  const MatrixXd q = random_matrix(2, 4, rng, 0.5), k = random_matrix(3, 4, rng, 0.5), v = random_matrix(3, 4, rng);
  const MatrixXd got = attention(tape.constant(q), tape.constant(k), tape.constant(v), 1).value();
  CHECK((got - brute_attention(q, k, v)).cwiseAbs().maxCoeff() < 1e-12);

  // Two heads = brute force on each column half.
  const MatrixXd got2 = attention(tape.constant(q), tape.constant(k), tape.constant(v), 2).value();
  CHECK((got2.leftCols(2) - brute_attention(q.leftCols(2), k.leftCols(2), v.leftCols(2))).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((got2.rightCols(2) - brute_attention(q.rightCols(2), k.rightCols(2), v.rightCols(2))).cwiseAbs().maxCoeff() <
        1e-12);
}

TEST_CASE("attention properties") {
  std::mt19937_64 rng(3);
  ParamSet<double> params;
  const auto layer = make_attention(params, "attn", 8, 2, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const Index nq = 1 + trial % 4, nk = 2 + trial % 5;
    const MatrixXd q = random_matrix(nq, 8, rng), kv = random_matrix(nk, 8, rng);
    BoolMatrix mask = BoolMatrix::Constant(nq, nk, true);
    for (Index j = 1; j < nk; j += 2) mask.col(j).setConstant(false);

    Tape<double> tape(false);
    MatrixXd weights;
    const MatrixXd out =
        multi_head_attention(tape, params, layer, tape.constant(q), tape.constant(kv), &mask, &weights).value();
    for (Index r = 0; r < weights.rows(); ++r) CHECK(std::abs(weights.row(r).sum() - 1.0) < 1e-5);
    for (Index j = 1; j < nk; j += 2) CHECK(weights.col(j).cwiseAbs().maxCoeff() == 0.0);

    // Permuting keys/values together with mask columns leaves the output unchanged.
    std::vector<Index> perm(static_cast<std::size_t>(nk));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    MatrixXd kv_p(nk, 8);
    BoolMatrix mask_p(nq, nk);
    for (Index j = 0; j < nk; ++j) {
      kv_p.row(j) = kv.row(perm[static_cast<std::size_t>(j)]);
      mask_p.col(j) = mask.col(perm[static_cast<std::size_t>(j)]);
    }
    const MatrixXd out_p =
        multi_head_attention(tape, params, layer, tape.constant(q), tape.constant(kv_p), &mask_p).value();
    CHECK((out - out_p).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("attention errors") {
  Tape<double> tape(false);
  const Var<double> x = tape.constant(MatrixXd::Ones(2, 6));
  CHECK_THROWS_AS(attention(x, x, x, 4), ConfigError);
  BoolMatrix mask = BoolMatrix::Constant(2, 2, true);
  mask.row(1).setConstant(false);
  CHECK_THROWS_AS(attention(x, x, x, 2, &mask), AttentionError);
}

TEST_CASE("layer norm") {
  Tape<double> tape(false);
  const Var<double> gain = tape.constant(MatrixXd::Ones(1, 2)), shift = tape.constant(MatrixXd::Zero(1, 2));
  MatrixXd x(2, 2);
  x << 4, 4, 1, 3;
  const double eps = 1e-5;
  const MatrixXd y = layer_norm(tape.constant(x), gain, shift, eps).value();
  CHECK(y(0, 0) == 0.0);
  CHECK(y(0, 1) == 0.0);
  // mean 2, variance 1
  CHECK(y(1, 0) == doctest::Approx(-1.0 / std::sqrt(1.0 + eps)).epsilon(1e-12));
  CHECK(y(1, 1) == doctest::Approx(1.0 / std::sqrt(1.0 + eps)).epsilon(1e-12));

  std::mt19937_64 rng(4);
  const MatrixXd z = layer_norm(tape.constant(random_matrix(6, 5, rng)), tape.constant(MatrixXd::Constant(1, 5, 2.0)),
                                tape.constant(MatrixXd::Constant(1, 5, 0.7)))
                         .value();
  for (Index i = 0; i < z.rows(); ++i) CHECK(std::abs(z.row(i).mean() - 0.7) < 1e-6);
}

TEST_CASE("sinusoidal position encoding") {
  const MatrixXd pe = sinusoidal_position_encoding<double>(10, 8);
  for (Index i = 0; i < 4; ++i) {
    CHECK(pe(0, 2 * i) == 0.0);
    CHECK(pe(0, 2 * i + 1) == 1.0);
  }
  CHECK(pe(1, 0) == std::sin(1.0));
  CHECK(pe == sinusoidal_position_encoding<double>(10, 8));
  CHECK_THROWS_AS(sinusoidal_position_encoding<double>(4, 7), ConfigError);
}

TEST_CASE("dropout") {
  std::mt19937_64 rng(5);
  Tape<double> eval_tape(false);
  const MatrixXd x = random_matrix(20, 20, rng);
  CHECK(dropout(eval_tape.constant(x), 0.3).value() == x);

  Tape<double> train_tape(false);
  train_tape.set_training(true, &rng);
  const MatrixXd ones = MatrixXd::Ones(400, 400);
  const MatrixXd y = dropout(train_tape.constant(ones), 0.3).value();
  CHECK(std::abs(y.mean() - 1.0) < 0.01);
  CHECK((y.array() == 0.0).count() > 0);
}

TEST_CASE("non-finite values are rejected") {
  Tape<double> tape;
  MatrixXd x = MatrixXd::Ones(1, 2);
  x(0, 1) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(tape.input(x), NumericError);
  Var<double> big = tape.constant(MatrixXd::Constant(1, 1, 1e308));
  CHECK_THROWS_AS(scale(big, 10.0), NumericError);
}

// --- gradient checks --------------------------------------------------------

TEST_CASE("grad_check quadratic and constant") {
  std::mt19937_64 rng(6);
  ParamSet<double> params;
  params.add("w", random_matrix(3, 2, rng));
  const LossFn<double> squared_norm = [](Tape<double>& t, ParamSet<double>& p) {
    Var<double> w = t.param(p, 0);
    return sum(multiply(w, w));
  };
  const auto report = grad_check(squared_norm, params, 1e-4, 1e-3);
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-8);
  CHECK((params[0].grad - 2 * params[0].value).cwiseAbs().maxCoeff() < 1e-12);

  const LossFn<double> constant = [](Tape<double>& t, ParamSet<double>& p) {
    return add(scale(sum(t.param(p, 0)), 0.0), t.constant(MatrixXd::Constant(1, 1, 3.0)));
  };
  const double h = 1e-4;
  const auto flat = grad_check(constant, params, h, 1e-3);
  CHECK(flat.entries[0].max_abs_error <= h * h);
  CHECK(params[0].grad.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("grad_check non-finite loss") {
  ParamSet<double> params;
  params.add("w", MatrixXd::Ones(1, 1));
  const LossFn<double> bad = [](Tape<double>& t, ParamSet<double>& p) {
    return scale(t.param(p, 0), std::numeric_limits<double>::infinity());
  };
  CHECK_THROWS_AS(grad_check(bad, params), NumericError);
}

namespace {

// Fixed random readout so every block is checked through a generic scalar.
Var<double> readout(Tape<double>& t, Var<double> x, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(multiply(x, t.constant(random_matrix(x.rows(), x.cols(), rng))));
}

}  // namespace

TEST_CASE("grad_check per block type") {
  std::mt19937_64 rng(7);
  const Index D = 8;
  ParamSet<double> params;
  const auto lin = make_linear(params, "lin", D, D, rng);
  const auto ln = make_layer_norm(params, "ln", D);
  const auto ff = make_feed_forward(params, "ff", D, rng);
  const auto attn = make_attention(params, "attn", D, 2, rng);
  const auto cross = make_attention(params, "cross", D, 2, rng);
  // Non-trivial layer-norm affine parameters.
  params[ln.gain].value = MatrixXd::Ones(1, D) + 0.3 * random_matrix(1, D, rng);
  params[ln.shift].value = 0.3 * random_matrix(1, D, rng);
  const std::size_t x_index = params.add("x", random_matrix(5, D, rng));
  const std::size_t m_index = params.add("m", random_matrix(3, D, rng));

  const auto check = [&](const char* name, const LossFn<double>& f) {
    CAPTURE(name);
    const auto report = grad_check(f, params, 1e-4, 1e-3);
    for (const auto& e : report.entries) {
      CAPTURE(e.name);
      CHECK(e.max_rel_error < 1e-3);
    }
  };

  check("linear", [&](Tape<double>& t, ParamSet<double>& p) {
    return readout(t, apply(t, p, lin, t.param(p, x_index)), 1);
  });
  check("layer_norm", [&](Tape<double>& t, ParamSet<double>& p) {
    return readout(t, apply(t, p, ln, t.param(p, x_index)), 2);
  });
  check("feed_forward", [&](Tape<double>& t, ParamSet<double>& p) {
    return readout(t, apply(t, p, ff, t.param(p, x_index)), 3);
  });
  check("self_attention", [&](Tape<double>& t, ParamSet<double>& p) {
    Var<double> x = t.param(p, x_index);
    return readout(t, multi_head_attention(t, p, attn, x, x), 4);
  });
  check("masked_cross_attention", [&](Tape<double>& t, ParamSet<double>& p) {
    BoolMatrix mask = BoolMatrix::Constant(5, 3, true);
    mask(0, 1) = false;
    mask(2, 0) = false;
    return readout(t, multi_head_attention(t, p, cross, t.param(p, x_index), t.param(p, m_index), &mask), 5);
  });
  check("structural", [&](Tape<double>& t, ParamSet<double>& p) {
    Var<double> x = t.param(p, x_index), m = t.param(p, m_index);
    Var<double> joined = concat_rows<double>({slice_rows(x, 1, 3), m});
    return readout(t, add_row(gelu(joined), slice_rows(m, 0, 1)), 6);
  });
  check("cross_entropy", [&](Tape<double>& t, ParamSet<double>& p) {
    return cross_entropy_sum(apply(t, p, lin, t.param(p, x_index)), {0, 3, 7, 1, 1});
  });
  check("dropout_fixed_mask", [&](Tape<double>& t, ParamSet<double>& p) {
    static thread_local std::mt19937_64 mask_rng;
    mask_rng.seed(99);
    t.set_training(true, &mask_rng);
    return readout(t, dropout(apply(t, p, lin, t.param(p, x_index)), 0.25), 7);
  });
}

TEST_CASE("grad_check tiny attention block") {
  std::mt19937_64 rng(8);
  ParamSet<double> params;
  const auto norm = make_layer_norm(params, "norm", 8);
  const auto attn = make_attention(params, "attn", 8, 2, rng);
  const auto ff = make_feed_forward(params, "ff", 8, rng);
  const auto norm2 = make_layer_norm(params, "norm2", 8);
  const std::size_t x_index = params.add("x", random_matrix(4, 8, rng));
  const LossFn<double> block = [&](Tape<double>& t, ParamSet<double>& p) {
    Var<double> x = t.param(p, x_index);
    Var<double> h = apply(t, p, norm, x);
    x = x + multi_head_attention(t, p, attn, h, h);
    x = x + apply(t, p, ff, apply(t, p, norm2, x));
    return cross_entropy_sum(x, {0, 1, 2, 3});
  };
  const auto report = grad_check(block, params, 1e-4, 1e-3);
  CHECK(report.passed);
  MESSAGE("tiny attention block max relative error " << report.max_rel_error);
}

TEST_CASE("parameter tape nodes accumulate across uses") {
  ParamSet<double> params;
  params.add("w", MatrixXd::Constant(1, 1, 2.0));
  Tape<double> tape;
  Var<double> a = tape.param(params, 0);
  Var<double> b = tape.param(params, 0);
  CHECK(a.id == b.id);
  tape.backward(sum(multiply(a, b)));
  CHECK(params[0].grad(0, 0) == doctest::Approx(4.0));
}
