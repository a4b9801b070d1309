#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "mpt/grad_check.hpp"
#include "mpt/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <filesystem>

using namespace mpt;

namespace {

MatrixXd random_matrix(Index r, Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  MatrixXd m(r, c);
  for (Index j = 0; j < c; ++j)
    for (Index i = 0; i < r; ++i) m(i, j) = n(rng);
  return m;
}

ModelConfig small_config() {
  ModelConfig c;
  c.D = 16;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_blocks = 2;
  c.P = 8;
  c.patch_hop = 4;
  c.T = 32;
  c.C = 2;
  c.K_total = 4;
  c.T_ctx = 32;
  c.dropout = 0.0;
  return c;
}

Prompt label(Index t, int correct, std::vector<int> wrong = {}) {
  Prompt p;
  p.kind = PromptKind::Label;
  p.t_c = t;
  p.correct_state = correct;
  p.incorrect_states = std::move(wrong);
  return p;
}

Prompt boundary(Index t, bool present) {
  Prompt p;
  p.kind = PromptKind::Boundary;
  p.t_c = t;
  p.present = present;
  return p;
}

// Reference depatchify: loop over timesteps, average every covering patch.
MatrixXd brute_depatchify(const MatrixXd& patch_logits, Index T, Index P, const std::vector<Index>& starts) {
  MatrixXd out = MatrixXd::Zero(T, patch_logits.cols());
  for (Index t = 0; t < T; ++t) {
    int n = 0;
    for (std::size_t i = 0; i < starts.size(); ++i)
      if (t >= starts[i] && t < starts[i] + P) {
        out.row(t) += patch_logits.row(static_cast<Index>(i));
        ++n;
      }
    out.row(t) /= n;
  }
  return out;
}

}  // namespace

TEST_CASE("patch counts") {
  CHECK(patch_layout(256, 16, 8).count() == 31);
  CHECK(patch_layout(512, 16, 8).count() == 63);
  const PatchLayout one = patch_layout(16, 16, 8);
  CHECK(one.count() == 1);

  std::mt19937_64 rng(1);
  const MatrixXd w = random_matrix(16, 3, rng);
  const MatrixXd flat = patchify(w, one);
  REQUIRE(flat.rows() == 1);
  REQUIRE(flat.cols() == 48);
  for (Index r = 0; r < 16; ++r)
    for (Index c = 0; c < 3; ++c) CHECK(flat(0, r * 3 + c) == w(r, c));

  const PatchLayout ragged = patch_layout(20, 16, 8);
  CHECK(ragged.starts == std::vector<Index>{0, 4});
  CHECK_THROWS_AS(patch_layout(8, 16, 8), ConfigError);
}

TEST_CASE("depatchify matches brute-force averaging") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const Index P = std::uniform_int_distribution<Index>(1, 12)(rng);
    const Index hop = std::uniform_int_distribution<Index>(1, P)(rng);
    const Index T = std::uniform_int_distribution<Index>(P, 64)(rng);
    const Index K = std::uniform_int_distribution<Index>(1, 5)(rng);
    const PatchLayout layout = patch_layout(T, P, hop);
    for (Index t = 0; t < T; ++t) REQUIRE(layout.coverage(t) >= 1);
    const MatrixXd logits = random_matrix(layout.count(), K, rng);
    const double err = (depatchify(logits, layout) - brute_depatchify(logits, T, P, layout.starts)).cwiseAbs().maxCoeff();
    CHECK(err <= 1e-9);
  }
}

TEST_CASE("depatchify worked example") {
  const PatchLayout layout = patch_layout(24, 16, 8);
  REQUIRE(layout.count() == 2);
  MatrixXd logits(2, 1);
  logits << 0.2, 0.6;
  const MatrixXd out = depatchify(logits, layout);
  CHECK(out(0, 0) == doctest::Approx(0.2));
  CHECK(out(7, 0) == doctest::Approx(0.2));
  CHECK(out(8, 0) == doctest::Approx(0.4));
  CHECK(out(15, 0) == doctest::Approx(0.4));
  CHECK(out(16, 0) == doctest::Approx(0.6));
  CHECK(out(23, 0) == doctest::Approx(0.6));
}

TEST_CASE("softmax rows") {
  MatrixXd l(2, 3);
  l << 0, 0, 0, 1000, 0, -1000;
  const MatrixXd p = softmax_rows(l);
  CHECK(p(0, 1) == doctest::Approx(1.0 / 3));
  CHECK(p(1, 0) == doctest::Approx(1.0));
  CHECK(p.allFinite());
}

TEST_CASE("context extraction") {
  std::mt19937_64 rng(3);
  const MatrixXd s = random_matrix(704, 3, rng);
  const Context mid = extract_context(s, 352, 256);
  CHECK(std::all_of(mid.valid.begin(), mid.valid.end(), [](bool v) { return v; }));
  CHECK(mid.values.row(128) == s.row(352));

  const Context edge = extract_context(s, 0, 256);
  for (std::size_t i = 0; i < 256; ++i) CHECK(edge.valid[i] == (i >= 128));
  CHECK(edge.values.topRows(128).isZero());
  CHECK(edge.values.row(128) == s.row(0));

  const Context tail = extract_context(s, 703, 256);
  CHECK(tail.valid[128]);
  CHECK_FALSE(tail.valid[129]);

  const Context single = extract_context(s, 10, 1);
  CHECK(single.valid == std::vector<bool>{true});
  CHECK(single.values.row(0) == s.row(10));

  CHECK_THROWS_AS(extract_context(s, 704, 256), DataError);
}

TEST_CASE("label prompt vector") {
  Eigen::VectorXd expected(6);
  expected << 0, 1, 0, 0, 0, 1;
  CHECK(label_prompt_vector(label(0, 1, {2}), 3) == expected);
  CHECK_THROWS_AS(label_prompt_vector(label(0, 3), 3), DataError);
  CHECK_THROWS_AS(label_prompt_vector(label(0, 1, {1}), 3), DataError);
}

TEST_CASE("config validation") {
  ModelConfig c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.T_ctx = 4;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  c.patch_hop = 9;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = small_config();
  const nlohmann::json j = c;
  CHECK(j.get<ModelConfig>() == c);
}

TEST_CASE("series encoder shapes and determinism") {
  ModelConfig c;
  c.dropout = 0.0;
  const Model<float> model(c, 11);
  std::mt19937_64 rng(4);
  const MatrixXf w = random_matrix(256, 3, rng).cast<float>();
  Tape<float> a(false), b(false);
  const MatrixXf za = model.encode_series(a, w).value();
  const MatrixXf zb = model.encode_series(b, w).value();
  CHECK(za.rows() == 31);
  CHECK(za.cols() == 128);
  CHECK(za == zb);
  CHECK_THROWS_AS(model.encode_series(a, random_matrix(256, 2, rng).cast<float>()), ShapeError);
}

TEST_CASE("zero encoder layers return projected positioned patches") {
  ModelConfig c = small_config();
  c.enc_layers = 0;
  const Model<double> model(c, 5);
  std::mt19937_64 rng(5);
  const MatrixXd w = random_matrix(32, 2, rng);
  Tape<double> tape(false);
  const MatrixXd z = model.encode_series(tape, w, 3.0).value();

  const PatchLayout layout = model.window_layout();
  const auto& weight = model.params().at("encoder.patch_proj.weight").value;
  const auto& bias = model.params().at("encoder.patch_proj.bias").value;
  std::vector<double> centers;
  for (Index s : layout.starts) centers.push_back(3.0 + static_cast<double>(s) + 3.5);
  MatrixXd expected = patchify(w, layout) * weight;
  expected.rowwise() += bias.row(0);
  expected += position_encoding<double>(centers, c.D);
  CHECK((z - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("prompt encoder") {
  const Model<double> model(small_config(), 6);
  Tape<double> tape(false);
  const MatrixXd a = model.encode_prompt(tape, label(5, 1, {2})).value();
  const MatrixXd b = model.encode_prompt(tape, label(5, 1, {2})).value();
  CHECK(a.rows() == 1);
  CHECK(a.cols() == 16);
  CHECK(a == b);
  CHECK(a != model.encode_prompt(tape, label(5, 1, {3})).value());
  CHECK(a != model.encode_prompt(tape, label(6, 1, {2})).value());

  const MatrixXd present = model.encode_prompt(tape, boundary(5, true)).value();
  const MatrixXd absent = model.encode_prompt(tape, boundary(5, false)).value();
  CHECK(present == model.encode_prompt(tape, boundary(5, true)).value());
  CHECK(present != absent);
  CHECK(present != a);

  CHECK_THROWS_AS(model.encode_prompt(tape, label(5, 4)), DataError);
  CHECK_THROWS_AS(model.encode_prompt(tape, label(5, 0, {1, 2, 3, 0})), DataError);
}

TEST_CASE("memory encoder ignores masked context patches") {
  const ModelConfig c = small_config();
  const Model<double> model(c, 7);
  std::mt19937_64 rng(6);
  const MatrixXd subseq = random_matrix(100, 2, rng);
  const Prompt p = label(0, 2);
  Tape<double> tape(false);
  const MatrixXd token = model.memory_token(tape, subseq, p).value();
  CHECK(token.rows() == 1);
  CHECK(token.cols() == c.D);

  // Only the leading context rows are outside the subsequence; overwriting
  // them, which is what permuting masked patches amounts to, changes nothing.
  const Context ctx = extract_context(subseq, p.t_c, c.T_ctx);
  const std::vector<bool> valid = model.patch_validity(ctx.valid);
  REQUIRE(std::count(valid.begin(), valid.end(), false) >= 2);
  Var<double> prompt_embedding = model.encode_prompt(tape, p);
  Var<double> tokens = model.encode_series(tape, ctx.values, static_cast<double>(ctx.start), &valid);
  const MatrixXd base = model.encode_memory(tape, prompt_embedding, tokens, valid).value();
  CHECK((base - token).cwiseAbs().maxCoeff() < 1e-12);

  MatrixXd shuffled = tokens.value();
  std::vector<Index> masked;
  for (std::size_t i = 0; i < valid.size(); ++i)
    if (!valid[i]) masked.push_back(static_cast<Index>(i));
  for (std::size_t i = 0; i < masked.size(); ++i)
    shuffled.row(masked[i]) = tokens.value().row(masked[(i + 1) % masked.size()]) * 3.0 + MatrixXd::Ones(1, c.D);
  const MatrixXd permuted = model.encode_memory(tape, prompt_embedding, tape.constant(shuffled), valid).value();
  CHECK((permuted - base).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("decoder shapes, memory order and the null token") {
  ModelConfig c = small_config();
  c.T = 256;
  c.P = 16;
  c.patch_hop = 8;
  const Model<double> model(c, 8);
  std::mt19937_64 rng(7);
  const MatrixXd w = random_matrix(256, 2, rng);
  const MatrixXd memory = random_matrix(5, c.D, rng);
  Tape<double> tape(false);
  Var<double> z = model.encode_series(tape, w);
  const MatrixXd out = model.decode_states(tape, z, tape.constant(memory)).value();
  CHECK(out.rows() == 31);
  CHECK(out.cols() == c.K_total);

  const std::vector<Index> order{3, 0, 4, 1, 2};
  MatrixXd permuted(5, c.D);
  for (Index i = 0; i < 5; ++i) permuted.row(i) = memory.row(order[static_cast<std::size_t>(i)]);
  const MatrixXd out_perm = model.decode_states(tape, z, tape.constant(permuted)).value();
  CHECK((out - out_perm).cwiseAbs().maxCoeff() < 1e-10);

  const MatrixXd empty = model.decode_states(tape, z, std::nullopt).value();
  const MatrixXd empty_rows = model.decode_states(tape, z, tape.constant(MatrixXd(0, c.D))).value();
  CHECK(empty.allFinite());
  CHECK(empty == empty_rows);
  const MatrixXd null_token = model.params().at("decoder.null_token").value;
  CHECK(empty == model.decode_states(tape, z, tape.constant(null_token)).value());
}

TEST_CASE("window prediction") {
  ModelConfig c = small_config();
  const Model<float> model(c, 9);
  std::mt19937_64 rng(8);
  const MatrixXf w = random_matrix(32, 2, rng).cast<float>();
  const MatrixXf memory = random_matrix(3, c.D, rng).cast<float>();
  const Prediction<float> a = model.predict_window(w, 16, memory);
  const Prediction<float> b = model.predict_window(w, 16, memory);
  CHECK(a.logits.rows() == 32);
  CHECK(a.logits.cols() == c.K_total);
  CHECK(a.logits == b.logits);
  for (Index t = 0; t < 32; ++t) CHECK(a.probabilities.row(t).sum() == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(a.logits != model.predict_window(w, 0, memory).logits);
  CHECK_THROWS_AS(model.predict_window(random_matrix(31, 2, rng).cast<float>(), 0, memory), ShapeError);
}

TEST_CASE("one prompt changes every window of its subsequence") {
  ModelConfig c = small_config();
  const Model<double> model(c, 10);
  std::mt19937_64 rng(9);
  const WindowSpec spec{32, 8, 6};
  const MatrixXd subseq = random_matrix(spec.subsequence_length(), 2, rng);
  Tape<double> tape(false);
  const MatrixXd one = model.memory_token(tape, subseq, label(3, 1)).value();
  const MatrixXd two = concat_rows<double>({tape.constant(one), model.memory_token(tape, subseq, boundary(70, true))})
                           .value();
  for (Index w = 0; w < spec.W; ++w) {
    const Index start = w * spec.hop;
    const MatrixXd window = subseq.middleRows(start, spec.T);
    const MatrixXd before = model.predict_window(window, start, one).logits;
    const MatrixXd after = model.predict_window(window, start, two).logits;
    CHECK((before - after).cwiseAbs().maxCoeff() > 1e-9);
  }
}

TEST_CASE("composite gradient check") {
  ModelConfig c;
  c.D = 8;
  c.heads = 2;
  c.enc_layers = 1;
  c.dec_blocks = 2;
  c.mem_layers = 1;
  c.P = 8;
  c.patch_hop = 4;
  c.T = 24;
  c.C = 2;
  c.K_total = 3;
  c.T_ctx = 16;
  c.dropout = 0.0;
  Model<double> model(c, 12);
  std::mt19937_64 rng(10);
  const MatrixXd subseq = random_matrix(40, 2, rng);
  const MatrixXd window = subseq.middleRows(8, 24);
  std::vector<int> targets(24);
  for (std::size_t t = 0; t < targets.size(); ++t) targets[t] = static_cast<int>(t / 8);

  const LossFn<double> loss = [&](Tape<double>& tape, ParamSet<double>&) {
    Var<double> memory = concat_rows<double>(
        {model.memory_token(tape, subseq, label(2, 1, {0})), model.memory_token(tape, subseq, boundary(30, false))});
    return cross_entropy_sum(model.window_logits(tape, window, 8, memory), targets);
  };
  const auto report = grad_check(loss, model.params(), 1e-4, 1e-3);
  CHECK(report.passed);
  MESSAGE("composite max relative error " << report.max_rel_error);
  for (const auto& e : report.entries)
    if (e.max_rel_error >= 1e-3) MESSAGE(e.name << " " << e.max_rel_error << " abs " << e.max_abs_error);
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto dir = std::filesystem::temp_directory_path() / "mpt_test_checkpoint";
  std::filesystem::remove_all(dir);
  const Model<float> model(small_config(), 13);
  save_checkpoint(model, dir);
  const Model<float> loaded = load_checkpoint(dir);
  CHECK(loaded.config() == model.config());
  CHECK(loaded.seed() == model.seed());
  REQUIRE(loaded.params().size() == model.params().size());
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    CHECK(loaded.params()[i].name == model.params()[i].name);
    CHECK(loaded.params()[i].value == model.params()[i].value);
  }
  std::mt19937_64 rng(11);
  const MatrixXf w = random_matrix(32, 2, rng).cast<float>();
  const MatrixXf memory = random_matrix(2, 16, rng).cast<float>();
  CHECK(loaded.predict_window(w, 0, memory).logits == model.predict_window(w, 0, memory).logits);

  std::filesystem::remove(dir / "decoder.head.bias.bin");
  CHECK_THROWS_AS(load_checkpoint(dir), DataError);
  std::filesystem::remove_all(dir);
  CHECK_THROWS_AS(load_checkpoint(dir), DataError);
}
