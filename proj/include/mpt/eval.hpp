#pragma once

// Segmentation metrics and the two inference protocols: single-iteration
// (the whole prompt budget in one write) and iterative (N_p prompts per
// round for N_r rounds).

#include "mpt/membank.hpp"
#include "mpt/model.hpp"

#include <nlohmann/json_fwd.hpp>

#include <optional>
#include <string>
#include <vector>

namespace mpt {

double accuracy(const std::vector<int>& pred, const std::vector<int>& truth);

/// F1 averaged over the classes that occur in `truth`.
double macro_f1(const std::vector<int>& pred, const std::vector<int>& truth, int K);

/// Pair-counting ARI. Two identical partitions score 1, including the
/// single-cluster case.
double adjusted_rand_index(const std::vector<int>& pred, const std::vector<int>& truth);

struct Metrics {
  double acc = 0;
  double mf1 = 0;
  double ari = 0;
};

Metrics compute_metrics(const std::vector<int>& pred, const std::vector<int>& truth, int K);

template <typename Scalar>
std::vector<int> argmax_rows(const Matrix<Scalar>& logits);

/// L_s x K logits of a subsequence: each window is predicted against
/// `memory`, and overlapping windows are averaged per timestep.
template <typename Scalar>
Matrix<Scalar> subsequence_logits(const Model<Scalar>& model, const MatrixXd& subseq, const WindowSpec& spec,
                                  const Matrix<Scalar>& memory);

/// Encodes prompts into memory tokens with an inference-only tape.
template <typename Scalar>
std::vector<MemoryToken<Scalar>> encode_prompts(const Model<Scalar>& model, const MatrixXd& subseq,
                                                const std::vector<Prompt>& prompts, int iteration);

struct EvalOptions {
  double density = 0.05;
  Index N_p = 4;
  int N_r = 8;
  std::uint64_t seed = 0;
  PromptSamplingOptions sampling;
  std::optional<std::size_t> memory_capacity;
};

/// Window concentration widened, when needed, so that `budget` distinct
/// timestamps fit inside the chosen windows whichever windows are drawn.
Index effective_concentration(Index requested, Index budget, const WindowSpec& spec);

struct LevelReport {
  int level = 0;
  Metrics metrics;
  Index timesteps = 0;
  /// Iterative protocol only: accuracy after each round.
  std::vector<double> curve;
};

struct EvalReport {
  std::string protocol;
  double density = 0;
  /// Mean over levels.
  Metrics metrics;
  /// Timesteps of all levels pooled into one prediction vector.
  Metrics pooled;
  std::vector<LevelReport> per_level;
  /// Iterative protocol: level-mean accuracy per round, and its increments
  /// in percentage points (round 1 has increment 0).
  std::vector<double> curve;
  std::vector<double> deltas_pp;
  Index prompts_per_subsequence = 0;
  int iterations = 1;
  std::uint64_t seed = 0;
};

/// Prediction of one subsequence after a single write of `budget` prompts
/// drawn at `level`.
struct SubsequencePrediction {
  std::vector<int> states;
  std::vector<Prompt> prompts;
};

SubsequencePrediction predict_subsequence(const Model<float>& model, const Subsequence& subseq,
                                          const Granularity& level, const WindowSpec& spec, Index budget,
                                          const PromptSamplingOptions& sampling, Rng& rng);

EvalReport single_iteration_eval(const Model<float>& model, const std::vector<Subsequence>& subsequences,
                                 const std::vector<Granularity>& levels, const WindowSpec& spec,
                                 const EvalOptions& options);

EvalReport iterative_eval(const Model<float>& model, const std::vector<Subsequence>& subsequences,
                          const std::vector<Granularity>& levels, const WindowSpec& spec, const EvalOptions& options);

/// Independent stream for (seed, level, subsequence), so results do not
/// depend on evaluation order.
Rng eval_rng(std::uint64_t seed, int level, Index subsequence);

void to_json(nlohmann::json& j, const EvalReport& report);
std::string format_table(const EvalReport& report);

}  // namespace mpt
