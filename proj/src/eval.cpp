#include "mpt/eval.hpp"

#include <nlohmann/json.hpp>

#include <iomanip>
#include <map>
#include <sstream>

namespace mpt {

namespace {

void check_pair(const std::vector<int>& pred, const std::vector<int>& truth, std::size_t min_length) {
  if (pred.size() != truth.size())
    throw DataError("prediction length " + std::to_string(pred.size()) + " differs from truth length " +
                    std::to_string(truth.size()));
  if (truth.size() < min_length) throw DataError("metric needs at least " + std::to_string(min_length) + " labels");
}

double pairs(double n) { return n * (n - 1) / 2; }

}  // namespace

double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  check_pair(pred, truth, 1);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += pred[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

double macro_f1(const std::vector<int>& pred, const std::vector<int>& truth, int K) {
  if (K < 1) throw ConfigError("macro F1 needs K >= 1");
  check_pair(pred, truth, 1);
  std::vector<long> tp(static_cast<std::size_t>(K)), fp(tp), fn(tp);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (pred[i] < 0 || pred[i] >= K || truth[i] < 0 || truth[i] >= K)
      throw DataError("label outside [0, " + std::to_string(K) + ") at position " + std::to_string(i));
    const auto p = static_cast<std::size_t>(pred[i]), t = static_cast<std::size_t>(truth[i]);
    if (p == t) {
      ++tp[t];
    } else {
      ++fp[p];
      ++fn[t];
    }
  }
  double total = 0;
  int classes = 0;
  for (std::size_t c = 0; c < tp.size(); ++c) {
    if (tp[c] + fn[c] == 0) continue;
    total += 2.0 * static_cast<double>(tp[c]) / static_cast<double>(2 * tp[c] + fp[c] + fn[c]);
    ++classes;
  }
  return total / classes;
}

double adjusted_rand_index(const std::vector<int>& pred, const std::vector<int>& truth) {
  check_pair(pred, truth, 2);
  std::map<std::pair<int, int>, long> joint;
  std::map<int, long> rows, cols;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    ++joint[{pred[i], truth[i]}];
    ++rows[pred[i]];
    ++cols[truth[i]];
  }
  double index = 0, sum_rows = 0, sum_cols = 0;
  for (const auto& [key, n] : joint) index += pairs(static_cast<double>(n));
  for (const auto& [key, n] : rows) sum_rows += pairs(static_cast<double>(n));
  for (const auto& [key, n] : cols) sum_cols += pairs(static_cast<double>(n));
  const double expected = sum_rows * sum_cols / pairs(static_cast<double>(truth.size()));
  const double max_index = (sum_rows + sum_cols) / 2;
  if (max_index == expected) return 1.0;
  return (index - expected) / (max_index - expected);
}

Metrics compute_metrics(const std::vector<int>& pred, const std::vector<int>& truth, int K) {
  return {accuracy(pred, truth), macro_f1(pred, truth, K), adjusted_rand_index(pred, truth)};
}

template <typename Scalar>
std::vector<int> argmax_rows(const Matrix<Scalar>& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.rows()));
  for (Index i = 0; i < logits.rows(); ++i) {
    Index k = 0;
    logits.row(i).maxCoeff(&k);
    out[static_cast<std::size_t>(i)] = static_cast<int>(k);
  }
  return out;
}

template <typename Scalar>
Matrix<Scalar> subsequence_logits(const Model<Scalar>& model, const MatrixXd& subseq, const WindowSpec& spec,
                                  const Matrix<Scalar>& memory) {
  if (subseq.rows() != spec.subsequence_length())
    throw ShapeError("subsequence has " + std::to_string(subseq.rows()) + " rows, window layout needs " +
                     std::to_string(spec.subsequence_length()));
  Matrix<Scalar> sum = Matrix<Scalar>::Zero(subseq.rows(), model.config().K_total);
  for (Index j = 0; j < spec.W; ++j) {
    const Index start = j * spec.hop;
    const Matrix<Scalar> window = subseq.middleRows(start, spec.T).template cast<Scalar>();
    sum.middleRows(start, spec.T) += model.predict_window(window, start, memory).logits;
  }
  for (Index t = 0; t < sum.rows(); ++t) sum.row(t) /= static_cast<Scalar>(window_coverage(t, spec));
  return sum;
}

template <typename Scalar>
std::vector<MemoryToken<Scalar>> encode_prompts(const Model<Scalar>& model, const MatrixXd& subseq,
                                                const std::vector<Prompt>& prompts, int iteration) {
  std::vector<MemoryToken<Scalar>> tokens;
  for (const Prompt& p : prompts) {
    Tape<Scalar> tape(false);
    tokens.push_back({model.memory_token(tape, subseq, p).value(), p.t_c, iteration, p.kind});
  }
  return tokens;
}

Index effective_concentration(Index requested, Index budget, const WindowSpec& spec) {
  if (budget > spec.subsequence_length())
    throw BudgetError("budget of " + std::to_string(budget) + " prompts exceeds the subsequence length " +
                      std::to_string(spec.subsequence_length()));
  Index k = std::max<Index>(requested, 1);
  // Consecutive windows overlap the most, so their union is the smallest.
  while (k < spec.W && spec.T + (k - 1) * spec.hop < budget) ++k;
  return k;
}

Rng eval_rng(std::uint64_t seed, int level, Index subsequence) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(level), static_cast<std::uint32_t>(subsequence)};
  return Rng(seq);
}

SubsequencePrediction predict_subsequence(const Model<float>& model, const Subsequence& subseq,
                                          const Granularity& level, const WindowSpec& spec, Index budget,
                                          const PromptSamplingOptions& sampling, Rng& rng) {
  SubsequencePrediction out;
  MatrixXf memory(0, model.config().D);
  if (budget > 0) {
    PromptSamplingOptions opts = sampling;
    opts.window_concentration = effective_concentration(sampling.window_concentration, budget, spec);
    out.prompts = sample_prompts(subseq, spec, level, budget, opts, rng);
    MemoryBank<float> bank(model.config().D);
    bank.write(encode_prompts(model, subseq.data, out.prompts, 1));
    memory = bank.read_all();
  }
  out.states = argmax_rows(subsequence_logits(model, subseq.data, spec, memory));
  return out;
}

namespace {

const std::vector<int>& level_truth(const Subsequence& s, const Granularity& g) {
  if (static_cast<std::size_t>(g.level) >= s.labels_per_level.size())
    throw DataError("subsequence " + std::to_string(s.index) + " has no labels at level " + std::to_string(g.level));
  return s.labels_per_level[static_cast<std::size_t>(g.level)];
}

void check_inputs(const Model<float>& model, const std::vector<Subsequence>& subsequences,
                  const std::vector<Granularity>& levels, const WindowSpec& spec) {
  if (subsequences.empty()) throw ConfigError("evaluation set is empty");
  if (levels.empty()) throw ConfigError("evaluation needs at least one granularity level");
  if (spec.T != model.config().T)
    throw ConfigError("window length " + std::to_string(spec.T) + " differs from the model's T=" +
                      std::to_string(model.config().T));
  for (const auto& g : levels)
    if (g.state_offset + g.num_states > model.config().K_total)
      throw ConfigError("level " + std::to_string(g.level) + " exceeds the model's label space K=" +
                        std::to_string(model.config().K_total));
}

void summarize(EvalReport& report, const std::vector<std::vector<int>>& preds,
               const std::vector<std::vector<int>>& truths, int K) {
  std::vector<int> all_pred, all_truth;
  for (std::size_t l = 0; l < preds.size(); ++l) {
    LevelReport& lr = report.per_level[l];
    lr.metrics = compute_metrics(preds[l], truths[l], K);
    lr.timesteps = static_cast<Index>(truths[l].size());
    report.metrics.acc += lr.metrics.acc / static_cast<double>(preds.size());
    report.metrics.mf1 += lr.metrics.mf1 / static_cast<double>(preds.size());
    report.metrics.ari += lr.metrics.ari / static_cast<double>(preds.size());
    all_pred.insert(all_pred.end(), preds[l].begin(), preds[l].end());
    all_truth.insert(all_truth.end(), truths[l].begin(), truths[l].end());
  }
  report.pooled = compute_metrics(all_pred, all_truth, K);
}

}  // namespace

EvalReport single_iteration_eval(const Model<float>& model, const std::vector<Subsequence>& subsequences,
                                 const std::vector<Granularity>& levels, const WindowSpec& spec,
                                 const EvalOptions& options) {
  check_inputs(model, subsequences, levels, spec);
  if (options.density < 0 || options.density > 1) throw ConfigError("density must lie in [0, 1]");
  EvalReport report;
  report.protocol = "single";
  report.density = options.density;
  report.seed = options.seed;
  report.prompts_per_subsequence = prompt_budget(options.density, spec.subsequence_length());
  std::vector<std::vector<int>> preds(levels.size()), truths(levels.size());
  for (std::size_t l = 0; l < levels.size(); ++l) {
    report.per_level.push_back({levels[l].level, {}, 0, {}});
    for (const Subsequence& s : subsequences) {
      Rng rng = eval_rng(options.seed, levels[l].level, s.index);
      const auto p = predict_subsequence(model, s, levels[l], spec, report.prompts_per_subsequence, options.sampling, rng);
      const auto& truth = level_truth(s, levels[l]);
      preds[l].insert(preds[l].end(), p.states.begin(), p.states.end());
      truths[l].insert(truths[l].end(), truth.begin(), truth.end());
    }
  }
  summarize(report, preds, truths, model.config().K_total);
  return report;
}

EvalReport iterative_eval(const Model<float>& model, const std::vector<Subsequence>& subsequences,
                          const std::vector<Granularity>& levels, const WindowSpec& spec, const EvalOptions& options) {
  check_inputs(model, subsequences, levels, spec);
  if (options.N_p < 1 || options.N_r < 1) throw ConfigError("N_p and N_r must be >= 1");
  EvalReport report;
  report.protocol = "iterative";
  report.seed = options.seed;
  report.iterations = options.N_r;
  report.prompts_per_subsequence = options.N_p * options.N_r;
  report.density = static_cast<double>(report.prompts_per_subsequence) / static_cast<double>(spec.subsequence_length());
  const int K = model.config().K_total;
  std::vector<std::vector<int>> preds(levels.size()), truths(levels.size());
  report.curve.assign(static_cast<std::size_t>(options.N_r), 0.0);
  for (std::size_t l = 0; l < levels.size(); ++l) {
    LevelReport lr{levels[l].level, {}, 0, std::vector<double>(static_cast<std::size_t>(options.N_r), 0.0)};
    std::vector<long> hits(static_cast<std::size_t>(options.N_r), 0);
    long total = 0;
    for (const Subsequence& s : subsequences) {
      Rng rng = eval_rng(options.seed, levels[l].level, s.index);
      const auto& truth = level_truth(s, levels[l]);
      PromptSampler sampler(s, spec, levels[l], options.sampling, rng);
      MemoryBank<float> bank(model.config().D, options.memory_capacity);
      std::vector<int> states;
      for (int r = 0; r < options.N_r; ++r) {
        bank.write(encode_prompts(model, s.data, sampler.draw(options.N_p, rng), r + 1));
        states = argmax_rows(subsequence_logits(model, s.data, spec, bank.read_all()));
        for (std::size_t t = 0; t < truth.size(); ++t) hits[static_cast<std::size_t>(r)] += states[t] == truth[t];
      }
      total += static_cast<long>(truth.size());
      preds[l].insert(preds[l].end(), states.begin(), states.end());
      truths[l].insert(truths[l].end(), truth.begin(), truth.end());
    }
    for (std::size_t r = 0; r < hits.size(); ++r) {
      lr.curve[r] = static_cast<double>(hits[r]) / static_cast<double>(total);
      report.curve[r] += lr.curve[r] / static_cast<double>(levels.size());
    }
    report.per_level.push_back(std::move(lr));
  }
  summarize(report, preds, truths, K);
  report.deltas_pp.push_back(0.0);
  for (std::size_t r = 1; r < report.curve.size(); ++r)
    report.deltas_pp.push_back(100.0 * (report.curve[r] - report.curve[r - 1]));
  return report;
}

void to_json(nlohmann::json& j, const EvalReport& r) {
  const auto metrics = [](const Metrics& m) { return nlohmann::json{{"acc", m.acc}, {"mf1", m.mf1}, {"ari", m.ari}}; };
  j = nlohmann::json{{"protocol", r.protocol},
                     {"density", r.density},
                     {"acc", r.metrics.acc},
                     {"mf1", r.metrics.mf1},
                     {"ari", r.metrics.ari},
                     {"pooled", metrics(r.pooled)},
                     {"per_level", nlohmann::json::array()},
                     {"curve", r.curve},
                     {"deltas_pp", r.deltas_pp},
                     {"prompts_per_subsequence", r.prompts_per_subsequence},
                     {"iterations", r.iterations},
                     {"seed", r.seed}};
  for (const auto& l : r.per_level) {
    nlohmann::json e = metrics(l.metrics);
    e["level"] = l.level;
    e["timesteps"] = l.timesteps;
    if (!l.curve.empty()) e["curve"] = l.curve;
    j["per_level"].push_back(std::move(e));
  }
}

std::string format_table(const EvalReport& r) {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "protocol " << r.protocol << "  density " << r.density << "  prompts/subsequence "
      << r.prompts_per_subsequence << "  seed " << r.seed << "\n";
  out << std::left << std::setw(10) << "level" << std::right << std::setw(10) << "acc" << std::setw(10) << "mf1"
      << std::setw(10) << "ari" << std::setw(12) << "timesteps" << "\n";
  for (const auto& l : r.per_level)
    out << std::left << std::setw(10) << l.level << std::right << std::setw(10) << l.metrics.acc << std::setw(10)
        << l.metrics.mf1 << std::setw(10) << l.metrics.ari << std::setw(12) << l.timesteps << "\n";
  out << std::left << std::setw(10) << "mean" << std::right << std::setw(10) << r.metrics.acc << std::setw(10)
      << r.metrics.mf1 << std::setw(10) << r.metrics.ari << "\n";
  out << std::left << std::setw(10) << "pooled" << std::right << std::setw(10) << r.pooled.acc << std::setw(10)
      << r.pooled.mf1 << std::setw(10) << r.pooled.ari << "\n";
  if (!r.curve.empty()) {
    out << "\n" << std::left << std::setw(10) << "iteration" << std::right << std::setw(10) << "acc" << std::setw(12)
        << "delta_pp" << "\n";
    for (std::size_t i = 0; i < r.curve.size(); ++i)
      out << std::left << std::setw(10) << i + 1 << std::right << std::setw(10) << r.curve[i] << std::setw(12)
          << std::setprecision(2) << r.deltas_pp[i] << std::setprecision(4) << "\n";
  }
  return out.str();
}

template std::vector<int> argmax_rows(const Matrix<float>&);
template std::vector<int> argmax_rows(const Matrix<double>&);
template Matrix<float> subsequence_logits(const Model<float>&, const MatrixXd&, const WindowSpec&, const Matrix<float>&);
template Matrix<double> subsequence_logits(const Model<double>&, const MatrixXd&, const WindowSpec&,
                                           const Matrix<double>&);
template std::vector<MemoryToken<float>> encode_prompts(const Model<float>&, const MatrixXd&, const std::vector<Prompt>&,
                                                        int);
template std::vector<MemoryToken<double>> encode_prompts(const Model<double>&, const MatrixXd&,
                                                         const std::vector<Prompt>&, int);

}  // namespace mpt
