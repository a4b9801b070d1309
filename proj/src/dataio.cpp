#include "mpt/dataio.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

namespace mpt {

namespace fs = std::filesystem;
using nlohmann::json;

int Dataset::label_space() const {
  int total = 0;
  for (const auto& g : granularities) total = std::max(total, g.state_offset + g.num_states);
  return total;
}

void Dataset::validate() const {
  if (granularities.empty()) throw DataError("dataset '" + name + "' has no granularity levels");
  for (std::size_t i = 0; i < granularities.size(); ++i) {
    const auto& g = granularities[i];
    if (g.level != static_cast<int>(i)) throw DataError("granularity levels must be numbered 0..n-1 in order");
    if (g.num_states < 1) throw DataError("granularity level " + std::to_string(i) + " has no states");
    for (std::size_t j = 0; j < i; ++j) {
      const auto& h = granularities[j];
      if (g.state_offset < h.state_offset + h.num_states && h.state_offset < g.state_offset + g.num_states)
        throw DataError("granularity levels " + std::to_string(j) + " and " + std::to_string(i) +
                        " overlap in the unified label space");
    }
  }
  for (const auto& s : series) {
    const auto& x = s.series.values;
    if (x.rows() < 1 || x.cols() < 1) throw DataError("series '" + s.series.series_id + "' is empty");
    if (x.cols() != channels())
      throw DataError("series '" + s.series.series_id + "' has " + std::to_string(x.cols()) + " channels, expected " +
                      std::to_string(channels()));
    if (!x.allFinite()) throw DataError("series '" + s.series.series_id + "' contains non-finite values");
    if (s.levels.size() != granularities.size())
      throw DataError("series '" + s.series.series_id + "' does not carry every granularity level");
    for (std::size_t l = 0; l < s.levels.size(); ++l) {
      const auto& seq = s.levels[l];
      if (static_cast<Index>(seq.states.size()) != x.rows())
        throw DataError("labels of series '" + s.series.series_id + "' have the wrong length");
      for (int v : seq.states)
        if (v < 0 || v >= seq.num_states)
          throw DataError("label " + std::to_string(v) + " out of range in series '" + s.series.series_id + "'");
    }
  }
}

void WindowSpec::validate() const {
  if (T < 1) throw ConfigError("window length T must be >= 1");
  if (hop < 1 || hop > T) throw ConfigError("window hop must lie in [1, T]");
  if (W < 1) throw ConfigError("windows per subsequence W must be >= 1");
}

void validate_prompt(const Prompt& prompt, Index length, const Granularity& level) {
  if (prompt.t_c < 0 || prompt.t_c >= length)
    throw DataError("prompt timestamp " + std::to_string(prompt.t_c) + " outside [0, " + std::to_string(length) + ")");
  if (prompt.granularity_level != level.level) throw DataError("prompt level does not match the requested level");
  if (prompt.kind == PromptKind::Label) {
    if (!level.contains(prompt.correct_state))
      throw DataError("correct state " + std::to_string(prompt.correct_state) + " outside level " +
                      std::to_string(level.level));
    std::set<int> seen;
    for (int s : prompt.incorrect_states) {
      if (!level.contains(s))
        throw DataError("incorrect state " + std::to_string(s) + " outside level " + std::to_string(level.level));
      if (s == prompt.correct_state) throw DataError("correct state also listed as incorrect");
      if (!seen.insert(s).second) throw DataError("duplicate incorrect state " + std::to_string(s));
    }
  }
}

Dataset generate_synthetic(const SynthConfig& config) {
  if (config.num_fine_states < 2) throw ConfigError("synthetic data needs at least 2 states");
  if (config.segment_min < 1 || config.segment_max < 1) throw ConfigError("segment lengths must be positive");
  if (config.segment_min > config.segment_max) throw ConfigError("segment length range has min > max");
  if (config.num_series < 1 || config.L < 1 || config.C < 1) throw ConfigError("series count, length and channels must be >= 1");
  if (config.noise_std < 0) throw ConfigError("noise_std must be non-negative");

  Rng rng(config.seed);
  const int K = config.num_fine_states;
  const Index C = config.C;

  // Per-state, per-channel templates.
  MatrixXd offset(K, C), amplitude(K, C), frequency(K, C), phase(K, C);
  std::uniform_real_distribution<double> u_offset(-1.5, 1.5), u_amp(0.3, 1.2), u_freq(0.01, 0.2),
      u_phase(0.0, 2.0 * std::numbers::pi);
  for (int k = 0; k < K; ++k)
    for (Index c = 0; c < C; ++c) {
      offset(k, c) = u_offset(rng);
      amplitude(k, c) = u_amp(rng);
      frequency(k, c) = u_freq(rng);
      phase(k, c) = u_phase(rng);
    }

  Dataset ds;
  ds.name = "synthetic";
  for (Index c = 0; c < C; ++c) ds.channel_names.push_back("ch_" + std::to_string(c));
  ds.granularities.push_back({0, K, 0});

  std::uniform_int_distribution<Index> u_len(config.segment_min, config.segment_max);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (int i = 0; i < config.num_series; ++i) {
    LabeledSeries s;
    char id[16];
    std::snprintf(id, sizeof(id), "%03d", i);
    s.series.series_id = id;
    s.series.values.resize(config.L, C);
    StateSequence labels;
    labels.num_states = K;
    labels.states.resize(static_cast<std::size_t>(config.L));
    int prev = -1;
    Index t = 0;
    while (t < config.L) {
      int state = std::uniform_int_distribution<int>(0, prev < 0 ? K - 1 : K - 2)(rng);
      if (prev >= 0 && state >= prev) ++state;
      const Index end = std::min(config.L, t + u_len(rng));
      for (Index u = t; u < end; ++u) {
        labels.states[static_cast<std::size_t>(u)] = state;
        const double local = static_cast<double>(u - t);
        for (Index c = 0; c < C; ++c) {
          double v = offset(state, c) +
                     amplitude(state, c) * std::sin(2.0 * std::numbers::pi * frequency(state, c) * local + phase(state, c));
          if (config.noise_std > 0) v += config.noise_std * noise(rng);
          s.series.values(u, c) = v;
        }
      }
      prev = state;
      t = end;
    }
    s.levels.push_back(std::move(labels));
    ds.series.push_back(std::move(s));
  }
  return ds;
}

StateSequence coarsen(const StateSequence& labels, int factor) {
  if (factor < 2) throw ConfigError("coarsening factor must be >= 2, got " + std::to_string(factor));
  StateSequence out;
  out.num_states = (labels.num_states + factor - 1) / factor;
  out.granularity_level = labels.granularity_level + 1;
  out.states.reserve(labels.states.size());
  for (int s : labels.states) out.states.push_back(s / factor);
  return out;
}

void add_coarse_level(Dataset& dataset, int source_level, int factor) {
  if (source_level < 0 || source_level >= static_cast<int>(dataset.granularities.size()))
    throw ConfigError("unknown source level " + std::to_string(source_level));
  const int new_level = static_cast<int>(dataset.granularities.size());
  const int offset = dataset.label_space();
  const int k = (dataset.granularities[static_cast<std::size_t>(source_level)].num_states + factor - 1) / factor;
  if (factor < 2) throw ConfigError("coarsening factor must be >= 2, got " + std::to_string(factor));
  dataset.granularities.push_back({new_level, k, offset});
  for (auto& s : dataset.series) {
    StateSequence c = coarsen(s.levels[static_cast<std::size_t>(source_level)], factor);
    c.granularity_level = new_level;
    c.state_offset = offset;
    s.levels.push_back(std::move(c));
  }
}

int coarsen_unified(int unified_state, const Granularity& fine, const Granularity& coarse, int factor) {
  return (unified_state - fine.state_offset) / factor + coarse.state_offset;
}

SplitBounds split_bounds(Index length, const std::vector<double>& fractions) {
  if (fractions.size() != 3) throw ConfigError("split needs exactly three fractions");
  for (double f : fractions)
    if (f < 0) throw ConfigError("split fractions must be non-negative");
  const double sum = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  // The epsilon absorbs representation error in products like 0.7 * 1000.
  const auto cut = [&](double f) { return static_cast<Index>(std::floor(f * static_cast<double>(length) + 1e-9)); };
  SplitBounds b;
  b.length = length;
  b.train_end = cut(fractions[0]);
  b.val_end = cut(fractions[0] + fractions[1]);
  if (b.train_end < 1 || b.val_end <= b.train_end || length <= b.val_end)
    throw DataError("series of length " + std::to_string(length) + " is too short for three nonempty splits");
  return b;
}

namespace {

LabeledSeries slice_series(const LabeledSeries& s, Index begin, Index end) {
  LabeledSeries out;
  out.series.series_id = s.series.series_id;
  out.series.values = s.series.values.middleRows(begin, end - begin);
  for (const auto& lvl : s.levels) {
    StateSequence seq = lvl;
    seq.states.assign(lvl.states.begin() + begin, lvl.states.begin() + end);
    out.levels.push_back(std::move(seq));
  }
  return out;
}

}  // namespace

Splits chronological_split(const Dataset& dataset, const std::vector<double>& fractions) {
  Splits out;
  for (Dataset* part : {&out.train, &out.val, &out.test}) {
    part->name = dataset.name;
    part->channel_names = dataset.channel_names;
    part->granularities = dataset.granularities;
  }
  for (const auto& s : dataset.series) {
    const SplitBounds b = split_bounds(s.series.length(), fractions);
    out.train.series.push_back(slice_series(s, 0, b.train_end));
    out.val.series.push_back(slice_series(s, b.train_end, b.val_end));
    out.test.series.push_back(slice_series(s, b.val_end, b.length));
  }
  return out;
}

std::vector<Subsequence> slice_subsequences(const LabeledSeries& series, const WindowSpec& spec) {
  spec.validate();
  const Index ls = spec.subsequence_length();
  const Index m = series.series.length() / ls;
  std::vector<Subsequence> out;
  out.reserve(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) {
    Subsequence sub;
    sub.index = i;
    sub.origin_offset = i * ls;
    sub.data = series.series.values.middleRows(i * ls, ls);
    for (const auto& lvl : series.levels) {
      std::vector<int> labels(static_cast<std::size_t>(ls));
      for (Index t = 0; t < ls; ++t) labels[static_cast<std::size_t>(t)] = lvl.unified(i * ls + t);
      sub.labels_per_level.push_back(std::move(labels));
    }
    out.push_back(std::move(sub));
  }
  return out;
}

std::vector<Subsequence> slice_subsequences(const Dataset& dataset, const WindowSpec& spec) {
  std::vector<Subsequence> out;
  for (const auto& s : dataset.series) {
    auto part = slice_subsequences(s, spec);
    for (auto& p : part) {
      p.index = static_cast<Index>(out.size());
      out.push_back(std::move(p));
    }
  }
  return out;
}

std::vector<Window> windows(const Subsequence& subseq, const WindowSpec& spec) {
  spec.validate();
  if (subseq.length() != spec.subsequence_length())
    throw DataError("subsequence length " + std::to_string(subseq.length()) + " does not match T + (W-1)*hop = " +
                    std::to_string(spec.subsequence_length()));
  std::vector<Window> out;
  out.reserve(static_cast<std::size_t>(spec.W));
  for (Index j = 0; j < spec.W; ++j) {
    Window w;
    w.start = j * spec.hop;
    w.data = subseq.data.middleRows(w.start, spec.T);
    for (const auto& lvl : subseq.labels_per_level)
      w.labels_per_level.emplace_back(lvl.begin() + w.start, lvl.begin() + w.start + spec.T);
    out.push_back(std::move(w));
  }
  return out;
}

Index window_coverage(Index t, const WindowSpec& spec) {
  const Index last = std::min(t / spec.hop, spec.W - 1);
  const Index lo = t - spec.T + 1;
  // ceil division for possibly negative numerators
  const Index first = std::max<Index>(0, lo <= 0 ? 0 : (lo + spec.hop - 1) / spec.hop);
  return last - first + 1;
}

Index prompt_budget(double density, Index subsequence_length) {
  if (density < 0 || density > 1) throw ConfigError("prompt density must lie in [0, 1]");
  return static_cast<Index>(std::llround(density * static_cast<double>(subsequence_length)));
}

Prompt ground_truth_prompt(const Subsequence& subseq, const Granularity& level, Index t, PromptKind kind, int n_neg,
                           Rng& rng) {
  const auto& labels = subseq.labels_per_level.at(static_cast<std::size_t>(level.level));
  Prompt p;
  p.kind = kind;
  p.t_c = t;
  p.granularity_level = level.level;
  if (kind == PromptKind::Label) {
    p.correct_state = labels[static_cast<std::size_t>(t)];
    const int max_neg = n_neg < 0 ? std::min(3, level.num_states - 1) : std::min(n_neg, level.num_states - 1);
    const int count = max_neg > 0 ? std::uniform_int_distribution<int>(0, max_neg)(rng) : 0;
    std::vector<int> others;
    for (int s = level.state_offset; s < level.state_offset + level.num_states; ++s)
      if (s != p.correct_state) others.push_back(s);
    std::shuffle(others.begin(), others.end(), rng);
    p.incorrect_states.assign(others.begin(), others.begin() + count);
    std::sort(p.incorrect_states.begin(), p.incorrect_states.end());
  } else {
    p.present = t == 0 || labels[static_cast<std::size_t>(t)] != labels[static_cast<std::size_t>(t - 1)];
  }
  return p;
}

PromptSampler::PromptSampler(const Subsequence& subseq, const WindowSpec& spec, const Granularity& level,
                             const PromptSamplingOptions& options, Rng& rng)
    : subseq_(&subseq), level_(level), options_(options) {
  if (options.window_concentration < 1 || options.window_concentration > spec.W)
    throw ConfigError("window concentration must lie in [1, W]");
  if (options.kind_mix < 0 || options.kind_mix > 1) throw ConfigError("kind mix must lie in [0, 1]");
  if (level.level < 0 || static_cast<std::size_t>(level.level) >= subseq.labels_per_level.size())
    throw ConfigError("subsequence has no labels at level " + std::to_string(level.level));
  std::vector<Index> all(static_cast<std::size_t>(spec.W));
  std::iota(all.begin(), all.end(), Index{0});
  std::shuffle(all.begin(), all.end(), rng);
  windows_.assign(all.begin(), all.begin() + options.window_concentration);
  std::sort(windows_.begin(), windows_.end());
  std::set<Index> covered;
  for (Index j : windows_)
    for (Index t = j * spec.hop; t < j * spec.hop + spec.T && t < subseq.length(); ++t) covered.insert(t);
  available_.assign(covered.begin(), covered.end());
}

Prompt PromptSampler::make_prompt(Index t, Rng& rng) const {
  const bool label = std::bernoulli_distribution(options_.kind_mix)(rng);
  return ground_truth_prompt(*subseq_, level_, t, label ? PromptKind::Label : PromptKind::Boundary, options_.n_neg,
                             rng);
}

std::vector<Prompt> PromptSampler::draw(Index count, Rng& rng) {
  if (count > remaining())
    throw BudgetError("requested " + std::to_string(count) + " prompts but only " + std::to_string(remaining()) +
                      " unused timestamps remain");
  std::vector<Prompt> out;
  out.reserve(static_cast<std::size_t>(count));
  for (Index i = 0; i < count; ++i) {
    const auto pick = std::uniform_int_distribution<std::size_t>(0, available_.size() - 1)(rng);
    const Index t = available_[pick];
    available_[pick] = available_.back();
    available_.pop_back();
    used_.insert(t);
    out.push_back(make_prompt(t, rng));
  }
  return out;
}

std::vector<Prompt> sample_prompts(const Subsequence& subseq, const WindowSpec& spec, const Granularity& level,
                                   Index budget, const PromptSamplingOptions& options, Rng& rng) {
  if (budget < 1) throw ConfigError("prompt budget must be >= 1");
  PromptSampler sampler(subseq, spec, level, options, rng);
  return sampler.draw(budget, rng);
}

// ---------------------------------------------------------------------------
// Files

namespace {

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::vector<std::string_view> split_csv(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view field, const fs::path& file, std::size_t row) {
  T v{};
  auto res = std::from_chars(field.data(), field.data() + field.size(), v);
  if (res.ec != std::errc() || res.ptr != field.data() + field.size())
    throw DataError(file.string() + " row " + std::to_string(row) + ": cannot parse '" + std::string(field) + "'");
  return v;
}

}  // namespace

void save_dataset(const Dataset& dataset, const fs::path& dir) {
  dataset.validate();
  fs::create_directories(dir);
  json meta;
  meta["name"] = dataset.name;
  meta["channels"] = dataset.channel_names;
  meta["granularities"] = json::array();
  for (const auto& g : dataset.granularities)
    meta["granularities"].push_back({{"level", g.level}, {"num_states", g.num_states}, {"state_offset", g.state_offset}});
  meta["version"] = 1;
  std::ofstream(dir / "meta.json") << meta.dump(2) << "\n";

  for (const auto& s : dataset.series) {
    std::ofstream out(dir / ("series_" + s.series.series_id + ".csv"));
    out << "t";
    for (Index c = 0; c < dataset.channels(); ++c) out << ",ch_" << c;
    for (std::size_t l = 0; l < s.levels.size(); ++l) out << ",state_g" << l;
    out << "\n";
    for (Index t = 0; t < s.series.length(); ++t) {
      out << t;
      for (Index c = 0; c < dataset.channels(); ++c) out << ',' << format_double(s.series.values(t, c));
      for (const auto& lvl : s.levels) out << ',' << lvl.unified(t);
      out << '\n';
    }
    if (!out) throw DataError("failed writing series file for '" + s.series.series_id + "'");
  }
}

Dataset load_dataset(const fs::path& dir) {
  const fs::path meta_path = dir / "meta.json";
  if (!fs::exists(meta_path)) throw DataError("missing dataset meta file: " + meta_path.string());
  json meta;
  try {
    std::ifstream(meta_path) >> meta;
  } catch (const json::exception& e) {
    throw DataError(meta_path.string() + ": " + e.what());
  }
  Dataset ds;
  try {
    if (meta.at("version").get<int>() != 1) throw DataError(meta_path.string() + ": unsupported version");
    ds.name = meta.at("name").get<std::string>();
    ds.channel_names = meta.at("channels").get<std::vector<std::string>>();
    for (const auto& g : meta.at("granularities"))
      ds.granularities.push_back(
          {g.at("level").get<int>(), g.at("num_states").get<int>(), g.at("state_offset").get<int>()});
  } catch (const json::exception& e) {
    throw DataError(meta_path.string() + ": malformed meta: " + e.what());
  }

  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.starts_with("series_") && name.ends_with(".csv")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  const std::size_t C = ds.channel_names.size();
  const std::size_t G = ds.granularities.size();

  for (const auto& file : files) {
    std::ifstream in(file);
    std::string line;
    if (!std::getline(in, line)) throw DataError(file.string() + " row 1: missing header");
    {
      auto header = split_csv(line);
      std::vector<std::string> expected{"t"};
      for (std::size_t c = 0; c < C; ++c) expected.push_back("ch_" + std::to_string(c));
      for (std::size_t l = 0; l < G; ++l) expected.push_back("state_g" + std::to_string(l));
      bool ok = header.size() == expected.size();
      for (std::size_t i = 0; ok && i < header.size(); ++i) ok = header[i] == expected[i];
      if (!ok) throw DataError(file.string() + " row 1: malformed header '" + line + "'");
    }
    std::vector<double> values;
    std::vector<std::vector<int>> states(G);
    std::size_t row = 1;
    while (std::getline(in, line)) {
      ++row;
      if (line.empty()) continue;
      auto fields = split_csv(line);
      if (fields.size() != 1 + C + G)
        throw DataError(file.string() + " row " + std::to_string(row) + ": expected " + std::to_string(1 + C + G) +
                        " fields, got " + std::to_string(fields.size()));
      const auto t = parse_number<long long>(fields[0], file, row);
      if (t != static_cast<long long>(row - 2))
        throw DataError(file.string() + " row " + std::to_string(row) + ": timestamps must be 0-based and consecutive");
      for (std::size_t c = 0; c < C; ++c) {
        const double v = parse_number<double>(fields[1 + c], file, row);
        if (!std::isfinite(v)) throw DataError(file.string() + " row " + std::to_string(row) + ": non-finite value");
        values.push_back(v);
      }
      for (std::size_t l = 0; l < G; ++l) {
        const int s = parse_number<int>(fields[1 + C + l], file, row);
        if (!ds.granularities[l].contains(s))
          throw DataError(file.string() + " row " + std::to_string(row) + ": state " + std::to_string(s) +
                          " out of range for level " + std::to_string(l));
        states[l].push_back(s - ds.granularities[l].state_offset);
      }
    }
    const Index L = static_cast<Index>(values.size() / std::max<std::size_t>(C, 1));
    LabeledSeries s;
    auto stem = file.stem().string();
    s.series.series_id = stem.substr(std::string("series_").size());
    s.series.values = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        values.data(), L, static_cast<Index>(C));
    for (std::size_t l = 0; l < G; ++l) {
      StateSequence seq;
      seq.states = std::move(states[l]);
      seq.num_states = ds.granularities[l].num_states;
      seq.granularity_level = static_cast<int>(l);
      seq.state_offset = ds.granularities[l].state_offset;
      s.levels.push_back(std::move(seq));
    }
    ds.series.push_back(std::move(s));
  }
  ds.validate();
  return ds;
}

}  // namespace mpt
