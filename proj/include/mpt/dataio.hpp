#pragma once

#include "mpt/types.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

namespace mpt {

using Rng = std::mt19937_64;

/// Evenly sampled multivariate signal, L rows by C channels.
struct TimeSeries {
  MatrixXd values;
  std::string series_id;

  Index length() const { return values.rows(); }
  Index channels() const { return values.cols(); }
};

/// Per-timestep labels of one granularity level. `states` hold level-local
/// indices in [0, num_states); `state_offset` maps them into the unified
/// label space shared by all levels of a dataset.
struct StateSequence {
  std::vector<int> states;
  int num_states = 0;
  int granularity_level = 0;
  int state_offset = 0;

  int unified(Index t) const { return states[static_cast<std::size_t>(t)] + state_offset; }
};

/// Description of one label layer inside the unified space.
struct Granularity {
  int level = 0;
  int num_states = 0;
  int state_offset = 0;

  bool contains(int unified_state) const {
    return unified_state >= state_offset && unified_state < state_offset + num_states;
  }
};

struct LabeledSeries {
  TimeSeries series;
  std::vector<StateSequence> levels;
};

struct Dataset {
  std::string name;
  std::vector<std::string> channel_names;
  std::vector<Granularity> granularities;
  std::vector<LabeledSeries> series;

  /// Unified state count across all levels.
  int label_space() const;
  Index channels() const { return static_cast<Index>(channel_names.size()); }
  /// Throws DataError when the invariants of a dataset are violated.
  void validate() const;
};

/// Sliding-window layout of a subsequence.
struct WindowSpec {
  Index T = 256;
  Index hop = 64;
  Index W = 8;

  /// Subsequence length that W windows of stride hop exactly tile.
  Index subsequence_length() const { return T + (W - 1) * hop; }
  void validate() const;
};

struct Subsequence {
  Index index = 0;
  MatrixXd data;
  /// Unified labels, one vector per granularity level.
  std::vector<std::vector<int>> labels_per_level;
  Index origin_offset = 0;

  Index length() const { return data.rows(); }
};

struct Window {
  Index start = 0;
  MatrixXd data;
  std::vector<std::vector<int>> labels_per_level;
};

enum class PromptKind { Label, Boundary };

/// A single-timestamp cue. State indices live in the unified label space.
struct Prompt {
  PromptKind kind = PromptKind::Label;
  Index t_c = 0;
  int correct_state = 0;
  std::vector<int> incorrect_states;
  bool present = false;
  int granularity_level = 0;

  bool operator==(const Prompt&) const = default;
};

/// Throws DataError unless the prompt is valid for a subsequence of
/// `length` timesteps at `level`.
void validate_prompt(const Prompt& prompt, Index length, const Granularity& level);

struct SynthConfig {
  int num_series = 1;
  Index L = 1000;
  Index C = 3;
  int num_fine_states = 4;
  Index segment_min = 50;
  Index segment_max = 200;
  double noise_std = 0.1;
  std::uint64_t seed = 0;
};

/// Piecewise-stationary generator: every fine state owns a per-channel
/// offset + sinusoid template; segment durations are uniform in
/// [segment_min, segment_max]. Only level 0 labels are produced.
Dataset generate_synthetic(const SynthConfig& config);

/// Merges neighbouring states: new local label = old / factor.
/// The result's offset is left at 0; see `add_coarse_level`.
StateSequence coarsen(const StateSequence& labels, int factor);

/// Appends a level obtained by coarsening `source_level` of every series,
/// placed after the existing levels in the unified label space.
void add_coarse_level(Dataset& dataset, int source_level, int factor);

/// Maps a unified fine-level state to the unified state of a level built
/// from it by `coarsen(..., factor)`.
int coarsen_unified(int unified_state, const Granularity& fine, const Granularity& coarse, int factor);

struct SplitBounds {
  Index train_end = 0;
  Index val_end = 0;
  Index length = 0;
};

SplitBounds split_bounds(Index length, const std::vector<double>& fractions);

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
};

Splits chronological_split(const Dataset& dataset, const std::vector<double>& fractions = {0.70, 0.15, 0.15});

std::vector<Subsequence> slice_subsequences(const LabeledSeries& series, const WindowSpec& spec);
std::vector<Subsequence> slice_subsequences(const Dataset& dataset, const WindowSpec& spec);

std::vector<Window> windows(const Subsequence& subseq, const WindowSpec& spec);

/// Number of windows covering timestep t of a subsequence.
Index window_coverage(Index t, const WindowSpec& spec);

/// round(density * L_s)
Index prompt_budget(double density, Index subsequence_length);

struct PromptSamplingOptions {
  Index window_concentration = 2;
  double kind_mix = 0.5;
  /// Max incorrect states per label prompt; negative means min(3, K-1).
  int n_neg = -1;
};

/// Ground-truth prompt sampler for one subsequence at one level. The
/// prompted windows are fixed at construction; `draw` never returns a
/// timestamp twice over the sampler's lifetime.
class PromptSampler {
 public:
  PromptSampler(const Subsequence& subseq, const WindowSpec& spec, const Granularity& level,
                const PromptSamplingOptions& options, Rng& rng);

  std::vector<Prompt> draw(Index count, Rng& rng);

  Index remaining() const { return static_cast<Index>(available_.size()); }
  const std::vector<Index>& chosen_windows() const { return windows_; }
  const std::set<Index>& used() const { return used_; }

 private:
  Prompt make_prompt(Index t, Rng& rng) const;

  const Subsequence* subseq_;
  Granularity level_;
  PromptSamplingOptions options_;
  std::vector<Index> windows_;
  std::vector<Index> available_;
  std::set<Index> used_;
};

std::vector<Prompt> sample_prompts(const Subsequence& subseq, const WindowSpec& spec, const Granularity& level,
                                   Index budget, const PromptSamplingOptions& options, Rng& rng);

/// Builds a prompt for timestamp t from ground truth.
Prompt ground_truth_prompt(const Subsequence& subseq, const Granularity& level, Index t, PromptKind kind,
                           int n_neg, Rng& rng);

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace mpt
