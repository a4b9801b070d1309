#pragma once

// Iterative write-then-read training. Each iteration writes N_p new prompts
// into the subsequence's bank, predicts all W windows against the whole
// bank, and takes one optimizer step.

#include "mpt/eval.hpp"
#include "mpt/membank.hpp"
#include "mpt/model.hpp"
#include "mpt/optim.hpp"

#include <nlohmann/json_fwd.hpp>

#include <functional>
#include <optional>
#include <vector>

namespace mpt {

struct TrainConfig {
  Index N_p = 4;
  int N_r = 8;
  double density_target = 0.05;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int batch_size = 8;
  int max_epochs = 100;
  int patience = 10;
  std::uint64_t seed = 0;
  double kind_mix = 0.5;
  Index window_concentration = 2;
  /// Window stride and windows per subsequence; T comes from the model.
  Index hop = 64;
  Index W = 8;
  std::optional<std::size_t> memory_capacity;
  /// Validation runs the single-iteration protocol at this density.
  double val_density = 0.05;
  std::uint64_t val_seed = 1;

  WindowSpec window(Index T) const { return {T, hop, W}; }
  /// Checks rates and prompt-budget feasibility for windows of length T.
  void validate(Index T) const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct IterationRecord {
  int iteration = 0;
  double loss = 0;
  Index prompts_added = 0;
  std::size_t bank_size = 0;
  /// Global gradient norm before clipping.
  double grad_norm = 0;
};

/// Mean cross-entropy over all W*T (window, timestep) pairs of a
/// subsequence, every window conditioned on `memory`.
template <typename Scalar>
Var<Scalar> read_loss(Tape<Scalar>& tape, const Model<Scalar>& model, const MatrixXd& subseq,
                      const std::vector<int>& labels, const WindowSpec& spec, std::optional<Var<Scalar>> memory);

/// One subsequence's state over its N_r iterations at a fixed level.
struct Episode {
  const Subsequence* subseq = nullptr;
  Granularity level;
  MemoryBank<float> bank;
  PromptSampler sampler;
};

class Trainer {
 public:
  Trainer(Model<float>& model, const TrainConfig& config);

  Episode start_episode(const Subsequence& subseq, const Granularity& level, Rng& rng) const;

  /// One write/read round over every episode of a batch, with gradients
  /// summed over the batch and averaged, then one clipped AdamW step.
  /// `loss` in the record is the batch mean.
  IterationRecord run_iteration(std::vector<Episode>& batch, int iteration, Rng& rng);
  IterationRecord run_iteration(Episode& episode, int iteration, Rng& rng);

  /// Fresh bank, then N_r iterations. The finished episode is moved into
  /// `*finished` when given.
  std::vector<IterationRecord> train_subsequence(const Subsequence& subseq, const Granularity& level, Rng& rng,
                                                 std::optional<Episode>* finished = nullptr);

  long steps() const { return optimizer_.steps(); }
  const WindowSpec& spec() const { return spec_; }
  Model<float>& model() { return *model_; }

 private:
  Model<float>* model_;
  TrainConfig config_;
  WindowSpec spec_;
  AdamW<float> optimizer_;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0;
  double val_acc = 0;
  double val_mf1 = 0;
  double val_ari = 0;
  /// Wall-clock time of the epoch; not serialized, so histories stay
  /// reproducible.
  double seconds = 0;
};

void to_json(nlohmann::json& j, const EpochRecord& r);

struct FitResult {
  Model<float> model;
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  long steps = 0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains from a fresh model seeded with `train.seed`. Each subsequence gets
/// one uniformly drawn level per epoch; prompts are redrawn every epoch.
/// Stops after `patience` epochs without a validation accuracy gain and
/// returns the best-validation parameters.
FitResult fit(const std::vector<Subsequence>& train_set, const std::vector<Subsequence>& val_set,
              const std::vector<Granularity>& levels, const ModelConfig& model_config, const TrainConfig& train,
              const EpochCallback& on_epoch = {});

}  // namespace mpt
