#include "mpt/training.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cmath>
#include <numeric>

namespace mpt {

using nlohmann::json;

void TrainConfig::validate(Index T) const {
  if (N_p < 1 || N_r < 1) throw ConfigError("N_p and N_r must be >= 1");
  if (!(lr > 0) || weight_decay < 0 || !(clip_norm > 0)) throw ConfigError("lr and clip_norm must be positive");
  if (density_target <= 0 || density_target > 1) throw ConfigError("density_target must lie in (0, 1]");
  if (batch_size < 1 || max_epochs < 1 || patience < 0) throw ConfigError("batch_size, max_epochs and patience out of range");
  if (kind_mix < 0 || kind_mix > 1) throw ConfigError("kind_mix must lie in [0, 1]");
  if (window_concentration < 1 || window_concentration > W)
    throw ConfigError("window_concentration must lie in [1, W]");
  const WindowSpec spec = window(T);
  spec.validate();
  const Index budget = prompt_budget(density_target, spec.subsequence_length());
  if (N_p * N_r > budget)
    throw ConfigError("N_p * N_r = " + std::to_string(N_p * N_r) + " prompts exceed the budget of " +
                      std::to_string(budget) + " for L_s = " + std::to_string(spec.subsequence_length()));
  const Index reachable = spec.T + (window_concentration - 1) * spec.hop;
  if (N_p * N_r > reachable)
    throw ConfigError("N_p * N_r prompts do not fit in " + std::to_string(window_concentration) + " windows");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"N_p", c.N_p},
           {"N_r", c.N_r},
           {"density_target", c.density_target},
           {"lr", c.lr},
           {"weight_decay", c.weight_decay},
           {"clip_norm", c.clip_norm},
           {"batch_size", c.batch_size},
           {"max_epochs", c.max_epochs},
           {"patience", c.patience},
           {"seed", c.seed},
           {"kind_mix", c.kind_mix},
           {"window_concentration", c.window_concentration},
           {"hop", c.hop},
           {"W", c.W},
           {"memory_capacity", c.memory_capacity ? json(*c.memory_capacity) : json(nullptr)},
           {"val_density", c.val_density},
           {"val_seed", c.val_seed}};
}

void from_json(const json& j, TrainConfig& c) {
  const auto opt = [&j](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  opt("N_p", c.N_p);
  opt("N_r", c.N_r);
  opt("density_target", c.density_target);
  opt("lr", c.lr);
  opt("weight_decay", c.weight_decay);
  opt("clip_norm", c.clip_norm);
  opt("batch_size", c.batch_size);
  opt("max_epochs", c.max_epochs);
  opt("patience", c.patience);
  opt("seed", c.seed);
  opt("kind_mix", c.kind_mix);
  opt("window_concentration", c.window_concentration);
  opt("hop", c.hop);
  opt("W", c.W);
  if (j.contains("memory_capacity")) {
    const auto& m = j.at("memory_capacity");
    c.memory_capacity = m.is_null() ? std::nullopt : std::optional<std::size_t>(m.get<std::size_t>());
  }
  opt("val_density", c.val_density);
  opt("val_seed", c.val_seed);
}

void to_json(json& j, const EpochRecord& r) {
  j = json{{"epoch", r.epoch},
           {"train_loss", r.train_loss},
           {"val_acc", r.val_acc},
           {"val_mf1", r.val_mf1},
           {"val_ari", r.val_ari}};
}

template <typename Scalar>
Var<Scalar> read_loss(Tape<Scalar>& tape, const Model<Scalar>& model, const MatrixXd& subseq,
                      const std::vector<int>& labels, const WindowSpec& spec, std::optional<Var<Scalar>> memory) {
  if (subseq.rows() != spec.subsequence_length() || static_cast<Index>(labels.size()) != subseq.rows())
    throw ShapeError("subsequence of " + std::to_string(subseq.rows()) + " rows and " + std::to_string(labels.size()) +
                     " labels for L_s = " + std::to_string(spec.subsequence_length()));
  std::vector<Var<Scalar>> terms;
  for (Index j = 0; j < spec.W; ++j) {
    const Index start = j * spec.hop;
    const Matrix<Scalar> window = subseq.middleRows(start, spec.T).template cast<Scalar>();
    const std::vector<int> targets(labels.begin() + start, labels.begin() + start + spec.T);
    terms.push_back(cross_entropy_sum(model.window_logits(tape, window, start, memory), targets));
  }
  Var<Scalar> total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  return scale(total, Scalar(1) / static_cast<Scalar>(spec.W * spec.T));
}

template Var<float> read_loss(Tape<float>&, const Model<float>&, const MatrixXd&, const std::vector<int>&,
                              const WindowSpec&, std::optional<Var<float>>);
template Var<double> read_loss(Tape<double>&, const Model<double>&, const MatrixXd&, const std::vector<int>&,
                               const WindowSpec&, std::optional<Var<double>>);

namespace {

AdamWOptions adamw_options(const TrainConfig& c) {
  AdamWOptions o;
  o.lr = c.lr;
  o.weight_decay = c.weight_decay;
  return o;
}

PromptSamplingOptions sampling_options(const TrainConfig& c) {
  PromptSamplingOptions o;
  o.window_concentration = c.window_concentration;
  o.kind_mix = c.kind_mix;
  return o;
}

}  // namespace

Trainer::Trainer(Model<float>& model, const TrainConfig& config)
    : model_(&model),
      config_(config),
      spec_(config.window(model.config().T)),
      optimizer_(model.params(), adamw_options(config)) {
  config_.validate(model.config().T);
}

Episode Trainer::start_episode(const Subsequence& subseq, const Granularity& level, Rng& rng) const {
  if (subseq.length() != spec_.subsequence_length())
    throw ShapeError("subsequence has " + std::to_string(subseq.length()) + " rows, expected " +
                     std::to_string(spec_.subsequence_length()));
  return Episode{&subseq, level, MemoryBank<float>(model_->config().D, config_.memory_capacity),
                 PromptSampler(subseq, spec_, level, sampling_options(config_), rng)};
}

IterationRecord Trainer::run_iteration(std::vector<Episode>& batch, int iteration, Rng& rng) {
  if (batch.empty()) throw ConfigError("empty training batch");
  Model<float>& model = *model_;
  model.params().zero_grad();
  const auto inv_batch = 1.0f / static_cast<float>(batch.size());
  IterationRecord record;
  record.iteration = iteration;
  record.prompts_added = config_.N_p;
  for (Episode& e : batch) {
    const std::vector<Prompt> prompts = e.sampler.draw(config_.N_p, rng);
    Tape<float> tape(true);
    tape.set_training(true, &rng);

    // Write: encode the new prompts and store detached copies.
    std::vector<Var<float>> fresh;
    std::vector<MemoryToken<float>> tokens;
    for (const Prompt& p : prompts) {
      fresh.push_back(model.memory_token(tape, e.subseq->data, p));
      tokens.push_back({fresh.back().value(), p.t_c, iteration, p.kind});
    }
    e.bank.write(tokens);

    // Read: stored tokens are constants; only this round's tokens carry
    // gradient. With a capped bank the newest tokens are at the end.
    const MatrixXf stored = e.bank.read_all();
    const Index kept_fresh = std::min<Index>(static_cast<Index>(fresh.size()), stored.rows());
    std::vector<Var<float>> parts;
    if (stored.rows() > kept_fresh) parts.push_back(tape.constant(stored.topRows(stored.rows() - kept_fresh)));
    parts.insert(parts.end(), fresh.end() - kept_fresh, fresh.end());
    Var<float> memory = parts.size() == 1 ? parts.front() : concat_rows(parts);

    const auto& labels = e.subseq->labels_per_level.at(static_cast<std::size_t>(e.level.level));
    Var<float> loss = read_loss<float>(tape, model, e.subseq->data, labels, spec_, memory);
    const double value = static_cast<double>(loss.value()(0, 0));
    if (!std::isfinite(value)) throw NumericError("training loss is not finite at iteration " + std::to_string(iteration));
    tape.backward(scale(loss, inv_batch));
    record.loss += value / static_cast<double>(batch.size());
    record.bank_size += e.bank.size();
  }
  record.bank_size /= batch.size();
  record.grad_norm = clip_grad_norm(model.params(), config_.clip_norm);
  optimizer_.step(model.params());
  return record;
}

IterationRecord Trainer::run_iteration(Episode& episode, int iteration, Rng& rng) {
  std::vector<Episode> batch;
  batch.push_back(std::move(episode));
  IterationRecord r = run_iteration(batch, iteration, rng);
  episode = std::move(batch.front());
  return r;
}

std::vector<IterationRecord> Trainer::train_subsequence(const Subsequence& subseq, const Granularity& level, Rng& rng,
                                                        std::optional<Episode>* finished) {
  std::vector<Episode> batch;
  batch.push_back(start_episode(subseq, level, rng));
  std::vector<IterationRecord> records;
  for (int r = 1; r <= config_.N_r; ++r) records.push_back(run_iteration(batch, r, rng));
  if (finished) *finished = std::move(batch.front());
  return records;
}

namespace {

Rng epoch_rng(std::uint64_t seed, int epoch) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x7a11u};
  return Rng(seq);
}

}  // namespace

FitResult fit(const std::vector<Subsequence>& train_set, const std::vector<Subsequence>& val_set,
              const std::vector<Granularity>& levels, const ModelConfig& model_config, const TrainConfig& train,
              const EpochCallback& on_epoch) {
  if (train_set.empty()) throw ConfigError("training split has no subsequences");
  if (val_set.empty()) throw ConfigError("validation split has no subsequences");
  if (levels.empty()) throw ConfigError("no granularity levels to train on");
  Model<float> model(model_config, train.seed);
  Trainer trainer(model, train);

  EvalOptions val_options;
  val_options.density = train.val_density;
  val_options.seed = train.val_seed;
  val_options.sampling = sampling_options(train);

  FitResult result{model, {}, 0, 0};
  double best_acc = -1;
  int since_best = 0;
  std::vector<std::size_t> order(train_set.size());
  for (int epoch = 1; epoch <= train.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng = epoch_rng(train.seed, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    long loss_count = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(train.batch_size)) {
      std::vector<Episode> batch;
      for (std::size_t i = b; i < std::min(order.size(), b + static_cast<std::size_t>(train.batch_size)); ++i) {
        const auto& level = levels[std::uniform_int_distribution<std::size_t>(0, levels.size() - 1)(rng)];
        batch.push_back(trainer.start_episode(train_set[order[i]], level, rng));
      }
      for (int r = 1; r <= train.N_r; ++r) {
        loss_sum += trainer.run_iteration(batch, r, rng).loss;
        ++loss_count;
      }
    }
    const EvalReport val = single_iteration_eval(model, val_set, levels, trainer.spec(), val_options);
    const EpochRecord record{epoch,        loss_sum / static_cast<double>(loss_count),
                             val.metrics.acc, val.metrics.mf1,
                             val.metrics.ari, std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    result.history.push_back(record);
    if (on_epoch) on_epoch(record);
    if (record.val_acc > best_acc) {
      best_acc = record.val_acc;
      result.best_epoch = epoch;
      result.model = model;
      since_best = 0;
    } else if (++since_best > train.patience) {
      break;
    }
  }
  result.steps = trainer.steps();
  return result;
}

}  // namespace mpt
