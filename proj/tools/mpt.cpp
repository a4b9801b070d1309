// mpt: synthetic data generation, training, evaluation, sweeps and the
// interactive session server.

#include "mpt/service.hpp"
#include "mpt/training.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <chrono>
#include <csignal>
#include <ctime>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mpt;

namespace {

// ---------------------------------------------------------------------------
// Run directories and manifests

std::string utc_stamp(const char* format) {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, format);
  return s.str();
}

fs::path make_run_dir(const fs::path& root, const std::string& command, const std::string& explicit_dir) {
  fs::path dir = explicit_dir;
  if (dir.empty()) {
    const std::string base = utc_stamp("%Y%m%d-%H%M%S") + "-" + command;
    dir = root / base;
    for (int n = 2; fs::exists(dir); ++n) dir = root / (base + "-" + std::to_string(n));
  }
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

json manifest(const std::string& command, const std::vector<std::string>& args, const json& config,
              std::uint64_t seed) {
  return json{{"command", command}, {"version", MPT_VERSION}, {"args", args},
              {"config", config},   {"seed", seed},           {"started", utc_stamp("%Y-%m-%dT%H:%M:%SZ")}};
}

void finish(json& man, const fs::path& dir, const std::vector<std::string>& outputs) {
  man["finished"] = utc_stamp("%Y-%m-%dT%H:%M:%SZ");
  man["outputs"] = outputs;
  write_json(dir / "manifest.json", man);
}

// ---------------------------------------------------------------------------
// Configuration flags. Precedence: built-in defaults, then --config, then
// flags given explicitly on the command line.

class ConfigFlags {
 public:
  ConfigFlags(CLI::App* app, const TrainConfig& base_train) : base_train_(base_train), train_(base_train) {
    app->add_option("--config", config_file_, "JSON file with \"model\" and \"train\" objects, or a run manifest")
        ->check(CLI::ExistingFile);
    model_opt(app, "--dim", &ModelConfig::D, "embedding width D");
    model_opt(app, "--heads", &ModelConfig::heads, "attention heads");
    model_opt(app, "--enc-layers", &ModelConfig::enc_layers, "patch encoder layers");
    model_opt(app, "--dec-blocks", &ModelConfig::dec_blocks, "two-way decoder blocks");
    model_opt(app, "--mem-layers", &ModelConfig::mem_layers, "memory encoder blocks");
    model_opt(app, "--patch", &ModelConfig::P, "patch length P");
    model_opt(app, "--patch-hop", &ModelConfig::patch_hop, "patch stride");
    model_opt(app, "--window-len", &ModelConfig::T, "window length T");
    model_opt(app, "--tctx", &ModelConfig::T_ctx, "prompt context length");
    model_opt(app, "--dropout", &ModelConfig::dropout, "dropout rate");
    train_opt(app, "--hop", &TrainConfig::hop, "window stride");
    train_opt(app, "--windows", &TrainConfig::W, "windows per subsequence W");
    train_opt(app, "--np", &TrainConfig::N_p, "prompts per iteration N_p");
    train_opt(app, "--nr", &TrainConfig::N_r, "iterations per subsequence N_r");
    train_opt(app, "--density", &TrainConfig::density_target, "prompt density target");
    train_opt(app, "--lr", &TrainConfig::lr, "AdamW learning rate");
    train_opt(app, "--weight-decay", &TrainConfig::weight_decay, "AdamW weight decay");
    train_opt(app, "--clip", &TrainConfig::clip_norm, "gradient norm clip");
    train_opt(app, "--batch-size", &TrainConfig::batch_size, "subsequences per step");
    train_opt(app, "--max-epochs", &TrainConfig::max_epochs, "epoch limit");
    train_opt(app, "--patience", &TrainConfig::patience, "early stopping patience");
    train_opt(app, "--seed", &TrainConfig::seed, "seed for weights, prompts and order");
    train_opt(app, "--kind-mix", &TrainConfig::kind_mix, "fraction of label prompts");
    train_opt(app, "--concentration", &TrainConfig::window_concentration, "windows receiving prompts");
    auto* cap = app->add_option("--memory-capacity", capacity_, "memory bank capacity (0 = unbounded)");
    setters_.emplace_back(cap, [this](ModelConfig&, TrainConfig& t) {
      t.memory_capacity = capacity_ > 0 ? std::optional<std::size_t>(capacity_) : std::nullopt;
    });
  }

  std::pair<ModelConfig, TrainConfig> resolve() const {
    ModelConfig m;
    TrainConfig t = base_train_;
    if (!config_file_.empty()) {
      json j = read_json(config_file_);
      if (j.contains("config")) j = j.at("config");
      try {
        if (j.contains("model")) from_json(j.at("model"), m);
        if (j.contains("train")) from_json(j.at("train"), t);
      } catch (const json::exception& e) {
        throw ConfigError(config_file_ + ": " + e.what());
      }
    }
    for (const auto& [option, set] : setters_)
      if (option->count() > 0) set(m, t);
    return {m, t};
  }

 private:
  template <typename T>
  void model_opt(CLI::App* app, const std::string& name, T ModelConfig::*field, const std::string& help) {
    auto* option = app->add_option(name, model_.*field, help)->capture_default_str();
    setters_.emplace_back(option, [this, field](ModelConfig& m, TrainConfig&) { m.*field = model_.*field; });
  }

  template <typename T>
  void train_opt(CLI::App* app, const std::string& name, T TrainConfig::*field, const std::string& help) {
    auto* option = app->add_option(name, train_.*field, help)->capture_default_str();
    setters_.emplace_back(option, [this, field](ModelConfig&, TrainConfig& t) { t.*field = train_.*field; });
  }

  TrainConfig base_train_;
  ModelConfig model_;
  TrainConfig train_;
  std::size_t capacity_ = 0;
  std::string config_file_;
  std::vector<std::pair<CLI::Option*, std::function<void(ModelConfig&, TrainConfig&)>>> setters_;
};

json resolved_config(const ModelConfig& m, const TrainConfig& t) { return json{{"model", m}, {"train", t}}; }

// ---------------------------------------------------------------------------
// Shared helpers

struct Splits3 {
  std::vector<Subsequence> train, val, test;
};

Splits3 subsequence_splits(const Dataset& ds, const WindowSpec& spec) {
  const Splits s = chronological_split(ds);
  return {slice_subsequences(s.train, spec), slice_subsequences(s.val, spec), slice_subsequences(s.test, spec)};
}

std::vector<Subsequence> split_subsequences(const Dataset& ds, const WindowSpec& spec, const std::string& split) {
  if (split == "all") return slice_subsequences(ds, spec);
  const Splits s = chronological_split(ds);
  if (split == "train") return slice_subsequences(s.train, spec);
  if (split == "val") return slice_subsequences(s.val, spec);
  return slice_subsequences(s.test, spec);
}

void require_nonempty(const std::vector<Subsequence>& subs, const std::string& what, const WindowSpec& spec) {
  if (subs.empty())
    throw ConfigError(what + " has no subsequence of L_s = " + std::to_string(spec.subsequence_length()) +
                      " timesteps; use longer series or a smaller window layout");
}

void check_compatible(const Model<float>& model, const Dataset& ds) {
  const ModelConfig& c = model.config();
  if (c.C != ds.channels())
    throw ConfigError("dataset has C=" + std::to_string(ds.channels()) + " channels, checkpoint expects C=" +
                      std::to_string(c.C));
  if (c.K_total != ds.label_space())
    throw ConfigError("dataset has K=" + std::to_string(ds.label_space()) + " states, checkpoint expects K=" +
                      std::to_string(c.K_total));
}

/// Window layout stored next to a checkpoint by `train`; defaults otherwise.
TrainConfig checkpoint_train_config(const fs::path& checkpoint) {
  TrainConfig t;
  const fs::path p = checkpoint / "train_config.json";
  if (fs::exists(p)) from_json(read_json(p), t);
  return t;
}

void print_epoch(const EpochRecord& r) {
  std::cout << "epoch " << r.epoch << std::fixed << std::setprecision(4) << "  loss " << r.train_loss << "  val_acc "
            << r.val_acc << "  val_mf1 " << r.val_mf1 << "  val_ari " << r.val_ari << std::setprecision(1) << "  ("
            << r.seconds << " s)" << std::defaultfloat << std::endl;
}

// ---------------------------------------------------------------------------
// Commands

struct GenDataArgs {
  std::string out;
  SynthConfig synth;
  std::vector<int> coarsen;
  std::string name = "synthetic";
};

int run_gen_data(const GenDataArgs& a, const std::vector<std::string>& args) {
  Dataset ds = generate_synthetic(a.synth);
  ds.name = a.name;
  for (int factor : a.coarsen) add_coarse_level(ds, 0, factor);
  save_dataset(ds, a.out);
  const json config{{"series", a.synth.num_series},   {"length", a.synth.L},
                    {"channels", a.synth.C},          {"states", a.synth.num_fine_states},
                    {"segment_min", a.synth.segment_min}, {"segment_max", a.synth.segment_max},
                    {"noise", a.synth.noise_std},     {"seed", a.synth.seed},
                    {"coarsen", a.coarsen},           {"name", a.name}};
  json man = manifest("gen-data", args, config, a.synth.seed);
  std::vector<std::string> outputs{"meta.json"};
  for (const auto& series : ds.series) outputs.push_back("series_" + series.series.series_id + ".csv");
  finish(man, a.out, outputs);
  std::cout << "wrote " << ds.series.size() << " series, " << ds.granularities.size() << " level(s), K="
            << ds.label_space() << " to " << a.out << "\n";
  return 0;
}

struct RunArgs {
  std::string data;
  std::string out_root = "runs";
  std::string run_dir;
};

int run_train(const RunArgs& a, const ConfigFlags& flags, const std::vector<std::string>& args) {
  auto [m, t] = flags.resolve();
  const Dataset ds = load_dataset(a.data);
  m.C = ds.channels();
  m.K_total = ds.label_space();
  m.validate();
  t.validate(m.T);
  const WindowSpec spec = t.window(m.T);
  const Splits3 splits = subsequence_splits(ds, spec);
  require_nonempty(splits.train, "training split", spec);
  require_nonempty(splits.val, "validation split", spec);

  const fs::path dir = make_run_dir(a.out_root, "train", a.run_dir);
  json man = manifest("train", args, resolved_config(m, t), t.seed);
  man["data"] = a.data;
  write_json(dir / "manifest.json", man);
  std::cout << "run directory " << dir.string() << "\n";

  std::ofstream history(dir / "history.jsonl");
  const FitResult result = fit(splits.train, splits.val, ds.granularities, m, t, [&history](const EpochRecord& r) {
    history << json(r).dump() << "\n" << std::flush;
    print_epoch(r);
  });
  save_checkpoint(result.model, dir / "checkpoint");
  write_json(dir / "checkpoint" / "train_config.json", t);

  json report{{"best_epoch", result.best_epoch},
              {"epochs_run", result.history.size()},
              {"steps", result.steps},
              {"checkpoint_hash", checkpoint_hash(result.model)}};
  if (!splits.test.empty()) {
    EvalOptions eo;
    eo.density = t.density_target;
    eo.N_p = t.N_p;
    eo.N_r = t.N_r;
    eo.seed = t.seed;
    eo.sampling.window_concentration = t.window_concentration;
    eo.sampling.kind_mix = t.kind_mix;
    eo.memory_capacity = t.memory_capacity;
    const EvalReport test = single_iteration_eval(result.model, splits.test, ds.granularities, spec, eo);
    report["test"] = test;
    std::cout << format_table(test);
  }
  write_json(dir / "report.json", report);
  finish(man, dir, {"history.jsonl", "checkpoint", "report.json"});
  return 0;
}

struct EvalArgs {
  RunArgs run;
  std::string checkpoint;
  std::string protocol = "single";
  std::string split = "test";
  EvalOptions options;
  std::optional<Index> hop;
  std::optional<Index> windows;
  double kind_mix = 0.5;
  Index concentration = 2;
};

int run_eval(const EvalArgs& a, const std::vector<std::string>& args) {
  const Model<float> model = load_checkpoint(a.checkpoint);
  const Dataset ds = load_dataset(a.run.data);
  check_compatible(model, ds);
  TrainConfig stored = checkpoint_train_config(a.checkpoint);
  const WindowSpec spec{model.config().T, a.hop.value_or(stored.hop), a.windows.value_or(stored.W)};
  spec.validate();
  const std::vector<Subsequence> subs = split_subsequences(ds, spec, a.split);
  require_nonempty(subs, a.split + " split", spec);

  EvalOptions options = a.options;
  options.sampling.kind_mix = a.kind_mix;
  options.sampling.window_concentration = a.concentration;
  const EvalReport report = a.protocol == "iterative"
                                ? iterative_eval(model, subs, ds.granularities, spec, options)
                                : single_iteration_eval(model, subs, ds.granularities, spec, options);

  const fs::path dir = make_run_dir(a.run.out_root, "eval", a.run.run_dir);
  json config{{"checkpoint", a.checkpoint}, {"data", a.run.data},       {"split", a.split},
              {"protocol", a.protocol},     {"density", options.density}, {"N_p", options.N_p},
              {"N_r", options.N_r},         {"seed", options.seed},       {"hop", spec.hop},
              {"W", spec.W}};
  json man = manifest("eval", args, config, options.seed);
  write_json(dir / "report.json", report);
  finish(man, dir, {"report.json"});
  std::cout << format_table(report);
  return 0;
}

struct SweepPoint {
  std::string label;
  double value = 0;
};

std::pair<std::string, std::vector<SweepPoint>> parse_grid(const std::string& grid) {
  const auto eq = grid.find('=');
  if (eq == std::string::npos) throw ConfigError("sweep grid must look like key=v1,v2,...");
  const std::string key = grid.substr(0, eq);
  if (key != "tctx" && key != "windows")
    throw ConfigError("unknown sweep key '" + key + "'; expected tctx or windows");
  std::vector<SweepPoint> points;
  std::stringstream list(grid.substr(eq + 1));
  for (std::string item; std::getline(list, item, ',');) {
    if (item.empty()) continue;
    std::string number = item;
    const bool relative = key == "tctx" && !number.empty() && number.back() == 'T';
    if (relative) number.pop_back();
    try {
      std::size_t used = 0;
      const double v = number.empty() ? 1.0 : std::stod(number, &used);
      if (!number.empty() && used != number.size()) throw std::invalid_argument(item);
      points.push_back({item, relative ? -v : v});
    } catch (const std::exception&) {
      throw ConfigError("bad sweep value '" + item + "'");
    }
  }
  if (points.empty()) throw ConfigError("empty sweep grid for key '" + key + "'");
  return {key, points};
}

struct SweepArgs {
  RunArgs run;
  std::string grid;
};

int run_sweep(const SweepArgs& a, const ConfigFlags& flags, const std::vector<std::string>& args) {
  const auto [key, points] = parse_grid(a.grid);
  auto [m0, t0] = flags.resolve();
  const Dataset ds = load_dataset(a.run.data);
  m0.C = ds.channels();
  m0.K_total = ds.label_space();

  const fs::path dir = make_run_dir(a.run.out_root, "sweep", a.run.run_dir);
  json man = manifest("sweep", args, resolved_config(m0, t0), t0.seed);
  man["grid"] = a.grid;
  man["data"] = a.run.data;
  write_json(dir / "manifest.json", man);

  json rows = json::array();
  std::cout << std::left << std::setw(10) << key << std::setw(8) << "N_r" << std::setw(10) << "acc" << std::setw(10)
            << "mf1" << std::setw(12) << "train_s" << std::setw(10) << "s/epoch" << "s/batch\n";
  for (const SweepPoint& p : points) {
    ModelConfig m = m0;
    TrainConfig t = t0;
    if (key == "tctx") {
      // Negative values are multiples of T.
      m.T_ctx = p.value < 0 ? static_cast<Index>(std::lround(-p.value * static_cast<double>(m.T)))
                            : static_cast<Index>(p.value);
    } else {
      t.W = static_cast<Index>(p.value);
      t.window_concentration = std::min(t.window_concentration, t.W);
      // Fewer windows shrink the budget; keep N_p and fit N_r under it.
      if (t.W >= 1) {
        const WindowSpec spec = t.window(m.T);
        const Index room = std::min(prompt_budget(t.density_target, spec.subsequence_length()),
                                    spec.T + (t.window_concentration - 1) * spec.hop);
        t.N_r = static_cast<int>(std::clamp<Index>(room / t.N_p, 1, t.N_r));
      }
    }
    m.validate();
    t.validate(m.T);
    const WindowSpec spec = t.window(m.T);
    const Splits3 splits = subsequence_splits(ds, spec);
    require_nonempty(splits.train, "training split", spec);
    require_nonempty(splits.val, "validation split", spec);
    require_nonempty(splits.test, "test split", spec);

    const auto start = std::chrono::steady_clock::now();
    const FitResult result = fit(splits.train, splits.val, ds.granularities, m, t);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    EvalOptions eo;
    eo.density = t.density_target;
    eo.seed = t.seed;
    eo.sampling.window_concentration = t.window_concentration;
    eo.sampling.kind_mix = t.kind_mix;
    const EvalReport test = single_iteration_eval(result.model, splits.test, ds.granularities, spec, eo);
    const double per_epoch = seconds / static_cast<double>(result.history.size());
    // Each batch takes N_r optimizer steps; the time includes validation.
    const double per_batch = seconds * t.N_r / static_cast<double>(result.steps);
    rows.push_back({{key, p.label},
                    {"T_ctx", m.T_ctx},
                    {"W", t.W},
                    {"N_r", t.N_r},
                    {"acc", test.metrics.acc},
                    {"mf1", test.metrics.mf1},
                    {"ari", test.metrics.ari},
                    {"epochs", result.history.size()},
                    {"train_seconds", seconds},
                    {"seconds_per_epoch", per_epoch},
                    {"seconds_per_batch", per_batch}});
    std::cout << std::left << std::setw(10) << p.label << std::setw(8) << t.N_r << std::fixed << std::setprecision(4)
              << std::setw(10) << test.metrics.acc << std::setw(10) << test.metrics.mf1 << std::setprecision(1)
              << std::setw(12) << seconds << std::setw(10) << per_epoch << std::setprecision(3) << per_batch
              << std::defaultfloat << std::endl;
  }
  write_json(dir / "report.json", json{{"key", key}, {"rows", rows}});
  finish(man, dir, {"report.json"});
  return 0;
}

struct ServeArgs {
  std::string checkpoint;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string data;
  std::string split = "test";
  std::string sessions_dir;
  int lock_timeout_ms = 5000;
};

int run_serve(const ServeArgs& a) {
  Model<float> model = load_checkpoint(a.checkpoint);
  const TrainConfig stored = checkpoint_train_config(a.checkpoint);
  ServiceConfig config;
  config.hop = stored.hop;
  config.W = stored.W;
  config.data_dir = a.sessions_dir;
  config.lock_timeout = std::chrono::milliseconds(a.lock_timeout_ms);
  config.checkpoint_hash = checkpoint_hash(model);
  if (!a.data.empty()) {
    const Dataset ds = load_dataset(a.data);
    check_compatible(model, ds);
    config.levels = ds.granularities;
    config.bundled = split_subsequences(ds, WindowSpec{model.config().T, config.hop, config.W}, a.split);
  }

  // Block termination signals before any thread starts, then wait for them
  // on a dedicated thread. Ignored dispositions are inherited by background
  // jobs and would drop the signal, so reset them first.
  std::signal(SIGINT, SIG_DFL);
  std::signal(SIGTERM, SIG_DFL);
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  SessionService service(std::move(model), config);
  HttpServer server(service);
  const int port = server.bind(a.host, a.port);
  std::cout << "listening on http://" << a.host << ":" << port << std::endl;
  std::thread waiter([&server, signals] {
    int sig = 0;
    sigwait(&signals, &sig);
    server.stop();
  });
  server.listen();
  pthread_kill(waiter.native_handle(), SIGTERM);
  waiter.join();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prompt-guided time series segmentation with a memory bank of prompts", "mpt"};
  app.set_version_flag("--version", MPT_VERSION);
  app.require_subcommand(1);
  const std::vector<std::string> args(argv + 1, argv + argc);
  std::function<int()> command;

  GenDataArgs gen;
  gen.synth.num_series = 4;
  gen.synth.L = 10000;
  auto* gen_cmd = app.add_subcommand("gen-data", "write a synthetic labelled dataset");
  gen_cmd->add_option("--out", gen.out, "output directory")->required();
  gen_cmd->add_option("--series", gen.synth.num_series, "number of series")->capture_default_str();
  gen_cmd->add_option("--len", gen.synth.L, "timesteps per series")->capture_default_str();
  gen_cmd->add_option("--channels", gen.synth.C, "channels C")->capture_default_str();
  gen_cmd->add_option("--states", gen.synth.num_fine_states, "fine states")->capture_default_str();
  gen_cmd->add_option("--seg-min", gen.synth.segment_min, "shortest segment")->capture_default_str();
  gen_cmd->add_option("--seg-max", gen.synth.segment_max, "longest segment")->capture_default_str();
  gen_cmd->add_option("--noise", gen.synth.noise_std, "noise standard deviation")->capture_default_str();
  gen_cmd->add_option("--seed", gen.synth.seed, "generator seed")->capture_default_str();
  gen_cmd->add_option("--coarsen", gen.coarsen, "add a coarse level merging this many fine states (repeatable)");
  gen_cmd->add_option("--name", gen.name, "dataset name")->capture_default_str();
  gen_cmd->callback([&] { command = [&] { return run_gen_data(gen, args); }; });

  RunArgs train;
  auto* train_cmd = app.add_subcommand("train", "train a model and evaluate it on the test split");
  train_cmd->add_option("--data", train.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  train_cmd->add_option("--out-root", train.out_root, "parent of run directories")->capture_default_str();
  train_cmd->add_option("--run-dir", train.run_dir, "exact run directory");
  ConfigFlags train_flags(train_cmd, TrainConfig{});
  train_cmd->callback([&] { command = [&] { return run_train(train, train_flags, args); }; });

  EvalArgs eval;
  Index eval_hop = 0, eval_windows = 0;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--data", eval.run.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--protocol", eval.protocol, "single or iterative")
      ->check(CLI::IsMember({"single", "iterative"}))
      ->capture_default_str();
  eval_cmd->add_option("--split", eval.split, "train, val, test or all")
      ->check(CLI::IsMember({"train", "val", "test", "all"}))
      ->capture_default_str();
  eval_cmd->add_option("--density", eval.options.density, "prompt density (single protocol)")->capture_default_str();
  eval_cmd->add_option("--np", eval.options.N_p, "prompts per round (iterative protocol)")->capture_default_str();
  eval_cmd->add_option("--nr", eval.options.N_r, "rounds (iterative protocol)")->capture_default_str();
  eval_cmd->add_option("--seed", eval.options.seed, "prompt sampling seed")->capture_default_str();
  eval_cmd->add_option("--kind-mix", eval.kind_mix, "fraction of label prompts")->capture_default_str();
  eval_cmd->add_option("--concentration", eval.concentration, "windows receiving prompts")->capture_default_str();
  auto* hop_opt = eval_cmd->add_option("--hop", eval_hop, "window stride (default: from the checkpoint)");
  auto* w_opt = eval_cmd->add_option("--windows", eval_windows, "windows per subsequence (default: from the checkpoint)");
  eval_cmd->add_option("--out-root", eval.run.out_root, "parent of run directories")->capture_default_str();
  eval_cmd->add_option("--run-dir", eval.run.run_dir, "exact run directory");
  eval_cmd->callback([&] {
    if (hop_opt->count() > 0) eval.hop = eval_hop;
    if (w_opt->count() > 0) eval.windows = eval_windows;
    command = [&] { return run_eval(eval, args); };
  });

  SweepArgs sweep;
  TrainConfig sweep_base;
  sweep_base.max_epochs = 3;
  sweep_base.patience = 1;
  auto* sweep_cmd = app.add_subcommand("sweep", "train and evaluate over a grid of T_ctx or W values");
  sweep_cmd->add_option("--data", sweep.run.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  sweep_cmd->add_option("--grid", sweep.grid, "tctx=0.5T,1T,2T,4T or windows=4,8,16,32")->required();
  sweep_cmd->add_option("--out-root", sweep.run.out_root, "parent of run directories")->capture_default_str();
  sweep_cmd->add_option("--run-dir", sweep.run.run_dir, "exact run directory");
  ConfigFlags sweep_flags(sweep_cmd, sweep_base);
  sweep_cmd->callback([&] { command = [&] { return run_sweep(sweep, sweep_flags, args); }; });

  ServeArgs serve;
  auto* serve_cmd = app.add_subcommand("serve", "serve interactive segmentation sessions over HTTP");
  serve_cmd->add_option("--checkpoint", serve.checkpoint, "checkpoint directory")->required()->check(CLI::ExistingDirectory);
  serve_cmd->add_option("--host", serve.host, "bind address")->capture_default_str();
  serve_cmd->add_option("--port", serve.port, "port; 0 picks a free one")->capture_default_str();
  serve_cmd->add_option("--data", serve.data, "dataset whose subsequences sessions may reference");
  serve_cmd->add_option("--split", serve.split, "split of --data to bundle")
      ->check(CLI::IsMember({"train", "val", "test", "all"}))
      ->capture_default_str();
  serve_cmd->add_option("--sessions-dir", serve.sessions_dir, "session event logs; empty disables persistence");
  serve_cmd->add_option("--lock-timeout-ms", serve.lock_timeout_ms, "per-session lock wait")->capture_default_str();
  serve_cmd->callback([&] { command = [&] { return run_serve(serve); }; });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  try {
    return command();
  } catch (const Error& e) {
    std::cerr << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
