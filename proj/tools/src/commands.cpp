#include "fedcrfd_cli/commands.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <ostream>

#include <CLI11.hpp>

#include "fedcrfd/dataset_io.hpp"
#include "fedcrfd/errors.hpp"

namespace fedcrfd::cli {

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string ckpt_stem(std::size_t round) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ckpt_r%04zu", round);
  return buf;
}

bool checkpoint_due(const RunConfig& config, std::size_t round) {
  return config.checkpoint_every > 0 && round % config.checkpoint_every == 0 && round != config.federation.rounds;
}

std::string client_prefix(const char* tag, std::size_t k) { return tag + std::to_string(k) + "."; }

void check_arch(const ArchConfig& arch, const FederatedData& data) {
  if (arch.image_size != data.config.image_size || arch.num_modalities != data.config.num_modalities) {
    throw ConfigError("checkpoint architecture (image " + std::to_string(arch.image_size) + ", " +
                      std::to_string(arch.num_modalities) + " modalities) does not match the dataset (image " +
                      std::to_string(data.config.image_size) + ", " + std::to_string(data.config.num_modalities) +
                      " modalities)");
  }
}

}  // namespace

RunConfig resolve_config(const GlobalOptions& options) {
  RunConfig config = options.config ? load_config(*options.config) : RunConfig{};
  for (const std::string& s : options.sets) {
    const std::size_t eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    apply_setting(config, s.substr(0, eq), s.substr(eq + 1));
  }
  if (options.seed) config.seed = *options.seed;
  if (options.out) config.out = *options.out;
  return config;
}

std::size_t thread_cap(std::size_t requested) {
  const char* env = std::getenv("FEDCRFD_THREADS");
  if (env == nullptr || *env == '\0') return requested;
  char* end = nullptr;
  const unsigned long long cap = std::strtoull(env, &end, 10);
  if (end == env || *end != '\0' || cap == 0) throw ConfigError("FEDCRFD_THREADS must be a positive integer");
  return std::min<std::size_t>(requested, static_cast<std::size_t>(cap));
}

std::filesystem::path default_dataset_dir(const RunConfig& config) { return config.out / "dataset"; }

std::filesystem::path default_run_dir(const RunConfig& config, Method method) {
  return config.out / "runs" / std::string(method_name(method));
}

FederatedData cmd_gen_data(const RunConfig& config, const std::filesystem::path& dir) {
  FederatedData data = build_dataset(config.data);
  save_dataset(dir, data);
  return data;
}

Checkpoint fedcrfd_checkpoint(std::size_t round, const FederationConfig& config, const ParamSet& global,
                              std::span<const ParamSet> specific, const ClassifierParams& classifier) {
  Checkpoint c;
  c.method = "fedcrfd";
  c.round = round;
  c.clients = specific.size();
  c.arch = config.arch;
  c.use_fusion = config.use_fusion;
  c.add("", global);
  for (std::size_t k = 0; k < specific.size(); ++k) c.add(client_prefix("c", k), specific[k]);
  c.add("", classifier.mlp);
  return c;
}

Checkpoint baseline_checkpoint(Method method, std::size_t round, const ArchConfig& arch,
                               std::span<const PlainModel> models) {
  Checkpoint c;
  c.method = std::string(method_name(method));
  c.round = round;
  c.clients = models.size();
  c.arch = arch;
  c.use_fusion = false;
  const bool per_client = method == Method::kSolo;
  for (std::size_t k = 0; k < models.size(); ++k) {
    const std::string prefix = per_client ? client_prefix("m", k) : "";
    c.add(prefix, models[k].encoder);
    c.add(prefix, models[k].decoder);
  }
  return c;
}

TrainOutcome cmd_train(const RunConfig& config_in, const TrainOptions& options, std::ostream& progress) {
  const FederatedData data = load_dataset(options.dataset);
  RunConfig config = config_in;
  config.federation.arch.image_size = data.config.image_size;
  config.federation.arch.num_modalities = data.config.num_modalities;
  const FederationConfig& fed = config.federation;
  fed.validate();

  std::filesystem::create_directories(options.run_dir);
  write_text(options.run_dir / "config.toml", config_text(config));
  TrainOutcome outcome;
  outcome.final_checkpoint = options.run_dir / "final";
  outcome.log = options.run_dir / "log.jsonl";

  const auto start = std::chrono::steady_clock::now();
  auto tick = [&](std::size_t round) {
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    progress << method_name(options.method) << " round " << round << "/" << fed.rounds << " (" << s << " s)\n";
    progress.flush();
  };

  if (options.method == Method::kFedCrfd) {
    TrainingHooks hooks;
    hooks.on_round_end = [&](std::size_t round, const FedCrfdState& state) {
      tick(round);
      if (!checkpoint_due(config, round)) return;
      std::vector<ParamSet> specific;
      for (const ClientState& c : state.clients) specific.push_back(c.params.specific_encoder);
      save_checkpoint(options.run_dir / ckpt_stem(round),
                      fedcrfd_checkpoint(round, fed, state.server->global(), specific, state.server->classifier()));
    };
    const TrainingResult r = run_training(fed, data, hooks);
    save_checkpoint(outcome.final_checkpoint,
                    fedcrfd_checkpoint(r.rounds_completed, fed, r.global, r.specific, r.classifier));
    write_text(outcome.log, to_jsonl(r.log));
    outcome.rounds = r.rounds_completed;
  } else {
    BaselineHooks hooks;
    hooks.on_round_end = [&](std::size_t round, std::span<const PlainModel> models) {
      tick(round);
      if (checkpoint_due(config, round)) {
        save_checkpoint(options.run_dir / ckpt_stem(round), baseline_checkpoint(options.method, round, fed.arch, models));
      }
    };
    const BaselineResult r = run_baseline(options.method, fed, data, hooks);
    save_checkpoint(outcome.final_checkpoint, baseline_checkpoint(options.method, r.rounds_completed, fed.arch, r.models));
    write_text(outcome.log, to_jsonl(r.log));
    outcome.rounds = r.rounds_completed;
  }
  return outcome;
}

Reconstructor checkpoint_reconstructor(const Checkpoint& ckpt, const FederatedData& data) {
  check_arch(ckpt.arch, data);
  const std::size_t k = data.clients.size();
  const Method method = parse_method(ckpt.method);
  if (method == Method::kFedCrfd) {
    if (ckpt.clients != k) {
      throw ConfigError("checkpoint has " + std::to_string(ckpt.clients) + " clients, dataset has " + std::to_string(k));
    }
    ModelParams shell = ModelParams::init(ckpt.arch, 0, 0);
    ParamSet global = shell.invariant_encoder;
    for (const Parameter& p : shell.decoder) global.add(p.name, p.value);
    ckpt.restore("", global);
    std::vector<ParamSet> specific;
    for (std::size_t i = 0; i < k; ++i) {
      ParamSet s = shell.specific_encoder;
      ckpt.restore(client_prefix("c", i), s);
      specific.push_back(std::move(s));
    }
    return fedcrfd_reconstructor(global, specific, ckpt.use_fusion);
  }
  const bool per_client = method == Method::kSolo;
  if (per_client && ckpt.clients != k) {
    throw ConfigError("checkpoint has " + std::to_string(ckpt.clients) + " clients, dataset has " + std::to_string(k));
  }
  std::vector<PlainModel> models;
  for (std::size_t i = 0; i < (per_client ? k : 1); ++i) {
    PlainModel m = PlainModel::init(ckpt.arch, 0);
    const std::string prefix = per_client ? client_prefix("m", i) : "";
    ckpt.restore(prefix, m.encoder);
    ckpt.restore(prefix, m.decoder);
    models.push_back(std::move(m));
  }
  return plain_reconstructor(models);
}

EvalReport cmd_eval(const EvalOptions& options, std::ostream& out) {
  const FederatedData data = load_dataset(options.dataset);
  Reconstructor rec;
  if (options.passthrough) {
    rec = passthrough_reconstructor();
  } else {
    if (!options.checkpoint) throw ConfigError("eval needs --checkpoint unless --passthrough is given");
    const Checkpoint ckpt = load_checkpoint(*options.checkpoint);
    if (options.expected_arch && (ckpt.arch.channels != options.expected_arch->channels ||
                                  ckpt.arch.classifier_hidden != options.expected_arch->classifier_hidden)) {
      throw ConfigError("checkpoint architecture differs from the configured model (channels/classifier_hidden)");
    }
    rec = checkpoint_reconstructor(ckpt, data);
  }
  const EvalReport report = evaluate(data, rec);
  out << format_report(report);
  write_text(options.csv, eval_csv(report));
  return report;
}

StudyResult cmd_study(StudyId id, const RunConfig& config, std::ostream& progress) {
  StudyOptions o;
  o.federation = config.federation;
  o.data = config.data;
  o.seeds = config.seeds;
  o.out = config.out;
  o.parallel_trials = thread_cap(config.parallel_trials);
  o.progress = [&progress](const std::string& msg) {
    progress << msg << '\n';
    progress.flush();
  };
  return run_study(id, o);
}

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-modal vertical federated MRI reconstruction"};
  app.require_subcommand(1);
  app.fallthrough();
  GlobalOptions global;
  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  app.add_option("--config", config_path, "Config file (TOML-style sections)");
  auto* seed_opt = app.add_option("--seed", seed, "Run seed; overrides run.seed");
  app.add_option("--out", out_dir, "Output directory; overrides run.out");
  app.add_option("--set", global.sets, "Override a config key, e.g. --set federation.rounds=5");

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic federated dataset");
  std::string gen_dir;
  gen->add_option("--dataset", gen_dir, "Dataset directory (default <out>/dataset)");

  auto* train = app.add_subcommand("train", "Train one method on a generated dataset");
  std::string method = "fedcrfd", train_dataset, run_dir;
  std::optional<std::size_t> rounds;
  std::optional<double> mu1, mu2, mu3;
  train->add_option("--method", method, "fedcrfd, fedavg, solo or centralized");
  train->add_option("--dataset", train_dataset, "Dataset directory (default <out>/dataset)");
  train->add_option("--run-dir", run_dir, "Run directory (default <out>/runs/<method>)");
  train->add_option("--rounds", rounds, "Communication rounds");
  train->add_option("--mu1", mu1, "Auxiliary classification weight");
  train->add_option("--mu2", mu2, "Intra-client disentanglement weight");
  train->add_option("--mu3", mu3, "Cross-client consistency weight");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset's test split");
  std::string eval_ckpt, eval_dataset, eval_csv_path;
  bool passthrough = false;
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint stem or .json/.bin path");
  eval->add_option("--dataset", eval_dataset, "Dataset directory (default <out>/dataset)");
  eval->add_option("--csv", eval_csv_path, "CSV output (default <out>/eval.csv)");
  eval->add_flag("--passthrough", passthrough, "Score the ground truth against itself");

  auto* study = app.add_subcommand("study", "Run a study: baselines, ablation, beta_sweep, measure_sweep, mu_sweep, client_scale");
  std::string study_id;
  std::optional<std::size_t> parallel;
  study->add_option("id", study_id, "Study id")->required();
  study->add_option("--parallel-trials", parallel, "Concurrent trials (capped by FEDCRFD_THREADS)");

  auto fail = [&](int code, const std::string& msg) {
    err << "fedcrfd: " << msg << '\n' << "error_code=" << code << '\n';
    return code;
  };

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    return fail(static_cast<int>(ErrorCode::kConfig), e.what());
  }

  try {
    if (!config_path.empty()) global.config = config_path;
    if (!out_dir.empty()) global.out = out_dir;
    if (seed_opt->count() > 0) global.seed = seed;
    RunConfig config = resolve_config(global);

    if (*gen) {
      config.finalize();
      const std::filesystem::path dir = gen_dir.empty() ? default_dataset_dir(config) : std::filesystem::path(gen_dir);
      const FederatedData data = cmd_gen_data(config, dir);
      out << "dataset " << dir.string() << ": " << data.clients.size() << " clients, "
          << data.partition.vertical_patients.size() << " vertical patients, " << data.aligned_keys.size()
          << " aligned slices\n";
    } else if (*train) {
      if (rounds) config.federation.rounds = *rounds;
      if (mu1) config.federation.mu1 = *mu1;
      if (mu2) config.federation.mu2 = *mu2;
      if (mu3) config.federation.mu3 = *mu3;
      config.finalize();
      TrainOptions t;
      t.method = parse_method(method);
      t.dataset = train_dataset.empty() ? default_dataset_dir(config) : std::filesystem::path(train_dataset);
      t.run_dir = run_dir.empty() ? default_run_dir(config, t.method) : std::filesystem::path(run_dir);
      const TrainOutcome r = cmd_train(config, t, err);
      out << "trained " << method << " for " << r.rounds << " rounds\n"
          << "checkpoint " << r.final_checkpoint.string() << ".json\n"
          << "log " << r.log.string() << '\n';
    } else if (*eval) {
      config.finalize();
      EvalOptions e;
      if (!eval_ckpt.empty()) e.checkpoint = eval_ckpt;
      e.dataset = eval_dataset.empty() ? default_dataset_dir(config) : std::filesystem::path(eval_dataset);
      e.csv = eval_csv_path.empty() ? config.out / "eval.csv" : std::filesystem::path(eval_csv_path);
      e.passthrough = passthrough;
      e.expected_arch = config.federation.arch;
      cmd_eval(e, out);
    } else if (*study) {
      if (parallel) config.parallel_trials = *parallel;
      config.finalize();
      const StudyId id = parse_study(study_id);
      const StudyResult r = cmd_study(id, config, err);
      out << summary_csv(r.rows) << "results " << r.dir.string() << '\n';
    }
  } catch (const Error& e) {
    return fail(static_cast<int>(e.code()), e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(static_cast<int>(ErrorCode::kIo), e.what());
  } catch (const std::exception& e) {
    return fail(static_cast<int>(ErrorCode::kInternal), e.what());
  }
  return 0;
}

}  // namespace fedcrfd::cli
