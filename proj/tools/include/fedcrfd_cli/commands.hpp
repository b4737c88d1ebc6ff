#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "fedcrfd/baselines.hpp"
#include "fedcrfd/checkpoint.hpp"
#include "fedcrfd/evaluate.hpp"
#include "fedcrfd/study.hpp"
#include "fedcrfd_cli/run_config.hpp"

namespace fedcrfd::cli {

struct GlobalOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  std::vector<std::string> sets;  // "section.key=value"
};

/// Config file (or defaults), then --set overrides, then --seed/--out. Not finalized.
RunConfig resolve_config(const GlobalOptions& options);

/// Min of `requested` and FEDCRFD_THREADS when that is set to a positive integer.
std::size_t thread_cap(std::size_t requested);

std::filesystem::path default_dataset_dir(const RunConfig& config);
std::filesystem::path default_run_dir(const RunConfig& config, Method method);

/// Builds the synthetic federation and writes it to `dir`.
FederatedData cmd_gen_data(const RunConfig& config, const std::filesystem::path& dir);

struct TrainOptions {
  Method method = Method::kFedCrfd;
  std::filesystem::path dataset;
  std::filesystem::path run_dir;
};

struct TrainOutcome {
  std::filesystem::path final_checkpoint;  // stem
  std::filesystem::path log;
  std::size_t rounds = 0;
};

/// Trains on a saved dataset; writes periodic and final checkpoints, log.jsonl and config.toml.
TrainOutcome cmd_train(const RunConfig& config, const TrainOptions& options, std::ostream& progress);

Checkpoint fedcrfd_checkpoint(std::size_t round, const FederationConfig& config, const ParamSet& global,
                              std::span<const ParamSet> specific, const ClassifierParams& classifier);
Checkpoint baseline_checkpoint(Method method, std::size_t round, const ArchConfig& arch, std::span<const PlainModel> models);

/// Rebuilds a reconstructor from a checkpoint; ConfigError when it does not fit the dataset.
Reconstructor checkpoint_reconstructor(const Checkpoint& ckpt, const FederatedData& data);

struct EvalOptions {
  std::optional<std::filesystem::path> checkpoint;  // required unless passthrough
  std::filesystem::path dataset;
  std::filesystem::path csv;
  bool passthrough = false;
  /// When set, the checkpoint's channels and classifier width must match.
  std::optional<ArchConfig> expected_arch;
};

/// Prints the report to `out` and writes the CSV.
EvalReport cmd_eval(const EvalOptions& options, std::ostream& out);

StudyResult cmd_study(StudyId id, const RunConfig& config, std::ostream& progress);

/// Parses argv and dispatches; returns the process exit code. Errors go to `err` with an
/// `error_code=<n>` line.
int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace fedcrfd::cli
