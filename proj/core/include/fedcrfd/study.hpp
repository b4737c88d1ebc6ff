#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedcrfd/analysis.hpp"
#include "fedcrfd/baselines.hpp"
#include "fedcrfd/evaluate.hpp"
#include "fedcrfd/federation.hpp"

namespace fedcrfd {

enum class StudyId { kBaselines, kAblation, kBetaSweep, kMeasureSweep, kMuSweep, kClientScale };

StudyId parse_study(std::string_view name);
std::string_view study_name(StudyId id);

/// One training run: a method under a concrete configuration and seed.
struct TrialSpec {
  std::string name;  // row name, e.g. "wo_cross"
  Method method = Method::kFedCrfd;
  FederationConfig federation;
  DataConfig data;
  std::uint64_t seed = 0;

  /// Identifies runs with identical outcomes so a study can share them between rows.
  std::string cache_key() const;
};

struct TrialResult {
  std::string name;
  Method method = Method::kFedCrfd;
  std::uint64_t seed = 0;
  EvalReport report;
  std::vector<RoundLogRecord> log;
  MessageCounters messages;
  /// Fed-CRFD only.
  std::optional<double> aux_accuracy;
  std::optional<DisentanglementScore> gaps_before;
  std::optional<DisentanglementScore> gaps_after;
  std::vector<ProjectedPoint> latents_before;
  std::vector<ProjectedPoint> latents_after;

  /// Mean over clients of l_cross in the given round (1-based); NaN without cross records.
  double mean_cross(std::size_t round) const;
};

struct TrialOptions {
  bool latents = false;
  /// Called after every round with the round number.
  std::function<void(std::size_t)> on_round;
};

TrialResult run_trial(const TrialSpec& spec, const FederatedData& data, const TrialOptions& options = {});

struct StudyRow {
  std::string method;
  std::string reference;  // row the p-value compares against; empty for reference rows
  double psnr_mean = 0.0;
  double psnr_std = 0.0;
  double ssim_mean = 0.0;
  double ssim_std = 0.0;
  std::optional<double> p_value;
};

/// A study row: the trial specs per seed and the row it is tested against.
struct RowPlan {
  std::string method;
  std::string reference;
  std::vector<TrialSpec> trials;
};

struct StudyOptions {
  FederationConfig federation;
  DataConfig data;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::filesystem::path out = "out";
  std::size_t parallel_trials = 1;
  std::function<void(const std::string&)> progress;
};

std::vector<RowPlan> plan_study(StudyId id, const StudyOptions& options);

struct StudyResult {
  std::vector<StudyRow> rows;
  std::map<std::string, TrialResult> trials;  // by cache key
  std::filesystem::path dir;
};

/// Runs every distinct trial, writes `<out>/results/<study>/` (summary.csv, trials.csv,
/// `<method>_<seed>.jsonl`, latent CSVs, mu_curves.csv for mu_sweep). On failure writes a
/// FAILED marker next to whatever finished and rethrows.
StudyResult run_study(StudyId id, const StudyOptions& options);

/// Mean/std of overall PSNR and SSIM per row plus paired-t p-values against the reference row.
std::vector<StudyRow> summarize_rows(const std::vector<RowPlan>& plan, const std::map<std::string, TrialResult>& trials);

/// Columns: method,psnr_mean,psnr_std,ssim_mean,ssim_std,p_value.
std::string summary_csv(const std::vector<StudyRow>& rows);

}  // namespace fedcrfd
