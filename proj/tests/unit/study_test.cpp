#include <gtest/gtest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "fedcrfd/errors.hpp"
#include "fedcrfd/study.hpp"
#include "support.hpp"

namespace fedcrfd {
namespace {

StudyOptions tiny_options(const std::string& dir) {
  StudyOptions o;
  o.federation = testing::tiny_federation();
  o.federation.rounds = 1;
  o.data = testing::tiny_data();
  o.seeds = {0, 1};
  o.out = testing::scratch_dir(dir);
  return o;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::vector<std::string> names(const std::vector<RowPlan>& plan) {
  std::vector<std::string> out;
  for (const RowPlan& r : plan) out.push_back(r.method);
  return out;
}

TEST(StudyPlan, RowsAndReferences) {
  const StudyOptions o;
  EXPECT_EQ(names(plan_study(StudyId::kBaselines, o)),
            (std::vector<std::string>{"solo", "centralized", "fedavg", "fedcrfd"}));
  EXPECT_EQ(names(plan_study(StudyId::kAblation, o)),
            (std::vector<std::string>{"fedavg", "wo_cross", "wo_fusion", "fedcrfd"}));
  EXPECT_EQ(names(plan_study(StudyId::kMeasureSweep, o)), (std::vector<std::string>{"l1", "l2", "cosine"}));
  EXPECT_EQ(plan_study(StudyId::kMuSweep, o).size(), 12u);
  EXPECT_EQ(plan_study(StudyId::kBetaSweep, o).size(), 4u);
  for (const RowPlan& r : plan_study(StudyId::kAblation, o)) {
    EXPECT_EQ(r.trials.size(), 3u);
    EXPECT_EQ(r.reference.empty(), r.method == "fedcrfd");
  }
  const auto ablation = plan_study(StudyId::kAblation, o);
  EXPECT_FALSE(ablation[1].trials[0].federation.enable_cross);
  EXPECT_FALSE(ablation[2].trials[0].federation.use_fusion);
  EXPECT_EQ(ablation[1].trials[2].seed, 2u);
}

TEST(StudyPlan, ClientScaleDerivesClients) {
  const auto plan = plan_study(StudyId::kClientScale, StudyOptions{});
  ASSERT_EQ(plan.size(), 4u);
  const TrialSpec& k6 = plan[3].trials[0];
  EXPECT_EQ(k6.data.clients(), 6u);
  EXPECT_EQ(k6.data.num_modalities, 3u);
  EXPECT_EQ(k6.federation.arch.num_modalities, 3u);
  EXPECT_NO_THROW(k6.data.validate());
}

TEST(StudyPlan, CacheKeysShareEquivalentTrials) {
  const auto plan = plan_study(StudyId::kMuSweep, StudyOptions{});
  std::set<std::string> keys;
  for (const RowPlan& r : plan)
    for (const TrialSpec& s : r.trials) keys.insert(s.cache_key());
  // The three mu*_0.01 rows are the same configuration.
  EXPECT_EQ(keys.size(), 10u * 3u);
  EXPECT_EQ(parse_study(study_name(StudyId::kMuSweep)), StudyId::kMuSweep);
  EXPECT_THROW(parse_study("nope"), ConfigError);
}

TEST(StudySummary, PairedPValueAgainstReference) {
  std::vector<RowPlan> plan(2);
  plan[0].method = "a";
  plan[0].reference = "b";
  plan[1].method = "b";
  std::map<std::string, TrialResult> trials;
  const double pa[] = {3, 4, 5}, pb[] = {2, 2, 2};
  for (std::uint64_t s = 0; s < 3; ++s) {
    for (int r = 0; r < 2; ++r) {
      TrialSpec spec;
      spec.name = plan[r].method;
      spec.seed = s;
      spec.federation.mu1 = r + 1.0;
      plan[r].trials.push_back(spec);
      TrialResult tr;
      tr.report.overall.psnr_mean = r == 0 ? pa[s] : pb[s];
      tr.report.overall.ssim_mean = 0.5;
      trials[spec.cache_key()] = tr;
    }
  }
  const auto rows = summarize_rows(plan, trials);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_DOUBLE_EQ(rows[0].psnr_mean, 4.0);
  EXPECT_DOUBLE_EQ(rows[0].psnr_std, 1.0);
  ASSERT_TRUE(rows[0].p_value);
  EXPECT_NEAR(*rows[0].p_value, 0.0742, 1e-4);
  EXPECT_FALSE(rows[1].p_value);
  const std::string csv = summary_csv(rows);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "method,psnr_mean,psnr_std,ssim_mean,ssim_std,p_value");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 3);
}

TEST(RunStudy, WritesArtifactsAndIsReproducible) {
  const StudyOptions a = tiny_options("study_a");
  StudyOptions b = tiny_options("study_b");
  b.parallel_trials = 2;
  const StudyResult ra = run_study(StudyId::kAblation, a);
  const StudyResult rb = run_study(StudyId::kAblation, b);
  ASSERT_EQ(ra.rows.size(), 4u);
  EXPECT_EQ(ra.trials.size(), 8u);
  const auto dir = a.out / "results" / "ablation";
  for (const char* f : {"summary.csv", "trials.csv", "fedcrfd_0.jsonl", "wo_cross_1.jsonl", "latent_fedcrfd_before.csv",
                        "latent_fedcrfd_after.csv"})
    EXPECT_TRUE(std::filesystem::exists(dir / f)) << f;
  EXPECT_FALSE(std::filesystem::exists(dir / "FAILED"));
  EXPECT_EQ(slurp(dir / "summary.csv"), slurp(b.out / "results" / "ablation" / "summary.csv"));
  EXPECT_EQ(slurp(dir / "fedcrfd_1.jsonl"), slurp(b.out / "results" / "ablation" / "fedcrfd_1.jsonl"));
  const TrialResult& t = ra.trials.begin()->second;
  EXPECT_EQ(t.log.size(), 2u);
}

TEST(RunStudy, FailureLeavesMarker) {
  StudyOptions o = tiny_options("study_fail");
  o.seeds = {0};
  o.federation.learning_rate = 1e300;
  EXPECT_THROW(run_study(StudyId::kMeasureSweep, o), NumericError);
  const auto marker = o.out / "results" / "measure_sweep" / "FAILED";
  ASSERT_TRUE(std::filesystem::exists(marker));
  EXPECT_NE(slurp(marker).find("non-finite"), std::string::npos);
}

TEST(Trial, MeanCrossAndGaps) {
  const FederatedData data = build_dataset(testing::tiny_data());
  TrialSpec spec;
  spec.name = "fedcrfd";
  spec.federation = testing::tiny_federation();
  spec.data = testing::tiny_data();
  TrialOptions to;
  to.latents = true;
  std::size_t rounds_seen = 0;
  to.on_round = [&](std::size_t) { ++rounds_seen; };
  const TrialResult r = run_trial(spec, data, to);
  EXPECT_EQ(rounds_seen, 2u);
  ASSERT_TRUE(r.gaps_before && r.gaps_after && r.aux_accuracy);
  EXPECT_EQ(r.latents_after.size(), 4 * data.aligned_keys.size());
  EXPECT_GE(r.mean_cross(1), 0.0);
  EXPECT_TRUE(std::isnan(r.mean_cross(7)));
}

}  // namespace
}  // namespace fedcrfd
