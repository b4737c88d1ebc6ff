#include "fedcrfd/study.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "fedcrfd/errors.hpp"
#include "fedcrfd/stats.hpp"

namespace fedcrfd {

namespace {

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fixed(double v, int digits = 6) {
  if (std::isnan(v)) return "";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string short_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

TrialSpec make_spec(const std::string& name, Method method, const StudyOptions& o, std::uint64_t seed) {
  TrialSpec s;
  s.name = name;
  s.method = method;
  s.federation = o.federation;
  s.data = o.data;
  s.seed = seed;
  s.federation.seed = seed;
  return s;
}

using Tweak = std::function<void(TrialSpec&)>;

RowPlan row(const std::string& name, const std::string& reference, Method method, const StudyOptions& o,
            const Tweak& tweak = {}) {
  RowPlan r{name, reference, {}};
  for (std::uint64_t seed : o.seeds) {
    TrialSpec s = make_spec(name, method, o, seed);
    if (tweak) tweak(s);
    r.trials.push_back(std::move(s));
  }
  return r;
}

void set_clients(TrialSpec& s, std::size_t k) {
  s.data.num_modalities = 3;
  s.federation.arch.num_modalities = 3;
  using MK = MaskKind;
  const std::vector<MaskSpec> six{{MK::kUniform1d, 5}, {MK::kRandom2d, 3}, {MK::kCartesian1d, 4},
                                  {MK::kUniform1d, 3}, {MK::kRandom2d, 6}, {MK::kRadial2d, 4}};
  s.data.masks.assign(six.begin(), six.begin() + static_cast<std::ptrdiff_t>(k));
  s.data.client_modalities.clear();
  for (std::size_t i = 0; i < k; ++i) s.data.client_modalities.push_back(i % 3);
}

}  // namespace

StudyId parse_study(std::string_view name) {
  if (name == "baselines") return StudyId::kBaselines;
  if (name == "ablation") return StudyId::kAblation;
  if (name == "beta_sweep") return StudyId::kBetaSweep;
  if (name == "measure_sweep") return StudyId::kMeasureSweep;
  if (name == "mu_sweep") return StudyId::kMuSweep;
  if (name == "client_scale") return StudyId::kClientScale;
  throw ConfigError("unknown study '" + std::string(name) +
                    "' (expected baselines, ablation, beta_sweep, measure_sweep, mu_sweep, client_scale)");
}

std::string_view study_name(StudyId id) {
  switch (id) {
    case StudyId::kBaselines: return "baselines";
    case StudyId::kAblation: return "ablation";
    case StudyId::kBetaSweep: return "beta_sweep";
    case StudyId::kMeasureSweep: return "measure_sweep";
    case StudyId::kMuSweep: return "mu_sweep";
    case StudyId::kClientScale: return "client_scale";
  }
  return "?";
}

std::string TrialSpec::cache_key() const {
  const FederationConfig& f = federation;
  std::ostringstream k;
  k << method_name(method) << "|seed=" << seed << "|T=" << f.rounds << "|Q=" << f.local_epochs
    << "|lr=" << fmt(f.learning_rate) << "|Nb=" << f.batch_size;
  if (method == Method::kFedCrfd) {
    k << "|mu=" << fmt(f.mu1) << ',' << fmt(f.mu2) << ',' << fmt(f.mu3) << "|m=" << distance_name(f.measure)
      << "|cap=" << fmt(f.cap) << "|fusion=" << f.use_fusion << "|cross=" << f.enable_cross
      << "|joint=" << f.joint_cross_gradient;
  }
  k << "|arch=" << f.arch.image_size << ':' << f.arch.classifier_hidden << ':' << f.arch.num_modalities << ':';
  for (std::size_t c : f.arch.channels) k << c << '.';
  const DataConfig& d = data;
  k << "|data=" << d.image_size << ',' << d.train_patients << ',' << d.test_patients << ',' << d.slices << ','
    << d.num_modalities << ",cf=" << fmt(d.center_fraction) << ",beta=" << fmt(d.beta) << ",salt=" << d.salt
    << ",dseed=" << d.seed << ",mods=";
  for (std::size_t m : d.client_modalities) k << m << '.';
  k << ",masks=";
  for (const MaskSpec& m : d.masks) k << mask_spec_str(m) << ';';
  return k.str();
}

double TrialResult::mean_cross(std::size_t round) const {
  double s = 0.0;
  std::size_t n = 0;
  for (const RoundLogRecord& r : log) {
    if (r.round == round) {
      s += r.l_cross;
      ++n;
    }
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(n);
}

TrialResult run_trial(const TrialSpec& spec, const FederatedData& data, const TrialOptions& options) {
  TrialResult r;
  r.name = spec.name;
  r.method = spec.method;
  r.seed = spec.seed;
  FederationConfig cfg = spec.federation;
  cfg.seed = spec.seed;

  if (spec.method == Method::kFedCrfd) {
    const bool probe = !data.aligned_keys.empty();
    if (probe) {
      auto clients = make_clients(cfg, data);
      std::vector<ParamSet> spec_enc;
      for (ClientState& c : clients) spec_enc.push_back(c.params.specific_encoder);
      const ProbeLatents pl = probe_latents(clients[0].params.invariant_encoder, spec_enc, data);
      if (data.partition.clients.size() > 1) r.gaps_before = disentanglement_gaps(pl.invariant, pl.specific, pl.modalities);
      if (options.latents) r.latents_before = latent_projection(latent_groups(pl));
    }
    TrainingHooks hooks;
    if (options.on_round) hooks.on_round_end = [&](std::size_t t, const FedCrfdState&) { options.on_round(t); };
    TrainingResult tr = run_training(cfg, data, hooks);
    r.log = tr.log;
    r.messages = tr.messages;
    r.report = evaluate(data, fedcrfd_reconstructor(tr.global, tr.specific, cfg.use_fusion));
    r.aux_accuracy = auxiliary_accuracy(tr, cfg, data);
    if (probe) {
      const ProbeLatents pl = probe_latents(tr.global, tr.specific, data);
      std::set<std::size_t> mods(pl.modalities.begin(), pl.modalities.end());
      if (mods.size() > 1) r.gaps_after = disentanglement_gaps(pl.invariant, pl.specific, pl.modalities);
      if (options.latents) r.latents_after = latent_projection(latent_groups(pl));
    }
    return r;
  }
  BaselineHooks hooks;
  if (options.on_round) hooks.on_round_end = [&](std::size_t t, std::span<const PlainModel>) { options.on_round(t); };
  BaselineResult br = run_baseline(spec.method, cfg, data, hooks);
  r.log = br.log;
  r.messages = br.messages;
  r.report = evaluate(data, plain_reconstructor(br.models));
  return r;
}

std::vector<RowPlan> plan_study(StudyId id, const StudyOptions& o) {
  if (o.seeds.empty()) throw ConfigError("study needs at least one seed");
  std::vector<RowPlan> plan;
  switch (id) {
    case StudyId::kBaselines:
      plan.push_back(row("solo", "fedcrfd", Method::kSolo, o));
      plan.push_back(row("centralized", "fedcrfd", Method::kCentralized, o));
      plan.push_back(row("fedavg", "fedcrfd", Method::kFedAvg, o));
      plan.push_back(row("fedcrfd", "", Method::kFedCrfd, o));
      break;
    case StudyId::kAblation:
      plan.push_back(row("fedavg", "fedcrfd", Method::kFedAvg, o));
      plan.push_back(row("wo_cross", "fedcrfd", Method::kFedCrfd, o, [](TrialSpec& s) { s.federation.enable_cross = false; }));
      plan.push_back(row("wo_fusion", "fedcrfd", Method::kFedCrfd, o, [](TrialSpec& s) { s.federation.use_fusion = false; }));
      plan.push_back(row("fedcrfd", "", Method::kFedCrfd, o));
      break;
    case StudyId::kBetaSweep:
      for (double beta : {0.10, 0.02}) {
        const std::string tag = "_beta" + fixed(beta, 2);
        auto set_beta = [beta](TrialSpec& s) { s.data.beta = beta; };
        plan.push_back(row("fedavg" + tag, "fedcrfd" + tag, Method::kFedAvg, o, set_beta));
        plan.push_back(row("fedcrfd" + tag, "", Method::kFedCrfd, o, set_beta));
      }
      break;
    case StudyId::kMeasureSweep:
      for (Distance m : {Distance::kL1, Distance::kL2, Distance::kCosine}) {
        const std::string name(distance_name(m));
        plan.push_back(row(name, m == Distance::kL1 ? "" : "l1", Method::kFedCrfd, o,
                           [m](TrialSpec& s) { s.federation.measure = m; }));
      }
      break;
    case StudyId::kMuSweep:
      for (int which = 1; which <= 3; ++which) {
        const std::string mu = "mu" + std::to_string(which);
        for (double v : {0.001, 0.01, 0.1, 1.0}) {
          plan.push_back(row(mu + "_" + short_num(v), v == 0.01 ? "" : mu + "_0.01", Method::kFedCrfd, o,
                             [which, v](TrialSpec& s) {
                               (which == 1 ? s.federation.mu1 : which == 2 ? s.federation.mu2 : s.federation.mu3) = v;
                             }));
        }
      }
      break;
    case StudyId::kClientScale:
      for (std::size_t k : {std::size_t{3}, std::size_t{6}}) {
        const std::string tag = "_K" + std::to_string(k);
        auto set = [k](TrialSpec& s) { set_clients(s, k); };
        plan.push_back(row("fedavg" + tag, "fedcrfd" + tag, Method::kFedAvg, o, set));
        plan.push_back(row("fedcrfd" + tag, "", Method::kFedCrfd, o, set));
      }
      break;
  }
  return plan;
}

std::vector<StudyRow> summarize_rows(const std::vector<RowPlan>& plan, const std::map<std::string, TrialResult>& trials) {
  auto scores = [&](const RowPlan& r, bool want_psnr) {
    std::vector<double> v;
    for (const TrialSpec& s : r.trials) {
      auto it = trials.find(s.cache_key());
      if (it == trials.end()) return std::vector<double>{};
      v.push_back(want_psnr ? it->second.report.overall.psnr_mean : it->second.report.overall.ssim_mean);
    }
    return v;
  };
  std::vector<StudyRow> rows;
  for (const RowPlan& r : plan) {
    const auto p = scores(r, true);
    if (p.empty()) continue;
    const auto s = scores(r, false);
    StudyRow out;
    out.method = r.method;
    out.reference = r.reference;
    const MeanStd pm = mean_std(p), sm = mean_std(s);
    out.psnr_mean = pm.mean;
    out.psnr_std = pm.std;
    out.ssim_mean = sm.mean;
    out.ssim_std = sm.std;
    if (!r.reference.empty()) {
      for (const RowPlan& ref : plan) {
        if (ref.method != r.reference) continue;
        const auto q = scores(ref, true);
        if (q.size() == p.size() && p.size() >= 2) out.p_value = paired_t_test(p, q).p;
      }
    }
    rows.push_back(std::move(out));
  }
  return rows;
}

std::string summary_csv(const std::vector<StudyRow>& rows) {
  std::ostringstream out;
  out << "method,psnr_mean,psnr_std,ssim_mean,ssim_std,p_value\n";
  for (const StudyRow& r : rows) {
    out << r.method << ',' << fixed(r.psnr_mean) << ',' << fixed(r.psnr_std) << ',' << fixed(r.ssim_mean) << ','
        << fixed(r.ssim_std) << ',' << (r.p_value ? fixed(*r.p_value, 8) : "") << '\n';
  }
  return out.str();
}

namespace {

std::string trials_csv(const std::vector<RowPlan>& plan, const std::map<std::string, TrialResult>& trials) {
  std::ostringstream out;
  out << "method,seed,psnr,ssim,aux_accuracy,invariant_gap_before,specific_gap_before,invariant_gap_after,"
         "specific_gap_after,l_cross_first,l_cross_last\n";
  const double nan = std::numeric_limits<double>::quiet_NaN();
  for (const RowPlan& r : plan) {
    for (const TrialSpec& s : r.trials) {
      auto it = trials.find(s.cache_key());
      if (it == trials.end()) continue;
      const TrialResult& t = it->second;
      const std::size_t last = t.log.empty() ? 0 : t.log.back().round;
      const bool cross = s.method == Method::kFedCrfd && s.federation.enable_cross && s.federation.mu3 > 0.0;
      out << r.method << ',' << s.seed << ',' << fixed(t.report.overall.psnr_mean) << ','
          << fixed(t.report.overall.ssim_mean) << ',' << fixed(t.aux_accuracy.value_or(nan)) << ','
          << fixed(t.gaps_before ? t.gaps_before->invariant_gap : nan) << ','
          << fixed(t.gaps_before ? t.gaps_before->specific_gap : nan) << ','
          << fixed(t.gaps_after ? t.gaps_after->invariant_gap : nan) << ','
          << fixed(t.gaps_after ? t.gaps_after->specific_gap : nan) << ','
          << fixed(cross ? t.mean_cross(1) : nan, 8) << ',' << fixed(cross ? t.mean_cross(last) : nan, 8) << '\n';
    }
  }
  return out.str();
}

std::string mu_curves_csv(const std::vector<StudyRow>& rows) {
  std::ostringstream out;
  out << "mu,value,psnr_mean,psnr_std,ssim_mean,ssim_std\n";
  for (const StudyRow& r : rows) {
    const auto us = r.method.find('_');
    out << r.method.substr(0, us) << ',' << r.method.substr(us + 1) << ',' << fixed(r.psnr_mean) << ','
        << fixed(r.psnr_std) << ',' << fixed(r.ssim_mean) << ',' << fixed(r.ssim_std) << '\n';
  }
  return out.str();
}

void write_outputs(StudyId id, const std::filesystem::path& dir, const std::vector<RowPlan>& plan,
                   const std::map<std::string, TrialResult>& trials, const std::vector<StudyRow>& rows) {
  write_file(dir / "summary.csv", summary_csv(rows));
  write_file(dir / "trials.csv", trials_csv(plan, trials));
  for (const RowPlan& r : plan) {
    for (const TrialSpec& s : r.trials) {
      auto it = trials.find(s.cache_key());
      if (it == trials.end()) continue;
      write_file(dir / (r.method + "_" + std::to_string(s.seed) + ".jsonl"), to_jsonl(it->second.log));
      if (!it->second.latents_before.empty()) {
        write_file(dir / ("latent_" + r.method + "_before.csv"), projection_csv(it->second.latents_before));
      }
      if (!it->second.latents_after.empty()) {
        write_file(dir / ("latent_" + r.method + "_after.csv"), projection_csv(it->second.latents_after));
      }
    }
  }
  if (id == StudyId::kMuSweep) write_file(dir / "mu_curves.csv", mu_curves_csv(rows));
}

}  // namespace

StudyResult run_study(StudyId id, const StudyOptions& options) {
  const std::vector<RowPlan> plan = plan_study(id, options);
  StudyResult result;
  result.dir = options.out / "results" / std::string(study_name(id));
  std::error_code ec;
  std::filesystem::create_directories(result.dir, ec);
  if (ec) throw IoError("cannot create " + result.dir.string() + ": " + ec.message());
  std::filesystem::remove(result.dir / "FAILED", ec);

  // Distinct trials in plan order; the first seed of each reference row also exports latents.
  struct Job {
    TrialSpec spec;
    std::size_t data_index;
    bool latents;
  };
  std::vector<Job> jobs;
  std::set<std::string> seen;
  std::vector<DataConfig> data_configs;
  for (const RowPlan& r : plan) {
    for (std::size_t i = 0; i < r.trials.size(); ++i) {
      const TrialSpec& s = r.trials[i];
      if (!seen.insert(s.cache_key()).second) continue;
      std::size_t di = 0;
      while (di < data_configs.size() && !(data_configs[di] == s.data)) ++di;
      if (di == data_configs.size()) data_configs.push_back(s.data);
      const bool latents = s.method == Method::kFedCrfd && r.reference.empty() && i == 0;
      jobs.push_back({s, di, latents});
    }
  }

  std::vector<FederatedData> datasets;
  std::vector<std::optional<TrialResult>> done(jobs.size());
  std::mutex mutex;
  std::exception_ptr failure;
  std::string failure_what;
  auto report = [&](const std::string& msg) {
    if (options.progress) {
      std::lock_guard lock(mutex);
      options.progress(msg);
    }
  };

  try {
    for (const DataConfig& dc : data_configs) datasets.push_back(build_dataset(dc));
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        {
          std::lock_guard lock(mutex);
          if (failure) return;
        }
        const Job& job = jobs[i];
        report("trial " + std::to_string(i + 1) + "/" + std::to_string(jobs.size()) + ": " + job.spec.name +
               " seed " + std::to_string(job.spec.seed));
        try {
          TrialOptions to;
          to.latents = job.latents;
          TrialResult tr = run_trial(job.spec, datasets[job.data_index], to);
          std::lock_guard lock(mutex);
          done[i] = std::move(tr);
        } catch (const std::exception& e) {
          std::lock_guard lock(mutex);
          if (!failure) {
            failure = std::current_exception();
            failure_what = job.spec.name + " seed " + std::to_string(job.spec.seed) + ": " + e.what();
          }
        }
      }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(options.parallel_trials, jobs.size()));
    if (workers == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
      for (std::thread& t : pool) t.join();
    }
  } catch (const std::exception& e) {
    failure = std::current_exception();
    failure_what = e.what();
  }

  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (done[i]) result.trials.emplace(jobs[i].spec.cache_key(), std::move(*done[i]));
  }
  result.rows = summarize_rows(plan, result.trials);
  write_outputs(id, result.dir, plan, result.trials, result.rows);
  if (failure) {
    write_file(result.dir / "FAILED", failure_what + "\n");
    std::rethrow_exception(failure);
  }
  return result;
}

}  // namespace fedcrfd
