#include "fedcrfd/evaluate.hpp"

#include <cmath>
#include <cstdio>
#include <memory>
#include <sstream>

#include "fedcrfd/errors.hpp"
#include "fedcrfd/federation.hpp"
#include "fedcrfd/metrics.hpp"
#include "fedcrfd/stats.hpp"

namespace fedcrfd {

namespace {

MetricSummary summarize(const std::vector<double>& p, const std::vector<double>& s) {
  MetricSummary m;
  m.samples = p.size();
  for (double v : p) m.identical += std::isinf(v) ? 1 : 0;
  const MeanStd ps = mean_std(p);
  const MeanStd ss = mean_std(s);
  m.psnr_mean = ps.mean;
  m.psnr_std = m.identical > 0 ? 0.0 : ps.std;
  m.ssim_mean = ss.mean;
  m.ssim_std = ss.std;
  return m;
}

std::string num(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::vector<std::size_t> range(std::size_t lo, std::size_t hi) {
  std::vector<std::size_t> v;
  for (std::size_t i = lo; i < hi; ++i) v.push_back(i);
  return v;
}

ParamSet clone(const ParamSet& ps) {
  ParamSet out;
  for (const Parameter& p : ps) out.add(p.name, p.value);
  return out;
}

}  // namespace

EvalReport evaluate(const FederatedData& data, const Reconstructor& reconstruct, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("evaluate: batch size must be positive");
  EvalReport report;
  std::vector<double> all_p, all_s;
  for (std::size_t k = 0; k < data.clients.size(); ++k) {
    const auto& test = data.clients[k].test;
    if (test.empty()) throw ConfigError("evaluate: client " + std::to_string(k) + " has an empty test set");
    const auto maxima = volume_max(test);
    std::vector<double> p, s;
    for (std::size_t i = 0; i < test.size(); i += batch_size) {
      const auto idx = range(i, std::min(test.size(), i + batch_size));
      const Tensor pred = reconstruct(k, test, idx);
      const std::size_t H = test[i].y.dim(0), W = test[i].y.dim(1);
      if (pred.shape() != Shape{idx.size(), 1, H, W}) {
        throw ShapeError("evaluate: reconstruction has shape " + shape_str(pred.shape()));
      }
      for (std::size_t n = 0; n < idx.size(); ++n) {
        Tensor img({H, W});
        std::copy(pred.ptr() + n * H * W, pred.ptr() + (n + 1) * H * W, img.ptr());
        const SliceSample& smp = test[idx[n]];
        const double dmax = maxima[idx[n]] > 0.0 ? maxima[idx[n]] : 1.0;
        p.push_back(psnr(img, smp.y, dmax));
        s.push_back(ssim(img, smp.y, dmax));
      }
    }
    report.clients.push_back(summarize(p, s));
    all_p.insert(all_p.end(), p.begin(), p.end());
    all_s.insert(all_s.end(), s.begin(), s.end());
  }
  report.overall = summarize(all_p, all_s);
  return report;
}

Reconstructor fedcrfd_reconstructor(const ParamSet& global, std::span<const ParamSet> specific, bool use_fusion) {
  struct State {
    ParamSet encoder, decoder;
    std::vector<ParamSet> specific;
  };
  auto st = std::make_shared<State>();
  for (const Parameter& p : global) {
    if (p.name.starts_with("E_I.")) st->encoder.add(p.name, p.value);
    else if (p.name.starts_with("D.")) st->decoder.add(p.name, p.value);
  }
  for (const ParamSet& s : specific) st->specific.push_back(clone(s));
  return [st, use_fusion](std::size_t client, std::span<const SliceSample> samples, std::span<const std::size_t> batch) {
    if (client >= st->specific.size()) throw ConfigError("no E_S for client " + std::to_string(client));
    Graph g;
    Var x = g.constant(stack_inputs(samples, batch));
    EncoderOutput ei = encode(g, st->encoder, x);
    Var fs;
    if (use_fusion) fs = encode(g, st->specific[client], x).features;
    return fuse_and_decode(g, st->decoder, ei.features, fs, ei.skips, x, use_fusion).value();
  };
}

Reconstructor plain_reconstructor(std::span<const PlainModel> models) {
  auto st = std::make_shared<std::vector<PlainModel>>(models.begin(), models.end());
  if (st->empty()) throw ConfigError("plain_reconstructor: no models");
  return [st](std::size_t client, std::span<const SliceSample> samples, std::span<const std::size_t> batch) {
    PlainModel& m = st->size() == 1 ? (*st)[0] : st->at(client);
    Graph g;
    Var x = g.constant(stack_inputs(samples, batch));
    return reconstruct_plain(g, m, x).value();
  };
}

Reconstructor passthrough_reconstructor() {
  return [](std::size_t, std::span<const SliceSample> samples, std::span<const std::size_t> batch) {
    return stack_targets(samples, batch);
  };
}

Reconstructor zero_filled_reconstructor() {
  return [](std::size_t, std::span<const SliceSample> samples, std::span<const std::size_t> batch) {
    return stack_inputs(samples, batch);
  };
}

std::string eval_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "client,samples,psnr_mean,psnr_std,ssim_mean,ssim_std\n";
  auto row = [&](const std::string& name, const MetricSummary& m) {
    out << name << ',' << m.samples << ',' << num(m.psnr_mean) << ',' << num(m.psnr_std) << ',' << num(m.ssim_mean)
        << ',' << num(m.ssim_std) << '\n';
  };
  for (std::size_t k = 0; k < report.clients.size(); ++k) row(std::to_string(k), report.clients[k]);
  row("overall", report.overall);
  return out.str();
}

std::string format_report(const EvalReport& report) {
  std::ostringstream out;
  auto row = [&](const std::string& name, const MetricSummary& m) {
    out << name << ": PSNR " << num(m.psnr_mean) << " +- " << num(m.psnr_std) << " dB, SSIM " << num(m.ssim_mean)
        << " +- " << num(m.ssim_std) << " (" << m.samples << " slices)\n";
  };
  for (std::size_t k = 0; k < report.clients.size(); ++k) row("client " + std::to_string(k), report.clients[k]);
  row("overall", report.overall);
  return out.str();
}

}  // namespace fedcrfd
