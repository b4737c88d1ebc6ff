#include "fedcrfd/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fedcrfd/errors.hpp"
#include "fedcrfd/rng.hpp"

namespace fedcrfd {

namespace {

struct Probe {
  double loss;
  std::uint64_t signature;
};

Probe evaluate(const LossClosure& closure) {
  Graph g;
  Var loss = closure(g);
  if (loss.value().size() != 1) throw ShapeError("finite_diff_check: closure must return a scalar");
  return {loss.value()[0], g.kink_signature()};
}

}  // namespace

GradCheckReport finite_diff_check(const LossClosure& closure, std::span<Parameter* const> params,
                                  const GradCheckOptions& opt) {
  for (Parameter* p : params) p->zero_grad();

  std::uint64_t base_signature = 0;
  double base_loss = 0.0;
  {
    Graph g;
    Var loss = closure(g);
    if (loss.value().size() != 1) throw ShapeError("finite_diff_check: closure must return a scalar");
    base_loss = loss.value()[0];
    base_signature = g.kink_signature();
    g.backward(loss);
  }
  const Probe again = evaluate(closure);
  if (again.loss != base_loss || again.signature != base_signature) {
    throw NumericError("finite_diff_check: closure is not deterministic (two evaluations differ)");
  }

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    for (std::size_t i = 0; i < params[pi]->numel(); ++i) coords.emplace_back(pi, i);
  }
  Rng rng(opt.seed);
  rng.shuffle(coords);
  if (coords.size() > opt.samples) coords.resize(opt.samples);
  std::sort(coords.begin(), coords.end());

  GradCheckReport report;
  for (auto [pi, i] : coords) {
    Parameter& p = *params[pi];
    const double saved = p.value[i];
    p.value[i] = saved + opt.epsilon;
    const Probe plus = evaluate(closure);
    p.value[i] = saved - opt.epsilon;
    const Probe minus = evaluate(closure);
    p.value[i] = saved;
    if (plus.signature != base_signature || minus.signature != base_signature) {
      ++report.excluded;
      continue;
    }
    const double numeric = (plus.loss - minus.loss) / (2.0 * opt.epsilon);
    const double analytic = p.grad[i];
    const double scale = std::max({std::abs(numeric), std::abs(analytic), opt.scale_floor});
    const double rel = std::abs(numeric - analytic) / scale;
    ++report.checked;
    if (rel >= report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst = {p.name, i, analytic, numeric, rel};
    }
  }
  for (Parameter* p : params) p->zero_grad();

  report.passed = report.checked > 0 && report.max_rel_error < opt.tolerance;
  std::ostringstream os;
  os << "checked " << report.checked << " coordinates, excluded " << report.excluded
     << " near non-smooth points; worst " << report.worst.param << "[" << report.worst.index
     << "] analytic=" << report.worst.analytic << " numeric=" << report.worst.numeric;
  report.notes = os.str();
  return report;
}

}  // namespace fedcrfd
