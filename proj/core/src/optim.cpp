#include "fedcrfd/optim.hpp"

#include <algorithm>
#include <cmath>

#include "fedcrfd/errors.hpp"

namespace fedcrfd {

Parameter::Parameter(std::string name_, Tensor value_)
    : name(std::move(name_)),
      value(std::move(value_)),
      grad(Tensor::zeros_like(value)),
      first_moment(Tensor::zeros_like(value)),
      second_moment(Tensor::zeros_like(value)) {}

void Parameter::reset_optimizer_state() {
  first_moment.fill(0.0);
  second_moment.fill(0.0);
  step = 0;
}

Parameter& ParamSet::add(std::string name, Tensor value) {
  if (find(name) != nullptr) throw ConfigError("duplicate parameter name " + name);
  params_.emplace_back(std::move(name), std::move(value));
  return params_.back();
}

const Parameter* ParamSet::find(std::string_view name) const {
  auto it = std::find_if(params_.begin(), params_.end(), [&](const Parameter& p) { return p.name == name; });
  return it == params_.end() ? nullptr : &*it;
}

const Parameter& ParamSet::get(std::string_view name) const {
  const Parameter* p = find(name);
  if (p == nullptr) throw ConfigError("unknown parameter " + std::string(name));
  return *p;
}

Parameter& ParamSet::get(std::string_view name) {
  return const_cast<Parameter&>(static_cast<const ParamSet&>(*this).get(name));
}

std::size_t ParamSet::numel() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

std::vector<std::string> ParamSet::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.name);
  return out;
}

void ParamSet::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

std::vector<Parameter*> ParamSet::pointers() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

void adam_step(std::span<Parameter* const> params, const AdamOptions& o) {
  for (Parameter* p : params) {
    const auto g = p->grad.data();
    const bool touched = std::any_of(g.begin(), g.end(), [](double v) { return v != 0.0; });
    if (!touched) continue;
    ++p->step;
    const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(p->step));
    const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(p->step));
    double* w = p->value.ptr();
    double* m = p->first_moment.ptr();
    double* v = p->second_moment.ptr();
    for (std::size_t i = 0; i < g.size(); ++i) {
      m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
      v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      w[i] -= o.learning_rate * m_hat / (std::sqrt(v_hat) + o.epsilon);
    }
    p->zero_grad();
  }
}

void adam_step(ParamSet& params, const AdamOptions& options) {
  auto ptrs = params.pointers();
  adam_step(ptrs, options);
}

}  // namespace fedcrfd
