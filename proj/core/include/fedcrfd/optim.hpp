#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedcrfd/tensor.hpp"

namespace fedcrfd {

/// A trainable tensor with its gradient accumulator and Adam moments.
struct Parameter {
  Parameter(std::string name, Tensor value);

  std::string name;
  Tensor value;
  Tensor grad;
  Tensor first_moment;
  Tensor second_moment;
  std::int64_t step = 0;

  void zero_grad() { grad.fill(0.0); }
  /// Drops Adam state back to the freshly initialized condition.
  void reset_optimizer_state();
  std::size_t numel() const { return value.size(); }
};

/// Ordered, name-addressable collection of parameters. Element addresses are stable once
/// construction is finished; graphs hold raw pointers into it.
class ParamSet {
 public:
  Parameter& add(std::string name, Tensor value);
  Parameter& get(std::string_view name);
  const Parameter& get(std::string_view name) const;
  const Parameter* find(std::string_view name) const;

  std::size_t size() const noexcept { return params_.size(); }
  bool empty() const noexcept { return params_.empty(); }
  std::size_t numel() const;
  std::vector<std::string> names() const;

  auto begin() noexcept { return params_.begin(); }
  auto end() noexcept { return params_.end(); }
  auto begin() const noexcept { return params_.begin(); }
  auto end() const noexcept { return params_.end(); }
  Parameter& operator[](std::size_t i) { return params_[i]; }
  const Parameter& operator[](std::size_t i) const { return params_[i]; }

  void zero_grad();
  std::vector<Parameter*> pointers();

 private:
  std::vector<Parameter> params_;
};

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One Adam update for every parameter with a non-zero gradient, then zeroes all gradients.
/// A parameter whose gradient is identically zero did not take part in the loss; it is left
/// untouched and its step counter does not advance.
void adam_step(std::span<Parameter* const> params, const AdamOptions& options);
void adam_step(ParamSet& params, const AdamOptions& options);

}  // namespace fedcrfd
