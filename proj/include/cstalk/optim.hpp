#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cstalk/autodiff.hpp"

namespace cstalk {

/// Named, ordered collection of parameter leaves. Models register their tensors
/// here and keep the returned slot index.
class ParamSet {
 public:
  std::size_t add(const std::string& name, ad::Matrix init, bool trainable = true);

  std::size_t size() const { return vars_.size(); }
  const ad::Var& operator[](std::size_t i) const { return vars_[i]; }
  ad::Var& operator[](std::size_t i) { return vars_[i]; }
  const ad::Var& at(const std::string& name) const { return vars_[index(name)]; }
  std::size_t index(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const std::vector<std::string>& names() const { return names_; }

  /// Trainable parameters receive gradients and optimizer updates.
  bool trainable(std::size_t i) const { return trainable_[i]; }
  void set_trainable(std::size_t i, bool on);
  void freeze_all();

  /// Fresh leaves with copied values and empty gradients.
  ParamSet clone() const;
  void copy_values_from(const ParamSet& other);
  void zero_grad();
  /// grads += other.grads, slot by slot.
  void accumulate_grads_from(const ParamSet& other);
  void scale_grads(double s);
  std::size_t element_count() const;

 private:
  std::vector<std::string> names_;
  std::vector<ad::Var> vars_;
  std::vector<bool> trainable_;
  std::map<std::string, std::size_t> index_;
};

/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights.
ad::Matrix uniform_fan_in(ad::Index rows, ad::Index cols, ad::Index fan_in, std::mt19937_64& rng);

/// Rounds every parameter to the nearest float32, the checkpoint precision.
void round_to_float32(ParamSet& params);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::int64_t step = 0;
  std::vector<ad::Matrix> m;
  std::vector<ad::Matrix> v;
};

/// Bias-corrected Adam on every trainable slot, reading the slots' gradients.
/// Throws NumericError naming the first parameter with a non-finite gradient;
/// nothing is updated in that case.
void adam_step(ParamSet& params, AdamState& state, const AdamConfig& cfg);

/// Reverse-mode gradient of `f` at leaf `x` compared against central
/// differences. Returns max_i |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
/// `f` is re-evaluated after each perturbation of x's value.
double grad_check(const std::function<ad::Var()>& f, ad::Var& x, double eps = 1e-5);
double grad_check(const std::function<ad::Var(const ad::Var&)>& f, const ad::Matrix& x, double eps = 1e-5);

}  // namespace cstalk
