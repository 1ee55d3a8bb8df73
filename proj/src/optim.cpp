#include "cstalk/optim.hpp"

#include <algorithm>
#include <cmath>

#include "cstalk/error.hpp"

namespace cstalk {

std::size_t ParamSet::add(const std::string& name, ad::Matrix init, bool trainable) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
  index_[name] = vars_.size();
  names_.push_back(name);
  vars_.push_back(ad::Var(std::move(init), trainable));
  trainable_.push_back(trainable);
  return vars_.size() - 1;
}

std::size_t ParamSet::index(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw StateError("missing parameter '" + name + "'");
  return it->second;
}

void ParamSet::set_trainable(std::size_t i, bool on) {
  trainable_[i] = on;
  vars_[i].set_requires_grad(on);
}

void ParamSet::freeze_all() {
  for (std::size_t i = 0; i < vars_.size(); ++i) set_trainable(i, false);
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (std::size_t i = 0; i < vars_.size(); ++i) out.add(names_[i], vars_[i].value(), trainable_[i]);
  return out;
}

void ParamSet::copy_values_from(const ParamSet& other) {
  if (other.size() != size()) throw StateError("parameter sets differ in size");
  for (std::size_t i = 0; i < vars_.size(); ++i) vars_[i].mutable_value() = other[i].value();
}

void ParamSet::zero_grad() {
  for (auto& v : vars_) v.zero_grad();
}

void ParamSet::accumulate_grads_from(const ParamSet& other) {
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    if (other[i].has_grad()) vars_[i].node()->accumulate(other[i].node()->grad);
  }
}

void ParamSet::scale_grads(double s) {
  for (auto& v : vars_) {
    if (v.has_grad()) v.node()->grad *= s;
  }
}

std::size_t ParamSet::element_count() const {
  std::size_t n = 0;
  for (const auto& v : vars_) n += static_cast<std::size_t>(v.value().size());
  return n;
}

ad::Matrix uniform_fan_in(ad::Index rows, ad::Index cols, ad::Index fan_in, std::mt19937_64& rng) {
  const double a = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-a, a);
  ad::Matrix m(rows, cols);
  for (ad::Index r = 0; r < rows; ++r)
    for (ad::Index c = 0; c < cols; ++c) m(r, c) = u(rng);
  return m;
}

void adam_step(ParamSet& params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i] = ad::Matrix::Zero(params[i].rows(), params[i].cols());
      state.v[i] = ad::Matrix::Zero(params[i].rows(), params[i].cols());
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params.trainable(i) && params[i].has_grad() && !params[i].node()->grad.allFinite())
      throw NumericError("non-finite gradient for parameter '" + params.name(i) + "'");
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params.trainable(i) || !params[i].has_grad()) continue;
    const ad::Matrix& g = params[i].node()->grad;
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseAbs2();
    params[i].mutable_value().array() -=
        cfg.lr * (state.m[i].array() / c1) / ((state.v[i].array() / c2).sqrt() + cfg.eps);
  }
}

double grad_check(const std::function<ad::Var()>& f, ad::Var& x, double eps) {
  const bool had = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  ad::backward(f());
  const ad::Matrix analytic = x.grad();
  x.zero_grad();
  double worst = 0.0;
  for (ad::Index i = 0; i < x.value().size(); ++i) {
    double& xi = x.mutable_value().data()[i];
    const double saved = xi;
    xi = saved + eps;
    const double up = f().item();
    xi = saved - eps;
    const double down = f().item();
    xi = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic.data()[i];
    worst = std::max(worst, std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric)));
  }
  x.set_requires_grad(had);
  return worst;
}

double grad_check(const std::function<ad::Var(const ad::Var&)>& f, const ad::Matrix& x0, double eps) {
  ad::Var x = ad::parameter(x0);
  return grad_check([&] { return f(x); }, x, eps);
}

void round_to_float32(ParamSet& params) {
  for (std::size_t i = 0; i < params.size(); ++i)
    params[i].mutable_value() = params[i].value().cast<float>().cast<double>();
}

}  // namespace cstalk
