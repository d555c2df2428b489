#include "tbd/nn.hpp"

#include <cmath>
#include <cstring>

#include "tbd/ops.hpp"

namespace tbd::nn {

Tensor ParameterStore::create(const std::string& name, Shape shape, Init init, Rng& rng,
                              int fan_in) {
  if (index_.count(name)) throw Error("duplicate parameter name: " + name);
  const std::size_t n = numel(shape);
  std::vector<double> values(n, 0.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
  switch (init) {
    case Init::kUniformFanIn:
      for (auto& v : values) v = (2.0 * rng.uniform() - 1.0) * bound;
      break;
    case Init::kNormal:
      for (auto& v : values) v = rng.normal() * bound;
      break;
    case Init::kOnes:
      values.assign(n, 1.0);
      break;
    case Init::kZeros:
      break;
  }
  Tensor t = Tensor::from(std::move(shape), std::move(values), true);
  index_[name] = items_.size();
  items_.emplace_back(name, t);
  return t;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("unknown parameter: " + name);
  return items_[it->second].second;
}

std::size_t ParameterStore::count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) n += t.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& [_, t] : items_) t.zero_grad();
}

void ParameterStore::set_trainable(const std::string& needle, bool on) {
  for (auto& [name, t] : items_) {
    if (name.find(needle) != std::string::npos) t.set_requires_grad(on);
  }
}

std::uint64_t ParameterStore::checksum(const std::string& needle) const {
  std::uint64_t h = 14695981039346656037ULL;
  for (const auto& [name, t] : items_) {
    if (!needle.empty() && name.find(needle) == std::string::npos) continue;
    for (double v : t.data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      h ^= bits;
      h *= 1099511628211ULL;
    }
  }
  return h;
}

Linear Linear::make(ParameterStore& store, const std::string& name, int in, int out, Rng& rng,
                    bool zero_init, bool with_bias) {
  const Init init = zero_init ? Init::kZeros : Init::kUniformFanIn;
  Linear l;
  l.weight = store.create(name + ".weight", {in, out}, init, rng, in);
  if (with_bias) l.bias = store.create(name + ".bias", {out}, init, rng, in);
  return l;
}

Tensor Linear::operator()(const Tensor& x) const { return ops::linear(x, weight, bias); }

Conv2d Conv2d::make(ParameterStore& store, const std::string& name, int in, int out, int kernel,
                    int stride, int padding, Rng& rng, bool zero_init) {
  const Init init = zero_init ? Init::kZeros : Init::kUniformFanIn;
  const int fan_in = in * kernel * kernel;
  Conv2d c;
  c.weight = store.create(name + ".weight", {out, in, kernel, kernel}, init, rng, fan_in);
  c.bias = store.create(name + ".bias", {out}, init, rng, fan_in);
  c.stride = stride;
  c.padding = padding;
  return c;
}

Tensor Conv2d::operator()(const Tensor& x) const {
  return ops::conv2d(x, weight, bias, stride, padding);
}

GroupNorm GroupNorm::make(ParameterStore& store, const std::string& name, int channels, int groups,
                          Rng& rng) {
  GroupNorm g;
  g.gamma = store.create(name + ".gamma", {channels}, Init::kOnes, rng);
  g.beta = store.create(name + ".beta", {channels}, Init::kZeros, rng);
  g.groups = groups;
  return g;
}

Tensor GroupNorm::operator()(const Tensor& x) const {
  return ops::group_norm(x, groups, gamma, beta);
}

LayerNorm LayerNorm::make(ParameterStore& store, const std::string& name, int dim, Rng& rng) {
  LayerNorm l;
  l.gamma = store.create(name + ".gamma", {dim}, Init::kOnes, rng);
  l.beta = store.create(name + ".beta", {dim}, Init::kZeros, rng);
  return l;
}

Tensor LayerNorm::operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }

Adam::Adam(ParameterStore& store, double lr, double beta1, double beta2, double eps)
    : store_(store), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

Adam::State& Adam::state(const std::string& name) {
  auto& s = state_[name];
  if (s.m.empty()) {
    const std::size_t n = store_.get(name).size();
    s.m.assign(n, 0.0);
    s.v.assign(n, 0.0);
  }
  return s;
}

void Adam::step() {
  for (auto& [name, param] : store_.items()) {
    if (!param.requires_grad() || param.grad().empty()) continue;
    State& s = state(name);
    ++s.steps;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(s.steps));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(s.steps));
    auto grad = param.grad();
    Tensor target = param;
    auto data = target.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = grad[i];
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g;
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g * g;
      const double mh = s.m[i] / c1;
      const double vh = s.v[i] / c2;
      data[i] -= lr_ * mh / (std::sqrt(vh) + eps_);
    }
  }
}

}  // namespace tbd::nn
