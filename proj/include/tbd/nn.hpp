#pragma once

#include <map>
#include <string>
#include <vector>

#include "tbd/rng.hpp"
#include "tbd/tensor.hpp"

namespace tbd::nn {

enum class Init { kUniformFanIn, kZeros, kOnes, kNormal };

/// Named, ordered collection of trainable tensors.
class ParameterStore {
 public:
  /// fan_in sets the U(-1/sqrt(fan_in), 1/sqrt(fan_in)) bound for kUniformFanIn;
  /// for kNormal it is the standard deviation numerator (std = 1/sqrt(fan_in)).
  Tensor create(const std::string& name, Shape shape, Init init, Rng& rng, int fan_in = 1);

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::size_t count() const;  // total scalar count

  void zero_grad();
  /// Enables or disables gradients for every parameter whose name contains needle.
  void set_trainable(const std::string& needle, bool on);
  /// Content checksum over parameters whose names contain `needle`.
  std::uint64_t checksum(const std::string& needle = "") const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, std::size_t> index_;
};

struct Linear {
  Tensor weight;  // (in, out)
  Tensor bias;    // (out)

  static Linear make(ParameterStore& store, const std::string& name, int in, int out, Rng& rng,
                     bool zero_init = false, bool with_bias = true);
  Tensor operator()(const Tensor& x) const;
};

struct Conv2d {
  Tensor weight;  // (out, in, k, k)
  Tensor bias;
  int stride = 1;
  int padding = 0;

  static Conv2d make(ParameterStore& store, const std::string& name, int in, int out, int kernel,
                     int stride, int padding, Rng& rng, bool zero_init = false);
  Tensor operator()(const Tensor& x) const;
};

struct GroupNorm {
  Tensor gamma;
  Tensor beta;
  int groups = 1;

  static GroupNorm make(ParameterStore& store, const std::string& name, int channels, int groups,
                        Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm make(ParameterStore& store, const std::string& name, int dim, Rng& rng);
  Tensor operator()(const Tensor& x) const;
};

/// Adam with constant learning rate over a ParameterStore.
class Adam {
 public:
  Adam(ParameterStore& store, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8);

  /// Applies one update to every parameter that currently requires grad.
  void step();

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

  // Bias correction uses the number of updates this parameter received.
  struct State {
    long long steps = 0;
    std::vector<double> m;
    std::vector<double> v;
  };
  State& state(const std::string& name);
  const std::map<std::string, State>& states() const { return state_; }

 private:
  ParameterStore& store_;
  double lr_, beta1_, beta2_, eps_;
  std::map<std::string, State> state_;
};

}  // namespace tbd::nn
