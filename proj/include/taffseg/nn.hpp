#pragma once

#include <string>
#include <vector>

#include "taffseg/autodiff.hpp"
#include "taffseg/random.hpp"

namespace taff::nn {

struct Parameter {
  std::string name;
  ad::Var var;
};

// Ordered, named set of trainable leaves owned by one module.
class ParameterList {
 public:
  ad::Var add(std::string name, Tensor init);
  const std::vector<Parameter>& items() const { return items_; }
  std::size_t count() const;
  void zero_grad();

 private:
  std::vector<Parameter> items_;
};

enum class Init { kaiming, zeros };

// He-normal for leaky-ReLU networks.
Tensor kaiming_normal(const Shape& shape, int fan_in, Rng& rng, double slope = 0.01);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterList& params, const std::string& name, int in, int out, Rng& rng, bool bias = true,
         Init init = Init::kaiming);
  ad::Var operator()(const ad::Var& x) const { return ad::linear(x, weight, bias); }

  ad::Var weight;
  ad::Var bias;
};

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterList& params, const std::string& name, int in, int out, int kh, int kw, Rng& rng,
         ad::Conv2dOptions opt, bool bias = true);
  ad::Var operator()(const ad::Var& x) const { return ad::conv2d(x, weight, bias, opt_); }

  ad::Var weight;
  ad::Var bias;

 private:
  ad::Conv2dOptions opt_;
};

class ConvTranspose2x2 {
 public:
  ConvTranspose2x2() = default;
  ConvTranspose2x2(ParameterList& params, const std::string& name, int in, int out, Rng& rng, bool bias = true);
  ad::Var operator()(const ad::Var& x) const { return ad::conv_transpose2x2(x, weight, bias); }

  ad::Var weight;
  ad::Var bias;
};

class InstanceNorm {
 public:
  InstanceNorm() = default;
  InstanceNorm(ParameterList& params, const std::string& name, int channels, double eps = 1e-5);
  ad::Var operator()(const ad::Var& x) const { return ad::instance_norm(x, gamma, beta, eps_); }

  ad::Var gamma;
  ad::Var beta;

 private:
  double eps_ = 1e-5;
};

}  // namespace taff::nn
