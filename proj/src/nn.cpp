#include "taffseg/nn.hpp"

#include <cmath>

#include "taffseg/errors.hpp"

namespace taff::nn {

ad::Var ParameterList::add(std::string name, Tensor init) {
  for (const auto& p : items_)
    if (p.name == name) throw ConfigError("duplicate parameter name " + name);
  ad::Var v(std::move(init), true);
  items_.push_back({std::move(name), v});
  return v;
}

std::size_t ParameterList::count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.var.value().size();
  return n;
}

void ParameterList::zero_grad() {
  for (auto& p : items_) p.var.zero_grad();
}

Tensor kaiming_normal(const Shape& shape, int fan_in, Rng& rng, double slope) {
  const double sd = std::sqrt(2.0 / ((1.0 + slope * slope) * static_cast<double>(fan_in)));
  Tensor t(shape);
  for (auto& v : t.values()) v = sd * rng.normal();
  return t;
}

Linear::Linear(ParameterList& params, const std::string& name, int in, int out, Rng& rng, bool use_bias,
               Init init) {
  Tensor w = init == Init::zeros ? Tensor({out, in}, 0.0) : kaiming_normal({out, in}, in, rng);
  weight = params.add(name + ".weight", std::move(w));
  if (use_bias) bias = params.add(name + ".bias", Tensor({out}, 0.0));
}

Conv2d::Conv2d(ParameterList& params, const std::string& name, int in, int out, int kh, int kw, Rng& rng,
               ad::Conv2dOptions opt, bool use_bias)
    : opt_(opt) {
  weight = params.add(name + ".weight", kaiming_normal({out, in, kh, kw}, in * kh * kw, rng));
  if (use_bias) bias = params.add(name + ".bias", Tensor({out}, 0.0));
}

ConvTranspose2x2::ConvTranspose2x2(ParameterList& params, const std::string& name, int in, int out, Rng& rng,
                                   bool use_bias) {
  weight = params.add(name + ".weight", kaiming_normal({in, out, 2, 2}, in, rng));
  if (use_bias) bias = params.add(name + ".bias", Tensor({out}, 0.0));
}

InstanceNorm::InstanceNorm(ParameterList& params, const std::string& name, int channels, double eps)
    : eps_(eps) {
  gamma = params.add(name + ".gamma", Tensor({channels}, 1.0));
  beta = params.add(name + ".beta", Tensor({channels}, 0.0));
}

}  // namespace taff::nn
