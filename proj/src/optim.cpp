#include "taffseg/optim.hpp"

#include <cmath>
#include <numbers>

#include "taffseg/errors.hpp"

namespace taff::optim {

double poly_decay_lr(double lr0, long step, long max_steps, double power) {
  if (max_steps <= 0) throw ConfigError("max_steps must be positive");
  if (power <= 0.0) throw ConfigError("poly power must be positive");
  if (step < 0) throw InputError("step must be nonnegative");
  if (step >= max_steps) return 0.0;
  return lr0 * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(max_steps), power);
}

double warmup_cosine_lr(long step, long warmup_steps, long total_steps, double peak, double floor) {
  if (total_steps <= 0 || warmup_steps < 0) throw ConfigError("invalid warmup/cosine step counts");
  if (step < warmup_steps) return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const long span = std::max(1L, total_steps - warmup_steps);
  const double progress = std::min(1.0, static_cast<double>(step - warmup_steps) / static_cast<double>(span));
  return floor + 0.5 * (peak - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

Optimizer::Optimizer(std::vector<nn::Parameter> params, double weight_decay)
    : params_(std::move(params)), weight_decay_(weight_decay) {
  if (weight_decay < 0.0) throw ConfigError("weight decay must be nonnegative");
}

std::vector<Tensor*> Optimizer::state() {
  std::vector<Tensor*> out;
  for (auto& per_param : slots_)
    for (auto& t : per_param) out.push_back(&t);
  return out;
}

SgdMomentum::SgdMomentum(std::vector<nn::Parameter> params, double momentum, double weight_decay, bool nesterov)
    : Optimizer(std::move(params), weight_decay), momentum_(momentum), nesterov_(nesterov) {
  for (const auto& p : params_) slots_.push_back({Tensor(p.var.shape(), 0.0)});
}

void SgdMomentum::step(double lr) {
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto var = params_[k].var;
    if (var.grad().empty()) continue;
    Tensor& w = var.mutable_value();
    const Tensor& g = var.grad();
    Tensor& v = slots_[k][0];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double d = g[i] + weight_decay_ * w[i];
      v[i] = momentum_ * v[i] + d;
      w[i] -= lr * (nesterov_ ? d + momentum_ * v[i] : v[i]);
    }
  }
  ++steps_;
}

AdamW::AdamW(std::vector<nn::Parameter> params, double weight_decay, double beta1, double beta2, double eps)
    : Optimizer(std::move(params), weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) slots_.push_back({Tensor(p.var.shape(), 0.0), Tensor(p.var.shape(), 0.0)});
}

void AdamW::step(double lr) {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto var = params_[k].var;
    if (var.grad().empty()) continue;
    Tensor& w = var.mutable_value();
    const Tensor& g = var.grad();
    Tensor& m = slots_[k][0];
    Tensor& v = slots_[k][1];
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= lr * weight_decay_ * w[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

double clip_grad_norm(const std::vector<nn::Parameter>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (double g : p.var.grad().storage()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (const auto& p : params) {
      auto var = p.var;
      if (var.grad().empty()) continue;
      for (auto& g : var.mutable_grad().values()) g *= s;
    }
  }
  return norm;
}

}  // namespace taff::optim
