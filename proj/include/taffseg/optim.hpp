#pragma once

#include <memory>
#include <string>
#include <vector>

#include "taffseg/autodiff.hpp"
#include "taffseg/nn.hpp"

namespace taff::optim {

// lr0 * (1 - step/max_steps)^power; 0 at or beyond max_steps.
double poly_decay_lr(double lr0, long step, long max_steps, double power = 0.9);
// Linear warmup to peak over warmup_steps, then cosine from peak to floor at total_steps.
double warmup_cosine_lr(long step, long warmup_steps, long total_steps, double peak, double floor);

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(double lr) = 0;
  virtual std::string algorithm() const = 0;

  const std::vector<nn::Parameter>& params() const { return params_; }
  double weight_decay() const { return weight_decay_; }
  long steps_taken() const { return steps_; }

  // Slot buffers in a fixed order, for checkpointing.
  std::vector<Tensor*> state();
  void set_steps_taken(long s) { steps_ = s; }

 protected:
  Optimizer(std::vector<nn::Parameter> params, double weight_decay);

  std::vector<nn::Parameter> params_;
  double weight_decay_;
  long steps_ = 0;
  // One or two slots per parameter.
  std::vector<std::vector<Tensor>> slots_;
};

class SgdMomentum final : public Optimizer {
 public:
  SgdMomentum(std::vector<nn::Parameter> params, double momentum, double weight_decay, bool nesterov);
  void step(double lr) override;
  std::string algorithm() const override { return "sgd_momentum"; }
  double momentum() const { return momentum_; }

 private:
  double momentum_;
  bool nesterov_;
};

class AdamW final : public Optimizer {
 public:
  AdamW(std::vector<nn::Parameter> params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999,
        double eps = 1e-8);
  void step(double lr) override;
  std::string algorithm() const override { return "adamw"; }

 private:
  double beta1_, beta2_, eps_;
};

// Scales all gradients so their joint L2 norm is at most max_norm. Returns the pre-clip norm.
double clip_grad_norm(const std::vector<nn::Parameter>& params, double max_norm);

}  // namespace taff::optim
