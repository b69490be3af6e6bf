#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "taffseg/autodiff.hpp"

namespace taff::loss {

inline constexpr double kDiceEps = 1e-5;
inline constexpr double kDefaultLambdaEnt = 3e-3;

enum class EntropyMode { maximize_entropy, minimize_entropy };
std::string to_string(EntropyMode m);
EntropyMode entropy_mode_from_string(const std::string& s);
// Sign with which the gate entropy enters the total loss.
double entropy_sign(EntropyMode m);

struct SegLoss {
  ad::Var total;
  ad::Var dice;
  ad::Var ce;
};

// logits (B, C, H, W); labels holds B*H*W class ids in batch-major order.
// Soft Dice over foreground classes 1..C-1 (sums over the whole batch) plus
// mean pixelwise cross-entropy.
SegLoss seg_loss(const ad::Var& logits, const std::vector<std::uint8_t>& labels);

ad::Var recon_loss(const ad::Var& x, const ad::Var& x_hat);

double lambda_ecg_schedule(int epoch, int warmup_epochs, double lambda_max);

struct LossBreakdown {
  double l_seg = 0.0;
  double l_dice = 0.0;
  double l_ce = 0.0;
  double l_ecg = 0.0;
  // Gate entropy H(w), always in [0, ln 2].
  double l_ent = 0.0;
  double lambda_ecg = 0.0;
  double lambda_ent = 0.0;
  double entropy_sign = -1.0;
  double l_total = 0.0;

  // l_seg + lambda_ecg * l_ecg + entropy_sign * lambda_ent * l_ent
  double recombined() const { return l_seg + lambda_ecg * l_ecg + entropy_sign * lambda_ent * l_ent; }
};

struct TotalLoss {
  ad::Var total;
  LossBreakdown breakdown;
};

// l_ecg and entropy may be undefined (treated as zero). Throws TrainingAbort
// naming the first non-finite component.
TotalLoss total_loss(const SegLoss& seg, const ad::Var& l_ecg, const ad::Var& entropy, double lambda_ecg,
                     double lambda_ent, EntropyMode mode);

// Scalar form of the combination.
double combine(double l_seg, double l_ecg, double entropy, double lambda_ecg, double lambda_ent, EntropyMode mode);

}  // namespace taff::loss
