#include "taffseg/objectives.hpp"

#include <cmath>

#include "taffseg/errors.hpp"

namespace taff::loss {

using ad::Var;

std::string to_string(EntropyMode m) {
  return m == EntropyMode::maximize_entropy ? "maximize_entropy" : "minimize_entropy";
}

EntropyMode entropy_mode_from_string(const std::string& s) {
  if (s == "maximize_entropy") return EntropyMode::maximize_entropy;
  if (s == "minimize_entropy") return EntropyMode::minimize_entropy;
  throw ConfigError("unknown entropy mode '" + s + "' (expected maximize_entropy or minimize_entropy)");
}

double entropy_sign(EntropyMode m) { return m == EntropyMode::maximize_entropy ? -1.0 : 1.0; }

SegLoss seg_loss(const Var& logits, const std::vector<std::uint8_t>& labels) {
  const auto& s = logits.shape();
  if (s.size() != 4) throw ShapeError("logits must be (B, C, H, W), got " + shape_str(s));
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  if (B == 0) throw InputError("empty batch");
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  if (labels.size() != B * plane) throw ShapeError("label count does not match logits");

  Tensor onehot(s, 0.0);
  for (int b = 0; b < B; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      const int k = labels[b * plane + i];
      if (k >= C) throw DataError("label value " + std::to_string(k) + " outside the class range");
      onehot[(static_cast<std::size_t>(b) * C + k) * plane + i] = 1.0;
    }
  const Var g = ad::constant(onehot);

  const Var logp = ad::log_softmax(logits, 1);
  const Var ce = ad::scale(ad::sum(ad::mul(g, logp)), -1.0 / (static_cast<double>(B) * plane));

  const Var p = ad::softmax(logits, 1);
  const Var inter = ad::sum_except_channel(ad::mul(p, g));  // (C)
  const Var psum = ad::sum_except_channel(p);
  Tensor gsum_t({C}, 0.0);
  for (int b = 0; b < B; ++b)
    for (std::size_t i = 0; i < plane; ++i) gsum_t[labels[b * plane + i]] += 1.0;
  const Var num = ad::add_scalar(ad::scale(inter, 2.0), kDiceEps);
  const Var den = ad::add_scalar(ad::add(psum, ad::constant(gsum_t)), kDiceEps);
  const Var ratio = ad::slice(ad::div(num, den), 0, 1, C);
  const Var dice = ad::add_scalar(ad::scale(ad::sum(ratio), -1.0 / (C - 1)), 1.0);
  return {ad::add(dice, ce), dice, ce};
}

Var recon_loss(const Var& x, const Var& x_hat) {
  if (x.shape() != x_hat.shape())
    throw ShapeError("reconstruction shape " + shape_str(x_hat.shape()) + " differs from input " +
                     shape_str(x.shape()));
  return ad::mean(ad::square(ad::sub(x, x_hat)));
}

double lambda_ecg_schedule(int epoch, int warmup_epochs, double lambda_max) {
  if (warmup_epochs < 1) throw ConfigError("warmup_epochs must be >= 1");
  if (epoch < 0) throw InputError("epoch must be nonnegative, got " + std::to_string(epoch));
  const double r = static_cast<double>(epoch) / warmup_epochs;
  return lambda_max * std::min(1.0, r * r);
}

double combine(double l_seg, double l_ecg, double entropy, double lambda_ecg, double lambda_ent, EntropyMode mode) {
  return l_seg + lambda_ecg * l_ecg + entropy_sign(mode) * lambda_ent * entropy;
}

TotalLoss total_loss(const SegLoss& seg, const Var& l_ecg, const Var& entropy, double lambda_ecg, double lambda_ent,
                     EntropyMode mode) {
  TotalLoss out;
  auto& b = out.breakdown;
  b.l_seg = seg.total.item();
  b.l_dice = seg.dice.item();
  b.l_ce = seg.ce.item();
  b.l_ecg = l_ecg.defined() ? l_ecg.item() : 0.0;
  b.l_ent = entropy.defined() ? entropy.item() : 0.0;
  b.lambda_ecg = lambda_ecg;
  b.lambda_ent = lambda_ent;
  b.entropy_sign = entropy_sign(mode);
  const std::pair<const char*, double> parts[] = {
      {"segmentation (dice)", b.l_dice}, {"segmentation (cross-entropy)", b.l_ce}, {"ecg reconstruction", b.l_ecg},
      {"gate entropy", b.l_ent}};
  for (const auto& [name, v] : parts)
    if (!std::isfinite(v)) throw TrainingAbort(name, std::string("non-finite loss component: ") + name);

  Var total = seg.total;
  if (l_ecg.defined() && lambda_ecg != 0.0) total = ad::add(total, ad::scale(l_ecg, lambda_ecg));
  if (entropy.defined() && lambda_ent != 0.0) total = ad::add(total, ad::scale(entropy, b.entropy_sign * lambda_ent));
  out.total = total;
  b.l_total = total.item();
  return out;
}

}  // namespace taff::loss
