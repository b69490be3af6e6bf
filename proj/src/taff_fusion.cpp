#include "taffseg/taff_fusion.hpp"

#include <spdlog/spdlog.h>

#include <cmath>

#include "taffseg/errors.hpp"

namespace taff::fusion {

using ad::Var;
using nlohmann::json;

void FusionConfig::validate() const {
  if (channels < 1 || latent < 1 || gate_hidden < 1 || film_hidden < 1)
    throw ConfigError("fusion widths must be positive");
}

void to_json(json& j, const FusionConfig& c) {
  j = json{{"channels", c.channels},     {"latent", c.latent},     {"gate_hidden", c.gate_hidden},
           {"film_hidden", c.film_hidden}, {"use_time", c.use_time}, {"leaky_slope", c.leaky_slope}};
}

void from_json(const json& j, FusionConfig& c) {
  c.channels = j.at("channels");
  c.latent = j.at("latent");
  c.gate_hidden = j.at("gate_hidden");
  c.film_hidden = j.at("film_hidden");
  c.use_time = j.at("use_time");
  c.leaky_slope = j.at("leaky_slope");
}

Var time_column(const std::vector<double>& t_norm) {
  Tensor t({static_cast<int>(t_norm.size()), 1});
  for (std::size_t i = 0; i < t_norm.size(); ++i) {
    double v = t_norm[i];
    if (!std::isfinite(v)) throw DataError("t_norm must be finite");
    if (v < 0.0 || v > 1.0) {
      spdlog::warn("t_norm {} outside [0, 1]; clamping", v);
      v = std::clamp(v, 0.0, 1.0);
    }
    t[i] = v;
  }
  return ad::constant(std::move(t));
}

TaffFusion::TaffFusion(const FusionConfig& cfg, nn::ParameterList& params, Rng& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  const int gate_in = cfg_.channels + cfg_.latent + (cfg_.use_time ? 1 : 0);
  gate_hidden = nn::Linear(params, prefix + ".gate_hidden", gate_in, cfg_.gate_hidden, rng);
  gate_out = nn::Linear(params, prefix + ".gate_out", cfg_.gate_hidden, 2, rng, true, nn::Init::zeros);
  projection = nn::Linear(params, prefix + ".projection", cfg_.latent, cfg_.channels, rng);
  if (cfg_.use_time) {
    film_hidden = nn::Linear(params, prefix + ".film_hidden", 1, cfg_.film_hidden, rng);
    film_out = nn::Linear(params, prefix + ".film_out", cfg_.film_hidden, 2 * cfg_.channels, rng, true,
                          nn::Init::zeros);
  }
}

Var TaffFusion::gate_weights(const Var& f, const Var& z, const Var& t) const {
  if (!f.value().all_finite() || !z.value().all_finite()) throw DataError("gate inputs contain non-finite values");
  std::vector<Var> parts{ad::global_avg_pool(f), z};
  if (cfg_.use_time) parts.push_back(t);
  Var h = ad::leaky_relu(gate_hidden(ad::concat(parts, 1)), cfg_.leaky_slope);
  return ad::softmax(gate_out(h), 1);
}

Var TaffFusion::project_ecg(const Var& z, int height, int width) const {
  if (z.value().rank() != 2 || z.dim(1) != cfg_.latent)
    throw ShapeError("ECG latent must be (B, " + std::to_string(cfg_.latent) + "), got " + shape_str(z.shape()));
  const int B = z.dim(0), C = cfg_.channels;
  return ad::expand(ad::reshape(projection(z), {B, C, 1, 1}), {B, C, height, width});
}

std::pair<Var, Var> TaffFusion::temporal_film(const Var& t) const {
  if (!cfg_.use_time) throw ConfigError("temporal FiLM requested on a model without time conditioning");
  const int C = cfg_.channels;
  Var h = ad::leaky_relu(film_hidden(t), cfg_.leaky_slope);
  Var gb = film_out(h);
  return {ad::slice(gb, 1, 0, C), ad::slice(gb, 1, C, 2 * C)};
}

FusionState TaffFusion::fuse(const Var& f, const Var& z, const Var& t) const {
  const auto& s = f.shape();
  if (s.size() != 4 || s[1] != cfg_.channels)
    throw ShapeError("fusion expects (B, " + std::to_string(cfg_.channels) + ", h, w), got " + shape_str(s));
  if (z.dim(0) != s[0] || (cfg_.use_time && t.dim(0) != s[0])) throw ShapeError("fusion batch sizes differ");
  const int B = s[0], C = s[1], H = s[2], W = s[3];
  FusionState st;
  st.w = gate_weights(f, z, t);
  st.f_ecg = project_ecg(z, H, W);
  auto per_sample = [&](const Var& col) { return ad::expand(ad::reshape(col, {B, 1, 1, 1}), {B, C, H, W}); };
  st.f_mixed = ad::add(ad::mul(f, per_sample(ad::slice(st.w, 1, 0, 1))),
                       ad::mul(st.f_ecg, per_sample(ad::slice(st.w, 1, 1, 2))));
  if (!cfg_.use_time) {
    st.f_fused = ad::add(f, st.f_mixed);
    return st;
  }
  std::tie(st.gamma, st.beta) = temporal_film(t);
  auto per_channel = [&](const Var& v) { return ad::expand(ad::reshape(v, {B, C, 1, 1}), {B, C, H, W}); };
  st.f_fused = ad::add(ad::add(f, ad::mul(st.f_mixed, per_channel(ad::add_scalar(st.gamma, 1.0)))),
                       per_channel(st.beta));
  return st;
}

Var gate_entropy(const Var& w) {
  const Tensor& v = w.value();
  if (v.rank() != 2 || v.dim(1) != 2) throw ShapeError("gate weights must be (B, 2)");
  for (int b = 0; b < v.dim(0); ++b) {
    const double a = v.at(b, 0), c = v.at(b, 1);
    if (a < -1e-6 || c < -1e-6 || std::abs(a + c - 1.0) > 1e-6)
      throw InvariantError("gate weights row " + std::to_string(b) + " is off the simplex");
  }
  // -(1/B) sum_b sum_i w log w
  return ad::scale(ad::sum(ad::xlogx(w)), -1.0 / v.dim(0));
}

}  // namespace taff::fusion
