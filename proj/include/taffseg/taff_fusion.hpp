#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "taffseg/autodiff.hpp"
#include "taffseg/nn.hpp"

// Temporal-aware fusion of mid-level image features with the ECG latent:
// a gating MLP mixes f with the broadcast ECG projection, and a FiLM MLP on
// the normalized acquisition interval scales and shifts the mixture before
// it is added back to f.
namespace taff::fusion {

struct FusionConfig {
  int channels = 64;
  int latent = 64;
  int gate_hidden = 32;
  int film_hidden = 16;
  // Time conditioning: FiLM on t_norm and t_norm as an extra gate input.
  bool use_time = true;
  double leaky_slope = 0.01;

  void validate() const;
};

void to_json(nlohmann::json& j, const FusionConfig& c);
void from_json(const nlohmann::json& j, FusionConfig& c);

struct FusionState {
  ad::Var f_ecg;    // (B, C, h, w)
  ad::Var f_mixed;  // (B, C, h, w)
  ad::Var f_fused;  // (B, C, h, w)
  ad::Var w;        // (B, 2): w_MRI, w_ECG
  ad::Var gamma;    // (B, C); undefined without time conditioning
  ad::Var beta;     // (B, C); undefined without time conditioning
};

// (B, 1) column of normalized intervals; out-of-range values clamp with a warning.
ad::Var time_column(const std::vector<double>& t_norm);

class TaffFusion {
 public:
  TaffFusion() = default;
  TaffFusion(const FusionConfig& cfg, nn::ParameterList& params, Rng& rng, const std::string& prefix = "fusion");

  ad::Var gate_weights(const ad::Var& f, const ad::Var& z, const ad::Var& t) const;
  ad::Var project_ecg(const ad::Var& z, int height, int width) const;
  // Returns (gamma, beta), each (B, C).
  std::pair<ad::Var, ad::Var> temporal_film(const ad::Var& t) const;
  FusionState fuse(const ad::Var& f, const ad::Var& z, const ad::Var& t) const;

  const FusionConfig& config() const { return cfg_; }

  nn::Linear gate_hidden;
  nn::Linear gate_out;
  nn::Linear projection;
  nn::Linear film_hidden;
  nn::Linear film_out;

 private:
  FusionConfig cfg_;
};

// Mean gating entropy over the batch; throws InvariantError off the simplex.
ad::Var gate_entropy(const ad::Var& w);

}  // namespace taff::fusion
