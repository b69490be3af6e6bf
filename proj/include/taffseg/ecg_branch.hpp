#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "taffseg/autodiff.hpp"
#include "taffseg/core_data.hpp"
#include "taffseg/nn.hpp"

// 12-lead ECG autoencoder: shared per-lead 1D convolutions, temporal attention
// pooling per lead, one cross-lead attention block, and an MLP decoder.
namespace taff::ecg {

struct EcgConfig {
  int samples = 600;
  int conv_stages = 3;
  int channels = 16;
  int kernel = 7;
  int latent = 64;
  int decoder_hidden = 128;
  // Zero query projection so every cross-lead row starts at 1/12.
  bool uniform_attention_init = false;
  bool zero_init_decoder_output = false;
  double leaky_slope = 0.01;

  void validate() const;
  // Time steps left after the strided convolutions.
  int pooled_length() const;
};

void to_json(nlohmann::json& j, const EcgConfig& c);
void from_json(const nlohmann::json& j, EcgConfig& c);

struct EcgLatent {
  ad::Var z;  // (B, latent)
  // Values only, for logging and export.
  Tensor cross_lead_attention;  // (B, 12, 12), rows sum to 1
  Tensor temporal_attention;    // (B, 12, T'), each lead sums to 1 over time
};

class EcgAutoencoder {
 public:
  EcgAutoencoder() = default;
  EcgAutoencoder(const EcgConfig& cfg, nn::ParameterList& params, Rng& rng, const std::string& prefix = "ecg");

  // waveform (B, 12, T).
  EcgLatent encode(const ad::Var& waveform) const;
  // z (B, latent) -> (B, 12, T).
  ad::Var decode(const ad::Var& z) const;

  const EcgConfig& config() const { return cfg_; }

 private:
  EcgConfig cfg_;
  std::vector<nn::Conv2d> convs_;
  nn::Linear temporal_score_;
  ad::Var lead_embedding_;  // (12, channels)
  nn::Linear query_, key_, value_;
  nn::Linear to_latent_;
  nn::Linear dec_hidden_, dec_out_;
};

// Stacks records into a (B, 12, T) tensor.
Tensor stack_waveforms(const std::vector<const EcgRecord*>& records);

}  // namespace taff::ecg
