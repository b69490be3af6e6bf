#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "taffseg/core_data.hpp"
#include "taffseg/ecg_branch.hpp"
#include "taffseg/image_branch.hpp"
#include "taffseg/taff_fusion.hpp"

// The full network: image U-Net with the fusion block at its tap and the ECG
// autoencoder. Variant flags switch off the prior, the ECG path or the time
// conditioning while keeping the image backbone identical.
namespace taff {

struct ModelConfig {
  image::UNetConfig unet;
  ecg::EcgConfig ecg;
  int gate_hidden = 32;
  int film_hidden = 16;
  bool use_prior = true;
  bool use_ecg = true;
  bool use_time = true;

  void validate() const;
  fusion::FusionConfig fusion() const;
  // "multimodal", "no_time", "prior_only", "baseline" or "custom".
  std::string variant_name() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

// One 2D training or inference item: a slice of a paired sample.
struct SliceRef {
  int sample = 0;
  int slice = 0;
};

struct SliceBatch {
  Tensor images;  // (B, 18, H, W)
  std::vector<std::uint8_t> labels;  // B*H*W
  Tensor ecg;  // (B, 12, T)
  std::vector<double> t_norm;
  std::vector<SliceRef> refs;
};

// Builds a batch; prior channels are zero when use_prior is false.
SliceBatch make_batch(const std::vector<PairedSample>& samples, const std::vector<SliceRef>& refs, bool use_prior);
// Every slice of every listed sample, in order.
std::vector<SliceRef> slice_refs(const std::vector<PairedSample>& samples, const std::vector<int>& sample_indices);

struct ForwardOutput {
  ad::Var logits;  // (B, 4, H, W)
  std::optional<fusion::FusionState> fusion;
  std::optional<ecg::EcgLatent> latent;
  ad::Var ecg_input;
  ad::Var ecg_recon;
};

class TaffModel {
 public:
  TaffModel(const ModelConfig& cfg, std::uint64_t seed);
  TaffModel(const TaffModel&) = delete;
  TaffModel& operator=(const TaffModel&) = delete;

  ForwardOutput forward(const SliceBatch& batch) const;

  const ModelConfig& config() const { return cfg_; }
  nn::ParameterList& params() { return params_; }
  const nn::ParameterList& params() const { return params_; }
  const image::UNet& unet() const { return unet_; }
  const ecg::EcgAutoencoder& ecg() const { return ecg_; }
  const fusion::TaffFusion& fusion() const { return fusion_; }

  // Parameter name prefixes of the three optimizer groups.
  static constexpr const char* kBackbonePrefix = "image.";
  static constexpr const char* kEcgPrefix = "ecg.";
  static constexpr const char* kFusionPrefix = "fusion.";

 private:
  ModelConfig cfg_;
  nn::ParameterList params_;
  image::UNet unet_;
  ecg::EcgAutoencoder ecg_;
  fusion::TaffFusion fusion_;
};

// Inference over every slice of one sample.
struct SamplePrediction {
  MaskVolume labels;
  // Per slice; empty when the model has no fusion block.
  std::vector<double> w_ecg;
  std::vector<double> mean_gamma;
  std::vector<double> mean_beta;
  // ECG attention maps, (12, 12) and (12, T'); empty without the ECG path.
  Tensor cross_lead_attention;
  Tensor temporal_attention;
};
SamplePrediction predict_sample(const TaffModel& model, const PairedSample& sample);

// Copies parameter values between models (matched by name). Throws when a name or shape is missing.
void copy_parameters(const nn::ParameterList& from, nn::ParameterList& to, const std::string& prefix = "");

}  // namespace taff
