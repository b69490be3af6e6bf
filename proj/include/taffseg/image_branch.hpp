#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "taffseg/autodiff.hpp"
#include "taffseg/nn.hpp"

// 2D U-Net over the MRI slice plus the 17 prior channels, split at a
// mid-level tap so features can be fused before the deeper stages run.
namespace taff::image {

inline constexpr int kInputChannels = 18;

struct UNetConfig {
  int base_width = 16;
  // Number of down-sampling stages.
  int depth = 4;
  // Encoder level whose output is handed to the fusion block.
  int tap_depth = 2;
  int classes = 4;
  double leaky_slope = 0.01;

  void validate() const;
  int channels_at(int level) const { return base_width << level; }
};

void to_json(nlohmann::json& j, const UNetConfig& c);
void from_json(const nlohmann::json& j, UNetConfig& c);

struct MidFeatures {
  // Tap-level features before their activation, (B, C, H/2^d, W/2^d).
  ad::Var f;
  // Activated encoder outputs for levels 0 .. tap_depth-1.
  std::vector<ad::Var> skips;
};

class UNet {
 public:
  UNet() = default;
  UNet(const UNetConfig& cfg, nn::ParameterList& params, Rng& rng, const std::string& prefix = "image");

  MidFeatures encode_to_mid(const ad::Var& x) const;
  // Runs the stages below the tap and the full decoder. Returns (B, classes, H, W) logits.
  ad::Var decode_segment(const ad::Var& fused, const std::vector<ad::Var>& skips) const;
  // Single pass without a fusion point.
  ad::Var forward(const ad::Var& x) const;

  const UNetConfig& config() const { return cfg_; }
  int tap_channels() const { return cfg_.channels_at(cfg_.tap_depth); }

 private:
  struct Block {
    nn::Conv2d conv1;
    nn::InstanceNorm norm1;
    nn::Conv2d conv2;
    nn::InstanceNorm norm2;
  };
  struct UpBlock {
    nn::ConvTranspose2x2 up;
    Block block;
  };

  Block make_block(nn::ParameterList& params, const std::string& name, int in, int out, int first_stride, Rng& rng);
  // conv-norm-act, conv-norm (no final activation).
  ad::Var block_pre_activation(const Block& b, const ad::Var& x) const;
  ad::Var act(const ad::Var& x) const { return ad::leaky_relu(x, cfg_.leaky_slope); }
  void check_input(const ad::Var& x) const;
  ad::Var run_decoder(ad::Var bottom, const std::vector<ad::Var>& skips) const;

  UNetConfig cfg_;
  std::vector<Block> encoder_;  // depth + 1 levels
  std::vector<UpBlock> decoder_;  // index = target level
  nn::Conv2d head_;
};

}  // namespace taff::image
