#include "taffseg/image_branch.hpp"

#include "taffseg/errors.hpp"

namespace taff::image {

using ad::Var;
using nlohmann::json;

void UNetConfig::validate() const {
  if (base_width < 1) throw ConfigError("base_width must be positive");
  if (depth < 1) throw ConfigError("U-Net depth must be >= 1");
  if (tap_depth < 0 || tap_depth > depth)
    throw ConfigError("tap_depth must lie in [0, depth], got " + std::to_string(tap_depth));
  if (classes < 2) throw ConfigError("need at least 2 classes");
}

void to_json(json& j, const UNetConfig& c) {
  j = json{{"base_width", c.base_width},
           {"depth", c.depth},
           {"tap_depth", c.tap_depth},
           {"classes", c.classes},
           {"leaky_slope", c.leaky_slope}};
}

void from_json(const json& j, UNetConfig& c) {
  c.base_width = j.at("base_width");
  c.depth = j.at("depth");
  c.tap_depth = j.at("tap_depth");
  c.classes = j.at("classes");
  c.leaky_slope = j.at("leaky_slope");
}

UNet::Block UNet::make_block(nn::ParameterList& params, const std::string& name, int in, int out, int first_stride,
                             Rng& rng) {
  Block b;
  b.conv1 = nn::Conv2d(params, name + ".conv1", in, out, 3, 3, rng, {first_stride, first_stride, 1, 1});
  b.norm1 = nn::InstanceNorm(params, name + ".norm1", out);
  b.conv2 = nn::Conv2d(params, name + ".conv2", out, out, 3, 3, rng, {1, 1, 1, 1});
  b.norm2 = nn::InstanceNorm(params, name + ".norm2", out);
  return b;
}

UNet::UNet(const UNetConfig& cfg, nn::ParameterList& params, Rng& rng, const std::string& prefix) : cfg_(cfg) {
  cfg_.validate();
  for (int l = 0; l <= cfg_.depth; ++l) {
    const int in = l == 0 ? kInputChannels : cfg_.channels_at(l - 1);
    encoder_.push_back(make_block(params, prefix + ".enc" + std::to_string(l), in, cfg_.channels_at(l), l == 0 ? 1 : 2, rng));
  }
  decoder_.resize(cfg_.depth);
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    const int c = cfg_.channels_at(l);
    const std::string name = prefix + ".dec" + std::to_string(l);
    decoder_[l].up = nn::ConvTranspose2x2(params, name + ".up", cfg_.channels_at(l + 1), c, rng);
    decoder_[l].block = make_block(params, name, 2 * c, c, 1, rng);
  }
  head_ = nn::Conv2d(params, prefix + ".head", cfg_.channels_at(0), cfg_.classes, 1, 1, rng, {});
}

Var UNet::block_pre_activation(const Block& b, const Var& x) const {
  return b.norm2(b.conv2(act(b.norm1(b.conv1(x)))));
}

void UNet::check_input(const Var& x) const {
  const auto& s = x.shape();
  if (s.size() != 4 || s[1] != kInputChannels)
    throw ShapeError("image input must be (B, 18, H, W), got " + shape_str(s));
  const int m = 1 << cfg_.depth;
  if (s[2] % m != 0 || s[3] % m != 0)
    throw ShapeError("H and W must be divisible by " + std::to_string(m) + "; pad the input, got " + shape_str(s));
}

MidFeatures UNet::encode_to_mid(const Var& x) const {
  check_input(x);
  MidFeatures out;
  Var h = x;
  for (int l = 0; l < cfg_.tap_depth; ++l) {
    h = act(block_pre_activation(encoder_[l], h));
    out.skips.push_back(h);
  }
  out.f = block_pre_activation(encoder_[cfg_.tap_depth], h);
  return out;
}

Var UNet::run_decoder(Var bottom, const std::vector<Var>& skips) const {
  Var h = std::move(bottom);
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    const auto& d = decoder_[l];
    const Var up = d.up(h);
    if (up.shape() != skips[l].shape())
      throw ShapeError("skip at level " + std::to_string(l) + " has shape " + shape_str(skips[l].shape()) +
                       ", expected " + shape_str(up.shape()));
    h = act(block_pre_activation(d.block, ad::concat({up, skips[l]}, 1)));
  }
  return head_(h);
}

Var UNet::decode_segment(const Var& fused, const std::vector<Var>& skips) const {
  if (static_cast<int>(skips.size()) != cfg_.tap_depth)
    throw ShapeError("expected " + std::to_string(cfg_.tap_depth) + " skip tensors, got " +
                     std::to_string(skips.size()));
  if (fused.value().rank() != 4 || fused.dim(1) != tap_channels())
    throw ShapeError("fused features must have " + std::to_string(tap_channels()) + " channels, got " +
                     shape_str(fused.shape()));
  std::vector<Var> all = skips;
  Var h = act(fused);
  all.push_back(h);
  for (int l = cfg_.tap_depth + 1; l <= cfg_.depth; ++l) {
    h = act(block_pre_activation(encoder_[l], h));
    all.push_back(h);
  }
  all.pop_back();
  return run_decoder(h, all);
}

Var UNet::forward(const Var& x) const {
  check_input(x);
  std::vector<Var> skips;
  Var h = x;
  for (int l = 0; l <= cfg_.depth; ++l) {
    h = act(block_pre_activation(encoder_[l], h));
    if (l < cfg_.depth) skips.push_back(h);
  }
  return run_decoder(h, skips);
}

}  // namespace taff::image
