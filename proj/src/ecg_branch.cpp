#include "taffseg/ecg_branch.hpp"

#include <cmath>

#include "taffseg/errors.hpp"

namespace taff::ecg {

using ad::Var;
using nlohmann::json;

void EcgConfig::validate() const {
  if (samples < 64) throw ConfigError("ECG samples must be >= 64, got " + std::to_string(samples));
  if (conv_stages < 1 || channels < 1 || latent < 1 || decoder_hidden < 1)
    throw ConfigError("ECG stage, channel, latent and decoder sizes must be positive");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("ECG kernel must be odd and positive");
}

int EcgConfig::pooled_length() const {
  int t = samples;
  for (int s = 0; s < conv_stages; ++s) t = (t + 1) / 2;
  return t;
}

void to_json(json& j, const EcgConfig& c) {
  j = json{{"samples", c.samples},
           {"conv_stages", c.conv_stages},
           {"channels", c.channels},
           {"kernel", c.kernel},
           {"latent", c.latent},
           {"decoder_hidden", c.decoder_hidden},
           {"uniform_attention_init", c.uniform_attention_init},
           {"zero_init_decoder_output", c.zero_init_decoder_output},
           {"leaky_slope", c.leaky_slope}};
}

void from_json(const json& j, EcgConfig& c) {
  c.samples = j.at("samples");
  c.conv_stages = j.at("conv_stages");
  c.channels = j.at("channels");
  c.kernel = j.at("kernel");
  c.latent = j.at("latent");
  c.decoder_hidden = j.at("decoder_hidden");
  c.uniform_attention_init = j.at("uniform_attention_init");
  c.zero_init_decoder_output = j.at("zero_init_decoder_output");
  c.leaky_slope = j.at("leaky_slope");
}

EcgAutoencoder::EcgAutoencoder(const EcgConfig& cfg, nn::ParameterList& params, Rng& rng, const std::string& prefix)
    : cfg_(cfg) {
  cfg_.validate();
  const int E = cfg_.channels;
  const ad::Conv2dOptions opt{1, 2, 0, cfg_.kernel / 2};
  for (int s = 0; s < cfg_.conv_stages; ++s)
    convs_.emplace_back(params, prefix + ".conv" + std::to_string(s), s == 0 ? 1 : E, E, 1, cfg_.kernel, rng, opt);
  temporal_score_ = nn::Linear(params, prefix + ".temporal_score", E, 1, rng);
  Tensor emb({kNumLeads, E});
  for (auto& v : emb.values()) v = 0.1 * rng.normal();
  lead_embedding_ = params.add(prefix + ".lead_embedding", std::move(emb));
  query_ = nn::Linear(params, prefix + ".query", E, E, rng, false,
                      cfg_.uniform_attention_init ? nn::Init::zeros : nn::Init::kaiming);
  key_ = nn::Linear(params, prefix + ".key", E, E, rng, false);
  value_ = nn::Linear(params, prefix + ".value", E, E, rng, false);
  to_latent_ = nn::Linear(params, prefix + ".to_latent", kNumLeads * E, cfg_.latent, rng);
  dec_hidden_ = nn::Linear(params, prefix + ".dec_hidden", cfg_.latent, cfg_.decoder_hidden, rng);
  dec_out_ = nn::Linear(params, prefix + ".dec_out", cfg_.decoder_hidden, kNumLeads * cfg_.samples, rng, true,
                        cfg_.zero_init_decoder_output ? nn::Init::zeros : nn::Init::kaiming);
}

EcgLatent EcgAutoencoder::encode(const Var& waveform) const {
  const Tensor& x = waveform.value();
  if (x.rank() != 3 || x.dim(1) != kNumLeads)
    throw ShapeError("ECG input must be (B, 12, T), got " + shape_str(x.shape()));
  if (x.dim(2) != cfg_.samples)
    throw ShapeError("ECG length " + std::to_string(x.dim(2)) + " does not match configured " +
                     std::to_string(cfg_.samples));
  if (!x.all_finite()) throw DataError("ECG input contains non-finite values");
  const int B = x.dim(0), E = cfg_.channels, L = kNumLeads;

  // Leads are folded into the batch so the convolution stack is shared.
  Var h = ad::reshape(waveform, {B * L, 1, 1, cfg_.samples});
  for (const auto& conv : convs_) h = ad::leaky_relu(conv(h), cfg_.leaky_slope);
  const int Tp = h.dim(3);
  h = ad::reshape(h, {B * L, E, Tp});

  // Temporal attention pooling per lead.
  Var scores = ad::reshape(ad::transpose_last2(h), {B * L * Tp, E});
  scores = ad::reshape(temporal_score_(scores), {B * L, 1, Tp});
  Var alpha = ad::softmax(scores, 2);
  Var pooled = ad::bmm(h, ad::transpose_last2(alpha));  // (B*L, E, 1)
  pooled = ad::reshape(pooled, {B, L, E});
  pooled = ad::add(pooled, ad::expand(ad::reshape(lead_embedding_, {1, L, E}), {B, L, E}));

  // Cross-lead attention with residual.
  Var flat = ad::reshape(pooled, {B * L, E});
  Var q = ad::reshape(query_(flat), {B, L, E});
  Var k = ad::reshape(key_(flat), {B, L, E});
  Var v = ad::reshape(value_(flat), {B, L, E});
  Var att = ad::softmax(ad::scale(ad::bmm(q, ad::transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(E))), 2);
  Var mixed = ad::add(pooled, ad::bmm(att, v));

  EcgLatent out;
  out.z = to_latent_(ad::reshape(mixed, {B, L * E}));
  out.cross_lead_attention = att.value();
  out.temporal_attention = alpha.value().reshaped({B, L, Tp});
  return out;
}

Var EcgAutoencoder::decode(const Var& z) const {
  if (z.value().rank() != 2 || z.dim(1) != cfg_.latent)
    throw ShapeError("ECG latent must be (B, " + std::to_string(cfg_.latent) + "), got " + shape_str(z.shape()));
  const int B = z.dim(0);
  Var h = ad::leaky_relu(dec_hidden_(z), cfg_.leaky_slope);
  return ad::reshape(dec_out_(h), {B, kNumLeads, cfg_.samples});
}

Tensor stack_waveforms(const std::vector<const EcgRecord*>& records) {
  if (records.empty()) throw InputError("no ECG records to stack");
  const int T = records.front()->samples();
  Tensor out({static_cast<int>(records.size()), kNumLeads, T});
  for (std::size_t b = 0; b < records.size(); ++b) {
    const auto& w = records[b]->waveform;
    if (w.rank() != 2 || w.dim(0) != kNumLeads || w.dim(1) != T)
      throw ShapeError("ECG records in a batch must share shape (12, " + std::to_string(T) + ")");
    std::copy(w.storage().begin(), w.storage().end(), out.data() + b * w.size());
  }
  return out;
}

}  // namespace taff::ecg
