#include "taffseg/model.hpp"

#include <algorithm>

#include "taffseg/errors.hpp"
#include "taffseg/random.hpp"

namespace taff {

using ad::Var;
using nlohmann::json;

void ModelConfig::validate() const {
  unet.validate();
  ecg.validate();
  if (gate_hidden < 1 || film_hidden < 1) throw ConfigError("gate_hidden and film_hidden must be positive");
  if (use_time && !use_ecg) throw ConfigError("time conditioning requires the ECG path");
}

fusion::FusionConfig ModelConfig::fusion() const {
  fusion::FusionConfig f;
  f.channels = unet.channels_at(unet.tap_depth);
  f.latent = ecg.latent;
  f.gate_hidden = gate_hidden;
  f.film_hidden = film_hidden;
  f.use_time = use_time;
  f.leaky_slope = unet.leaky_slope;
  return f;
}

std::string ModelConfig::variant_name() const {
  if (use_prior && use_ecg && use_time) return "multimodal";
  if (use_prior && use_ecg) return "no_time";
  if (use_prior) return "prior_only";
  if (!use_ecg) return "baseline";
  return "custom";
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"unet", c.unet},           {"ecg", c.ecg},           {"gate_hidden", c.gate_hidden},
           {"film_hidden", c.film_hidden}, {"use_prior", c.use_prior}, {"use_ecg", c.use_ecg},
           {"use_time", c.use_time}};
}

void from_json(const json& j, ModelConfig& c) {
  c.unet = j.at("unet").get<image::UNetConfig>();
  c.ecg = j.at("ecg").get<ecg::EcgConfig>();
  c.gate_hidden = j.at("gate_hidden");
  c.film_hidden = j.at("film_hidden");
  c.use_prior = j.at("use_prior");
  c.use_ecg = j.at("use_ecg");
  c.use_time = j.at("use_time");
}

TaffModel::TaffModel(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  // Separate streams so toggling one branch leaves the others' initial weights unchanged.
  Rng image_rng(mix_seed(seed, 1));
  Rng ecg_rng(mix_seed(seed, 2));
  Rng fusion_rng(mix_seed(seed, 3));
  unet_ = image::UNet(cfg_.unet, params_, image_rng);
  if (cfg_.use_ecg) {
    ecg_ = ecg::EcgAutoencoder(cfg_.ecg, params_, ecg_rng);
    fusion_ = fusion::TaffFusion(cfg_.fusion(), params_, fusion_rng);
  }
}

ForwardOutput TaffModel::forward(const SliceBatch& batch) const {
  ForwardOutput out;
  const Var x = ad::constant(batch.images);
  if (!cfg_.use_ecg) {
    // Fusion bypassed: identical to the residual path with gamma = -1, beta = 0.
    out.logits = unet_.forward(x);
    return out;
  }
  const auto mid = unet_.encode_to_mid(x);
  out.ecg_input = ad::constant(batch.ecg);
  out.latent = ecg_.encode(out.ecg_input);
  const Var t = fusion::time_column(batch.t_norm);
  out.fusion = fusion_.fuse(mid.f, out.latent->z, t);
  out.logits = unet_.decode_segment(out.fusion->f_fused, mid.skips);
  out.ecg_recon = ecg_.decode(out.latent->z);
  return out;
}

std::vector<SliceRef> slice_refs(const std::vector<PairedSample>& samples, const std::vector<int>& sample_indices) {
  std::vector<SliceRef> refs;
  for (int i : sample_indices)
    for (int s = 0; s < samples.at(i).slices(); ++s) refs.push_back({i, s});
  return refs;
}

namespace {

template <typename Lookup>
SliceBatch build_batch(Lookup sample_at, const std::vector<SliceRef>& refs, bool use_prior) {
  if (refs.empty()) throw InputError("empty batch");
  const auto& first = sample_at(refs.front().sample);
  const int H = first.mri.height, W = first.mri.width, T = first.ecg.samples();
  const int B = static_cast<int>(refs.size());
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  SliceBatch b;
  b.images = Tensor({B, image::kInputChannels, H, W}, 0.0);
  b.labels.resize(B * plane);
  b.ecg = Tensor({B, kNumLeads, T});
  b.refs = refs;
  for (int k = 0; k < B; ++k) {
    const auto& s = sample_at(refs[k].sample);
    const int sl = refs[k].slice;
    if (s.mri.height != H || s.mri.width != W || s.ecg.samples() != T)
      throw ShapeError("samples in a batch must share H, W and ECG length");
    double* img = b.images.data() + static_cast<std::size_t>(k) * image::kInputChannels * plane;
    const auto mri = s.mri.slice(sl);
    std::copy(mri.begin(), mri.end(), img);
    if (use_prior) {
      const auto seg = s.prior.segment_map.slice(sl);
      for (std::size_t i = 0; i < plane; ++i)
        if (seg[i]) img[seg[i] * plane + i] = 1.0;
    }
    const auto lab = s.labels.labels.slice(sl);
    std::copy(lab.begin(), lab.end(), b.labels.begin() + k * plane);
    std::copy(s.ecg.waveform.storage().begin(), s.ecg.waveform.storage().end(),
              b.ecg.data() + static_cast<std::size_t>(k) * kNumLeads * T);
    b.t_norm.push_back(s.t_norm);
  }
  return b;
}

}  // namespace

SliceBatch make_batch(const std::vector<PairedSample>& samples, const std::vector<SliceRef>& refs, bool use_prior) {
  return build_batch([&](int i) -> const PairedSample& { return samples.at(i); }, refs, use_prior);
}

SamplePrediction predict_sample(const TaffModel& model, const PairedSample& sample) {
  ad::NoGradGuard no_grad;
  std::vector<SliceRef> refs;
  for (int s = 0; s < sample.slices(); ++s) refs.push_back({0, s});
  const SliceBatch batch =
      build_batch([&](int) -> const PairedSample& { return sample; }, refs, model.config().use_prior);
  const ForwardOutput out = model.forward(batch);

  SamplePrediction p;
  const Tensor& logits = out.logits.value();
  const int B = logits.dim(0), C = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const std::size_t plane = static_cast<std::size_t>(H) * W;
  p.labels = MaskVolume(B, H, W);
  for (int b = 0; b < B; ++b)
    for (std::size_t i = 0; i < plane; ++i) {
      int best = 0;
      double best_v = logits[static_cast<std::size_t>(b) * C * plane + i];
      for (int c = 1; c < C; ++c) {
        const double v = logits[(static_cast<std::size_t>(b) * C + c) * plane + i];
        if (v > best_v) best = c, best_v = v;
      }
      p.labels.data[b * plane + i] = static_cast<std::uint8_t>(best);
    }
  if (out.fusion) {
    const Tensor& w = out.fusion->w.value();
    for (int b = 0; b < B; ++b) p.w_ecg.push_back(w.at(b, 1));
    auto row_means = [&](const ad::Var& v, std::vector<double>& dst) {
      const int Cm = v.defined() ? v.dim(1) : 0;
      for (int b = 0; b < B; ++b) {
        double s = 0.0;
        for (int c = 0; c < Cm; ++c) s += v.value().at(b, c);
        dst.push_back(Cm ? s / Cm : 0.0);
      }
    };
    row_means(out.fusion->gamma, p.mean_gamma);
    row_means(out.fusion->beta, p.mean_beta);
  }
  if (out.latent) {
    // Every slice carries the same ECG, so the first row represents the sample.
    const Tensor& a = out.latent->cross_lead_attention;
    const Tensor& t = out.latent->temporal_attention;
    p.cross_lead_attention = Tensor({kNumLeads, kNumLeads},
                                    std::vector<double>(a.data(), a.data() + kNumLeads * kNumLeads));
    const int Tp = t.dim(2);
    p.temporal_attention = Tensor({kNumLeads, Tp}, std::vector<double>(t.data(), t.data() + kNumLeads * Tp));
  }
  return p;
}

void copy_parameters(const nn::ParameterList& from, nn::ParameterList& to, const std::string& prefix) {
  for (auto& dst : to.items()) {
    if (dst.name.rfind(prefix, 0) != 0) continue;
    const auto it = std::find_if(from.items().begin(), from.items().end(),
                                 [&](const nn::Parameter& p) { return p.name == dst.name; });
    if (it == from.items().end()) throw ConfigError("source has no parameter " + dst.name);
    if (it->var.shape() != dst.var.shape()) throw ShapeError("shape mismatch for parameter " + dst.name);
    auto v = dst.var;
    v.mutable_value() = it->var.value();
  }
}

}  // namespace taff
