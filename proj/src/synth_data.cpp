#include "taffseg/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "taffseg/random.hpp"

namespace taff::synth {

namespace {

using atlas::Zone;

// Lead indices: I II III aVR aVL aVF V1 V2 V3 V4 V5 V6.
enum Territory { anterior, septal, inferior, lateral };

const std::array<std::vector<int>, 4>& territory_leads() {
  static const std::array<std::vector<int>, 4> t{{
      {6, 7, 8, 9},    // anterior: V1-V4
      {6, 7},          // septal: V1-V2
      {1, 2, 5},       // inferior: II, III, aVF
      {0, 4, 10, 11},  // lateral: I, aVL, V5, V6
  }};
  return t;
}

std::vector<Territory> segment_territories(int segment) {
  // Ring position within basal/mid: anterior, anteroseptal, inferoseptal,
  // inferior, inferolateral, anterolateral.
  static const std::array<std::vector<Territory>, 6> ring6{{
      {anterior},
      {anterior, septal},
      {inferior, septal},
      {inferior},
      {inferior, lateral},
      {anterior, lateral},
  }};
  static const std::array<std::vector<Territory>, 4> ring4{{{anterior}, {septal}, {inferior}, {lateral}}};
  if (segment >= 1 && segment <= 12) return ring6[(segment - 1) % 6];
  if (segment >= 13 && segment <= 16) return ring4[segment - 13];
  if (segment == 17) return {anterior, lateral};
  throw SpecError("AHA segment id out of range: " + std::to_string(segment));
}

// (Q-wave weight, ST-shift weight) by longitudinal zone.
std::pair<double, double> zone_mix(Zone z) {
  switch (z) {
    case Zone::basal: return {0.5, 1.0};
    case Zone::mid: return {1.0, 0.5};
    case Zone::apical: return {1.0, -0.6};
    case Zone::apex: return {0.7, 0.8};
    case Zone::none: break;
  }
  return {0.0, 0.0};
}

struct LeadTemplate {
  double p, q, r, s, t;
};

// Approximate median-beat amplitudes (mV) for a normal 12-lead ECG.
const std::array<LeadTemplate, kNumLeads>& lead_templates() {
  static const std::array<LeadTemplate, kNumLeads> t{{
      {0.10, 0.05, 0.80, 0.10, 0.25},    // I
      {0.15, 0.05, 1.20, 0.20, 0.35},    // II
      {0.05, 0.05, 0.50, 0.20, 0.10},    // III
      {-0.10, 0.00, -0.90, 0.10, -0.30}, // aVR
      {0.05, 0.05, 0.40, 0.20, 0.10},    // aVL
      {0.10, 0.05, 0.80, 0.20, 0.20},    // aVF
      {0.05, 0.00, 0.30, 1.00, 0.10},    // V1
      {0.05, 0.00, 0.60, 1.40, 0.50},    // V2
      {0.05, 0.05, 0.90, 0.90, 0.50},    // V3
      {0.05, 0.05, 1.40, 0.50, 0.40},    // V4
      {0.05, 0.05, 1.30, 0.30, 0.35},    // V5
      {0.05, 0.05, 1.00, 0.20, 0.30},    // V6
  }};
  return t;
}

double gauss(double u, double mu, double sd) { return std::exp(-0.5 * (u - mu) * (u - mu) / (sd * sd)); }

// Smooth plateau over [a, b] with logistic edges.
double plateau(double u, double a, double b, double edge) {
  return 1.0 / (1.0 + std::exp(-(u - a) / edge)) - 1.0 / (1.0 + std::exp(-(u - b) / edge));
}

constexpr double kQDeepening = 0.6;
constexpr double kStShift = 0.25;

struct SliceGeometry {
  double outer_mm;
  double inner_mm;  // 0 on apex slices (no blood pool)
};

std::vector<SliceGeometry> slice_geometry(const PhantomSpec& spec) {
  std::vector<SliceGeometry> g(spec.slices);
  const int na = spec.slices - spec.apex_slices;
  for (int s = 0; s < spec.slices; ++s) {
    if (s < na) {
      const double f = na > 1 ? 1.0 - (1.0 - spec.apical_taper) * s / (na - 1) : 1.0;
      g[s] = {spec.outer_radius_mm * f, spec.inner_radius_mm * f};
    } else {
      g[s] = {spec.outer_radius_mm * spec.apical_taper * 0.7, 0.0};
    }
  }
  return g;
}

EcgRecord make_ecg(const SegmentState& state, int samples, double t_norm, double base_noise, double noise_gain,
                   Rng& rng) {
  EcgRecord ecg;
  const double amp = rng.uniform(0.85, 1.15);
  ecg.waveform = ecg_waveform(state, samples, amp);
  const double sd = base_noise + noise_gain * t_norm;
  for (auto& v : ecg.waveform.values()) v += sd * rng.normal();
  return ecg;
}

}  // namespace

void PhantomSpec::validate() const {
  if (slices < 4 || height < 16 || width < 16) throw SpecError("phantom needs >= 4 slices and >= 16x16 pixels");
  if (!(inner_radius_mm > 0.0 && inner_radius_mm < outer_radius_mm))
    throw SpecError("phantom radii must satisfy 0 < inner < outer");
  if (!(pixel_mm > 0.0 && slice_mm > 0.0)) throw SpecError("phantom spacing must be positive");
  if (apex_slices < 0 || slices - apex_slices < 3) throw SpecError("phantom needs >= 3 non-apex slices");
  if (!(apical_taper > 0.0 && apical_taper <= 1.0)) throw SpecError("apical_taper must lie in (0, 1]");
  if (!(transmurality > 0.0 && transmurality <= 1.0)) throw SpecError("transmurality must lie in (0, 1]");
  for (int s : scar_segments)
    if (s < 1 || s > 17) throw SpecError("scar segment " + std::to_string(s) + " outside 1..17");
  if (noise_sd < 0.0 || ecg_base_noise < 0.0) throw SpecError("noise levels must be nonnegative");
  if (ecg_samples < 64) throw SpecError("ECG needs at least 64 samples");
  const double half = std::min(height, width) / 2.0 - 1.0;
  if (outer_radius_mm / pixel_mm + std::max(std::abs(center_offset_row), std::abs(center_offset_col)) > half)
    throw SpecError("ventricle does not fit in the image");
}

void StalenessModel::validate() const {
  if (growth_rate < 0.0 || ecg_noise_gain < 0.0) throw SpecError("staleness rates must be nonnegative");
}

SegmentState scar_state_at_ecg(const PhantomSpec& spec, const StalenessModel& staleness, double t_norm) {
  SegmentState st{};
  const double tau = std::max(0.0, spec.transmurality - staleness.growth_rate * t_norm);
  for (int s : spec.scar_segments) st[s - 1] = tau;
  return st;
}

std::array<double, kNumLeads> segment_lead_weights(int segment) {
  std::array<double, kNumLeads> w{};
  for (Territory t : segment_territories(segment))
    for (int l : territory_leads()[t]) w[l] += 1.0;
  const double mx = *std::max_element(w.begin(), w.end());
  for (auto& v : w) v /= mx;
  return w;
}

Tensor ecg_waveform(const SegmentState& state, int samples, double amplitude_scale) {
  std::array<double, kNumLeads> q{}, st{};
  for (int seg = 1; seg <= 17; ++seg) {
    const double e = state[seg - 1];
    if (e == 0.0) continue;
    const auto [wq, wst] = zone_mix(atlas::zone_of_segment(seg));
    const auto lw = segment_lead_weights(seg);
    for (int l = 0; l < kNumLeads; ++l) {
      q[l] += e * lw[l] * wq;
      st[l] += e * lw[l] * wst;
    }
  }
  Tensor w({kNumLeads, samples});
  const auto& tpl = lead_templates();
  for (int l = 0; l < kNumLeads; ++l) {
    const auto& a = tpl[l];
    for (int t = 0; t < samples; ++t) {
      const double u = static_cast<double>(t) / samples;
      double v = a.p * gauss(u, 0.18, 0.025) - a.q * gauss(u, 0.32, 0.008) + a.r * gauss(u, 0.35, 0.010) -
                 a.s * gauss(u, 0.38, 0.010) + a.t * gauss(u, 0.58, 0.045);
      v -= kQDeepening * q[l] * gauss(u, 0.32, 0.012);
      v += kStShift * st[l] * plateau(u, 0.40, 0.50, 0.01);
      w.at(l, t) = amplitude_scale * v;
    }
  }
  return w;
}

double deformation_magnitude(const SegmentState& state, int samples) {
  const Tensor a = ecg_waveform(state, samples);
  const Tensor b = ecg_waveform(SegmentState{}, samples);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

GeneratedSample synth_phantom_pair(const PhantomSpec& spec, const StalenessModel& staleness, double t_interval_days,
                                   std::uint64_t seed) {
  spec.validate();
  staleness.validate();
  if (!(t_interval_days >= 0.0 && t_interval_days <= kAdmissionWindowDays))
    throw InputError("t_interval_days must lie in [0, 90], got " + std::to_string(t_interval_days));
  Rng rng(seed);
  const int S = spec.slices, H = spec.height, W = spec.width;
  const double cr = (H - 1) / 2.0 + spec.center_offset_row;
  const double cc = (W - 1) / 2.0 + spec.center_offset_col;
  const auto geom = slice_geometry(spec);

  LabelMask labels;
  labels.labels = MaskVolume(S, H, W, background);
  labels.spacing = {spec.pixel_mm, spec.pixel_mm, spec.slice_mm};
  std::vector<double> dist(static_cast<std::size_t>(H) * W);
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < W; ++c) dist[static_cast<std::size_t>(r) * W + c] = std::hypot(r - cr, c - cc) * spec.pixel_mm;

  for (int s = 0; s < S; ++s) {
    auto sl = labels.labels.slice(s);
    for (std::size_t i = 0; i < sl.size(); ++i) {
      if (dist[i] < geom[s].inner_mm)
        sl[i] = blood_pool;
      else if (dist[i] < geom[s].outer_mm)
        sl[i] = myocardium;
    }
  }

  const MaskVolume myo = labels.myocardium_region();
  const MaskVolume bp = labels.class_mask(blood_pool);
  const auto zones = atlas::longitudinal_zones(myo, bp, {});
  for (int seg : spec.scar_segments) {
    const Zone want = atlas::zone_of_segment(seg);
    if (std::find(zones.begin(), zones.end(), want) == zones.end())
      throw SpecError("scar segment " + std::to_string(seg) + " lies in a zone the phantom does not have");
  }
  auto scarred = [&](int seg) {
    return std::find(spec.scar_segments.begin(), spec.scar_segments.end(), seg) != spec.scar_segments.end();
  };
  for (int s = 0; s < S; ++s) {
    const Zone z = zones[s];
    if (z == Zone::none) continue;
    auto sl = labels.labels.slice(s);
    // Area-weighted transmurality: the scar covers fraction tau of the wall area.
    const double ri = geom[s].inner_mm, ro = geom[s].outer_mm;
    const double scar_edge = std::sqrt(ri * ri + spec.transmurality * (ro * ro - ri * ri));
    if (z == Zone::apex) {
      if (!scarred(17)) continue;
      for (std::size_t i = 0; i < sl.size(); ++i)
        if (sl[i] == myocardium && dist[i] < scar_edge) sl[i] = scar;
      continue;
    }
    const int n = z == Zone::apical ? 4 : 6;
    const int first = z == Zone::basal ? 1 : (z == Zone::mid ? 7 : 13);
    const auto sectors = atlas::angular_sectors(myo.slice(s), H, W, {cr, cc}, n, 0.0);
    for (std::size_t i = 0; i < sl.size(); ++i) {
      if (sectors[i] < 0 || !scarred(first + sectors[i])) continue;
      if (dist[i] < scar_edge) sl[i] = scar;
    }
  }

  ImageVolume img(S, H, W);
  for (std::size_t i = 0; i < img.size(); ++i) img.data[i] = spec.intensity[labels.labels.data[i]];
  // Artifacts: blobs centred on healthy myocardium.
  std::vector<std::size_t> healthy;
  for (std::size_t i = 0; i < labels.labels.size(); ++i)
    if (labels.labels.data[i] == myocardium) healthy.push_back(i);
  const double sig = spec.artifact_radius_mm / spec.pixel_mm;
  for (int a = 0; a < spec.artifacts && !healthy.empty(); ++a) {
    const std::size_t at = healthy[rng.below(healthy.size())];
    const int s = static_cast<int>(at / labels.labels.plane());
    const int r0 = static_cast<int>((at % labels.labels.plane()) / W);
    const int c0 = static_cast<int>(at % W);
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        const double d2 = (r - r0) * (r - r0) + (c - c0) * (c - c0);
        img(s, r, c) += spec.artifact_intensity * std::exp(-0.5 * d2 / (sig * sig));
      }
  }
  for (auto& v : img.data) v += spec.noise_sd * rng.normal();
  normalize_intensity(img);

  GeneratedSample out;
  PairedSample& p = out.sample;
  p.mri = std::move(img);
  p.labels = std::move(labels);
  p.t_interval_days = std::round(t_interval_days);
  p.t_norm = normalize_interval(p.t_interval_days);
  const Date epoch = parse_date("2022-01-01");
  p.mri_acquired_at = epoch + std::chrono::days(static_cast<int>(rng.below(730)));
  const SegmentState state = scar_state_at_ecg(spec, staleness, p.t_norm);
  p.ecg = make_ecg(state, spec.ecg_samples, p.t_norm, spec.ecg_base_noise, staleness.ecg_noise_gain, rng);
  p.ecg.acquired_at = p.mri_acquired_at - std::chrono::days(static_cast<int>(p.t_interval_days));
  p.prior = atlas::build_aha17(p.labels.myocardium_region(), p.labels.class_mask(blood_pool), {});
  out.scar_segments = spec.scar_segments;
  out.transmurality = spec.transmurality;
  return out;
}

const std::array<IntervalBin, 7>& interval_bins() {
  static const std::array<IntervalBin, 7> bins{{
      {0, 3, false},
      {3, 7, false},
      {7, 14, false},
      {14, 21, false},
      {21, 30, false},
      {30, 60, false},
      {60, 90, true},
  }};
  return bins;
}

int interval_bin_of(double days) {
  if (!(days >= 0.0)) throw InputError("negative interval " + std::to_string(days));
  const auto& bins = interval_bins();
  for (int b = 0; b < 6; ++b)
    if (days < bins[b].hi) return b;
  return 6;
}

namespace {

PhantomSpec randomized_spec(const DatasetRanges& ranges, Rng& rng) {
  PhantomSpec spec = ranges.base;
  spec.center_offset_row = rng.uniform_int(-ranges.max_center_offset, ranges.max_center_offset);
  spec.center_offset_col = rng.uniform_int(-ranges.max_center_offset, ranges.max_center_offset);
  const double f = rng.uniform(1.0 - ranges.radius_jitter, 1.0 + ranges.radius_jitter);
  spec.outer_radius_mm *= std::min(f, 1.0);
  spec.inner_radius_mm *= f;
  const int primary = rng.uniform_int(1, 16);
  spec.scar_segments = {primary};
  if (rng.uniform() < ranges.second_segment_probability) {
    const int ring = primary <= 12 ? 6 : 4;
    const int first = primary <= 6 ? 1 : (primary <= 12 ? 7 : 13);
    const int step = rng.uniform() < 0.5 ? 1 : ring - 1;
    spec.scar_segments.push_back(first + (primary - first + step) % ring);
  }
  spec.transmurality = rng.uniform(ranges.transmurality_min, ranges.transmurality_max);
  spec.intensity[scar] = rng.uniform(ranges.scar_intensity_min, ranges.scar_intensity_max);
  spec.artifacts = rng.uniform_int(0, ranges.artifacts_max);
  return spec;
}

}  // namespace

Dataset generate_dataset(int n, std::uint64_t seed, const DatasetRanges& ranges, const std::filesystem::path& out_dir) {
  if (n < 10) throw ConfigError("generate_dataset needs n >= 10, got " + std::to_string(n));
  Dataset ds;
  std::vector<std::string> ids;
  const auto& bins = interval_bins();
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i), 0x5eed));
    const PhantomSpec spec = randomized_spec(ranges, rng);
    const auto& bin = bins[i % 7];
    const int hi = bin.closed_right ? static_cast<int>(bin.hi) : static_cast<int>(bin.hi) - 1;
    const int days = rng.uniform_int(static_cast<int>(bin.lo), hi);
    GeneratedSample g = synth_phantom_pair(spec, ranges.staleness, days, rng.next());
    char id[16];
    std::snprintf(id, sizeof(id), "S%04d", i);
    g.sample.id = id;
    ids.push_back(id);
    if (!out_dir.empty()) {
      nlohmann::json extra = {{"scar_segments", g.scar_segments}, {"transmurality", g.transmurality}};
      write_sample(out_dir / id, g.sample, extra);
    }
    ds.samples.push_back(std::move(g.sample));
  }
  ds.manifest = split_dataset(ids, seed);
  if (!out_dir.empty()) write_manifest(out_dir / "manifest.json", ds.manifest);
  return ds;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = read_manifest(dir / "manifest.json");
  for (const auto& id : ds.manifest.ids) ds.samples.push_back(read_sample(dir / id));
  return ds;
}

std::vector<EcgRecord> generate_ecg_corpus(int n, std::uint64_t seed, const DatasetRanges& ranges) {
  if (n <= 0) throw ConfigError("ECG corpus size must be positive");
  std::vector<EcgRecord> out;
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, static_cast<std::uint64_t>(i), 0xecc));
    const PhantomSpec spec = randomized_spec(ranges, rng);
    const double t_norm = rng.uniform();
    const SegmentState st = scar_state_at_ecg(spec, ranges.staleness, t_norm);
    out.push_back(make_ecg(st, spec.ecg_samples, t_norm, spec.ecg_base_noise, ranges.staleness.ecg_noise_gain, rng));
  }
  return out;
}

}  // namespace taff::synth
