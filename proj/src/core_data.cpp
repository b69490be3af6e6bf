#include "taffseg/core_data.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "taffseg/nifti.hpp"
#include "taffseg/random.hpp"

namespace taff {

namespace fs = std::filesystem;
using nlohmann::json;

Date parse_date(const std::string& iso) {
  int y = 0;
  unsigned m = 0, d = 0;
  char extra = 0;
  if (std::sscanf(iso.c_str(), "%d-%u-%u%c", &y, &m, &d, &extra) != 3)
    throw InputError("expected a YYYY-MM-DD date, got '" + iso + "'");
  const std::chrono::year_month_day ymd{std::chrono::year{y}, std::chrono::month{m}, std::chrono::day{d}};
  if (!ymd.ok()) throw InputError("invalid calendar date '" + iso + "'");
  return Date{ymd};
}

std::string format_date(Date d) {
  const std::chrono::year_month_day ymd{d};
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

const std::array<std::string, kNumLeads>& standard_lead_names() {
  static const std::array<std::string, kNumLeads> names{"I",  "II", "III", "aVR", "aVL", "aVF",
                                                         "V1", "V2", "V3",  "V4",  "V5",  "V6"};
  return names;
}

int lead_index(const std::string& name) {
  const auto& names = standard_lead_names();
  for (int i = 0; i < kNumLeads; ++i)
    if (names[i] == name) return i;
  throw InputError("unknown ECG lead name '" + name + "'");
}

void LabelMask::validate() const {
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels.data[i] > scar) {
      throw DataError("label value " + std::to_string(labels.data[i]) + " outside {0,1,2,3} at voxel " +
                      std::to_string(i));
    }
  }
  if (!spacing.valid()) throw DataError("label spacing must be positive");
}

MaskVolume LabelMask::class_mask(std::uint8_t cls) const {
  MaskVolume out(labels.slices, labels.height, labels.width, 0);
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = labels.data[i] == cls ? 1 : 0;
  return out;
}

MaskVolume LabelMask::myocardium_region() const {
  MaskVolume out(labels.slices, labels.height, labels.width, 0);
  for (std::size_t i = 0; i < out.size(); ++i)
    out.data[i] = (labels.data[i] == myocardium || labels.data[i] == scar) ? 1 : 0;
  return out;
}

std::size_t LabelMask::count(std::uint8_t cls) const {
  return static_cast<std::size_t>(std::count(labels.data.begin(), labels.data.end(), cls));
}

void EcgRecord::validate() const {
  if (waveform.rank() != 2 || waveform.dim(0) != kNumLeads)
    throw ShapeError("ECG waveform must be 12 x T, got " + shape_str(waveform.shape()));
  if (waveform.dim(1) < 64) throw ShapeError("ECG waveform needs at least 64 samples, got " + std::to_string(waveform.dim(1)));
  if (!waveform.all_finite()) throw DataError("ECG waveform contains non-finite values");
}

void PairedSample::validate() const {
  ecg.validate();
  labels.validate();
  if (!labels.labels.same_geometry(mri) || prior.slices != mri.slices || prior.height != mri.height ||
      prior.width != mri.width)
    throw ShapeError("sample " + id + ": mri, prior and labels must share slices x H x W");
  if (t_interval_days < 0.0) throw DataError("sample " + id + ": negative acquisition interval");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw InputError("unknown split '" + s + "'");
}

std::vector<std::string> DatasetManifest::ids_in(Split s) const {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (splits[i] == s) out.push_back(ids[i]);
  return out;
}

std::array<std::size_t, 3> DatasetManifest::sizes() const {
  std::array<std::size_t, 3> n{0, 0, 0};
  for (Split s : splits) ++n[static_cast<int>(s)];
  return n;
}

double normalize_interval(double days) {
  if (!(days >= 0.0)) throw InputError("acquisition interval must be nonnegative, got " + std::to_string(days));
  if (days > kAdmissionWindowDays) {
    spdlog::warn("acquisition interval {} days exceeds the {}-day window; clamping to 1", days, kAdmissionWindowDays);
    return 1.0;
  }
  return days / kAdmissionWindowDays;
}

DatasetManifest split_dataset(const std::vector<std::string>& ids, std::uint64_t seed) {
  const std::size_t n = ids.size();
  if (n < 10) throw ConfigError("need at least 10 samples for a 7:1:2 split, got " + std::to_string(n));
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const std::size_t n_train = 7 * n / 10;
  const std::size_t n_val = n / 10;
  DatasetManifest m;
  m.ids = ids;
  m.seed = seed;
  m.splits.assign(n, Split::test);
  for (std::size_t k = 0; k < n; ++k) {
    const Split s = k < n_train ? Split::train : (k < n_train + n_val ? Split::val : Split::test);
    m.splits[order[k]] = s;
  }
  return m;
}

Tensor one_hot_labels(std::span<const std::uint8_t> labels, int height, int width) {
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  if (labels.size() != plane) throw ShapeError("label slice size does not match H x W");
  Tensor out({kNumClasses, height, width}, 0.0);
  for (std::size_t i = 0; i < plane; ++i) {
    if (labels[i] >= kNumClasses)
      throw DataError("label value " + std::to_string(labels[i]) + " outside {0,1,2,3} at pixel " + std::to_string(i));
    out[labels[i] * plane + i] = 1.0;
  }
  return out;
}

Tensor one_hot_labels(const LabelMask& mask, int slice) {
  return one_hot_labels(mask.labels.slice(slice), mask.labels.height, mask.labels.width);
}

std::vector<std::uint8_t> argmax_labels(const Tensor& scores) {
  if (scores.rank() != 3) throw ShapeError("argmax_labels expects (C, H, W)");
  const int C = scores.dim(0);
  const std::size_t plane = static_cast<std::size_t>(scores.dim(1)) * scores.dim(2);
  std::vector<std::uint8_t> out(plane, 0);
  for (std::size_t i = 0; i < plane; ++i) {
    int best = 0;
    for (int c = 1; c < C; ++c)
      if (scores[c * plane + i] > scores[best * plane + i]) best = c;
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

void normalize_intensity(ImageVolume& volume, double clip_sd) {
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (double v : volume.data)
    if (v != 0.0) {
      sum += v;
      sq += v * v;
      ++n;
    }
  if (n == 0) return;
  const double mean = sum / static_cast<double>(n);
  const double var = std::max(sq / static_cast<double>(n) - mean * mean, 0.0);
  const double sd = std::sqrt(var) > 0.0 ? std::sqrt(var) : 1.0;
  for (double& v : volume.data) v = std::clamp((v - mean) / sd, -clip_sd, clip_sd);
}

namespace {

nifti::Image to_nifti(const std::vector<double>& values, int s, int h, int w, const Spacing& sp, nifti::DataType t) {
  nifti::Image img;
  img.dims = {w, h, s, 1};
  img.pixdim = {sp.col_mm, sp.row_mm, sp.slice_mm, 1.0};
  img.datatype = t;
  img.values = values;
  return img;
}

json read_json(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + p.string());
}

}  // namespace

void write_ecg_csv(const fs::path& path, const EcgRecord& ecg) {
  ecg.validate();
  std::ostringstream os;
  for (int l = 0; l < kNumLeads; ++l) os << (l ? "," : "") << ecg.lead_names[l];
  os << '\n';
  char buf[32];
  for (int t = 0; t < ecg.samples(); ++t) {
    for (int l = 0; l < kNumLeads; ++l) {
      std::snprintf(buf, sizeof(buf), "%.17g", ecg.waveform.at(l, t));
      os << (l ? "," : "") << buf;
    }
    os << '\n';
  }
  write_text(path, os.str());
}

Tensor read_ecg_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("empty ECG CSV " + path.string());
  std::array<int, kNumLeads> column_lead{};
  {
    std::stringstream ss(line);
    std::string name;
    int col = 0;
    while (std::getline(ss, name, ',')) {
      if (!name.empty() && name.back() == '\r') name.pop_back();
      if (col >= kNumLeads) throw DataError("ECG CSV has more than 12 columns: " + path.string());
      column_lead[col++] = lead_index(name);
    }
    if (col != kNumLeads) throw DataError("ECG CSV must have 12 lead columns: " + path.string());
  }
  std::vector<std::array<double, kNumLeads>> rows;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    std::array<double, kNumLeads> row{};
    std::stringstream ss(line);
    std::string cell;
    int col = 0;
    while (std::getline(ss, cell, ',')) {
      if (col >= kNumLeads) throw DataError("ECG CSV row has too many values: " + path.string());
      try {
        row[column_lead[col++]] = std::stod(cell);
      } catch (const std::exception&) {
        throw DataError("unparseable ECG value '" + cell + "' in " + path.string());
      }
    }
    if (col != kNumLeads) throw DataError("ECG CSV row has too few values: " + path.string());
    rows.push_back(row);
  }
  Tensor wave({kNumLeads, static_cast<int>(rows.size())});
  for (std::size_t t = 0; t < rows.size(); ++t)
    for (int l = 0; l < kNumLeads; ++l) wave.at(l, static_cast<int>(t)) = rows[t][l];
  return wave;
}

void write_sample(const fs::path& dir, const PairedSample& sample, const json& extra_meta) {
  sample.validate();
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const auto& lm = sample.labels;
  nifti::write(dir / "mri.nii", to_nifti(sample.mri.data, sample.mri.slices, sample.mri.height, sample.mri.width,
                                         lm.spacing, nifti::DataType::float64));
  std::vector<double> lab(lm.labels.data.begin(), lm.labels.data.end());
  nifti::write(dir / "labels.nii",
               to_nifti(lab, lm.labels.slices, lm.labels.height, lm.labels.width, lm.spacing, nifti::DataType::uint8));
  write_ecg_csv(dir / "ecg.csv", sample.ecg);
  json meta = {
      {"sample_id", sample.id},
      {"mri_acquired_at", format_date(sample.mri_acquired_at)},
      {"ecg_acquired_at", format_date(sample.ecg.acquired_at)},
      {"t_interval_days", sample.t_interval_days},
      {"spacing_mm", {{"row", lm.spacing.row_mm}, {"col", lm.spacing.col_mm}, {"slice", lm.spacing.slice_mm}}},
  };
  if (!extra_meta.empty()) meta["extra"] = extra_meta;
  write_text(dir / "meta.json", meta.dump(2) + "\n");
}

PairedSample read_sample(const fs::path& dir, const atlas::PartitionConfig& cfg) {
  const json meta = read_json(dir / "meta.json");
  PairedSample s;
  try {
    s.id = meta.at("sample_id").get<std::string>();
    s.mri_acquired_at = parse_date(meta.at("mri_acquired_at").get<std::string>());
    s.ecg.acquired_at = parse_date(meta.at("ecg_acquired_at").get<std::string>());
    const auto& sp = meta.at("spacing_mm");
    s.labels.spacing = {sp.at("row").get<double>(), sp.at("col").get<double>(), sp.at("slice").get<double>()};
  } catch (const json::exception& e) {
    throw IoError("incomplete metadata in " + (dir / "meta.json").string() + ": " + e.what());
  }
  const auto mri = nifti::read(dir / "mri.nii");
  const auto lab = nifti::read(dir / "labels.nii");
  if (mri.dims != lab.dims) throw ShapeError("mri and labels differ in shape under " + dir.string());
  const int w = mri.dims[0], h = mri.dims[1], sl = mri.dims[2];
  s.mri = ImageVolume(sl, h, w);
  s.mri.data = mri.values;
  s.labels.labels = MaskVolume(sl, h, w);
  for (std::size_t i = 0; i < lab.values.size(); ++i) {
    const double v = lab.values[i];
    if (v < 0 || v > 3.0 || v != std::floor(v))
      throw DataError("label value " + std::to_string(v) + " outside {0,1,2,3} in " + (dir / "labels.nii").string());
    s.labels.labels.data[i] = static_cast<std::uint8_t>(v);
  }
  s.ecg.waveform = read_ecg_csv(dir / "ecg.csv");
  s.t_interval_days = std::abs(static_cast<double>((s.mri_acquired_at - s.ecg.acquired_at).count()));
  s.t_norm = normalize_interval(s.t_interval_days);
  s.prior = atlas::build_aha17(s.labels.myocardium_region(), s.labels.class_mask(blood_pool), cfg);
  s.validate();
  return s;
}

void write_manifest(const fs::path& path, const DatasetManifest& m) {
  json samples = json::array();
  for (std::size_t i = 0; i < m.ids.size(); ++i) samples.push_back({{"id", m.ids[i]}, {"split", to_string(m.splits[i])}});
  json j = {{"seed", m.seed}, {"ratios", m.ratios}, {"samples", samples}};
  write_text(path, j.dump(2) + "\n");
}

DatasetManifest read_manifest(const fs::path& path) {
  const json j = read_json(path);
  DatasetManifest m;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.ratios = j.at("ratios").get<std::array<double, 3>>();
    for (const auto& s : j.at("samples")) {
      m.ids.push_back(s.at("id").get<std::string>());
      m.splits.push_back(split_from_string(s.at("split").get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace taff
