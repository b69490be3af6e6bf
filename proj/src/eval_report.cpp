#include "taffseg/eval_report.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "taffseg/errors.hpp"
#include "taffseg/model.hpp"
#include "taffseg/nifti.hpp"
#include "taffseg/synth_data.hpp"

namespace taff::eval {

namespace fs = std::filesystem;
using nlohmann::json;

OverlapMetrics overlap(const MaskVolume& pred, const MaskVolume& gt, std::uint8_t cls) {
  if (!pred.same_geometry(gt)) throw ShapeError("prediction and ground truth differ in geometry");
  OverlapMetrics m;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.data[i] == cls, g = gt.data[i] == cls;
    m.pred_voxels += p;
    m.gt_voxels += g;
    m.overlap_voxels += p && g;
  }
  const double P = static_cast<double>(m.pred_voxels), G = static_cast<double>(m.gt_voxels);
  const double I = static_cast<double>(m.overlap_voxels);
  if (m.pred_voxels == 0 && m.gt_voxels == 0) {
    m.dice = 1.0;
    m.precision = 1.0;
    m.sensitivity = 1.0;
    return m;
  }
  m.dice = 2.0 * I / (P + G);
  if (m.pred_voxels > 0) m.precision = I / P;
  if (m.gt_voxels > 0) m.sensitivity = I / G;
  return m;
}

MetricsRow compute_metrics(const MaskVolume& pred, const MaskVolume& gt, const Spacing& spacing) {
  if (!spacing.valid()) throw InputError("voxel spacing must be positive");
  MetricsRow row;
  for (std::uint8_t c = 1; c <= kScarClass; ++c) row.classes[c] = overlap(pred, gt, c);
  const double ml = spacing.voxel_ml();
  row.pred_scar_ml = static_cast<double>(row.scar().pred_voxels) * ml;
  row.gt_scar_ml = static_cast<double>(row.scar().gt_voxels) * ml;
  row.volume_difference_ml = std::abs(row.pred_scar_ml - row.gt_scar_ml);
  return row;
}

Aha17Volumes aha17_scar_volumes(const MaskVolume& labels, const atlas::Aha17Prior& prior, const Spacing& spacing) {
  if (!spacing.valid()) throw InputError("voxel spacing must be positive");
  if (!labels.same_geometry(prior.segment_map))
    throw ShapeError("label volume and AHA-17 prior differ in geometry");
  Aha17Volumes v;
  v.voxel_ml = spacing.voxel_ml();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels.data[i] != kScarClass) continue;
    ++v.total_voxels;
    const int seg = prior.segment_map.data[i];
    if (seg >= 1 && seg <= atlas::kSegments)
      ++v.voxels[seg - 1];
    else
      ++v.extra_voxels;
  }
  return v;
}

namespace {

std::string bin_label(const synth::IntervalBin& b) {
  return fmt::format("[{},{}{}", b.lo, b.hi, b.closed_right ? "]" : ")");
}

int bin_with_warning(double days) {
  if (days > 90.0) spdlog::warn("interval {} days exceeds 90; counted in the last bin", days);
  return synth::interval_bin_of(days);
}

}  // namespace

std::array<BinSummary, 7> time_bin_report(const std::vector<MetricsRow>& rows) {
  if (rows.empty()) throw InputError("no metrics rows to bin");
  std::array<BinSummary, 7> out;
  std::array<std::vector<double>, 7> values;
  const auto& bins = synth::interval_bins();
  for (int b = 0; b < 7; ++b) {
    out[b].label = bin_label(bins[b]);
    out[b].lo = bins[b].lo;
    out[b].hi = bins[b].hi;
  }
  for (const auto& r : rows) values[bin_with_warning(r.t_interval_days)].push_back(r.scar().dice);
  for (int b = 0; b < 7; ++b) {
    const auto& v = values[b];
    out[b].count = v.size();
    if (v.empty()) continue;
    out[b].mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    if (v.size() > 1) {
      double ss = 0.0;
      for (double x : v) ss += (x - out[b].mean) * (x - out[b].mean);
      out[b].sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    }
  }
  return out;
}

TTest paired_ttest(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) throw InputError("paired t-test needs equal-length score lists");
  if (a.size() < 2) throw InputError("paired t-test needs at least two pairs");
  TTest r;
  r.n = a.size();
  const double n = static_cast<double>(r.n);
  std::vector<double> d(r.n);
  for (std::size_t i = 0; i < r.n; ++i) d[i] = a[i] - b[i];
  r.mean_difference = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : d) ss += (x - r.mean_difference) * (x - r.mean_difference);
  const double sd = std::sqrt(ss / (n - 1.0));
  if (sd == 0.0) {
    r.degenerate = true;
    if (r.mean_difference == 0.0) {
      r.t = 0.0;
      r.p = 1.0;
    } else {
      r.t = std::copysign(std::numeric_limits<double>::infinity(), r.mean_difference);
      r.p = 0.0;
    }
    return r;
  }
  r.t = r.mean_difference / (sd / std::sqrt(n));
  const boost::math::students_t dist(n - 1.0);
  r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(r.t)));
  return r;
}

// ---------------------------------------------------------------------------
// evaluate

namespace {

std::string num(double v) { return fmt::format("{:.17g}", v); }
std::string opt_num(const std::optional<double>& v) { return v ? num(*v) : std::string(); }

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw IoError("cannot write " + p.string());
  return out;
}

void write_matrix_csv(const fs::path& p, const Tensor& m) {
  auto out = open_out(p);
  const int R = m.dim(0), C = m.dim(1);
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) out << (c ? "," : "") << num(m.at(r, c));
    out << '\n';
  }
}

const char* kMetricsHeader =
    "sample_id,t_interval_days,t_norm,interval_bin,dice_blood_pool,dice_myocardium,dice_scar,precision_scar,"
    "sensitivity_scar,pred_scar_voxels,gt_scar_voxels,overlap_scar_voxels,pred_scar_ml,gt_scar_ml,"
    "volume_difference_ml";

void write_volume_row(std::ofstream& out, const std::string& id, const char* source, const Aha17Volumes& v) {
  out << id << ',' << source << ',' << num(v.voxel_ml);
  for (auto c : v.voxels) out << ',' << c;
  out << ',' << v.extra_voxels << ',' << v.total_voxels << '\n';
}

}  // namespace

std::vector<MetricsRow> evaluate(const TaffModel& model, const std::vector<PairedSample>& samples,
                                 const DatasetManifest& manifest, const fs::path& out_dir,
                                 const EvaluateOptions& opt) {
  std::map<std::string, const PairedSample*> by_id;
  for (const auto& s : samples) by_id[s.id] = &s;
  const auto ids = manifest.ids_in(opt.split);
  if (ids.empty()) throw InputError("split " + to_string(opt.split) + " is empty");

  std::error_code ec;
  fs::create_directories(out_dir / "attention", ec);
  if (opt.write_predictions) fs::create_directories(out_dir / "predictions", ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  auto metrics = open_out(out_dir / "metrics.csv");
  metrics << kMetricsHeader << '\n';
  auto volumes = open_out(out_dir / "aha17_voxels.csv");
  volumes << "sample_id,source,voxel_ml";
  for (int s = 1; s <= atlas::kSegments; ++s) volumes << ",seg" << s;
  volumes << ",extra_myocardial,total\n";
  const bool fused = model.config().use_ecg;
  std::ofstream gate;
  if (fused) {
    gate = open_out(out_dir / "gate.csv");
    gate << "sample_id,t_norm,slice,w_mri,w_ecg,mean_gamma,mean_beta\n";
  }

  std::vector<MetricsRow> rows;
  for (const auto& id : ids) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw InputError("sample " + id + " listed in the manifest was not loaded");
    const PairedSample& s = *it->second;
    const auto pred = predict_sample(model, s);
    MetricsRow row = compute_metrics(pred.labels, s.labels.labels, s.labels.spacing);
    row.sample_id = s.id;
    row.t_interval_days = s.t_interval_days;
    row.t_norm = s.t_norm;
    const auto& sc = row.scar();
    metrics << s.id << ',' << num(s.t_interval_days) << ',' << num(s.t_norm) << ','
            << '"' << bin_label(synth::interval_bins()[bin_with_warning(s.t_interval_days)]) << "\","
            << num(row.classes[1].dice) << ',' << num(row.classes[2].dice) << ',' << num(sc.dice) << ','
            << opt_num(sc.precision) << ',' << opt_num(sc.sensitivity) << ',' << sc.pred_voxels << ','
            << sc.gt_voxels << ',' << sc.overlap_voxels << ',' << num(row.pred_scar_ml) << ','
            << num(row.gt_scar_ml) << ',' << num(row.volume_difference_ml) << '\n';

    write_volume_row(volumes, s.id, "gt", aha17_scar_volumes(s.labels.labels, s.prior, s.labels.spacing));
    write_volume_row(volumes, s.id, "pred", aha17_scar_volumes(pred.labels, s.prior, s.labels.spacing));

    if (fused) {
      for (std::size_t k = 0; k < pred.w_ecg.size(); ++k)
        gate << s.id << ',' << num(s.t_norm) << ',' << k << ',' << num(1.0 - pred.w_ecg[k]) << ','
             << num(pred.w_ecg[k]) << ',' << num(pred.mean_gamma[k]) << ',' << num(pred.mean_beta[k]) << '\n';
      write_matrix_csv(out_dir / "attention" / (s.id + "_cross_lead.csv"), pred.cross_lead_attention);
      write_matrix_csv(out_dir / "attention" / (s.id + "_temporal.csv"), pred.temporal_attention);
    }
    if (opt.write_predictions) {
      nifti::Image img;
      img.dims = {pred.labels.width, pred.labels.height, pred.labels.slices, 1};
      img.pixdim = {s.labels.spacing.col_mm, s.labels.spacing.row_mm, s.labels.spacing.slice_mm, 1.0};
      img.datatype = nifti::DataType::uint8;
      img.values.assign(pred.labels.data.begin(), pred.labels.data.end());
      nifti::write(out_dir / "predictions" / (s.id + "_pred.nii"), img);
    }
    rows.push_back(std::move(row));
  }

  json info{{"variant", model.config().variant_name()},
            {"split", to_string(opt.split)},
            {"samples", ids.size()},
            {"model", model.config()}};
  open_out(out_dir / "evaluation.json") << info.dump(2) << '\n';
  return rows;
}

// ---------------------------------------------------------------------------
// report

namespace {

using Table = std::vector<std::map<std::string, std::string>>;

Table read_csv(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("missing input " + p.string());
  // Double-quoted cells may hold commas (interval labels); quotes never nest here.
  auto split = [](const std::string& line) {
    std::vector<std::string> f(1);
    bool quoted = false;
    for (char ch : line) {
      if (ch == '"')
        quoted = !quoted;
      else if (ch == ',' && !quoted)
        f.emplace_back();
      else
        f.back() += ch;
    }
    return f;
  };
  std::string line;
  if (!std::getline(in, line)) throw DataError("empty CSV " + p.string());
  const auto header = split(line);
  Table t;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = split(line);
    if (f.size() != header.size()) throw DataError("ragged row in " + p.string());
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < f.size(); ++i) row[header[i]] = f[i];
    t.push_back(std::move(row));
  }
  return t;
}

std::vector<std::vector<double>> read_matrix(const fs::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("missing input " + p.string());
  std::vector<std::vector<double>> m;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<double> r;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) r.push_back(std::stod(cell));
    m.push_back(std::move(r));
  }
  return m;
}

double field(const std::map<std::string, std::string>& row, const std::string& key) {
  const auto it = row.find(key);
  if (it == row.end()) throw DataError("missing column " + key);
  return std::stod(it->second);
}

std::optional<double> opt_field(const std::map<std::string, std::string>& row, const std::string& key) {
  const auto it = row.find(key);
  if (it == row.end() || it->second.empty()) return std::nullopt;
  return std::stod(it->second);
}

struct ModelRun {
  std::string name;
  fs::path dir;
  bool fused = false;
  std::vector<MetricsRow> rows;
  std::vector<Aha17Volumes> gt_volumes, pred_volumes;
};

int variant_rank(const std::string& v) {
  static const std::vector<std::string> order{"baseline", "prior_only", "no_time", "multimodal"};
  const auto it = std::find(order.begin(), order.end(), v);
  return it == order.end() ? static_cast<int>(order.size()) : static_cast<int>(it - order.begin());
}

Aha17Volumes volume_from_row(const std::map<std::string, std::string>& r) {
  Aha17Volumes v;
  v.voxel_ml = field(r, "voxel_ml");
  for (int s = 1; s <= atlas::kSegments; ++s) v.voxels[s - 1] = static_cast<std::size_t>(field(r, fmt::format("seg{}", s)));
  v.extra_voxels = static_cast<std::size_t>(field(r, "extra_myocardial"));
  v.total_voxels = static_cast<std::size_t>(field(r, "total"));
  return v;
}

ModelRun load_run(const fs::path& dir) {
  ModelRun run;
  run.dir = dir;
  std::ifstream in(dir / "evaluation.json");
  const json info = json::parse(in);
  run.name = dir.filename().string();
  run.fused = info.at("model").at("use_ecg").get<bool>();
  for (const auto& r : read_csv(dir / "metrics.csv")) {
    MetricsRow m;
    m.sample_id = r.at("sample_id");
    m.t_interval_days = field(r, "t_interval_days");
    m.t_norm = field(r, "t_norm");
    m.classes[1].dice = field(r, "dice_blood_pool");
    m.classes[2].dice = field(r, "dice_myocardium");
    auto& sc = m.classes[kScarClass];
    sc.dice = field(r, "dice_scar");
    sc.precision = opt_field(r, "precision_scar");
    sc.sensitivity = opt_field(r, "sensitivity_scar");
    sc.pred_voxels = static_cast<std::size_t>(field(r, "pred_scar_voxels"));
    sc.gt_voxels = static_cast<std::size_t>(field(r, "gt_scar_voxels"));
    sc.overlap_voxels = static_cast<std::size_t>(field(r, "overlap_scar_voxels"));
    m.pred_scar_ml = field(r, "pred_scar_ml");
    m.gt_scar_ml = field(r, "gt_scar_ml");
    m.volume_difference_ml = field(r, "volume_difference_ml");
    run.rows.push_back(std::move(m));
  }
  for (const auto& r : read_csv(dir / "aha17_voxels.csv"))
    (r.at("source") == "gt" ? run.gt_volumes : run.pred_volumes).push_back(volume_from_row(r));
  if (run.rows.empty()) throw DataError("no evaluated samples in " + dir.string());
  return run;
}

struct MeanCount {
  double mean = 0.0;
  std::size_t count = 0;
  std::size_t missing = 0;
};

template <typename F>
MeanCount mean_of(const std::vector<MetricsRow>& rows, F get) {
  MeanCount m;
  double s = 0.0;
  for (const auto& r : rows) {
    const std::optional<double> v = get(r);
    if (!v) {
      ++m.missing;
      continue;
    }
    s += *v;
    ++m.count;
  }
  m.mean = m.count ? s / static_cast<double>(m.count) : 0.0;
  return m;
}

double sd_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

std::string f6(double v) { return fmt::format("{:.6f}", v); }

Aha17Volumes summed(const std::vector<Aha17Volumes>& vs) {
  Aha17Volumes out;
  for (const auto& v : vs) {
    for (int s = 0; s < atlas::kSegments; ++s) out.voxels[s] += v.voxels[s];
    out.extra_voxels += v.extra_voxels;
    out.total_voxels += v.total_voxels;
    out.voxel_ml = v.voxel_ml;
  }
  return out;
}

std::vector<double> scar_dice_by_id(const ModelRun& run, const std::vector<std::string>& ids) {
  std::map<std::string, double> m;
  for (const auto& r : run.rows) m[r.sample_id] = r.scar().dice;
  std::vector<double> out;
  for (const auto& id : ids) {
    const auto it = m.find(id);
    if (it == m.end()) throw DataError("model " + run.name + " has no result for sample " + id);
    out.push_back(it->second);
  }
  return out;
}

}  // namespace

fs::path report(const fs::path& run_dir) {
  std::vector<ModelRun> runs;
  if (!fs::is_directory(run_dir)) throw IoError("run directory " + run_dir.string() + " does not exist");
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(run_dir))
    if (e.is_directory() && fs::exists(e.path() / "evaluation.json")) dirs.push_back(e.path());
  if (dirs.empty()) throw InputError("no evaluated model directories (with evaluation.json) under " + run_dir.string());
  for (const auto& d : dirs) runs.push_back(load_run(d));
  std::sort(runs.begin(), runs.end(), [](const ModelRun& a, const ModelRun& b) {
    const int ra = variant_rank(a.name), rb = variant_rank(b.name);
    return ra != rb ? ra < rb : a.name < b.name;
  });

  const fs::path out = run_dir / "report";
  fs::create_directories(out);

  {
    auto f = open_out(out / "metrics.csv");
    f << "model,samples,dice_scar_mean,dice_scar_sd,precision_scar_mean,precision_scar_missing,"
         "sensitivity_scar_mean,sensitivity_scar_missing,volume_difference_ml_mean,dice_blood_pool_mean,"
         "dice_myocardium_mean\n";
    for (const auto& r : runs) {
      std::vector<double> d;
      for (const auto& m : r.rows) d.push_back(m.scar().dice);
      const auto dice = mean_of(r.rows, [](const MetricsRow& m) { return std::optional<double>(m.scar().dice); });
      const auto pre = mean_of(r.rows, [](const MetricsRow& m) { return m.scar().precision; });
      const auto sen = mean_of(r.rows, [](const MetricsRow& m) { return m.scar().sensitivity; });
      const auto vd = mean_of(r.rows, [](const MetricsRow& m) { return std::optional<double>(m.volume_difference_ml); });
      const auto bp = mean_of(r.rows, [](const MetricsRow& m) { return std::optional<double>(m.classes[1].dice); });
      const auto my = mean_of(r.rows, [](const MetricsRow& m) { return std::optional<double>(m.classes[2].dice); });
      f << r.name << ',' << r.rows.size() << ',' << f6(dice.mean) << ',' << f6(sd_of(d)) << ',' << f6(pre.mean) << ','
        << pre.missing << ',' << f6(sen.mean) << ',' << sen.missing << ',' << f6(vd.mean) << ',' << f6(bp.mean) << ','
        << f6(my.mean) << '\n';
    }
  }

  {
    auto f = open_out(out / "time_bins.csv");
    f << "model,bin,lo_days,hi_days,count,dice_scar_mean,dice_scar_sd\n";
    for (const auto& r : runs)
      for (const auto& b : time_bin_report(r.rows))
        f << r.name << ",\"" << b.label << "\"," << b.lo << ',' << b.hi << ',' << b.count << ',' << f6(b.mean) << ','
          << f6(b.sd) << '\n';
  }

  {
    // Ground truth is identical across models; take it from the first.
    const Aha17Volumes gt = summed(runs.front().gt_volumes);
    std::vector<Aha17Volumes> preds;
    for (const auto& r : runs) preds.push_back(summed(r.pred_volumes));
    auto f = open_out(out / "aha17_volumes.csv");
    f << "segment,gt_voxels,gt_ml";
    for (const auto& r : runs) f << ',' << r.name << "_voxels," << r.name << "_ml";
    f << '\n';
    auto row = [&](const std::string& label, auto get) {
      const std::size_t g = get(gt);
      f << label << ',' << g << ',' << f6(static_cast<double>(g) * gt.voxel_ml);
      for (const auto& p : preds) {
        const std::size_t v = get(p);
        f << ',' << v << ',' << f6(static_cast<double>(v) * p.voxel_ml);
      }
      f << '\n';
    };
    for (int s = 1; s <= atlas::kSegments; ++s)
      row(std::to_string(s), [s](const Aha17Volumes& v) { return v.voxels[s - 1]; });
    row("extra_myocardial", [](const Aha17Volumes& v) { return v.extra_voxels; });
    row("total", [](const Aha17Volumes& v) { return v.total_voxels; });
  }

  for (const auto& r : runs) {
    if (!r.fused) continue;
    std::vector<std::vector<double>> cross, temporal;
    for (const auto& m : r.rows) {
      const auto c = read_matrix(r.dir / "attention" / (m.sample_id + "_cross_lead.csv"));
      const auto t = read_matrix(r.dir / "attention" / (m.sample_id + "_temporal.csv"));
      auto accumulate_into = [](std::vector<std::vector<double>>& acc, const std::vector<std::vector<double>>& x) {
        if (acc.empty()) acc.assign(x.size(), std::vector<double>(x.front().size(), 0.0));
        for (std::size_t i = 0; i < x.size(); ++i)
          for (std::size_t j = 0; j < x[i].size(); ++j) acc[i][j] += x[i][j];
      };
      accumulate_into(cross, c);
      accumulate_into(temporal, t);
    }
    const double n = static_cast<double>(r.rows.size());
    auto write = [&](const fs::path& p, const std::vector<std::vector<double>>& m, bool lead_columns) {
      auto f = open_out(p);
      f << "lead";
      for (std::size_t j = 0; j < m.front().size(); ++j)
        f << ',' << (lead_columns ? standard_lead_names()[j] : fmt::format("t{}", j));
      f << '\n';
      for (std::size_t i = 0; i < m.size(); ++i) {
        f << standard_lead_names()[i];
        for (double v : m[i]) f << ',' << f6(v / n);
        f << '\n';
      }
    };
    write(out / ("attention_cross_lead_" + r.name + ".csv"), cross, true);
    write(out / ("attention_temporal_" + r.name + ".csv"), temporal, false);
  }

  // Gate weights per sample (mean over slices), grouped by normalized interval.
  {
    auto f = open_out(out / "gate_summary.csv");
    f << "model,t_norm_group,samples,w_ecg_mean,w_ecg_sd,gamma_mean,beta_mean\n";
    for (const auto& r : runs) {
      if (!r.fused) continue;
      std::map<std::string, std::array<double, 5>> per;  // id -> t, sum w, sum g, sum b, slices
      for (const auto& g : read_csv(r.dir / "gate.csv")) {
        auto& a = per[g.at("sample_id")];
        a[0] = field(g, "t_norm");
        a[1] += field(g, "w_ecg");
        a[2] += field(g, "mean_gamma");
        a[3] += field(g, "mean_beta");
        a[4] += 1.0;
      }
      const std::pair<const char*, bool (*)(double)> groups[] = {
          {"t<0.33", [](double t) { return t < 0.33; }},
          {"0.33<=t<=0.66", [](double t) { return t >= 0.33 && t <= 0.66; }},
          {"t>0.66", [](double t) { return t > 0.66; }},
          {"all", [](double) { return true; }}};
      for (const auto& [name, member] : groups) {
        std::vector<double> w;
        double gs = 0.0, bs = 0.0;
        for (const auto& [id, a] : per) {
          if (!member(a[0])) continue;
          w.push_back(a[1] / a[4]);
          gs += a[2] / a[4];
          bs += a[3] / a[4];
        }
        const double n = static_cast<double>(w.size());
        const double wm = w.empty() ? 0.0 : std::accumulate(w.begin(), w.end(), 0.0) / n;
        f << r.name << ',' << name << ',' << w.size() << ',' << f6(wm) << ',' << f6(sd_of(w)) << ','
          << f6(w.empty() ? 0.0 : gs / n) << ',' << f6(w.empty() ? 0.0 : bs / n) << '\n';
      }
    }
  }

  {
    auto f = open_out(out / "summary.txt");
    f << "Scar segmentation summary (per-volume Dice over the evaluated split; volumes in mL)\n\n";
    f << fmt::format("{:<14} {:>7} {:>10} {:>10} {:>10} {:>12}\n", "model", "samples", "dice", "precision",
                     "sensitivity", "vol_diff_ml");
    for (const auto& r : runs) {
      const auto dice = mean_of(r.rows, [](const MetricsRow& m) { return std::optional<double>(m.scar().dice); });
      const auto pre = mean_of(r.rows, [](const MetricsRow& m) { return m.scar().precision; });
      const auto sen = mean_of(r.rows, [](const MetricsRow& m) { return m.scar().sensitivity; });
      const auto vd = mean_of(r.rows, [](const MetricsRow& m) { return std::optional<double>(m.volume_difference_ml); });
      f << fmt::format("{:<14} {:>7} {:>10.4f} {:>10.4f} {:>10.4f} {:>12.4f}\n", r.name, r.rows.size(), dice.mean,
                       pre.mean, sen.mean, vd.mean);
    }
    const auto base = std::find_if(runs.begin(), runs.end(), [](const ModelRun& r) { return r.name == "baseline"; });
    f << "\nPaired t-test on per-sample scar Dice against the baseline (two-sided, df = n - 1)\n";
    if (base == runs.end()) {
      f << "  no baseline model evaluated; comparison skipped\n";
    } else {
      std::vector<std::string> ids;
      for (const auto& m : base->rows) ids.push_back(m.sample_id);
      const auto b = scar_dice_by_id(*base, ids);
      for (const auto& r : runs) {
        if (&r == &*base) continue;
        const auto a = scar_dice_by_id(r, ids);
        const auto t = paired_ttest(a, b);
        f << fmt::format("  {} vs baseline: n = {}, dice delta = {:+.4f}, t = {:.4f}, p = {:.3e}{}\n", r.name, t.n,
                         t.mean_difference, t.t, t.p, t.degenerate ? " (zero-variance differences)" : "");
      }
    }
    f << "\nAHA-17 volume identity: segment sum + extra-myocardial = total for every model (see aha17_volumes.csv)\n";
  }
  return out;
}

}  // namespace taff::eval
