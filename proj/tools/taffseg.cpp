// Command-line front end: gen-data, make-prior, train, evaluate, report.
#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include <fstream>

#include "taffseg/atlas_prior.hpp"
#include "taffseg/core_data.hpp"
#include "taffseg/errors.hpp"
#include "taffseg/eval_report.hpp"
#include "taffseg/nifti.hpp"
#include "taffseg/synth_data.hpp"
#include "taffseg/training_engine.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int gen_data(int n, std::uint64_t seed, const fs::path& out, std::optional<double> growth,
             std::optional<double> noise) {
  taff::synth::DatasetRanges ranges;
  if (growth) ranges.staleness.growth_rate = *growth;
  if (noise) ranges.staleness.ecg_noise_gain = *noise;
  const auto ds = taff::synth::generate_dataset(n, seed, ranges, out);
  const auto sz = ds.manifest.sizes();
  spdlog::info("wrote {} samples to {} (train {}, val {}, test {})", ds.samples.size(), out.string(), sz[0], sz[1],
               sz[2]);
  return 0;
}

int make_prior(const fs::path& in, const fs::path& out) {
  const taff::PairedSample s = taff::read_sample(in);
  const auto& p = s.prior;
  taff::nifti::Image img;
  img.dims = {p.width, p.height, p.slices, taff::atlas::kSegments};
  const auto& sp = s.labels.spacing;
  img.pixdim = {sp.col_mm, sp.row_mm, sp.slice_mm, 1.0};
  img.datatype = taff::nifti::DataType::uint8;
  const auto ch = p.channels();
  img.values.assign(ch.begin(), ch.end());
  taff::nifti::write(out, img);

  json zones = json::array();
  for (auto z : p.slice_zones) zones.push_back(taff::atlas::to_string(z));
  const json side{{"sample_id", s.id}, {"reference_angle", p.reference_angle}, {"slice_zones", zones},
                  {"channels", taff::atlas::kSegments}};
  fs::path sidecar = out;
  sidecar.replace_extension(".json");
  std::ofstream(sidecar) << side.dump(2) << '\n';
  spdlog::info("wrote {} and {}", out.string(), sidecar.string());
  return 0;
}

int train(const fs::path& config, const fs::path& data, const fs::path& out, std::optional<fs::path> resume) {
  const auto cfg = taff::train::load_train_config(config);
  const auto ds = taff::synth::load_dataset(data);
  taff::train::FitOptions opt;
  opt.resume_from = resume;
  const auto r = taff::train::fit(cfg, ds.samples, ds.manifest, out, opt);
  spdlog::info("best val scar Dice {:.4f} at epoch {}; checkpoints in {}", r.progress.best_val_dice,
               r.progress.best_epoch + 1, out.string());
  return 0;
}

int evaluate(const fs::path& model_path, const fs::path& data, const std::string& split, const fs::path& out) {
  const auto ckpt = taff::train::read_checkpoint(model_path);
  const auto model = taff::train::load_model(ckpt);
  const auto ds = taff::synth::load_dataset(data);
  taff::eval::EvaluateOptions opt;
  opt.split = taff::split_from_string(split);
  const auto rows = taff::eval::evaluate(*model, ds.samples, ds.manifest, out, opt);
  double dice = 0.0;
  for (const auto& r : rows) dice += r.scar().dice;
  spdlog::info("evaluated {} samples, mean scar Dice {:.4f}", rows.size(), rows.empty() ? 0.0 : dice / rows.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Temporal-aware ECG/MRI fusion segmentation"};
  app.require_subcommand(1);

  int n = 200;
  std::uint64_t seed = 0;
  std::string out, in, config, data, model, split = "test", run, resume;
  std::optional<double> growth, noise;

  auto* gd = app.add_subcommand("gen-data", "Generate a synthetic paired dataset");
  gd->add_option("--n", n, "Number of samples")->check(CLI::PositiveNumber);
  gd->add_option("--seed", seed, "Generator seed");
  gd->add_option("--out", out, "Output directory")->required();
  gd->add_option("--staleness-growth", growth, "Scar growth rate over the acquisition interval");
  gd->add_option("--staleness-noise", noise, "ECG noise gain over the acquisition interval");

  auto* mp = app.add_subcommand("make-prior", "Write the AHA-17 prior of one sample as a 4D NIfTI");
  mp->add_option("--in", in, "Sample directory")->required()->check(CLI::ExistingDirectory);
  mp->add_option("--out", out, "Output .nii path")->required();

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--config", config, "JSON train config")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  tr->add_option("--out", out, "Run directory")->required();
  tr->add_option("--resume", resume, "Resume from a last.ckpt")->check(CLI::ExistingFile);

  auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint on one split");
  ev->add_option("--model", model, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data, "Dataset directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", split, "train, val or test");
  ev->add_option("--out", out, "Output directory")->required();

  auto* rp = app.add_subcommand("report", "Aggregate evaluated models under a run directory");
  rp->add_option("--run", run, "Directory holding one evaluated subdirectory per model")
      ->required()
      ->check(CLI::ExistingDirectory);

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gd) return gen_data(n, seed, out, growth, noise);
    if (*mp) return make_prior(in, out);
    if (*tr) return train(config, data, out, resume.empty() ? std::nullopt : std::optional<fs::path>(resume));
    if (*ev) return evaluate(model, data, split, out);
    if (*rp) {
      const auto dir = taff::eval::report(run);
      spdlog::info("report written to {}", dir.string());
      return 0;
    }
  } catch (const taff::Error& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("unexpected failure: {}", e.what());
    return 3;
  }
  return 1;
}
