#include "taffseg/training_engine.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>

#include "taffseg/errors.hpp"
#include "taffseg/eval_report.hpp"
#include "taffseg/random.hpp"
#include "taffseg/synth_data.hpp"

namespace taff::train {

namespace fs = std::filesystem;
using ad::Var;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

// ---------------------------------------------------------------------------
// Config

namespace {

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> v{"multimodal", "no_time", "prior_only", "baseline"};
  return v;
}

// Field table shared by to_json and from_json so the key set cannot drift.
template <typename Cfg>
void visit_fields(Cfg& c, const std::function<void(const char*, json&)>& out,
                  std::map<std::string, std::function<void(const json&)>>* in) {
  auto field = [&](const char* name, auto& ref) {
    if (in) {
      (*in)[name] = [&ref, name](const json& v) {
        try {
          ref = v.get<std::remove_reference_t<decltype(ref)>>();
        } catch (const json::exception& e) {
          throw ConfigError(std::string("invalid value for '") + name + "': " + e.what());
        }
      };
    } else {
      json v = ref;
      out(name, v);
    }
  };
  field("epochs", c.epochs);
  field("steps_per_epoch", c.steps_per_epoch);
  field("batch_size", c.batch_size);
  field("seed", c.seed);
  field("warmup_epochs", c.warmup_epochs);
  field("lambda_max", c.lambda_max);
  field("lambda_ent", c.lambda_ent);
  field("entropy_mode", c.entropy_mode);
  field("variant", c.variant);
  field("base_width", c.base_width);
  field("depth", c.depth);
  field("tap_depth", c.tap_depth);
  field("ecg_samples", c.ecg_samples);
  field("ecg_channels", c.ecg_channels);
  field("ecg_latent", c.ecg_latent);
  field("gate_hidden", c.gate_hidden);
  field("film_hidden", c.film_hidden);
  field("backbone_lr", c.backbone_lr);
  field("backbone_momentum", c.backbone_momentum);
  field("backbone_weight_decay", c.backbone_weight_decay);
  field("nesterov", c.nesterov);
  field("poly_power", c.poly_power);
  field("ecg_lr", c.ecg_lr);
  field("ecg_min_lr", c.ecg_min_lr);
  field("ecg_weight_decay", c.ecg_weight_decay);
  field("ecg_warmup_epochs", c.ecg_warmup_epochs);
  field("gate_lr", c.gate_lr);
  field("gate_weight_decay", c.gate_weight_decay);
  field("grad_clip", c.grad_clip);
  field("freeze_ecg", c.freeze_ecg);
  field("freeze_fusion", c.freeze_fusion);
  field("pretrain_steps", c.pretrain_steps);
  field("pretrain_corpus", c.pretrain_corpus);
  field("pretrain_batch", c.pretrain_batch);
  field("pretrain_lr", c.pretrain_lr);
}

}  // namespace

void TrainConfig::validate() const {
  auto positive = [](const char* name, double v) {
    if (!(v > 0.0)) throw ConfigError(fmt::format("{} must be positive, got {}", name, v));
  };
  auto nonneg = [](const char* name, double v) {
    if (!(v >= 0.0)) throw ConfigError(fmt::format("{} must be nonnegative, got {}", name, v));
  };
  positive("epochs", epochs);
  nonneg("steps_per_epoch", steps_per_epoch);
  positive("batch_size", batch_size);
  positive("warmup_epochs", warmup_epochs);
  nonneg("lambda_max", lambda_max);
  nonneg("lambda_ent", lambda_ent);
  (void)entropy();
  if (std::find(variant_names().begin(), variant_names().end(), variant) == variant_names().end())
    throw ConfigError("unknown variant '" + variant + "' (expected multimodal, no_time, prior_only or baseline)");
  positive("poly_power", poly_power);
  positive("backbone_lr", backbone_lr);
  if (backbone_momentum < 0.0 || backbone_momentum >= 1.0) throw ConfigError("backbone_momentum must lie in [0, 1)");
  nonneg("backbone_weight_decay", backbone_weight_decay);
  positive("ecg_lr", ecg_lr);
  nonneg("ecg_min_lr", ecg_min_lr);
  nonneg("ecg_weight_decay", ecg_weight_decay);
  nonneg("ecg_warmup_epochs", ecg_warmup_epochs);
  positive("gate_lr", gate_lr);
  nonneg("gate_weight_decay", gate_weight_decay);
  nonneg("grad_clip", grad_clip);
  nonneg("pretrain_steps", pretrain_steps);
  if (pretrain_steps > 0) {
    if (pretrain_corpus < 10) throw ConfigError("pretrain_corpus must be >= 10");
    positive("pretrain_batch", pretrain_batch);
    positive("pretrain_lr", pretrain_lr);
  }
  model_config().validate();
}

ModelConfig TrainConfig::model_config() const {
  ModelConfig m;
  m.unet.base_width = base_width;
  m.unet.depth = depth;
  m.unet.tap_depth = tap_depth;
  m.ecg.samples = ecg_samples;
  m.ecg.channels = ecg_channels;
  m.ecg.latent = ecg_latent;
  m.gate_hidden = gate_hidden;
  m.film_hidden = film_hidden;
  m.use_prior = variant != "baseline";
  m.use_ecg = variant == "multimodal" || variant == "no_time";
  m.use_time = variant == "multimodal";
  return m;
}

void to_json(json& j, const TrainConfig& c) {
  j = json::object();
  TrainConfig copy = c;
  visit_fields(copy, [&](const char* name, json& v) { j[name] = v; }, nullptr);
}

void from_json(const json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("train config must be a JSON object");
  std::map<std::string, std::function<void(const json&)>> setters;
  visit_fields(c, {}, &setters);
  std::vector<std::string> unknown;
  for (const auto& [k, v] : j.items()) {
    const auto it = setters.find(k);
    if (it == setters.end())
      unknown.push_back(k);
    else
      it->second(v);
  }
  if (!unknown.empty()) {
    std::string list;
    for (const auto& u : unknown) list += (list.empty() ? "" : ", ") + u;
    throw ConfigError("unknown train config keys: " + list);
  }
}

TrainConfig load_train_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open train config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed train config " + path.string() + ": " + e.what());
  }
  TrainConfig c = j.get<TrainConfig>();
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Optimizer groups

std::string to_string(Group g) {
  switch (g) {
    case Group::mri_backbone: return "mri_backbone";
    case Group::ecg_network: return "ecg_network";
    case Group::fusion_gate: return "fusion_gate";
  }
  return "?";
}

std::array<std::vector<nn::Parameter>, 3> partition_parameters(const nn::ParameterList& params) {
  const std::array<const char*, 3> prefixes{TaffModel::kBackbonePrefix, TaffModel::kEcgPrefix,
                                            TaffModel::kFusionPrefix};
  std::array<std::vector<nn::Parameter>, 3> groups;
  std::vector<std::string> orphaned, doubled;
  for (const auto& p : params.items()) {
    int hits = 0, which = -1;
    for (int g = 0; g < 3; ++g)
      if (p.name.rfind(prefixes[g], 0) == 0) ++hits, which = g;
    if (hits == 0) orphaned.push_back(p.name);
    if (hits > 1) doubled.push_back(p.name);
    if (hits == 1) groups[which].push_back(p);
  }
  if (!orphaned.empty() || !doubled.empty()) {
    std::string msg = "optimizer groups do not partition the parameters;";
    for (const auto& n : orphaned) msg += " orphaned: " + n + ";";
    for (const auto& n : doubled) msg += " doubly assigned: " + n + ";";
    throw ConfigError(msg);
  }
  return groups;
}

OptimizerSet build_optimizers(TaffModel& model, const TrainConfig& cfg) {
  auto groups = partition_parameters(model.params());
  OptimizerSet s;
  s.specs[0] = {Group::mri_backbone, "sgd_momentum", cfg.backbone_lr, cfg.backbone_momentum, 0.9, 0.999,
                cfg.backbone_weight_decay, "poly_decay"};
  s.specs[1] = {Group::ecg_network, "adamw", cfg.ecg_lr, 0.0, 0.9, 0.999, cfg.ecg_weight_decay, "warmup_cosine"};
  s.specs[2] = {Group::fusion_gate, "adamw", cfg.gate_lr, 0.0, 0.9, 0.999, cfg.gate_weight_decay, "synchronized"};
  s.optimizers[0] = std::make_unique<optim::SgdMomentum>(std::move(groups[0]), cfg.backbone_momentum,
                                                         cfg.backbone_weight_decay, cfg.nesterov);
  s.optimizers[1] = std::make_unique<optim::AdamW>(std::move(groups[1]), cfg.ecg_weight_decay);
  s.optimizers[2] = std::make_unique<optim::AdamW>(std::move(groups[2]), cfg.gate_weight_decay);
  s.frozen = {false, cfg.freeze_ecg, cfg.freeze_fusion};
  return s;
}

LearningRates learning_rates(const TrainConfig& cfg, long step, long total_steps, long steps_per_epoch) {
  LearningRates lr;
  const double decay = optim::poly_decay_lr(1.0, step, total_steps, cfg.poly_power);
  lr.backbone = cfg.backbone_lr * decay;
  lr.ecg = optim::warmup_cosine_lr(step, static_cast<long>(cfg.ecg_warmup_epochs) * steps_per_epoch, total_steps,
                                   cfg.ecg_lr, cfg.ecg_min_lr);
  lr.gate = cfg.gate_lr * decay;
  return lr;
}

StepResult train_step(TaffModel& model, OptimizerSet& opt, const SliceBatch& batch, const TrainConfig& cfg, int epoch,
                      long global_step, long total_steps, long steps_per_epoch) {
  model.params().zero_grad();
  const ForwardOutput out = model.forward(batch);
  const loss::SegLoss seg = loss::seg_loss(out.logits, batch.labels);
  Var l_ecg, entropy;
  if (out.fusion) {
    l_ecg = loss::recon_loss(out.ecg_input, out.ecg_recon);
    entropy = fusion::gate_entropy(out.fusion->w);
  }
  const double lambda_ecg = loss::lambda_ecg_schedule(epoch, cfg.warmup_epochs, cfg.lambda_max);
  const auto total = loss::total_loss(seg, l_ecg, entropy, lambda_ecg, cfg.lambda_ent, cfg.entropy());
  ad::backward(total.total);

  std::vector<nn::Parameter> trainable;
  for (int g = 0; g < 3; ++g)
    if (!opt.frozen[g])
      trainable.insert(trainable.end(), opt.optimizers[g]->params().begin(), opt.optimizers[g]->params().end());

  StepResult r;
  r.loss = total.breakdown;
  r.grad_norm = optim::clip_grad_norm(trainable, cfg.grad_clip);
  if (!std::isfinite(r.grad_norm)) throw TrainingAbort("gradient", "non-finite gradient norm");
  r.lr = learning_rates(cfg, global_step, total_steps, steps_per_epoch);
  const double rates[3] = {r.lr.backbone, r.lr.ecg, r.lr.gate};
  for (int g = 0; g < 3; ++g)
    if (!opt.frozen[g] && !opt.optimizers[g]->params().empty()) opt.optimizers[g]->step(rates[g]);
  return r;
}

// ---------------------------------------------------------------------------
// ECG pretraining

PretrainResult pretrain_ecg(const std::vector<EcgRecord>& corpus, const ecg::EcgConfig& ecg_cfg, int steps,
                            int batch_size, double lr, std::uint64_t seed) {
  if (corpus.empty()) throw InputError("ECG pretraining corpus is empty");
  if (steps < 1 || batch_size < 1) throw ConfigError("pretraining needs positive steps and batch size");
  PretrainResult r;
  Rng init_rng(mix_seed(seed, 2));  // same stream the full model uses for its ECG branch
  const ecg::EcgAutoencoder ae(ecg_cfg, r.params, init_rng);

  const int n = static_cast<int>(corpus.size());
  const int held = n >= 10 ? n / 10 : 0;
  const int train_n = n - held;
  auto stack = [&](int lo, int hi) {
    std::vector<const EcgRecord*> p;
    for (int i = lo; i < hi; ++i) p.push_back(&corpus[i]);
    return ad::constant(ecg::stack_waveforms(p));
  };
  auto mse = [&](const Var& x) {
    ad::NoGradGuard ng;
    return loss::recon_loss(x, ae.decode(ae.encode(x).z)).item();
  };
  const Var train_all = stack(0, train_n);
  r.initial_mse = mse(train_all);
  if (held) r.heldout_initial_mse = mse(stack(train_n, n));

  optim::AdamW opt(r.params.items(), 0.0);
  Rng order_rng(mix_seed(seed, 0xecc));
  std::vector<int> order(train_n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = order.size();
  for (int s = 0; s < steps; ++s) {
    std::vector<const EcgRecord*> b;
    for (int k = 0; k < std::min(batch_size, train_n); ++k) {
      if (cursor == order.size()) {
        order_rng.shuffle(order);
        cursor = 0;
      }
      b.push_back(&corpus[order[cursor++]]);
    }
    const Var x = ad::constant(ecg::stack_waveforms(b));
    r.params.zero_grad();
    const Var l = loss::recon_loss(x, ae.decode(ae.encode(x).z));
    if (!std::isfinite(l.item())) throw TrainingAbort("ecg reconstruction", "non-finite pretraining loss");
    ad::backward(l);
    opt.step(lr);
  }
  r.final_mse = mse(train_all);
  if (held) r.heldout_final_mse = mse(stack(train_n, n));
  return r;
}

void load_ecg_parameters(const nn::ParameterList& pretrained, TaffModel& model) {
  if (!model.config().use_ecg) throw ConfigError("model has no ECG branch to load into");
  copy_parameters(pretrained, model.params(), TaffModel::kEcgPrefix);
}

// ---------------------------------------------------------------------------
// Checkpoints

std::uint64_t fnv1a64(const void* data, std::size_t bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

constexpr char kMagic[8] = {'T', 'A', 'F', 'F', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

std::string hex64(std::uint64_t v) { return fmt::format("{:016x}", v); }

json blob_entry(const Tensor& t, std::size_t& offset) {
  json e{{"shape", t.shape()},
         {"offset", offset},
         {"count", t.size()},
         {"fnv1a64", hex64(fnv1a64(t.data(), t.size() * sizeof(double)))}};
  offset += t.size();
  return e;
}

Tensor blob_tensor(const json& e, const std::vector<double>& blob, const std::string& what) {
  const std::size_t off = e.at("offset"), count = e.at("count");
  if (off + count > blob.size()) throw DataError("checkpoint blob for " + what + " is truncated");
  Tensor t(e.at("shape").get<Shape>(), std::vector<double>(blob.begin() + off, blob.begin() + off + count));
  if (hex64(fnv1a64(t.data(), count * sizeof(double))) != e.at("fnv1a64").get<std::string>())
    throw DataError("checkpoint digest mismatch for " + what);
  return t;
}

json progress_json(const TrainProgress& p) {
  return json{{"epoch", p.epoch},
              {"global_step", p.global_step},
              {"best_val_dice", p.best_val_dice},
              {"best_epoch", p.best_epoch},
              {"last_val_dice", p.last_val_dice}};
}

}  // namespace

void save_checkpoint(const fs::path& path, const TaffModel& model, const TrainConfig& cfg, OptimizerSet* opt,
                     const TrainProgress& progress) {
  std::vector<const Tensor*> blobs;
  std::size_t offset = 0;
  json params = json::array();
  for (const auto& p : model.params().items()) {
    json e = blob_entry(p.var.value(), offset);
    e["name"] = p.name;
    params.push_back(std::move(e));
    blobs.push_back(&p.var.value());
  }
  json opts = json::array();
  if (opt) {
    for (int g = 0; g < 3; ++g) {
      auto& o = *opt->optimizers[g];
      json slots = json::array();
      for (Tensor* t : o.state()) {
        slots.push_back(blob_entry(*t, offset));
        blobs.push_back(t);
      }
      opts.push_back(json{{"group", to_string(kGroups[g])},
                          {"algorithm", o.algorithm()},
                          {"steps", o.steps_taken()},
                          {"slots", std::move(slots)}});
    }
  }
  const json manifest{{"format", "taffseg-checkpoint"},
                      {"version", kVersion},
                      {"model", model.config()},
                      {"train", cfg},
                      {"progress", progress_json(progress)},
                      {"parameters", std::move(params)},
                      {"optimizers", std::move(opts)}};
  const std::string text = manifest.dump();

  // Write to a temporary name and rename so a crash never leaves a torn file.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(kMagic, sizeof kMagic);
    const std::uint32_t version = kVersion;
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const Tensor* t : blobs)
      out.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(double)));
    if (!out) throw IoError("failed writing checkpoint " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw DataError(path.string() + " is not a taffseg checkpoint");
  if (version != kVersion)
    throw DataError(fmt::format("{} has checkpoint version {}, expected {}", path.string(), version, kVersion));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw DataError(path.string() + ": truncated manifest");
  Checkpoint c;
  try {
    c.manifest = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": malformed manifest: " + e.what());
  }
  std::vector<double> blob;
  {
    const auto start = in.tellg();
    in.seekg(0, std::ios::end);
    const auto bytes = static_cast<std::size_t>(in.tellg() - start);
    in.seekg(start);
    if (bytes % sizeof(double) != 0) throw DataError(path.string() + ": blob size is not a whole number of doubles");
    blob.resize(bytes / sizeof(double));
    in.read(reinterpret_cast<char*>(blob.data()), static_cast<std::streamsize>(bytes));
  }
  const json& m = c.manifest;
  c.model_config = m.at("model").get<ModelConfig>();
  c.train_config = m.at("train").get<TrainConfig>();
  const json& p = m.at("progress");
  c.progress.epoch = p.at("epoch");
  c.progress.global_step = p.at("global_step");
  c.progress.best_val_dice = p.at("best_val_dice");
  c.progress.best_epoch = p.at("best_epoch");
  c.progress.last_val_dice = p.at("last_val_dice");
  for (const auto& e : m.at("parameters")) {
    const std::string name = e.at("name");
    c.parameters.emplace_back(name, blob_tensor(e, blob, "parameter " + name));
  }
  const auto& opts = m.at("optimizers");
  c.has_optimizer_state = !opts.empty();
  for (std::size_t g = 0; g < opts.size() && g < 3; ++g) {
    c.optimizer_steps[g] = opts[g].at("steps");
    int k = 0;
    for (const auto& s : opts[g].at("slots"))
      c.optimizer_slots[g].push_back(blob_tensor(s, blob, fmt::format("{} slot {}", opts[g].at("group").get<std::string>(), k++)));
  }
  return c;
}

void restore_parameters(const Checkpoint& ckpt, TaffModel& model) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [n, t] : ckpt.parameters) by_name[n] = &t;
  for (const auto& p : model.params().items()) {
    const auto it = by_name.find(p.name);
    if (it == by_name.end()) throw DataError("checkpoint lacks parameter " + p.name);
    if (it->second->shape() != p.var.shape())
      throw ShapeError("checkpoint parameter " + p.name + " has shape " + shape_str(it->second->shape()) +
                       ", model expects " + shape_str(p.var.shape()));
    auto v = p.var;
    v.mutable_value() = *it->second;
  }
}

void restore_optimizers(const Checkpoint& ckpt, OptimizerSet& opt) {
  if (!ckpt.has_optimizer_state) throw DataError("checkpoint carries no optimizer state");
  for (int g = 0; g < 3; ++g) {
    auto slots = opt.optimizers[g]->state();
    if (slots.size() != ckpt.optimizer_slots[g].size())
      throw DataError("optimizer state size mismatch for group " + to_string(kGroups[g]));
    for (std::size_t k = 0; k < slots.size(); ++k) {
      if (slots[k]->shape() != ckpt.optimizer_slots[g][k].shape())
        throw ShapeError("optimizer slot shape mismatch in group " + to_string(kGroups[g]));
      *slots[k] = ckpt.optimizer_slots[g][k];
    }
    opt.optimizers[g]->set_steps_taken(ckpt.optimizer_steps[g]);
  }
}

std::unique_ptr<TaffModel> load_model(const Checkpoint& ckpt) {
  auto model = std::make_unique<TaffModel>(ckpt.model_config, ckpt.train_config.seed);
  restore_parameters(ckpt, *model);
  return model;
}

// ---------------------------------------------------------------------------
// fit

double mean_scar_dice(const TaffModel& model, const std::vector<PairedSample>& samples,
                      const std::vector<int>& indices) {
  if (indices.empty()) throw InputError("no samples to score");
  double s = 0.0;
  for (int i : indices) {
    const auto pred = predict_sample(model, samples.at(i));
    s += eval::overlap(pred.labels, samples[i].labels.labels, eval::kScarClass).dice;
  }
  return s / static_cast<double>(indices.size());
}

namespace {

std::vector<int> indices_of(const std::vector<PairedSample>& samples, const DatasetManifest& m, Split split) {
  std::map<std::string, int> by_id;
  for (int i = 0; i < static_cast<int>(samples.size()); ++i) by_id[samples[i].id] = i;
  std::vector<int> out;
  for (const auto& id : m.ids_in(split)) {
    const auto it = by_id.find(id);
    if (it == by_id.end()) throw InputError("manifest sample " + id + " was not loaded");
    out.push_back(it->second);
  }
  return out;
}

std::ofstream open_log(const fs::path& p, bool append, const char* header) {
  const bool fresh = !append || !fs::exists(p);
  std::ofstream out(p, append ? std::ios::app : std::ios::trunc);
  if (!out) throw IoError("cannot write log " + p.string());
  if (fresh) out << header << '\n';
  return out;
}

std::string g(double v) { return fmt::format("{:.10g}", v); }

}  // namespace

FitResult fit(const TrainConfig& cfg, const std::vector<PairedSample>& samples, const DatasetManifest& manifest,
              const fs::path& out_dir, const FitOptions& opt) {
  cfg.validate();
  const auto train_idx = indices_of(samples, manifest, Split::train);
  const auto val_idx = indices_of(samples, manifest, Split::val);
  if (train_idx.empty() || val_idx.empty()) throw InputError("fit needs nonempty train and val splits");
  for (int i : train_idx)
    if (samples[i].ecg.samples() != cfg.ecg_samples)
      throw ConfigError(fmt::format("sample {} has {} ECG samples but ecg_samples = {}", samples[i].id,
                                    samples[i].ecg.samples(), cfg.ecg_samples));
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  TaffModel model(cfg.model_config(), cfg.seed);
  OptimizerSet optimizers = build_optimizers(model, cfg);
  FitResult result;
  TrainProgress progress;
  const bool resuming = opt.resume_from.has_value();
  if (resuming) {
    const Checkpoint ck = read_checkpoint(*opt.resume_from);
    if (json(ck.train_config) != json(cfg)) throw ConfigError("resume checkpoint was written with a different config");
    restore_parameters(ck, model);
    restore_optimizers(ck, optimizers);
    progress = ck.progress;
  } else if (cfg.pretrain_steps > 0 && model.config().use_ecg) {
    synth::DatasetRanges ranges;
    ranges.base.ecg_samples = cfg.ecg_samples;
    const auto corpus = synth::generate_ecg_corpus(cfg.pretrain_corpus, mix_seed(cfg.seed, 0x97e), ranges);
    result.pretrain = pretrain_ecg(corpus, model.config().ecg, cfg.pretrain_steps, cfg.pretrain_batch,
                                   cfg.pretrain_lr, cfg.seed);
    load_ecg_parameters(result.pretrain->params, model);
    if (!opt.quiet)
      spdlog::info("ECG pretraining: train MSE {:.5f} -> {:.5f}, held-out {:.5f} -> {:.5f}",
                   result.pretrain->initial_mse, result.pretrain->final_mse, result.pretrain->heldout_initial_mse,
                   result.pretrain->heldout_final_mse);
  }

  const auto refs = slice_refs(samples, train_idx);
  const int B = cfg.batch_size;
  const long spe = cfg.steps_per_epoch > 0 ? cfg.steps_per_epoch
                                           : std::max<long>(1, static_cast<long>(refs.size()) / B);
  const long total = spe * cfg.epochs;
  const bool use_prior = model.config().use_prior;

  auto train_log = open_log(out_dir / "train_log.csv", resuming,
                            "epoch,step,lr_backbone,lr_ecg,lr_gate,l_total,l_seg,l_dice,l_ce,l_ecg,l_ent,lambda_ecg,"
                            "lambda_ent,entropy_sign,grad_norm");
  auto val_log = open_log(out_dir / "val_log.csv", resuming, "epoch,mean_train_loss,val_scar_dice,best_val_scar_dice");
  auto fusion_log =
      open_log(out_dir / "fusion_log.csv", resuming, "epoch,sample_id,t_norm,w_mri,w_ecg,mean_gamma,mean_beta");

  result.best_checkpoint = out_dir / "best.ckpt";
  result.final_checkpoint = out_dir / "final.ckpt";
  for (int epoch = progress.epoch + 1; epoch < cfg.epochs; ++epoch) {
    std::vector<SliceRef> order = refs;
    Rng shuffle_rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(epoch), 0x5ff1e));
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    for (long s = 0; s < spe; ++s) {
      std::vector<SliceRef> br;
      for (int k = 0; k < B; ++k) br.push_back(order[(static_cast<std::size_t>(s) * B + k) % order.size()]);
      const SliceBatch batch = make_batch(samples, br, use_prior);
      const StepResult r = train_step(model, optimizers, batch, cfg, epoch, progress.global_step, total, spe);
      const auto& l = r.loss;
      train_log << epoch << ',' << progress.global_step << ',' << g(r.lr.backbone) << ',' << g(r.lr.ecg) << ','
                << g(r.lr.gate) << ',' << g(l.l_total) << ',' << g(l.l_seg) << ',' << g(l.l_dice) << ','
                << g(l.l_ce) << ',' << g(l.l_ecg) << ',' << g(l.l_ent) << ',' << g(l.lambda_ecg) << ','
                << g(l.lambda_ent) << ',' << g(l.entropy_sign) << ',' << g(r.grad_norm) << '\n';
      loss_sum += l.l_total;
      ++progress.global_step;
    }
    train_log.flush();

    double dice_sum = 0.0;
    for (int i : val_idx) {
      const auto& smp = samples[i];
      const auto pred = predict_sample(model, smp);
      dice_sum += eval::overlap(pred.labels, smp.labels.labels, eval::kScarClass).dice;
      if (!pred.w_ecg.empty()) {
        const double n = static_cast<double>(pred.w_ecg.size());
        const double w = std::accumulate(pred.w_ecg.begin(), pred.w_ecg.end(), 0.0) / n;
        const double gm = std::accumulate(pred.mean_gamma.begin(), pred.mean_gamma.end(), 0.0) / n;
        const double bm = std::accumulate(pred.mean_beta.begin(), pred.mean_beta.end(), 0.0) / n;
        fusion_log << epoch << ',' << smp.id << ',' << g(smp.t_norm) << ',' << g(1.0 - w) << ',' << g(w) << ','
                   << g(gm) << ',' << g(bm) << '\n';
      }
    }
    fusion_log.flush();
    const double val_dice = dice_sum / static_cast<double>(val_idx.size());
    const double mean_loss = loss_sum / static_cast<double>(spe);
    progress.epoch = epoch;
    progress.last_val_dice = val_dice;
    const bool improved = val_dice > progress.best_val_dice;
    if (improved) {
      progress.best_val_dice = val_dice;
      progress.best_epoch = epoch;
    }
    val_log << epoch << ',' << g(mean_loss) << ',' << g(val_dice) << ',' << g(progress.best_val_dice) << '\n';
    val_log.flush();
    result.epochs.push_back({epoch, mean_loss, val_dice});
    if (!opt.quiet)
      spdlog::info("epoch {}/{}: loss {:.4f}, val scar Dice {:.4f}", epoch + 1, cfg.epochs, mean_loss, val_dice);

    save_checkpoint(out_dir / "last.ckpt", model, cfg, &optimizers, progress);
    if (improved) save_checkpoint(result.best_checkpoint, model, cfg, nullptr, progress);
    if (opt.stop_after_epoch >= 0 && epoch + 1 >= opt.stop_after_epoch) {
      result.progress = progress;
      result.final_val_dice = val_dice;
      return result;
    }
  }
  save_checkpoint(result.final_checkpoint, model, cfg, nullptr, progress);
  result.progress = progress;
  result.final_val_dice = progress.last_val_dice;
  return result;
}

}  // namespace taff::train
