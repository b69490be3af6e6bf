#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "taffseg/model.hpp"
#include "taffseg/objectives.hpp"
#include "taffseg/optim.hpp"

// Multi-optimizer training: three parameter groups with their own optimizer
// and schedule, ECG reconstruction pretraining, the epoch loop with
// validation, CSV logs and checkpoints.
namespace taff::train {

struct TrainConfig {
  // Schedule and data order.
  int epochs = 20;
  // 0 = one pass over the training slices per epoch.
  int steps_per_epoch = 0;
  int batch_size = 8;
  std::uint64_t seed = 0;

  // Composite loss.
  int warmup_epochs = 10;
  double lambda_max = 1.0;
  double lambda_ent = 3e-3;
  std::string entropy_mode = "maximize_entropy";

  // Architecture.
  std::string variant = "multimodal";
  int base_width = 16;
  int depth = 4;
  int tap_depth = 2;
  int ecg_samples = 600;
  int ecg_channels = 16;
  int ecg_latent = 64;
  int gate_hidden = 32;
  int film_hidden = 16;

  // Image backbone: SGD with poly decay.
  double backbone_lr = 1e-2;
  double backbone_momentum = 0.99;
  double backbone_weight_decay = 3e-5;
  bool nesterov = true;
  double poly_power = 0.9;
  // ECG network: AdamW, linear warmup then cosine.
  double ecg_lr = 1e-3;
  double ecg_min_lr = 1e-6;
  double ecg_weight_decay = 5e-5;
  int ecg_warmup_epochs = 5;
  // Fusion gate: AdamW whose lr follows the backbone's decay factor.
  double gate_lr = 1e-3;
  double gate_weight_decay = 1e-4;
  // Joint gradient-norm clip over the trained groups; 0 disables.
  double grad_clip = 12.0;
  bool freeze_ecg = false;
  bool freeze_fusion = false;

  // ECG reconstruction pretraining on an unpaired synthetic corpus; 0 steps skips it.
  int pretrain_steps = 0;
  int pretrain_corpus = 200;
  int pretrain_batch = 16;
  double pretrain_lr = 1e-3;

  void validate() const;
  ModelConfig model_config() const;
  loss::EntropyMode entropy() const { return loss::entropy_mode_from_string(entropy_mode); }
};

void to_json(nlohmann::json& j, const TrainConfig& c);
// Missing keys keep their defaults; unknown keys throw ConfigError naming them.
void from_json(const nlohmann::json& j, TrainConfig& c);
TrainConfig load_train_config(const std::filesystem::path& path);

// Optimizer group names.
enum class Group { mri_backbone, ecg_network, fusion_gate };
inline constexpr std::array<Group, 3> kGroups{Group::mri_backbone, Group::ecg_network, Group::fusion_gate};
std::string to_string(Group g);

struct OptimizerSpec {
  Group group = Group::mri_backbone;
  std::string algorithm;  // "sgd_momentum" or "adamw"
  double lr0 = 0.0;
  double momentum = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.0;
  std::string schedule;  // "poly_decay", "warmup_cosine" or "synchronized"
};

struct OptimizerSet {
  std::array<OptimizerSpec, 3> specs;
  std::array<std::unique_ptr<optim::Optimizer>, 3> optimizers;
  std::array<bool, 3> frozen{false, false, false};

  optim::Optimizer& at(Group g) { return *optimizers[static_cast<int>(g)]; }
  const OptimizerSpec& spec(Group g) const { return specs[static_cast<int>(g)]; }
};

// Which group a parameter name belongs to. Throws ConfigError listing every
// parameter that matches no group or more than one.
std::array<std::vector<nn::Parameter>, 3> partition_parameters(const nn::ParameterList& params);

OptimizerSet build_optimizers(TaffModel& model, const TrainConfig& cfg);

struct LearningRates {
  double backbone = 0.0;
  double ecg = 0.0;
  double gate = 0.0;
};
LearningRates learning_rates(const TrainConfig& cfg, long step, long total_steps, long steps_per_epoch);

struct StepResult {
  loss::LossBreakdown loss;
  LearningRates lr;
  double grad_norm = 0.0;
};

// One forward/backward pass and one update per (unfrozen) optimizer group.
StepResult train_step(TaffModel& model, OptimizerSet& opt, const SliceBatch& batch, const TrainConfig& cfg, int epoch,
                      long global_step, long total_steps, long steps_per_epoch);

struct PretrainResult {
  nn::ParameterList params;  // names prefixed "ecg."
  double initial_mse = 0.0;
  double final_mse = 0.0;
  double heldout_initial_mse = 0.0;
  double heldout_final_mse = 0.0;
};

// Reconstruction-only training of a standalone ECG autoencoder; the last
// tenth of the corpus is held out.
PretrainResult pretrain_ecg(const std::vector<EcgRecord>& corpus, const ecg::EcgConfig& ecg_cfg, int steps,
                            int batch_size, double lr, std::uint64_t seed);
// Copies pretrained ECG parameters into the model (matched by name).
void load_ecg_parameters(const nn::ParameterList& pretrained, TaffModel& model);

// ---------------------------------------------------------------------------
// Checkpoints: "TAFFCKPT", u32 version, u64 manifest length, JSON manifest,
// then little-endian float64 blobs. The manifest records the model and train
// configs, progress counters, and a FNV-1a-64 digest per blob.

struct TrainProgress {
  int epoch = -1;  // last completed epoch
  long global_step = 0;
  double best_val_dice = -1.0;
  int best_epoch = -1;
  double last_val_dice = -1.0;
};

void save_checkpoint(const std::filesystem::path& path, const TaffModel& model, const TrainConfig& cfg,
                     OptimizerSet* opt, const TrainProgress& progress);

struct Checkpoint {
  ModelConfig model_config;
  TrainConfig train_config;
  TrainProgress progress;
  nlohmann::json manifest;
  std::vector<std::pair<std::string, Tensor>> parameters;
  // Per group: steps taken and slot tensors in optimizer order.
  std::array<long, 3> optimizer_steps{0, 0, 0};
  std::array<std::vector<Tensor>, 3> optimizer_slots;
  bool has_optimizer_state = false;
};

Checkpoint read_checkpoint(const std::filesystem::path& path);
// Builds a model from a checkpoint and loads its weights.
std::unique_ptr<TaffModel> load_model(const Checkpoint& ckpt);
void restore_parameters(const Checkpoint& ckpt, TaffModel& model);
void restore_optimizers(const Checkpoint& ckpt, OptimizerSet& opt);

std::uint64_t fnv1a64(const void* data, std::size_t bytes);

// ---------------------------------------------------------------------------

struct FitOptions {
  std::optional<std::filesystem::path> resume_from;
  // Stop after this many completed epochs (simulates an interruption); -1 runs to the end.
  int stop_after_epoch = -1;
  bool quiet = false;
};

struct EpochSummary {
  int epoch = 0;
  double mean_loss = 0.0;
  double val_scar_dice = 0.0;
};

struct FitResult {
  std::vector<EpochSummary> epochs;
  TrainProgress progress;
  double final_val_dice = 0.0;
  std::filesystem::path best_checkpoint;
  std::filesystem::path final_checkpoint;
  std::optional<PretrainResult> pretrain;
};

// Mean per-volume scar Dice of the model over the given samples.
double mean_scar_dice(const TaffModel& model, const std::vector<PairedSample>& samples,
                      const std::vector<int>& indices);

// Trains on the train split, validates every epoch on the val split, writes
// train_log.csv, val_log.csv, fusion_log.csv, last.ckpt, best.ckpt and final.ckpt to out_dir.
FitResult fit(const TrainConfig& cfg, const std::vector<PairedSample>& samples, const DatasetManifest& manifest,
              const std::filesystem::path& out_dir, const FitOptions& opt = {});

}  // namespace taff::train
