#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "knet/pipeline.hpp"
#include "knet/synth_data.hpp"

// Optimizer, schedule, checkpoints, evaluation and the train/infer/ablate drivers.
namespace knet::train {

struct TrainConfig {
  double lr = 1e-4;
  std::optional<double> weight_decay;  // default: 0.05, or 0.0005 in semantic mode
  double beta1 = 0.9, beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 0.0;  // global L2 norm cap, 0 = off
  std::size_t epochs = 12;
  std::vector<double> milestones{2.0 / 3.0, 11.0 / 12.0};
  double decay = 0.1;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  std::size_t eval_every = 1;  // epochs
  pipeline::ModelConfig model;
  std::string train_data, val_data;

  double effective_weight_decay() const;
  void validate() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// "model.stages=2" style override of a JSON document. The value is parsed as
// JSON when possible, else taken as a string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

struct AdamState {
  std::size_t step = 0;
  std::vector<std::vector<double>> m, v;  // aligned with the parameter list
};

// Decoupled weight decay. Parameters without a gradient are treated as having
// a zero gradient. Throws TrainingError naming the first non-finite gradient.
void adamw_step(const nn::ParameterList& params, AdamState& state, double lr, double weight_decay,
                double beta1, double beta2, double eps = 1e-8);

// Piecewise-constant step decay; drops at floor(fraction * total) iterations.
double learning_rate(const TrainConfig& cfg, std::size_t iteration, std::size_t total_iterations);
std::vector<std::size_t> milestone_iterations(const TrainConfig& cfg, std::size_t total_iterations);

// Scales gradients in place so their global norm is at most max_norm.
// Returns the norm before clipping.
double clip_gradients(const nn::ParameterList& params, double max_norm);

struct Checkpoint {
  TrainConfig config;
  std::size_t iteration = 0, epoch = 0;
  AdamState adam;
  nlohmann::json history = nlohmann::json::array();
  std::vector<std::pair<std::string, Tensor>> parameters;
};

void save_checkpoint(const std::filesystem::path& path, const pipeline::Model& model, const AdamState& adam,
                     const TrainConfig& cfg, std::size_t iteration, std::size_t epoch,
                     const nlohmann::json& history);
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Copies checkpoint values into a model built from the same config.
void restore_parameters(pipeline::Model& model, const Checkpoint& ckpt);
std::uint32_t config_hash(const TrainConfig& cfg);

struct StageMetrics {
  double pq = 0, sq = 0, rq = 0, pq_things = 0, pq_stuff = 0;
  double ap = 0, ap50 = 0, ap75 = 0;
  double miou = 0;
};

struct EvalReport {
  TaskMode mode = TaskMode::kPanoptic;
  std::vector<StageMetrics> stages;  // 0..S

  // PQ, AP or mIoU of the final stage, depending on the mode.
  double primary() const;
  double primary(std::size_t stage) const;
};

nlohmann::json to_json(const EvalReport& r);
std::string format_report(const EvalReport& r);

struct EvalOptions {
  std::size_t batch_size = 4;
  std::size_t threads = 1;
};

EvalReport evaluate(const pipeline::Model& model, const std::vector<GroundTruthSample>& samples,
                    const EvalOptions& opts = {});

// Loads a checkpoint and evaluates it. A mode different from the checkpoint's
// raises ConfigError.
EvalReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::vector<GroundTruthSample>& samples,
                               std::optional<TaskMode> expected_mode = std::nullopt, const EvalOptions& opts = {});
pipeline::Model load_model(const std::filesystem::path& checkpoint);

struct TrainOptions {
  std::optional<std::filesystem::path> resume;  // checkpoint to continue from
  std::size_t stop_after_epochs = 0;            // 0 = run to the configured end
  std::size_t eval_threads = 1;
  bool quiet = true;
};

struct TrainResult {
  EvalReport final_report;
  nlohmann::json history;  // one entry per evaluated epoch
  std::size_t iterations = 0;
  double first_loss = 0, last_loss = 0;
};

// Writes <run>/log.jsonl, <run>/metrics.json, <run>/last.ckpt and <run>/best.ckpt.
TrainResult train(const TrainConfig& cfg, const data::Dataset& train_set, const data::Dataset& val_set,
                  const std::filesystem::path& run_dir, const TrainOptions& opts = {});

// Writes the prediction for one image into out_dir and returns the segment JSON.
nlohmann::json infer(const pipeline::Model& model, const Tensor& image, const std::filesystem::path& out_dir);

struct AblationRow {
  std::string name;
  bool adaptive_update = true, kernel_interaction = true;
  std::size_t stages = 0, instance_kernels = 0;
  EvalReport report;
};

enum class AblationGrid { kUpdateInteraction, kStages, kKernels };

AblationGrid parse_grid(const std::string& name);
std::vector<AblationRow> ablation_cells(const TrainConfig& base, AblationGrid grid);
std::vector<AblationRow> ablate(const TrainConfig& base, AblationGrid grid, const data::Dataset& train_set,
                                const data::Dataset& val_set, const std::filesystem::path& out_dir,
                                const TrainOptions& opts = {});
std::string format_ablation(const std::vector<AblationRow>& rows);

}  // namespace knet::train
