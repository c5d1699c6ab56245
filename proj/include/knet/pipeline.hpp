#pragma once

#include <vector>

#include <nlohmann/json.hpp>

#include "knet/kernel_head.hpp"
#include "knet/losses.hpp"
#include "knet/metrics.hpp"
#include "knet/nn.hpp"
#include "knet/types.hpp"

// Task assembly: lite backbone, static kernels, the three task modes, and
// turning stage outputs into instances or a panoptic label map.
namespace knet::pipeline {

struct ModelConfig {
  TaskMode mode = TaskMode::kPanoptic;
  ClassSpace classes;
  std::size_t instance_kernels = 10;
  std::size_t channels = 32;
  std::size_t stages = 3;
  std::size_t height = 64, width = 64;
  std::size_t heads = 4;
  std::size_t ffn_multiplier = 4;
  bool adaptive_update = true;
  bool kernel_interaction = true;
  bool positional_encoding = true;
  std::uint64_t seed = 0;

  // Inference.
  double mask_threshold = 0.5;
  double score_floor = 0.3;
  double ap_score_floor = 0.05;
  std::size_t min_area = 16;
  double keep_fraction = 0.5;

  // Rows of the semantic branch output.
  std::size_t semantic_classes() const;
  // Kernels entering the iterative head.
  std::size_t total_kernels() const;
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct BackboneFeatures {
  Tensor instance;  // F_ins [B, C, H/4, W/4]; undefined in semantic mode
  Tensor semantic;  // F_sem
};

class BackboneLite {
 public:
  BackboneLite() = default;
  BackboneLite(std::size_t channels, bool instance_branch, bool positional_encoding, nn::Rng& rng);

  BackboneFeatures forward(const Tensor& images) const;
  void collect(const std::string& prefix, nn::ParameterList& out) const;

  nn::Conv2d stem1, stem2;
  nn::Conv2d ins1, ins2;
  nn::Conv2d sem1, sem2;
  bool instance_branch = true;
  bool positional_encoding = true;
};

BackboneFeatures backbone_forward(const Tensor& images, const BackboneLite& backbone);

struct InitialPredictions {
  Tensor instance;  // M0_ins logits [B, N_ins, h, w]
  Tensor semantic;  // M0_sem logits [B, K, h, w]
};

InitialPredictions initial_predictions(const BackboneFeatures& f, const Tensor& static_instance,
                                       const Tensor& static_semantic);

struct PanopticInputs {
  Tensor masks;     // M0 [B, N_ins + stuff, h, w]
  Tensor kernels;   // K0 [N_ins + stuff, C]
  Tensor features;  // F = F_ins + F_sem
};

// Stuff rows are the last `stuff` rows of the semantic predictions and kernels.
PanopticInputs build_panoptic_inputs(const Tensor& m0_ins, const Tensor& m0_sem, const Tensor& k0_ins,
                                     const Tensor& k0_sem, const Tensor& f_ins, const Tensor& f_sem,
                                     std::size_t stuff);

struct ForwardOutput {
  std::vector<head::StageOutput> stages;  // 0..S
  Tensor semantic_logits;                 // M0_sem (instance/panoptic modes)
};

class Model {
 public:
  explicit Model(const ModelConfig& config);

  ForwardOutput forward(const Tensor& images) const;
  loss::LossBreakdown loss(const ForwardOutput& out, const std::vector<loss::ImageTargets>& targets) const;
  loss::LossConfig loss_config() const;

  nn::ParameterList parameters() const;

  ModelConfig config;
  BackboneLite backbone;
  Tensor static_instance;  // K0_ins [N_ins, C]
  Tensor static_semantic;  // K0_sem [K, C]
  head::KernelUpdateHead head;
};

// [B, 3, H, W] batch from samples.
Tensor stack_images(const std::vector<const GroundTruthSample*>& samples);

// Probabilities of image b at H x W: [N, H*W].
std::vector<double> mask_probabilities(const head::StageOutput& stage, std::size_t b, std::size_t height,
                                       std::size_t width);

// Per instance kernel: score = max class probability, category = argmax,
// mask = probability >= threshold. Kernels scoring below score_floor are dropped.
std::vector<metrics::ScoredInstance> binarize_instances(const head::StageOutput& stage, std::size_t b,
                                                        const ModelConfig& cfg, double threshold,
                                                        double score_floor);

// Mixed-order pasting of thing and stuff candidates ranked by score x probability.
PanopticMap merge_panoptic(const head::StageOutput& stage, std::size_t b, const ModelConfig& cfg);

// Per-pixel argmax category of a semantic-mode stage.
std::vector<int> semantic_prediction(const head::StageOutput& stage, std::size_t b, const ModelConfig& cfg);

}  // namespace knet::pipeline
