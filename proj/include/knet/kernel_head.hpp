#pragma once

#include <optional>
#include <vector>

#include "knet/nn.hpp"

// Kernel update head: group feature assembling, adaptive kernel update,
// kernel interaction, then new mask and class predictions. Stages chain so
// each one refines the kernels and masks of the previous.
namespace knet::head {

enum class MaskActivation { kSigmoid, kSoftmax };

struct KernelSet {
  enum class Origin { kLearnedStatic, kUpdated };
  Tensor kernels;  // [N, C] when static, [B, N, C] once updated
  Origin origin = Origin::kLearnedStatic;
  std::size_t stage = 0;
};

struct MaskLogits {
  Tensor logits;  // [B, N, H, W]
  MaskActivation activation = MaskActivation::kSigmoid;

  // Sigmoid per mask, or softmax across the N masks at each pixel.
  Tensor activated() const;
};

struct GateTensors {
  Tensor feature_gate;  // G^F, [B, N, C]
  Tensor kernel_gate;   // G^K, [B, N, C]
};

struct StageOutput {
  KernelSet kernels;
  MaskLogits masks;
  Tensor class_logits;  // [B, N, classes]; undefined in semantic mode
};

struct HeadConfig {
  std::size_t channels = 32;
  std::size_t heads = 4;
  std::size_t ffn_multiplier = 4;
  // Thing classes scored per kernel; 0 disables classification (semantic mode).
  std::size_t num_classes = 0;
  bool adaptive_update = true;
  bool kernel_interaction = true;
  MaskActivation activation = MaskActivation::kSigmoid;
};

// F^K[b, n, c] = sum_{u,v} M[b, n, u, v] * F[b, c, u, v], unnormalized.
// mask_probs: [B, N, H, W], features: [B, C, H, W].
Tensor assemble_group_features(const Tensor& mask_probs, const Tensor& features);

// Gated blend of group features and previous kernels.
class AdaptiveKernelUpdate {
 public:
  AdaptiveKernelUpdate() = default;
  AdaptiveKernelUpdate(std::size_t channels, nn::Rng& rng);

  Tensor forward(const Tensor& group_features, const Tensor& prev_kernels,
                 GateTensors* gates = nullptr) const;
  void collect(const std::string& prefix, nn::ParameterList& out) const;
  void set_norm_enabled(bool on);

  nn::Linear feature_proj;  // phi_1
  nn::Linear kernel_proj;   // phi_2
  nn::Linear kernel_gate, feature_gate, feature_value, kernel_value;  // psi_1..psi_4
  nn::LayerNorm kernel_gate_norm, feature_gate_norm, feature_value_norm, kernel_value_norm;
};

// Ablation variant without gating: FC-LN-ReLU(F^K + K_prev).
class PlainKernelUpdate {
 public:
  PlainKernelUpdate() = default;
  PlainKernelUpdate(std::size_t channels, nn::Rng& rng) : block(channels, channels, rng) {}

  Tensor forward(const Tensor& group_features, const Tensor& prev_kernels) const;
  void collect(const std::string& prefix, nn::ParameterList& out) const {
    block.collect(prefix + ".fc_ln_relu", out);
  }

  nn::FcLnRelu block;
};

// Self-attention across the N kernels (residual + LN), then FFN (residual + LN).
class KernelInteraction {
 public:
  KernelInteraction() = default;
  KernelInteraction(std::size_t channels, std::size_t heads, std::size_t hidden, nn::Rng& rng);

  Tensor forward(const Tensor& kernels) const;
  void collect(const std::string& prefix, nn::ParameterList& out) const;

  nn::MultiHeadAttention attention;
  nn::LayerNorm attention_norm;
  nn::FeedForward ffn;
};

// FC-LN-ReLU followed by FC. Used as the mask transform g_i and the class head.
class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(std::size_t channels, std::size_t out, nn::Rng& rng)
      : hidden(channels, channels, rng), out(channels, out, rng) {}

  Tensor forward(const Tensor& x) const { return out.forward(hidden.forward(x)); }
  void collect(const std::string& prefix, nn::ParameterList& list) const;

  nn::FcLnRelu hidden;
  nn::Linear out;
};

Tensor adaptive_kernel_update(const Tensor& group_features, const Tensor& prev_kernels,
                              const AdaptiveKernelUpdate& layer, GateTensors* gates = nullptr);
Tensor update_no_aku(const Tensor& group_features, const Tensor& prev_kernels,
                     const PlainKernelUpdate& layer);
Tensor kernel_interaction(const Tensor& kernels, const KernelInteraction& layer);

// logits[b, n, u, v] = sum_c g(K)[b, n, c] * F[b, c, u, v].
MaskLogits predict_masks(const Tensor& kernels, const Tensor& features, const ProjectionHead& g,
                         MaskActivation activation);

// Kernels convolved directly with features (no transform), for static kernels.
Tensor kernel_conv(const Tensor& kernels, const Tensor& features);

// Broadcasts [N, C] kernels over the batch; [B, N, C] passes through.
Tensor batch_kernels(const Tensor& kernels, std::size_t batch);

// One head application f_s.
class KernelUpdateStage {
 public:
  KernelUpdateStage() = default;
  KernelUpdateStage(const HeadConfig& config, nn::Rng& rng);

  StageOutput run(const MaskLogits& prev_masks, const Tensor& prev_kernels,
                  const Tensor& features, std::size_t stage_index = 1,
                  GateTensors* gates = nullptr) const;
  // Throws ContractError when the stage has no class head (semantic mode).
  Tensor predict_classes(const Tensor& kernels) const;
  void collect(const std::string& prefix, nn::ParameterList& out) const;
  void set_norm_enabled(bool on);

  HeadConfig config;
  AdaptiveKernelUpdate adaptive;
  PlainKernelUpdate plain;
  KernelInteraction interaction;
  ProjectionHead mask_head;
  std::optional<ProjectionHead> class_head;
};

// S-stage iterative driver. Each stage has its own parameters.
class KernelUpdateHead {
 public:
  KernelUpdateHead() = default;
  KernelUpdateHead(const HeadConfig& config, std::size_t max_stages, nn::Rng& rng);

  // Stage 0: the static kernels with their initial masks (and class scores).
  StageOutput initial_stage(const Tensor& static_kernels, const MaskLogits& initial_masks,
                            std::size_t batch) const;
  // Returns S+1 outputs; index 0 holds the static-kernel predictions.
  std::vector<StageOutput> run_iterative(const Tensor& static_kernels,
                                         const MaskLogits& initial_masks,
                                         const Tensor& features, std::size_t stages) const;
  void collect(const std::string& prefix, nn::ParameterList& out) const;

  std::size_t max_stages() const { return stages_.size(); }
  const KernelUpdateStage& stage(std::size_t s) const { return stages_.at(s - 1); }
  KernelUpdateStage& stage(std::size_t s) { return stages_.at(s - 1); }

  HeadConfig config;
  // Scores the static kernels so stage 0 has class predictions too.
  std::optional<ProjectionHead> static_class_head;

 private:
  std::vector<KernelUpdateStage> stages_;
};

}  // namespace knet::head
