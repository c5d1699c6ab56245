#include "knet/kernel_head.hpp"

namespace knet::head {

Tensor MaskLogits::activated() const {
  if (activation == MaskActivation::kSoftmax) return softmax(logits, 1);
  return sigmoid(logits);
}

Tensor assemble_group_features(const Tensor& mask_probs, const Tensor& features) {
  if (mask_probs.dim() != 4 || features.dim() != 4)
    throw DimensionError("group features need 4-D masks and features, got " +
                         shape_str(mask_probs.shape()) + " and " + shape_str(features.shape()));
  const auto& ms = mask_probs.shape();
  const auto& fs = features.shape();
  if (ms[0] != fs[0] || ms[2] != fs[2] || ms[3] != fs[3])
    throw DimensionError("mask " + shape_str(ms) + " and feature " + shape_str(fs) +
                         " grids disagree");
  const std::size_t pixels = ms[2] * ms[3];
  Tensor m = reshape(mask_probs, {ms[0], ms[1], pixels});
  Tensor f = reshape(features, {fs[0], fs[1], pixels});
  return matmul(m, transpose(f));
}

Tensor batch_kernels(const Tensor& kernels, std::size_t batch) {
  if (kernels.dim() == 3) {
    if (kernels.size(0) != batch)
      throw DimensionError("kernel batch " + shape_str(kernels.shape()) + " vs batch " +
                           std::to_string(batch));
    return kernels;
  }
  if (kernels.dim() != 2)
    throw DimensionError("kernels must be [N, C] or [B, N, C], got " + shape_str(kernels.shape()));
  return broadcast_to(kernels, {batch, kernels.size(0), kernels.size(1)});
}

AdaptiveKernelUpdate::AdaptiveKernelUpdate(std::size_t c, nn::Rng& rng)
    : feature_proj(c, c, rng),
      kernel_proj(c, c, rng),
      kernel_gate(c, c, rng),
      feature_gate(c, c, rng),
      feature_value(c, c, rng),
      kernel_value(c, c, rng),
      kernel_gate_norm(c),
      feature_gate_norm(c),
      feature_value_norm(c),
      kernel_value_norm(c) {}

Tensor AdaptiveKernelUpdate::forward(const Tensor& group_features, const Tensor& prev_kernels,
                                     GateTensors* gates) const {
  Tensor k_prev = batch_kernels(prev_kernels, group_features.size(0));
  if (k_prev.shape() != group_features.shape())
    throw DimensionError("group features " + shape_str(group_features.shape()) +
                         " vs kernels " + shape_str(k_prev.shape()));
  Tensor fg = feature_proj.forward(group_features) * kernel_proj.forward(k_prev);
  Tensor gk = sigmoid(kernel_gate_norm.forward(kernel_gate.forward(fg)));
  Tensor gf = sigmoid(feature_gate_norm.forward(feature_gate.forward(fg)));
  Tensor out = gf * feature_value_norm.forward(feature_value.forward(group_features)) +
               gk * kernel_value_norm.forward(kernel_value.forward(k_prev));
  if (gates) *gates = GateTensors{gf, gk};
  return out;
}

void AdaptiveKernelUpdate::collect(const std::string& prefix, nn::ParameterList& out) const {
  feature_proj.collect(prefix + ".phi1", out);
  kernel_proj.collect(prefix + ".phi2", out);
  kernel_gate.collect(prefix + ".psi1", out);
  kernel_gate_norm.collect(prefix + ".psi1_ln", out);
  feature_gate.collect(prefix + ".psi2", out);
  feature_gate_norm.collect(prefix + ".psi2_ln", out);
  feature_value.collect(prefix + ".psi3", out);
  feature_value_norm.collect(prefix + ".psi3_ln", out);
  kernel_value.collect(prefix + ".psi4", out);
  kernel_value_norm.collect(prefix + ".psi4_ln", out);
}

void AdaptiveKernelUpdate::set_norm_enabled(bool on) {
  kernel_gate_norm.enabled = on;
  feature_gate_norm.enabled = on;
  feature_value_norm.enabled = on;
  kernel_value_norm.enabled = on;
}

Tensor PlainKernelUpdate::forward(const Tensor& group_features, const Tensor& prev_kernels) const {
  Tensor k_prev = batch_kernels(prev_kernels, group_features.size(0));
  return block.forward(group_features + k_prev);
}

KernelInteraction::KernelInteraction(std::size_t c, std::size_t heads, std::size_t hidden,
                                     nn::Rng& rng)
    : attention(c, heads, rng), attention_norm(c), ffn(c, hidden, rng) {}

Tensor KernelInteraction::forward(const Tensor& kernels) const {
  Tensor x = attention_norm.forward(kernels + attention.forward(kernels, kernels, kernels));
  return ffn.forward(x);
}

void KernelInteraction::collect(const std::string& prefix, nn::ParameterList& out) const {
  attention.collect(prefix + ".attn", out);
  attention_norm.collect(prefix + ".attn_ln", out);
  ffn.collect(prefix + ".ffn", out);
}

void ProjectionHead::collect(const std::string& prefix, nn::ParameterList& list) const {
  hidden.collect(prefix + ".hidden", list);
  out.collect(prefix + ".out", list);
}

Tensor adaptive_kernel_update(const Tensor& group_features, const Tensor& prev_kernels,
                              const AdaptiveKernelUpdate& layer, GateTensors* gates) {
  return layer.forward(group_features, prev_kernels, gates);
}

Tensor update_no_aku(const Tensor& group_features, const Tensor& prev_kernels,
                     const PlainKernelUpdate& layer) {
  return layer.forward(group_features, prev_kernels);
}

Tensor kernel_interaction(const Tensor& kernels, const KernelInteraction& layer) {
  return layer.forward(kernels);
}

Tensor kernel_conv(const Tensor& kernels, const Tensor& features) {
  if (features.dim() != 4)
    throw DimensionError("features must be [B, C, H, W], got " + shape_str(features.shape()));
  const auto& fs = features.shape();
  Tensor k = batch_kernels(kernels, fs[0]);
  if (k.size(2) != fs[1])
    throw DimensionError("kernel width " + shape_str(k.shape()) + " vs features " + shape_str(fs));
  Tensor f = reshape(features, {fs[0], fs[1], fs[2] * fs[3]});
  return reshape(matmul(k, f), {fs[0], k.size(1), fs[2], fs[3]});
}

MaskLogits predict_masks(const Tensor& kernels, const Tensor& features, const ProjectionHead& g,
                         MaskActivation activation) {
  return MaskLogits{kernel_conv(g.forward(kernels), features), activation};
}

KernelUpdateStage::KernelUpdateStage(const HeadConfig& cfg, nn::Rng& rng) : config(cfg) {
  const std::size_t c = cfg.channels;
  if (cfg.adaptive_update)
    adaptive = AdaptiveKernelUpdate(c, rng);
  else
    plain = PlainKernelUpdate(c, rng);
  if (cfg.kernel_interaction) interaction = KernelInteraction(c, cfg.heads, cfg.ffn_multiplier * c, rng);
  mask_head = ProjectionHead(c, c, rng);
  if (cfg.num_classes > 0) class_head = ProjectionHead(c, cfg.num_classes, rng);
}

StageOutput KernelUpdateStage::run(const MaskLogits& prev_masks, const Tensor& prev_kernels,
                                   const Tensor& features, std::size_t stage_index,
                                   GateTensors* gates) const {
  Tensor group = assemble_group_features(prev_masks.activated(), features);
  Tensor updated = config.adaptive_update ? adaptive.forward(group, prev_kernels, gates)
                                          : plain.forward(group, prev_kernels);
  Tensor kernels = config.kernel_interaction ? interaction.forward(updated) : updated;
  StageOutput out;
  out.kernels = KernelSet{kernels, KernelSet::Origin::kUpdated, stage_index};
  out.masks = predict_masks(kernels, features, mask_head, config.activation);
  if (class_head) out.class_logits = class_head->forward(kernels);
  return out;
}

Tensor KernelUpdateStage::predict_classes(const Tensor& kernels) const {
  if (!class_head) throw ContractError("class prediction requested in semantic mode");
  return class_head->forward(kernels);
}

void KernelUpdateStage::collect(const std::string& prefix, nn::ParameterList& out) const {
  if (config.adaptive_update)
    adaptive.collect(prefix + ".aku", out);
  else
    plain.collect(prefix + ".update", out);
  if (config.kernel_interaction) interaction.collect(prefix + ".ki", out);
  mask_head.collect(prefix + ".mask_head", out);
  if (class_head) class_head->collect(prefix + ".cls_head", out);
}

void KernelUpdateStage::set_norm_enabled(bool on) { adaptive.set_norm_enabled(on); }

KernelUpdateHead::KernelUpdateHead(const HeadConfig& cfg, std::size_t max_stages, nn::Rng& rng)
    : config(cfg) {
  if (cfg.channels % cfg.heads != 0 && cfg.kernel_interaction)
    throw ConfigError("width " + std::to_string(cfg.channels) + " is not divisible by " +
                      std::to_string(cfg.heads) + " heads");
  if (cfg.num_classes > 0) static_class_head = ProjectionHead(cfg.channels, cfg.num_classes, rng);
  stages_.reserve(max_stages);
  for (std::size_t s = 0; s < max_stages; ++s) stages_.emplace_back(cfg, rng);
}

StageOutput KernelUpdateHead::initial_stage(const Tensor& static_kernels,
                                            const MaskLogits& initial_masks,
                                            std::size_t batch) const {
  StageOutput first;
  first.kernels = KernelSet{static_kernels, KernelSet::Origin::kLearnedStatic, 0};
  first.masks = initial_masks;
  if (static_class_head) first.class_logits = static_class_head->forward(batch_kernels(static_kernels, batch));
  return first;
}

std::vector<StageOutput> KernelUpdateHead::run_iterative(const Tensor& static_kernels,
                                                         const MaskLogits& initial_masks,
                                                         const Tensor& features,
                                                         std::size_t stages) const {
  if (stages < 1) throw ConfigError("the iterative head needs at least one stage");
  if (stages > stages_.size())
    throw ConfigError("requested " + std::to_string(stages) + " stages but the head has " +
                      std::to_string(stages_.size()));
  std::vector<StageOutput> outs;
  outs.reserve(stages + 1);
  outs.push_back(initial_stage(static_kernels, initial_masks, features.size(0)));
  for (std::size_t s = 1; s <= stages; ++s) {
    const StageOutput& prev = outs.back();
    outs.push_back(stages_[s - 1].run(prev.masks, prev.kernels.kernels, features, s));
  }
  return outs;
}

void KernelUpdateHead::collect(const std::string& prefix, nn::ParameterList& out) const {
  if (static_class_head) static_class_head->collect(prefix + ".stage0.cls_head", out);
  for (std::size_t s = 0; s < stages_.size(); ++s)
    stages_[s].collect(prefix + ".stage" + std::to_string(s + 1), out);
}

}  // namespace knet::head
