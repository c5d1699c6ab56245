#pragma once

#include <span>
#include <utility>
#include <vector>

#include "knet/kernel_head.hpp"
#include "knet/types.hpp"

// Mask-based bipartite matching and the set prediction loss.
namespace knet::loss {

struct LossWeights {
  double cls = 2.0;
  double ce = 1.0;
  double dice = 4.0;
  double seg = 1.0;  // semantic branch terms, folded into ce and dice
  double focal_alpha = 0.25;
  double focal_gamma = 2.0;
};

constexpr double kDiceEps = 1e-4;
constexpr double kProbClamp = 1e-7;

// Scalar forms, used by the matching cost and as oracles.
double focal_loss(double prob, int target, double alpha = 0.25, double gamma = 2.0);
double dice_loss(std::span<const double> pred, std::span<const double> gt, double eps = kDiceEps);
// Binary cross-entropy on sigmoid(logits), mean over pixels.
double mask_ce_loss(std::span<const double> logits, std::span<const double> gt);

// Differentiable forms. logits/targets [R, K]: sum over K, mean over R.
Tensor focal_loss(const Tensor& logits, const Tensor& targets, double alpha, double gamma);
// probs, gt: [M, P] -> [M]
Tensor dice_loss(const Tensor& probs, const Tensor& gt, double eps = kDiceEps);
// logits, gt: [M, P] -> [M]
Tensor mask_ce_loss(const Tensor& logits, const Tensor& gt);
// logits [K, P] with softmax over K, labels in [0, K): mean over pixels.
Tensor softmax_ce_loss(const Tensor& logits, std::span<const int> labels);

struct CostMatrix {
  std::size_t n_pred = 0, n_gt = 0;
  std::vector<double> total, cls, ce, dice;  // row-major [n_pred, n_gt]

  double at(std::size_t pred, std::size_t gt) const { return total[pred * n_gt + gt]; }
};

struct Assignment {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (pred, gt), ascending gt
  std::vector<std::size_t> unmatched_preds;
};

// Per-image targets at the loss resolution.
struct ImageTargets {
  std::size_t height = 0, width = 0;
  std::vector<std::vector<double>> thing_masks;  // binary, one per GT instance
  std::vector<std::size_t> thing_classes;        // thing index per instance
  std::vector<std::vector<double>> stuff_masks;  // panoptic: one per stuff class
  std::vector<int> semantic;                     // per-pixel semantic index
};

// Resamples GT to out_h x out_w by nearest neighbour (identity when equal).
ImageTargets make_targets(const GroundTruthSample& gt, const ClassSpace& classes, TaskMode mode,
                          std::size_t out_h, std::size_t out_w);

// class_probs [N, K], mask_logits [N, P]. Thing GTs only.
CostMatrix matching_cost(std::span<const double> class_probs, std::size_t num_classes,
                         std::span<const double> mask_logits, std::size_t n_pred,
                         const ImageTargets& targets, const LossWeights& w = {});

// Minimum total cost; among optimal assignments, the lexicographically smallest
// sequence of predictions taken by GT 0, 1, ...
Assignment hungarian_assign(const CostMatrix& costs);
// Sum of costs of the pairs, accumulated in ascending GT order.
double assignment_cost(const CostMatrix& costs, const Assignment& a);

struct StageLoss {
  double total = 0, cls = 0, ce = 0, dice = 0;
};

struct LossBreakdown {
  double total = 0, cls = 0, ce = 0, dice = 0;
  std::vector<StageLoss> stages;
  Tensor value;  // differentiable total
};

struct LossConfig {
  TaskMode mode = TaskMode::kInstance;
  std::size_t instance_kernels = 0;  // panoptic: rows before the stuff kernels
  LossWeights weights;
};

// Deep-supervised loss summed over all stages, mean over the batch. Mask logits
// are upsampled to the target resolution. semantic_logits (optional, [B, K, h, w])
// are the static semantic-branch predictions supervised at stage 0.
LossBreakdown set_prediction_loss(const std::vector<head::StageOutput>& stages,
                                  const std::vector<ImageTargets>& targets, const LossConfig& cfg,
                                  const Tensor& semantic_logits = Tensor());

// Assignments each stage's loss used, per stage then per image.
std::vector<std::vector<Assignment>> stage_assignments(
    const std::vector<head::StageOutput>& stages, const std::vector<ImageTargets>& targets,
    const LossConfig& cfg);

}  // namespace knet::loss
