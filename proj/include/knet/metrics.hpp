#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "knet/types.hpp"

namespace knet::metrics {

// |a & b| / |a | b|. Two empty masks give `empty_value`.
double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b,
                double empty_value = 0.0);

struct ClassPq {
  double pq = 0, sq = 0, rq = 0;
  std::size_t tp = 0, fp = 0, fn = 0;
  double iou_sum = 0;
};

struct PqResult {
  double pq = 0, sq = 0, rq = 0;
  double pq_things = 0, pq_stuff = 0;
  std::size_t tp = 0, fp = 0, fn = 0;
  std::map<int, ClassPq> per_class;  // category -> stats
};

// Dataset-level PQ: matches are counted per image, PQ formed per class at the end.
class PqAccumulator {
 public:
  explicit PqAccumulator(ClassSpace classes = {}) : classes_(std::move(classes)) {}

  // Void (id 0) pixels of gt are ignored; predicted segments lying mostly on
  // gt void are not counted as false positives.
  void add(const PanopticMap& pred, const PanopticMap& gt);
  void merge(const PqAccumulator& other);
  PqResult result() const;

 private:
  struct Counts {
    std::size_t tp = 0, fp = 0, fn = 0;
    double iou_sum = 0;
  };
  ClassSpace classes_;
  std::map<int, Counts> counts_;
};

PqResult compute_pq(const PanopticMap& pred, const PanopticMap& gt, const ClassSpace& classes = {});

// Dataset-union IoU per class, averaged over classes present in ground truth.
class MiouAccumulator {
 public:
  void add(std::span<const int> pred, std::span<const int> gt);
  void merge(const MiouAccumulator& other);
  double result() const;
  std::map<int, double> per_class() const;

 private:
  std::map<int, std::size_t> inter_, pred_area_, gt_area_;
};

double compute_miou(std::span<const int> pred, std::span<const int> gt);

struct ScoredInstance {
  int category = 0;
  double score = 0;
  std::vector<std::uint8_t> mask;
};

struct ApResult {
  double ap = 0, ap50 = 0, ap75 = 0;
  std::vector<double> per_threshold;  // IoU 0.50, 0.55, ..., 0.95
};

// 101-point interpolated AP per class and IoU threshold; greedy matching by
// descending score, each GT matched at most once. Classes without GT are skipped.
ApResult compute_mask_ap(const std::vector<std::vector<ScoredInstance>>& preds,
                         const std::vector<std::vector<InstanceMask>>& gts);

}  // namespace knet::metrics
