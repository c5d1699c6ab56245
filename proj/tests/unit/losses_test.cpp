#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "knet/losses.hpp"
#include "test_util.hpp"

namespace knet::loss {
namespace {

using knet::testing::random_tensor;

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

CostMatrix from_values(std::size_t n_pred, std::size_t n_gt, std::vector<double> v) {
  CostMatrix c;
  c.n_pred = n_pred;
  c.n_gt = n_gt;
  c.total = std::move(v);
  return c;
}

// Exhaustive minimum over all injections gt -> pred, summed in gt order.
double brute_force_min(const CostMatrix& c) {
  std::vector<std::size_t> preds(c.n_pred);
  std::iota(preds.begin(), preds.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  // Every permutation's first n_gt entries enumerate all injections.
  do {
    double t = 0.0;
    for (std::size_t g = 0; g < c.n_gt; ++g) t += c.at(preds[g], g);
    best = std::min(best, t);
  } while (std::next_permutation(preds.begin(), preds.end()));
  return best;
}

void expect_injection(const Assignment& a, std::size_t n_pred, std::size_t n_gt) {
  std::set<std::size_t> preds, gts;
  for (auto [p, g] : a.pairs) {
    EXPECT_LT(p, n_pred);
    EXPECT_LT(g, n_gt);
    EXPECT_TRUE(preds.insert(p).second) << "prediction matched twice";
    EXPECT_TRUE(gts.insert(g).second) << "ground truth matched twice";
  }
  EXPECT_EQ(gts.size(), n_gt);
  EXPECT_EQ(a.unmatched_preds.size() + a.pairs.size(), n_pred);
  for (auto p : a.unmatched_preds) EXPECT_FALSE(preds.count(p));
}

TEST(Focal, PerfectPredictionVanishes) { EXPECT_LT(focal_loss(1.0 - 1e-9, 1), 1e-12); }

TEST(Focal, HalfProbabilityExample) {
  EXPECT_NEAR(focal_loss(0.5, 1, 0.25, 2.0), 0.043322, 1e-6);
  EXPECT_DOUBLE_EQ(focal_loss(0.5, 1, 0.25, 2.0), 0.25 * 0.25 * std::log(2.0));
}

TEST(Focal, GammaZeroIsScaledCrossEntropy) {
  for (double p : {0.1, 0.3, 0.8}) {
    EXPECT_NEAR(focal_loss(p, 1, 0.5, 0.0), -0.5 * std::log(p), 1e-15);
    EXPECT_NEAR(focal_loss(p, 0, 0.5, 0.0), -0.5 * std::log(1 - p), 1e-15);
  }
}

TEST(Focal, TensorFormSumsClassesAndAveragesRows) {
  PrecisionScope f64(Precision::kF64);
  std::mt19937_64 rng(1);
  Tensor logits = random_tensor({4, 3}, rng, -3, 3);
  std::vector<double> t(12, 0.0);
  t[1] = t[5] = t[9] = 1.0;
  double want = 0.0;
  for (std::size_t i = 0; i < 12; ++i) want += focal_loss(sigmoid_d(logits.value(i)), t[i] > 0);
  EXPECT_NEAR(focal_loss(logits, Tensor({4, 3}, t), 0.25, 2.0).item(), want / 4.0, 1e-12);
}

TEST(Dice, PerfectMaskNearZero) {
  std::vector<double> m{1, 0, 1, 1, 0};
  EXPECT_LT(dice_loss(m, m), 1e-4);
}

TEST(Dice, DisjointNearOne) {
  std::vector<double> a(100, 0.0), b(100, 0.0);
  std::fill(a.begin(), a.begin() + 40, 1.0);
  std::fill(b.begin() + 50, b.end(), 1.0);
  EXPECT_NEAR(dice_loss(a, b), 1.0, 1e-5);
}

TEST(Dice, HandExample) {
  EXPECT_NEAR(dice_loss(std::vector<double>{1, 1, 0, 0}, std::vector<double>{1, 0, 0, 0}),
              1.0 / 3.0, 1e-4);
}

TEST(Dice, RangeAndSymmetry) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 100; ++t) {
    std::vector<double> a(30), b(30);
    for (auto& v : a) v = static_cast<double>(rng() % 2);
    for (auto& v : b) v = static_cast<double>(rng() % 2);
    const double d = dice_loss(a, b);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 1.0 + 1e-4);
    EXPECT_DOUBLE_EQ(d, dice_loss(b, a));
  }
}

TEST(MaskCe, ZeroLogitsGiveLnTwo) {
  std::vector<double> logits(9, 0.0), gt{1, 0, 1, 0, 0, 1, 1, 1, 0};
  EXPECT_NEAR(mask_ce_loss(logits, gt), std::log(2.0), 1e-15);
}

TEST(MaskCe, ConfidentCorrectNearZero) {
  std::vector<double> logits{30, -30, 30}, gt{1, 0, 1};
  EXPECT_LT(mask_ce_loss(logits, gt), 1e-12);
}

TEST(MaskCe, SinglePixelExample) {
  // sigmoid(ln 3) = 0.75
  EXPECT_NEAR(mask_ce_loss(std::vector<double>{std::log(3.0)}, std::vector<double>{1.0}), 0.287682,
              1e-6);
}

TEST(TensorLosses, AgreeWithScalarForms) {
  PrecisionScope f64(Precision::kF64);
  std::mt19937_64 rng(3);
  Tensor logits = random_tensor({3, 10}, rng, -4, 4);
  std::vector<double> g(30);
  for (auto& v : g) v = static_cast<double>(rng() % 2);
  Tensor gt({3, 10}, g);
  auto ce = mask_ce_loss(logits, gt);
  auto dice = dice_loss(sigmoid(logits), gt);
  for (std::size_t r = 0; r < 3; ++r) {
    auto lr = logits.data().subspan(r * 10, 10);
    std::vector<double> pr(10);
    for (std::size_t i = 0; i < 10; ++i) pr[i] = sigmoid_d(lr[i]);
    std::span<const double> gr(g.data() + r * 10, 10);
    EXPECT_NEAR(ce.value(r), mask_ce_loss(lr, gr), 1e-12);
    EXPECT_NEAR(dice.value(r), dice_loss(pr, gr), 1e-12);
  }
}

TEST(TensorLosses, SoftmaxCrossEntropyHandCase) {
  PrecisionScope f64(Precision::kF64);
  Tensor logits({2, 2}, {0.0, std::log(3.0), 0.0, 0.0});
  std::vector<int> labels{0, 0};
  // pixel 0: p = 0.5 ; pixel 1: p = 0.75
  EXPECT_NEAR(softmax_ce_loss(logits, labels).item(), 0.5 * (std::log(2.0) - std::log(0.75)), 1e-12);
  std::vector<int> bad{0, 2};
  EXPECT_THROW(softmax_ce_loss(logits, bad), DimensionError);
}

TEST(TensorLosses, GradCheckTenSeeds) {
  PrecisionScope f64(Precision::kF64);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    std::vector<double> g(24), t(12, 0.0);
    for (auto& v : g) v = static_cast<double>(rng() % 2);
    for (auto& v : t) v = static_cast<double>(rng() % 2);
    std::vector<int> labels(8);
    for (auto& l : labels) l = static_cast<int>(rng() % 3);
    Tensor gt({3, 8}, g), tgt({4, 3}, t);
    EXPECT_LT(grad_check([&](const Tensor& x) { return sum_all(mask_ce_loss(x, gt)); },
                         random_tensor({3, 8}, rng, -3, 3, true)), 1e-5);
    EXPECT_LT(grad_check([&](const Tensor& x) { return sum_all(dice_loss(sigmoid(x), gt)); },
                         random_tensor({3, 8}, rng, -3, 3, true)), 1e-5);
    EXPECT_LT(grad_check([&](const Tensor& x) { return focal_loss(x, tgt, 0.25, 2.0); },
                         random_tensor({4, 3}, rng, -3, 3, true)), 1e-5);
    EXPECT_LT(grad_check([&](const Tensor& x) { return softmax_ce_loss(x, labels); },
                         random_tensor({3, 8}, rng, -3, 3, true)), 1e-5);
  }
}

ImageTargets hand_targets(std::size_t h, std::size_t w, std::vector<std::vector<double>> masks,
                          std::vector<std::size_t> classes) {
  ImageTargets t;
  t.height = h;
  t.width = w;
  t.thing_masks = std::move(masks);
  t.thing_classes = std::move(classes);
  t.semantic.assign(h * w, 0);
  return t;
}

TEST(MatchingCost, PerfectPairIsColumnMinimum) {
  const std::size_t p = 16;
  std::vector<double> gm(p, 0.0);
  for (std::size_t i = 0; i < 6; ++i) gm[i] = 1.0;
  auto tg = hand_targets(4, 4, {gm}, {1});
  std::vector<double> logits(3 * p), probs(3 * 2, 0.5);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-2, 2);
  for (auto& v : logits) v = u(rng);
  for (std::size_t i = 0; i < p; ++i) logits[p + i] = gm[i] > 0 ? 40.0 : -40.0;
  probs[1 * 2 + 1] = 1.0;
  auto c = matching_cost(probs, 2, logits, 3, tg);
  EXPECT_NEAR(c.at(1, 0), -2.0, 1e-4);
  EXPECT_LT(c.at(1, 0), c.at(0, 0));
  EXPECT_LT(c.at(1, 0), c.at(2, 0));
}

TEST(MatchingCost, UniformPredictionsTieLexicographically) {
  const std::size_t p = 9;
  std::vector<double> a(p, 0.0), b(p, 0.0);
  a[0] = a[1] = 1.0;
  b[0] = b[1] = 1.0;  // identical GTs give identical columns
  auto tg = hand_targets(3, 3, {a, b}, {0, 0});
  std::vector<double> logits(4 * p, 0.0), probs(4, 0.5);
  auto c = matching_cost(probs, 1, logits, 4, tg);
  for (double v : c.total) EXPECT_DOUBLE_EQ(v, c.total[0]);
  auto asg = hungarian_assign(c);
  ASSERT_EQ(asg.pairs.size(), 2u);
  EXPECT_EQ(asg.pairs[0], (std::pair<std::size_t, std::size_t>{0, 0}));
  EXPECT_EQ(asg.pairs[1], (std::pair<std::size_t, std::size_t>{1, 1}));
  EXPECT_EQ(asg.unmatched_preds, (std::vector<std::size_t>{2, 3}));
}

TEST(MatchingCost, EntriesRecomputeFromParts) {
  const std::size_t p = 12;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-3, 3);
  std::vector<std::vector<double>> masks(3, std::vector<double>(p));
  for (auto& m : masks)
    for (auto& v : m) v = static_cast<double>(rng() % 2);
  auto tg = hand_targets(3, 4, masks, {2, 0, 1});
  std::vector<double> logits(4 * p), probs(4 * 3);
  for (auto& v : logits) v = u(rng);
  for (auto& v : probs) v = sigmoid_d(u(rng));
  auto c = matching_cost(probs, 3, logits, 4, tg);
  for (std::size_t n = 0; n < 4; ++n)
    for (std::size_t g = 0; g < 3; ++g) {
      std::span<const double> l(logits.data() + n * p, p);
      std::vector<double> pr(p);
      for (std::size_t i = 0; i < p; ++i) pr[i] = sigmoid_d(l[i]);
      const double want = 2.0 * -probs[n * 3 + tg.thing_classes[g]] + mask_ce_loss(l, masks[g]) +
                          4.0 * dice_loss(pr, masks[g]);
      EXPECT_NEAR(c.at(n, g), want, 1e-12);
    }
}

TEST(MatchingCost, NoGroundTruthGivesEmptyMatrix) {
  auto tg = hand_targets(2, 2, {}, {});
  std::vector<double> logits(3 * 4, 0.0), probs(3, 0.5);
  auto c = matching_cost(probs, 1, logits, 3, tg);
  EXPECT_EQ(c.n_gt, 0u);
  auto a = hungarian_assign(c);
  EXPECT_TRUE(a.pairs.empty());
  EXPECT_EQ(a.unmatched_preds.size(), 3u);
}

TEST(Hungarian, SinglePair) {
  auto a = hungarian_assign(from_values(1, 1, {3.5}));
  ASSERT_EQ(a.pairs.size(), 1u);
  EXPECT_EQ(a.pairs[0], (std::pair<std::size_t, std::size_t>{0, 0}));
}

TEST(Hungarian, TwoByTwoExample) {
  auto c = from_values(2, 2, {1, 2, 2, 4});
  auto a = hungarian_assign(c);
  std::set<std::pair<std::size_t, std::size_t>> got(a.pairs.begin(), a.pairs.end());
  EXPECT_EQ(got, (std::set<std::pair<std::size_t, std::size_t>>{{0, 1}, {1, 0}}));
  EXPECT_EQ(assignment_cost(c, a), 4.0);
}

TEST(Hungarian, MatchesBruteForceExactly) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(-5, 5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n_pred = 1 + rng() % 7;
    const std::size_t n_gt = 1 + rng() % n_pred;
    std::vector<double> v(n_pred * n_gt);
    for (auto& x : v) x = u(rng);
    auto c = from_values(n_pred, n_gt, v);
    auto a = hungarian_assign(c);
    expect_injection(a, n_pred, n_gt);
    EXPECT_EQ(assignment_cost(c, a), brute_force_min(c)) << "trial " << trial;
  }
}

TEST(Hungarian, IntegerCostsWithTiesStayOptimal) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n_pred = 1 + rng() % 7;
    const std::size_t n_gt = 1 + rng() % n_pred;
    std::vector<double> v(n_pred * n_gt);
    for (auto& x : v) x = static_cast<double>(rng() % 3);
    auto c = from_values(n_pred, n_gt, v);
    auto a = hungarian_assign(c);
    expect_injection(a, n_pred, n_gt);
    EXPECT_EQ(assignment_cost(c, a), brute_force_min(c));
  }
}

TEST(Hungarian, TooFewKernelsThrows) {
  EXPECT_THROW(hungarian_assign(from_values(1, 2, {0, 0})), CapacityError);
}

TEST(Hungarian, OneToOneOverManyBatches) {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 1);
  for (int batch = 0; batch < 1000; ++batch) {
    const std::size_t n_pred = 2 + rng() % 11;
    const std::size_t n_gt = rng() % (n_pred + 1);
    std::vector<double> v(n_pred * n_gt);
    for (auto& x : v) x = u(rng);
    expect_injection(hungarian_assign(from_values(n_pred, n_gt, v)), n_pred, n_gt);
  }
}

// Stage output whose masks and class scores reproduce the targets.
head::StageOutput perfect_stage(const ImageTargets& tg, std::size_t n, std::size_t k,
                                const std::vector<std::size_t>& owner) {
  const std::size_t p = tg.height * tg.width;
  std::vector<double> masks(n * p, -40.0), cls(n * k, -40.0);
  for (std::size_t g = 0; g < owner.size(); ++g) {
    for (std::size_t i = 0; i < p; ++i) masks[owner[g] * p + i] = tg.thing_masks[g][i] > 0 ? 40.0 : -40.0;
    cls[owner[g] * k + tg.thing_classes[g]] = 40.0;
  }
  head::StageOutput s;
  s.masks = {Tensor({1, n, tg.height, tg.width}, masks), head::MaskActivation::kSigmoid};
  s.class_logits = Tensor({1, n, k}, cls);
  return s;
}

std::vector<double> block_mask(std::size_t h, std::size_t w, std::size_t r0, std::size_t c0,
                               std::size_t size) {
  std::vector<double> m(h * w, 0.0);
  for (std::size_t i = r0; i < std::min(h, r0 + size); ++i)
    for (std::size_t j = c0; j < std::min(w, c0 + size); ++j) m[i * w + j] = 1.0;
  return m;
}

TEST(SetLoss, PerfectPredictionsNearZero) {
  PrecisionScope f64(Precision::kF64);
  auto tg = hand_targets(8, 8, {block_mask(8, 8, 0, 0, 3), block_mask(8, 8, 4, 4, 4)}, {0, 2});
  std::vector<head::StageOutput> stages{perfect_stage(tg, 5, 3, {3, 1}), perfect_stage(tg, 5, 3, {0, 4})};
  LossConfig cfg;
  auto l = set_prediction_loss(stages, {tg}, cfg);
  EXPECT_LT(l.total, 0.01);
  EXPECT_EQ(l.stages.size(), 2u);
}

TEST(SetLoss, EmptyImageIsFocalNegativesOnly) {
  PrecisionScope f64(Precision::kF64);
  std::mt19937_64 rng(9);
  auto tg = hand_targets(4, 4, {}, {});
  head::StageOutput s;
  s.masks = {random_tensor({1, 3, 4, 4}, rng), head::MaskActivation::kSigmoid};
  s.class_logits = random_tensor({1, 3, 2}, rng);
  auto l = set_prediction_loss({s}, {tg}, LossConfig{});
  double want = 0.0;
  for (double x : s.class_logits.data()) want += focal_loss(sigmoid_d(x), 0);
  EXPECT_EQ(l.ce, 0.0);
  EXPECT_EQ(l.dice, 0.0);
  EXPECT_NEAR(l.cls, want / 3.0, 1e-12);
  EXPECT_NEAR(l.total, 2.0 * want / 3.0, 1e-12);
}

TEST(SetLoss, SingleStageSingleGtHandAssembly) {
  PrecisionScope f64(Precision::kF64);
  std::mt19937_64 rng(10);
  auto gm = block_mask(4, 4, 1, 1, 2);
  auto tg = hand_targets(4, 4, {gm}, {1});
  head::StageOutput s;
  s.masks = {random_tensor({1, 2, 4, 4}, rng, -2, 2), head::MaskActivation::kSigmoid};
  s.class_logits = random_tensor({1, 2, 2}, rng, -2, 2);
  auto l = set_prediction_loss({s}, {tg}, LossConfig{});

  // Recompute: pick the cheaper kernel, then assemble the weighted sum by hand.
  auto cost = [&](std::size_t n) {
    std::span<const double> lg = s.masks.logits.data().subspan(n * 16, 16);
    std::vector<double> pr(16);
    for (std::size_t i = 0; i < 16; ++i) pr[i] = sigmoid_d(lg[i]);
    return std::array<double, 3>{-sigmoid_d(s.class_logits.value(n * 2 + 1)), mask_ce_loss(lg, gm),
                                 dice_loss(pr, gm)};
  };
  auto c0 = cost(0), c1 = cost(1);
  const std::size_t m = (2 * c0[0] + c0[1] + 4 * c0[2] <= 2 * c1[0] + c1[1] + 4 * c1[2]) ? 0 : 1;
  auto cm = m == 0 ? c0 : c1;
  double cls = 0.0;
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t k = 0; k < 2; ++k)
      cls += focal_loss(sigmoid_d(s.class_logits.value(n * 2 + k)), n == m && k == 1);
  cls /= 2.0;
  EXPECT_NEAR(l.cls, cls, 1e-12);
  EXPECT_NEAR(l.ce, cm[1], 1e-12);
  EXPECT_NEAR(l.dice, cm[2], 1e-12);
  EXPECT_NEAR(l.total, 2 * cls + cm[1] + 4 * cm[2], 1e-12);
}

std::vector<head::StageOutput> random_stages(std::mt19937_64& rng, std::size_t count, std::size_t b,
                                             std::size_t n) {
  std::vector<head::StageOutput> out(count);
  for (auto& s : out) {
    s.masks = {random_tensor({b, n, 4, 4}, rng, -3, 3, true), head::MaskActivation::kSigmoid};
    s.class_logits = random_tensor({b, n, 3}, rng, -3, 3, true);
  }
  return out;
}

std::vector<ImageTargets> random_targets(std::mt19937_64& rng, std::size_t b, std::size_t h,
                                         std::size_t w, bool panoptic) {
  std::vector<ImageTargets> out;
  for (std::size_t i = 0; i < b; ++i) {
    std::vector<std::vector<double>> masks;
    std::vector<std::size_t> classes;
    const std::size_t g = rng() % 3;
    for (std::size_t j = 0; j < g; ++j) {
      masks.push_back(block_mask(h, w, rng() % h, rng() % w, 1 + rng() % 3));
      classes.push_back(rng() % 3);
    }
    auto t = hand_targets(h, w, masks, classes);
    if (panoptic) {
      t.stuff_masks = {block_mask(h, w, 0, 0, h / 2), block_mask(h, w, h / 2, 0, h)};
      for (std::size_t p = 0; p < h * w; ++p) t.semantic[p] = 3 + (p / w >= h / 2);
    }
    out.push_back(std::move(t));
  }
  return out;
}

TEST(SetLoss, DecompositionIdentity) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    auto stages = random_stages(rng, 3, 2, 5);
    auto tg = random_targets(rng, 2, 4, 4, false);
    auto l = set_prediction_loss(stages, tg, LossConfig{});
    EXPECT_NEAR(l.total, 2 * l.cls + l.ce + 4 * l.dice, 1e-6);
    for (const auto& s : l.stages) EXPECT_NEAR(s.total, 2 * s.cls + s.ce + 4 * s.dice, 1e-6);
  }
}

TEST(SetLoss, PanopticStuffRowsAndSemanticTermsCount) {
  PrecisionScope f64(Precision::kF64);
  std::mt19937_64 rng(12);
  auto stages = random_stages(rng, 2, 2, 6);
  auto tg = random_targets(rng, 2, 4, 4, true);
  LossConfig cfg;
  cfg.mode = TaskMode::kPanoptic;
  cfg.instance_kernels = 4;
  Tensor sem = random_tensor({2, 5, 2, 2}, rng, -2, 2, true);
  auto with = set_prediction_loss(stages, tg, cfg, sem);
  auto without = set_prediction_loss(stages, tg, cfg);
  EXPECT_GT(with.stages[0].ce, without.stages[0].ce);
  EXPECT_EQ(with.stages[1].total, without.stages[1].total);
  EXPECT_NEAR(with.total, 2 * with.cls + with.ce + 4 * with.dice, 1e-9);
  EXPECT_GT(without.stages[1].ce, 0.0);
}

TEST(SetLoss, StageAssignmentsAreIndependent) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto stages = random_stages(rng, 3, 2, 5);
    auto tg = random_targets(rng, 2, 4, 4, false);
    auto before = stage_assignments(stages, tg, LossConfig{});
    stages[2].masks.logits = random_tensor({2, 5, 4, 4}, rng, -3, 3);
    auto after = stage_assignments(stages, tg, LossConfig{});
    for (std::size_t b = 0; b < 2; ++b) {
      EXPECT_EQ(before[1][b].pairs, after[1][b].pairs);
      EXPECT_EQ(before[0][b].pairs, after[0][b].pairs);
    }
  }
}

TEST(SetLoss, SemanticModeUsesFixedKernels) {
  PrecisionScope f64(Precision::kF64);
  ImageTargets t = hand_targets(2, 2, {}, {});
  t.semantic = {0, 0, 1, 2};
  head::StageOutput s;
  s.masks = {Tensor({1, 3, 2, 2}), head::MaskActivation::kSoftmax};
  LossConfig cfg;
  cfg.mode = TaskMode::kSemantic;
  auto l = set_prediction_loss({s}, {t}, cfg);
  EXPECT_NEAR(l.ce, std::log(3.0), 1e-12);
  EXPECT_EQ(l.cls, 0.0);
  // Uniform 1/3 probabilities: dice per present class.
  const double d0 = 1 - (2 * (2.0 / 3) + 1e-4) / (4.0 / 3 + 2 + 1e-4);
  const double d1 = 1 - (2 * (1.0 / 3) + 1e-4) / (4.0 / 3 + 1 + 1e-4);
  EXPECT_NEAR(l.dice, (d0 + 2 * d1) / 3.0, 1e-12);
}

TEST(SetLoss, GradientMatchesFiniteDifferences) {
  PrecisionScope f64(Precision::kF64);
  std::mt19937_64 rng(14);
  auto stages = random_stages(rng, 2, 2, 4);
  auto tg = random_targets(rng, 2, 4, 4, false);
  Tensor masks = stages[1].masks.logits;
  auto f = [&](const Tensor&) { return set_prediction_loss(stages, tg, LossConfig{}).value; };
  EXPECT_LT(grad_check(f, masks, 1e-5), 1e-5);
  EXPECT_LT(grad_check(f, stages[0].class_logits, 1e-5), 1e-5);
}

}  // namespace
}  // namespace knet::loss
