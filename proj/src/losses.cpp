#include "knet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace knet::loss {

namespace {

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// Minimum-cost assignment of every row to a distinct column (rows <= cols),
// potentials method. Returns the column of each row.
std::vector<std::size_t> solve_assignment(const std::vector<double>& cost, std::size_t rows,
                                          std::size_t cols) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> match(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    match[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = match[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0);
  }
  std::vector<std::size_t> row_to_col(rows);
  for (std::size_t j = 1; j <= cols; ++j)
    if (match[j]) row_to_col[match[j] - 1] = j - 1;
  return row_to_col;
}

// Optimal cost of matching GTs [first_gt, n_gt) to the free predictions.
double residual_optimum(const CostMatrix& c, std::size_t first_gt, const std::vector<char>& taken) {
  const std::size_t rows = c.n_gt - first_gt;
  if (rows == 0) return 0.0;
  std::vector<std::size_t> free_preds;
  for (std::size_t p = 0; p < c.n_pred; ++p)
    if (!taken[p]) free_preds.push_back(p);
  const std::size_t cols = free_preds.size();
  std::vector<double> sub(rows * cols);
  for (std::size_t g = 0; g < rows; ++g)
    for (std::size_t j = 0; j < cols; ++j) sub[g * cols + j] = c.at(free_preds[j], first_gt + g);
  auto cols_of = solve_assignment(sub, rows, cols);
  double total = 0.0;
  for (std::size_t g = 0; g < rows; ++g) total += sub[g * cols + cols_of[g]];
  return total;
}

Tensor rows_of(const Tensor& m, const std::vector<std::size_t>& rows) {
  std::vector<Tensor> parts;
  parts.reserve(rows.size());
  for (auto r : rows) parts.push_back(slice(m, 0, r, 1));
  return parts.size() == 1 ? parts[0] : concat(parts, 0);
}

Tensor stack_masks(const std::vector<const std::vector<double>*>& masks, std::size_t pixels) {
  std::vector<double> v;
  v.reserve(masks.size() * pixels);
  for (auto* m : masks) v.insert(v.end(), m->begin(), m->end());
  return Tensor({masks.size(), pixels}, std::move(v));
}

// [B, N, h, w] -> [B, N, H*W] at the target resolution.
Tensor flat_logits(const Tensor& logits, std::size_t h, std::size_t w) {
  Tensor up = (logits.size(2) == h && logits.size(3) == w) ? logits : upsample_bilinear(logits, h, w);
  return reshape(up, {logits.size(0), logits.size(1), h * w});
}

Tensor image_rows(const Tensor& flat, std::size_t b) {
  return reshape(slice(flat, 0, b, 1), {flat.size(1), flat.size(2)});
}

struct SemanticTerms {
  Tensor ce, dice;
};

// Softmax CE over classes plus dice of every class present in the labels.
SemanticTerms semantic_terms(const Tensor& logits, std::span<const int> labels) {
  const std::size_t k = logits.size(0), p = logits.size(1);
  SemanticTerms t;
  t.ce = softmax_ce_loss(logits, labels);
  std::vector<std::size_t> present;
  std::vector<std::vector<double>> onehot;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> m(p, 0.0);
    bool any = false;
    for (std::size_t i = 0; i < p; ++i)
      if (labels[i] == static_cast<int>(c)) m[i] = 1.0, any = true;
    if (any) {
      present.push_back(c);
      onehot.push_back(std::move(m));
    }
  }
  Tensor probs = softmax(logits, 0);
  std::vector<const std::vector<double>*> ptrs;
  for (const auto& m : onehot) ptrs.push_back(&m);
  t.dice = mean_all(dice_loss(rows_of(probs, present), stack_masks(ptrs, p)));
  return t;
}

Assignment match_image(const Tensor& flat_masks, const Tensor& class_logits, std::size_t b,
                       const ImageTargets& targets, const LossConfig& cfg) {
  const std::size_t n_ins = cfg.mode == TaskMode::kPanoptic ? cfg.instance_kernels : flat_masks.size(1);
  const std::size_t k = class_logits.size(2);
  const std::size_t p = flat_masks.size(2);
  auto masks = flat_masks.data().subspan(b * flat_masks.size(1) * p, n_ins * p);
  auto logits = class_logits.data().subspan(b * class_logits.size(1) * k, n_ins * k);
  std::vector<double> probs(logits.size());
  for (std::size_t i = 0; i < probs.size(); ++i) probs[i] = sigmoid(logits[i]);
  return hungarian_assign(matching_cost(probs, k, masks, n_ins, targets, cfg.weights));
}

}  // namespace

double focal_loss(double prob, int target, double alpha, double gamma) {
  const double p = clamp_prob(prob);
  if (target) return -alpha * std::pow(1.0 - p, gamma) * std::log(p);
  return -(1.0 - alpha) * std::pow(p, gamma) * std::log(1.0 - p);
}

double dice_loss(std::span<const double> pred, std::span<const double> gt, double eps) {
  if (pred.size() != gt.size()) throw DimensionError("dice inputs differ in length");
  double inter = 0.0, sp = 0.0, sg = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * gt[i];
    sp += pred[i];
    sg += gt[i];
  }
  return 1.0 - (2.0 * inter + eps) / (sp + sg + eps);
}

double mask_ce_loss(std::span<const double> logits, std::span<const double> gt) {
  if (logits.size() != gt.size()) throw DimensionError("mask CE inputs differ in length");
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) acc += softplus(logits[i]) - gt[i] * logits[i];
  return acc / static_cast<double>(logits.size());
}

Tensor focal_loss(const Tensor& logits, const Tensor& targets, double alpha, double gamma) {
  if (logits.shape() != targets.shape())
    throw DimensionError("focal logits " + shape_str(logits.shape()) + " vs targets " +
                         shape_str(targets.shape()));
  Tensor p = clamp(sigmoid(logits), kProbClamp, 1.0 - kProbClamp);
  Tensor q = 1.0 - p;
  Tensor pos = mul_scalar(pow(q, gamma) * log(p), -alpha);
  Tensor neg = mul_scalar(pow(p, gamma) * log(q), -(1.0 - alpha));
  Tensor per = targets * pos + (1.0 - targets) * neg;
  return sum_all(per) * (1.0 / static_cast<double>(logits.size(0)));
}

Tensor dice_loss(const Tensor& probs, const Tensor& gt, double eps) {
  if (probs.shape() != gt.shape())
    throw DimensionError("dice probs " + shape_str(probs.shape()) + " vs gt " + shape_str(gt.shape()));
  Tensor inter = reduce_sum(probs * gt, {1});
  Tensor denom = reduce_sum(probs, {1}) + reduce_sum(gt, {1}) + eps;
  return 1.0 - (inter * 2.0 + eps) / denom;
}

Tensor mask_ce_loss(const Tensor& logits, const Tensor& gt) {
  if (logits.shape() != gt.shape())
    throw DimensionError("mask CE logits " + shape_str(logits.shape()) + " vs gt " +
                         shape_str(gt.shape()));
  return reduce_mean(softplus(logits) - gt * logits, {1});
}

Tensor softmax_ce_loss(const Tensor& logits, std::span<const int> labels) {
  const std::size_t k = logits.size(0), p = logits.size(1);
  if (labels.size() != p) throw DimensionError("label count differs from pixel count");
  std::vector<double> onehot(k * p, 0.0);
  for (std::size_t i = 0; i < p; ++i) {
    if (labels[i] < 0 || labels[i] >= static_cast<int>(k))
      throw DimensionError("label " + std::to_string(labels[i]) + " outside " + std::to_string(k) +
                           " classes");
    onehot[labels[i] * p + i] = 1.0;
  }
  Tensor picked = sum_all(log_softmax(logits, 0) * Tensor({k, p}, std::move(onehot)));
  return picked * (-1.0 / static_cast<double>(p));
}

ImageTargets make_targets(const GroundTruthSample& gt, const ClassSpace& classes, TaskMode mode,
                          std::size_t out_h, std::size_t out_w) {
  ImageTargets t;
  t.height = out_h;
  t.width = out_w;
  const std::size_t p = out_h * out_w;
  std::vector<std::size_t> src(p);
  for (std::size_t i = 0; i < out_h; ++i)
    for (std::size_t j = 0; j < out_w; ++j) {
      const std::size_t si = std::min(gt.height - 1, (2 * i + 1) * gt.height / (2 * out_h));
      const std::size_t sj = std::min(gt.width - 1, (2 * j + 1) * gt.width / (2 * out_w));
      src[i * out_w + j] = si * gt.width + sj;
    }
  if (mode != TaskMode::kSemantic) {
    for (const auto& inst : gt.instances) {
      std::vector<double> m(p);
      bool any = false;
      for (std::size_t i = 0; i < p; ++i) m[i] = inst.mask[src[i]], any = any || m[i] > 0;
      if (!any) continue;
      const int idx = classes.thing_index(inst.category);
      if (idx < 0) throw DataError("instance category " + std::to_string(inst.category) + " is not a thing");
      t.thing_masks.push_back(std::move(m));
      t.thing_classes.push_back(static_cast<std::size_t>(idx));
    }
  }
  if (mode == TaskMode::kPanoptic) {
    t.stuff_masks.assign(classes.stuff(), std::vector<double>(p, 0.0));
    for (std::size_t i = 0; i < p; ++i) {
      const int s = classes.stuff_index(gt.semantic[src[i]]);
      if (s >= 0) t.stuff_masks[s][i] = 1.0;
    }
  }
  t.semantic.resize(p);
  for (std::size_t i = 0; i < p; ++i) {
    const int cat = gt.semantic[src[i]];
    int idx = classes.semantic_index(cat);
    if (mode == TaskMode::kInstance) idx = classes.is_thing(cat) ? classes.thing_index(cat) : static_cast<int>(classes.things());
    if (idx < 0) throw DataError("unknown category " + std::to_string(cat));
    t.semantic[i] = idx;
  }
  return t;
}

CostMatrix matching_cost(std::span<const double> class_probs, std::size_t num_classes,
                         std::span<const double> mask_logits, std::size_t n_pred,
                         const ImageTargets& targets, const LossWeights& w) {
  CostMatrix c;
  c.n_pred = n_pred;
  c.n_gt = targets.thing_masks.size();
  const std::size_t p = targets.height * targets.width;
  if (class_probs.size() != n_pred * num_classes || mask_logits.size() != n_pred * p)
    throw DimensionError("matching inputs do not fit " + std::to_string(n_pred) + " predictions");
  const std::size_t cells = c.n_pred * c.n_gt;
  c.total.resize(cells);
  c.cls.resize(cells);
  c.ce.resize(cells);
  c.dice.resize(cells);
  std::vector<double> probs(p);
  for (std::size_t n = 0; n < n_pred; ++n) {
    auto logits = mask_logits.subspan(n * p, p);
    for (std::size_t i = 0; i < p; ++i) probs[i] = sigmoid(logits[i]);
    for (std::size_t g = 0; g < c.n_gt; ++g) {
      const auto& gm = targets.thing_masks[g];
      const std::size_t cell = n * c.n_gt + g;
      c.cls[cell] = -class_probs[n * num_classes + targets.thing_classes[g]];
      c.ce[cell] = mask_ce_loss(logits, gm);
      c.dice[cell] = dice_loss(probs, gm);
      c.total[cell] = w.cls * c.cls[cell] + w.ce * c.ce[cell] + w.dice * c.dice[cell];
    }
  }
  for (double v : c.total)
    if (!std::isfinite(v)) throw NumericError("non-finite matching cost");
  return c;
}

Assignment hungarian_assign(const CostMatrix& costs) {
  if (costs.n_pred < costs.n_gt)
    throw CapacityError(std::to_string(costs.n_gt) + " ground-truth instances exceed " +
                        std::to_string(costs.n_pred) + " kernels");
  Assignment a;
  std::vector<char> taken(costs.n_pred, 0);
  if (costs.n_gt > 0) {
    const double best = residual_optimum(costs, 0, taken);
    const double tol = 1e-12 * std::max(1.0, std::abs(best));
    double prefix = 0.0;
    for (std::size_t g = 0; g < costs.n_gt; ++g) {
      bool fixed = false;
      for (std::size_t p = 0; p < costs.n_pred && !fixed; ++p) {
        if (taken[p]) continue;
        taken[p] = 1;
        const double with = prefix + costs.at(p, g) + residual_optimum(costs, g + 1, taken);
        if (with <= best + tol) {
          prefix += costs.at(p, g);
          a.pairs.emplace_back(p, g);
          fixed = true;
        } else {
          taken[p] = 0;
        }
      }
      if (!fixed) throw NumericError("assignment search lost the optimum");
    }
  }
  for (std::size_t p = 0; p < costs.n_pred; ++p)
    if (!taken[p]) a.unmatched_preds.push_back(p);
  return a;
}

double assignment_cost(const CostMatrix& costs, const Assignment& a) {
  auto pairs = a.pairs;
  std::sort(pairs.begin(), pairs.end(), [](auto& x, auto& y) { return x.second < y.second; });
  double total = 0.0;
  for (auto [p, g] : pairs) total += costs.at(p, g);
  return total;
}

std::vector<std::vector<Assignment>> stage_assignments(
    const std::vector<head::StageOutput>& stages, const std::vector<ImageTargets>& targets,
    const LossConfig& cfg) {
  std::vector<std::vector<Assignment>> out;
  if (cfg.mode == TaskMode::kSemantic) return out;
  NoGradGuard no_grad;
  for (const auto& st : stages) {
    const auto& t0 = targets.at(0);
    Tensor flat = flat_logits(st.masks.logits, t0.height, t0.width);
    std::vector<Assignment> per;
    for (std::size_t b = 0; b < targets.size(); ++b)
      per.push_back(match_image(flat, st.class_logits, b, targets[b], cfg));
    out.push_back(std::move(per));
  }
  return out;
}

LossBreakdown set_prediction_loss(const std::vector<head::StageOutput>& stages,
                                  const std::vector<ImageTargets>& targets, const LossConfig& cfg,
                                  const Tensor& semantic_logits) {
  if (stages.empty()) throw ContractError("no stages to supervise");
  const std::size_t batch = stages[0].masks.logits.size(0);
  if (targets.size() != batch)
    throw DimensionError(std::to_string(targets.size()) + " targets for a batch of " + std::to_string(batch));
  const std::size_t h = targets[0].height, w = targets[0].width, p = h * w;
  const auto& lw = cfg.weights;
  const double inv_batch = 1.0 / static_cast<double>(batch);

  LossBreakdown out;
  Tensor grand;
  Tensor sem_flat;
  if (semantic_logits.defined() && cfg.mode != TaskMode::kSemantic)
    sem_flat = flat_logits(semantic_logits, h, w);

  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    Tensor flat = flat_logits(st.masks.logits, h, w);
    const std::size_t n = flat.size(1);
    Tensor cls_sum, ce_sum, dice_sum;
    auto accumulate = [](Tensor& acc, const Tensor& v) { acc = acc.defined() ? acc + v : v; };

    for (std::size_t b = 0; b < batch; ++b) {
      const auto& tg = targets[b];
      Tensor rows = image_rows(flat, b);
      if (cfg.mode == TaskMode::kSemantic) {
        auto terms = semantic_terms(rows, tg.semantic);
        accumulate(ce_sum, terms.ce);
        accumulate(dice_sum, terms.dice);
        continue;
      }
      const std::size_t n_ins = cfg.mode == TaskMode::kPanoptic ? cfg.instance_kernels : n;
      const std::size_t k = st.class_logits.size(2);
      Assignment a;
      {
        NoGradGuard no_grad;
        a = match_image(flat.detach(), st.class_logits.detach(), b, tg, cfg);
      }
      std::vector<double> cls_target(n_ins * k, 0.0);
      for (auto [pi, g] : a.pairs) cls_target[pi * k + tg.thing_classes[g]] = 1.0;
      Tensor cls_logits = slice(image_rows(st.class_logits, b), 0, 0, n_ins);
      accumulate(cls_sum, focal_loss(cls_logits, Tensor({n_ins, k}, std::move(cls_target)),
                                     lw.focal_alpha, lw.focal_gamma));

      std::vector<std::size_t> ce_rows, dice_rows;
      std::vector<const std::vector<double>*> ce_gt, dice_gt;
      for (auto [pi, g] : a.pairs) {
        ce_rows.push_back(pi);
        ce_gt.push_back(&tg.thing_masks[g]);
      }
      dice_rows = ce_rows;
      dice_gt = ce_gt;
      if (cfg.mode == TaskMode::kPanoptic) {
        for (std::size_t sc = 0; sc < tg.stuff_masks.size(); ++sc) {
          const auto& m = tg.stuff_masks[sc];
          ce_rows.push_back(n_ins + sc);
          ce_gt.push_back(&m);
          if (std::any_of(m.begin(), m.end(), [](double v) { return v > 0; })) {
            dice_rows.push_back(n_ins + sc);
            dice_gt.push_back(&m);
          }
        }
      }
      Tensor ce_b, dice_b;
      if (!ce_rows.empty()) ce_b = mean_all(mask_ce_loss(rows_of(rows, ce_rows), stack_masks(ce_gt, p)));
      if (!dice_rows.empty())
        dice_b = mean_all(dice_loss(sigmoid(rows_of(rows, dice_rows)), stack_masks(dice_gt, p)));
      if (s == 0 && sem_flat.defined()) {
        auto terms = semantic_terms(image_rows(sem_flat, b), tg.semantic);
        Tensor ce_sem = terms.ce * lw.seg, dice_sem = terms.dice * lw.seg;
        ce_b = ce_b.defined() ? ce_b + ce_sem : ce_sem;
        dice_b = dice_b.defined() ? dice_b + dice_sem : dice_sem;
      }
      if (ce_b.defined()) accumulate(ce_sum, ce_b);
      if (dice_b.defined()) accumulate(dice_sum, dice_b);
    }

    StageLoss sl;
    Tensor stage_total;
    auto add_term = [&](const Tensor& sum, double weight, double& slot) {
      if (!sum.defined()) return;
      Tensor mean = sum * inv_batch;
      slot = mean.item();
      Tensor weighted = mean * weight;
      stage_total = stage_total.defined() ? stage_total + weighted : weighted;
    };
    add_term(cls_sum, lw.cls, sl.cls);
    add_term(ce_sum, lw.ce, sl.ce);
    add_term(dice_sum, lw.dice, sl.dice);
    if (!stage_total.defined()) stage_total = Tensor::scalar(0.0);
    sl.total = lw.cls * sl.cls + lw.ce * sl.ce + lw.dice * sl.dice;
    out.total += sl.total;
    out.cls += sl.cls;
    out.ce += sl.ce;
    out.dice += sl.dice;
    out.stages.push_back(sl);
    grand = grand.defined() ? grand + stage_total : stage_total;
  }
  out.value = grand;
  if (!std::isfinite(out.total) || !std::isfinite(grand.item())) throw NumericError("non-finite loss");
  return out;
}

}  // namespace knet::loss
