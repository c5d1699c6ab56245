#include "knet/metrics.hpp"

#include <algorithm>
#include <numeric>
#include <set>

namespace knet::metrics {

double mask_iou(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b, double empty_value) {
  if (a.size() != b.size())
    throw DimensionError("mask sizes differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] != 0, y = b[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? empty_value : static_cast<double>(inter) / static_cast<double>(uni);
}

namespace {

void check_table(const PanopticMap& m, const char* which) {
  if (m.ids.size() != m.height * m.width)
    throw DataError(std::string(which) + " raster size does not match its extents");
  std::set<std::uint32_t> seen;
  for (const auto& s : m.segments) {
    if (s.id == 0) throw DataError(std::string(which) + " table uses the void id");
    if (!seen.insert(s.id).second)
      throw DataError(std::string(which) + " table repeats segment id " + std::to_string(s.id));
  }
  for (auto id : m.ids)
    if (id != 0 && !seen.count(id))
      throw DataError(std::string(which) + " raster id " + std::to_string(id) + " missing from table");
}

}  // namespace

void PqAccumulator::add(const PanopticMap& pred, const PanopticMap& gt) {
  check_table(pred, "prediction");
  check_table(gt, "ground truth");
  if (pred.height != gt.height || pred.width != gt.width)
    throw DataError("prediction and ground truth rasters differ in size");

  std::map<std::uint32_t, std::size_t> pred_area, gt_area;
  std::map<std::pair<std::uint32_t, std::uint32_t>, std::size_t> inter;  // (gt, pred)
  for (std::size_t i = 0; i < gt.ids.size(); ++i) {
    const auto g = gt.ids[i], p = pred.ids[i];
    if (p) ++pred_area[p];
    if (g) ++gt_area[g];
    ++inter[{g, p}];
  }
  std::map<std::uint32_t, const Segment*> ps, gs;
  for (const auto& s : pred.segments) ps[s.id] = &s;
  for (const auto& s : gt.segments) gs[s.id] = &s;

  std::set<std::uint32_t> gt_matched, pred_matched;
  for (const auto& [key, n] : inter) {
    const auto [g, p] = key;
    if (!g || !p) continue;
    if (gs[g]->category != ps[p]->category) continue;
    const std::size_t void_in_pred = inter.count({0, p}) ? inter.at({0, p}) : 0;
    const double uni = static_cast<double>(pred_area[p] + gt_area[g] - n - void_in_pred);
    const double iou = static_cast<double>(n) / uni;
    if (iou > 0.5) {
      auto& c = counts_[gs[g]->category];
      ++c.tp;
      c.iou_sum += iou;
      gt_matched.insert(g);
      pred_matched.insert(p);
    }
  }
  for (const auto& s : gt.segments)
    if (gt_area[s.id] > 0 && !gt_matched.count(s.id)) ++counts_[s.category].fn;
  for (const auto& s : pred.segments) {
    if (pred_area[s.id] == 0 || pred_matched.count(s.id)) continue;
    const std::size_t void_in_pred = inter.count({0, s.id}) ? inter.at({0, s.id}) : 0;
    if (static_cast<double>(void_in_pred) / static_cast<double>(pred_area[s.id]) > 0.5) continue;
    ++counts_[s.category].fp;
  }
}

void PqAccumulator::merge(const PqAccumulator& other) {
  for (const auto& [cat, c] : other.counts_) {
    auto& mine = counts_[cat];
    mine.tp += c.tp;
    mine.fp += c.fp;
    mine.fn += c.fn;
    mine.iou_sum += c.iou_sum;
  }
}

PqResult PqAccumulator::result() const {
  PqResult r;
  double pq_sum = 0, sq_sum = 0, rq_sum = 0, th_sum = 0, st_sum = 0;
  std::size_t n = 0, n_th = 0, n_st = 0;
  for (const auto& [cat, c] : counts_) {
    if (c.tp + c.fp + c.fn == 0) continue;
    ClassPq cp;
    cp.tp = c.tp;
    cp.fp = c.fp;
    cp.fn = c.fn;
    cp.iou_sum = c.iou_sum;
    const double denom = c.tp + 0.5 * c.fp + 0.5 * c.fn;
    cp.pq = c.iou_sum / denom;
    cp.sq = c.tp ? c.iou_sum / c.tp : 0.0;
    cp.rq = c.tp / denom;
    r.per_class[cat] = cp;
    r.tp += c.tp;
    r.fp += c.fp;
    r.fn += c.fn;
    pq_sum += cp.pq;
    sq_sum += cp.sq;
    rq_sum += cp.rq;
    ++n;
    if (classes_.is_stuff(cat)) {
      st_sum += cp.pq;
      ++n_st;
    } else {
      th_sum += cp.pq;
      ++n_th;
    }
  }
  if (n) {
    r.pq = pq_sum / n;
    r.sq = sq_sum / n;
    r.rq = rq_sum / n;
  }
  if (n_th) r.pq_things = th_sum / n_th;
  if (n_st) r.pq_stuff = st_sum / n_st;
  return r;
}

PqResult compute_pq(const PanopticMap& pred, const PanopticMap& gt, const ClassSpace& classes) {
  PqAccumulator acc(classes);
  acc.add(pred, gt);
  return acc.result();
}

void MiouAccumulator::add(std::span<const int> pred, std::span<const int> gt) {
  if (pred.size() != gt.size()) throw DimensionError("semantic rasters differ in size");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    ++gt_area_[gt[i]];
    ++pred_area_[pred[i]];
    if (pred[i] == gt[i]) ++inter_[gt[i]];
  }
}

void MiouAccumulator::merge(const MiouAccumulator& other) {
  for (const auto& [k, v] : other.inter_) inter_[k] += v;
  for (const auto& [k, v] : other.pred_area_) pred_area_[k] += v;
  for (const auto& [k, v] : other.gt_area_) gt_area_[k] += v;
}

std::map<int, double> MiouAccumulator::per_class() const {
  std::map<int, double> out;
  for (const auto& [cls, g] : gt_area_) {
    const std::size_t i = inter_.count(cls) ? inter_.at(cls) : 0;
    const std::size_t p = pred_area_.count(cls) ? pred_area_.at(cls) : 0;
    out[cls] = static_cast<double>(i) / static_cast<double>(g + p - i);
  }
  return out;
}

double MiouAccumulator::result() const {
  auto pc = per_class();
  if (pc.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [cls, v] : pc) s += v;
  return s / static_cast<double>(pc.size());
}

double compute_miou(std::span<const int> pred, std::span<const int> gt) {
  MiouAccumulator acc;
  acc.add(pred, gt);
  return acc.result();
}

namespace {

double average_precision(const std::vector<std::pair<double, bool>>& ranked, std::size_t n_gt) {
  const std::size_t n = ranked.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n; ++i) {
    tp += ranked[i].second;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(n_gt);
  }
  for (std::size_t i = n; i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    auto it = std::lower_bound(recall.begin(), recall.end(), r);
    if (it != recall.end()) sum += precision[it - recall.begin()];
  }
  return sum / 101.0;
}

}  // namespace

ApResult compute_mask_ap(const std::vector<std::vector<ScoredInstance>>& preds,
                         const std::vector<std::vector<InstanceMask>>& gts) {
  if (preds.size() != gts.size()) throw DimensionError("prediction and ground-truth image counts differ");
  std::set<int> categories;
  for (const auto& img : gts)
    for (const auto& g : img) categories.insert(g.category);

  ApResult res;
  for (int t = 0; t < 10; ++t) {
    const double thr = 0.5 + 0.05 * t;
    double class_sum = 0.0;
    for (int cat : categories) {
      struct Entry {
        double score;
        std::size_t image, index;
      };
      std::vector<Entry> order;
      std::size_t n_gt = 0;
      for (std::size_t im = 0; im < preds.size(); ++im) {
        for (std::size_t k = 0; k < preds[im].size(); ++k)
          if (preds[im][k].category == cat) order.push_back({preds[im][k].score, im, k});
        for (const auto& g : gts[im]) n_gt += g.category == cat;
      }
      std::stable_sort(order.begin(), order.end(), [](const Entry& a, const Entry& b) { return a.score > b.score; });
      std::vector<std::vector<char>> used(gts.size());
      for (std::size_t im = 0; im < gts.size(); ++im) used[im].assign(gts[im].size(), 0);
      std::vector<std::pair<double, bool>> ranked;
      for (const auto& e : order) {
        const auto& p = preds[e.image][e.index];
        double best = std::min(thr, 1.0 - 1e-10);
        int match = -1;
        for (std::size_t g = 0; g < gts[e.image].size(); ++g) {
          const auto& gt = gts[e.image][g];
          if (gt.category != cat || used[e.image][g]) continue;
          const double iou = mask_iou(p.mask, gt.mask, 0.0);
          if (iou >= best) {
            best = iou;
            match = static_cast<int>(g);
          }
        }
        if (match >= 0) used[e.image][match] = 1;
        ranked.emplace_back(e.score, match >= 0);
      }
      class_sum += average_precision(ranked, n_gt);
    }
    res.per_threshold.push_back(categories.empty() ? 0.0 : class_sum / categories.size());
  }
  res.ap = std::accumulate(res.per_threshold.begin(), res.per_threshold.end(), 0.0) / 10.0;
  res.ap50 = res.per_threshold[0];
  res.ap75 = res.per_threshold[5];
  return res;
}

}  // namespace knet::metrics
