// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset, e.g. `acceptance 1 2 3`.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <unistd.h>

#include <nlohmann/json.hpp>

#include "knet/grad_suite.hpp"
#include "knet/kernel_head.hpp"
#include "knet/losses.hpp"
#include "knet/metrics.hpp"
#include "knet/synth_data.hpp"
#include "knet/train.hpp"

namespace fs = std::filesystem;
using namespace knet;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path work_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("knet_acceptance_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

const data::Dataset& dataset(std::uint64_t seed, std::size_t count) {
  static std::map<std::uint64_t, data::Dataset> cache;
  auto it = cache.find(seed);
  if (it != cache.end()) return it->second;
  data::SceneSpec spec;
  spec.seed = seed;
  const fs::path dir = work_dir() / ("data_" + std::to_string(seed));
  data::write_dataset(spec, count, dir);
  return cache.emplace(seed, data::read_dataset(dir)).first->second;
}

const data::Dataset& train_set() { return dataset(1, 500); }
const data::Dataset& val_set() { return dataset(2, 100); }

train::TrainConfig toy_config(const std::string& name) {
  auto doc = train::to_json(train::TrainConfig{});
  std::ifstream in(fs::path(KNET_SOURCE_DIR) / "configs" / name);
  doc.merge_patch(nlohmann::json::parse(in));
  auto cfg = train::train_config_from_json(doc);
  cfg.validate();
  return cfg;
}

train::TrainResult run_training(const train::TrainConfig& cfg, const std::string& run) {
  return train::train(cfg, train_set(), val_set(), work_dir() / run);
}

Outcome gradient_suite() {
  const auto t0 = Clock::now();
  auto results = gradsuite::run(gradsuite::components(), 10);
  const double elapsed = seconds_since(t0);
  std::size_t failed = 0;
  double worst = 0.0;
  std::string worst_case;
  for (const auto& r : results) {
    failed += !r.passed();
    const double ratio = r.max_error / r.tolerance;
    if (ratio > worst) {
      worst = ratio;
      worst_case = fmt("%s seed %llu err %.2e", r.component.c_str(), static_cast<unsigned long long>(r.seed),
                       r.max_error);
    }
  }
  return {failed == 0 && elapsed < 120.0,
          fmt("%zu cases, %zu failed, worst %s, %.1fs (limit 120s)", results.size(), failed, worst_case.c_str(),
              elapsed)};
}

double brute_force_min(const loss::CostMatrix& c) {
  std::vector<std::size_t> preds(c.n_pred);
  std::iota(preds.begin(), preds.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double t = 0.0;
    for (std::size_t g = 0; g < c.n_gt; ++g) t += c.at(preds[g], g);
    best = std::min(best, t);
  } while (std::next_permutation(preds.begin(), preds.end()));
  return best;
}

Outcome matching_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(20);
  std::uniform_real_distribution<double> u(-2.0, 3.0);
  std::size_t mismatches = 0;
  for (int t = 0; t < 200; ++t) {
    loss::CostMatrix c;
    c.n_pred = 1 + rng() % 7;
    c.n_gt = rng() % (c.n_pred + 1);
    c.total.resize(c.n_pred * c.n_gt);
    for (auto& x : c.total) x = (t % 4 == 0) ? std::floor(u(rng) * 2) : u(rng);  // ties every 4th
    const double got = loss::assignment_cost(c, loss::hungarian_assign(c));
    mismatches += got != brute_force_min(c);
  }
  const double elapsed = seconds_since(t0);
  return {mismatches == 0 && elapsed < 10.0,
          fmt("200 matrices, %zu mismatches, %.2fs (limit 10s)", mismatches, elapsed)};
}

Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), std::move(v));
}

Outcome group_feature_oracle() {
  PrecisionScope f32(Precision::kF32);
  std::mt19937_64 rng(30);
  double worst = 0.0;
  std::size_t shapes = 0;
  for (std::size_t n = 1; n <= 6; ++n)
    for (std::size_t c = 1; c <= 6; ++c)
      for (std::size_t h = 1; h <= 6; ++h)
        for (std::size_t w = 1; w <= 6; ++w) {
          Tensor m = random_tensor({1, n, h, w}, rng, 0.0, 1.0);
          Tensor f = random_tensor({1, c, h, w}, rng, -1.0, 1.0);
          auto got = head::assemble_group_features(m, f).to_vector();
          for (std::size_t ni = 0; ni < n; ++ni)
            for (std::size_t ci = 0; ci < c; ++ci) {
              double acc = 0.0;
              for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x)
                  acc += m.value((ni * h + y) * w + x) * f.value((ci * h + y) * w + x);
              worst = std::max(worst, std::abs(got[ni * c + ci] - acc));
            }
          ++shapes;
        }
  return {worst < 1e-6, fmt("%zu shapes, max abs diff %.3e (limit 1e-6)", shapes, worst)};
}

Segment seg(std::uint32_t id, int cat, bool thing = true) {
  Segment s;
  s.id = id;
  s.category = cat;
  s.is_thing = thing;
  return s;
}

PanopticMap make_map(std::size_t h, std::size_t w, std::vector<std::uint32_t> ids, std::vector<Segment> segs) {
  PanopticMap m;
  m.height = h;
  m.width = w;
  m.ids = std::move(ids);
  m.segments = std::move(segs);
  m.recount_areas();
  return m;
}

void drop_absent(PanopticMap& m) {
  std::vector<Segment> kept;
  for (auto& s : m.segments)
    if (std::count(m.ids.begin(), m.ids.end(), s.id)) kept.push_back(s);
  m.segments = kept;
  m.recount_areas();
}

PanopticMap random_gt(std::mt19937_64& rng, bool with_void) {
  const std::size_t h = 16, w = 16;
  PanopticMap m;
  m.height = h;
  m.width = w;
  m.ids.resize(h * w);
  m.segments = {seg(1, 101, false), seg(2, 102, false)};
  for (std::size_t i = 0; i < h * w; ++i) m.ids[i] = (i / w < h / 2) ? 1 : 2;
  const std::size_t k = rng() % 6;
  for (std::size_t n = 0; n < k; ++n) {
    const std::uint32_t id = 10 + n;
    m.segments.push_back(seg(id, 1 + rng() % 3));
    const std::size_t r0 = rng() % h, c0 = rng() % w, hh = 2 + rng() % 7, ww = 2 + rng() % 7;
    for (std::size_t r = r0; r < std::min(h, r0 + hh); ++r)
      for (std::size_t c = c0; c < std::min(w, c0 + ww); ++c) m.ids[r * w + c] = id;
  }
  if (with_void)
    for (int v = 0; v < 12; ++v) m.ids[rng() % (h * w)] = 0;
  drop_absent(m);
  return m;
}

PanopticMap random_pred(const PanopticMap& gt, std::mt19937_64& rng) {
  PanopticMap p = gt;
  for (auto& id : p.ids)
    if (id == 0) id = 1;
  const std::size_t flips = rng() % 60;
  for (std::size_t f = 0; f < flips; ++f) p.ids[rng() % p.ids.size()] = p.segments[rng() % p.segments.size()].id;
  if (rng() % 2) {
    p.segments.push_back(seg(99, 1 + rng() % 3));
    const std::size_t r0 = rng() % 12, c0 = rng() % 12;
    for (std::size_t r = r0; r < r0 + 4; ++r)
      for (std::size_t c = c0; c < c0 + 4; ++c) p.ids[r * 16 + c] = 99;
  }
  if (rng() % 3 == 0)
    for (std::size_t i = 0; i < 16; ++i) p.ids[rng() % p.ids.size()] = 0;
  drop_absent(p);
  return p;
}

// PQ straight from the definition: all segment pairs, IoU > 0.5 is a match.
double brute_force_pq(const PanopticMap& pred, const PanopticMap& gt) {
  struct Counts {
    std::size_t tp = 0, fp = 0, fn = 0;
    double iou = 0;
  };
  std::map<int, Counts> per;
  std::set<std::uint32_t> hit_g, hit_p;
  std::vector<std::tuple<std::uint32_t, int, double>> tps;
  for (const auto& g : gt.segments)
    for (const auto& p : pred.segments) {
      if (g.category != p.category) continue;
      std::size_t inter = 0, uni = 0;
      for (std::size_t i = 0; i < gt.ids.size(); ++i) {
        const bool in_g = gt.ids[i] == g.id, in_p = pred.ids[i] == p.id;
        inter += in_g && in_p;
        uni += (in_g || in_p) && gt.ids[i] != 0;
      }
      const double iou = static_cast<double>(inter) / uni;
      if (iou > 0.5) {
        tps.emplace_back(g.id, g.category, iou);
        hit_g.insert(g.id);
        hit_p.insert(p.id);
      }
    }
  std::sort(tps.begin(), tps.end());
  for (auto& [id, cat, iou] : tps) {
    ++per[cat].tp;
    per[cat].iou += iou;
  }
  for (const auto& g : gt.segments)
    if (!hit_g.count(g.id)) ++per[g.category].fn;
  for (const auto& p : pred.segments) {
    if (hit_p.count(p.id)) continue;
    std::size_t on_void = 0, area = 0;
    for (std::size_t i = 0; i < pred.ids.size(); ++i)
      if (pred.ids[i] == p.id) ++area, on_void += gt.ids[i] == 0;
    if (2 * on_void > area) continue;
    ++per[p.category].fp;
  }
  double sum = 0;
  std::size_t n = 0;
  for (const auto& [cat, c] : per) {
    if (c.tp + c.fp + c.fn == 0) continue;
    sum += c.iou / (c.tp + 0.5 * c.fp + 0.5 * c.fn);
    ++n;
  }
  return n ? sum / n : 0.0;
}

std::vector<std::uint8_t> box(std::size_t r0, std::size_t c0, std::size_t hh, std::size_t ww) {
  std::vector<std::uint8_t> m(100, 0);
  for (std::size_t r = r0; r < r0 + hh; ++r)
    for (std::size_t c = c0; c < c0 + ww; ++c) m[r * 10 + c] = 1;
  return m;
}

Outcome metric_oracles() {
  std::mt19937_64 rng(40);
  std::size_t mismatches = 0;
  for (int t = 0; t < 100; ++t) {
    auto gt = random_gt(rng, t % 2 == 0);
    auto pred = random_pred(gt, rng);
    mismatches += metrics::compute_pq(pred, gt).pq != brute_force_pq(pred, gt);
  }

  // One TP at IoU 0.8 plus one FP of the same class.
  std::vector<std::uint32_t> g(20, 2), p(20, 0);
  for (int i = 0; i < 5; ++i) g[i] = 1;
  for (int i = 0; i < 4; ++i) p[i] = 7;
  for (int i = 10; i < 14; ++i) p[i] = 8;
  auto pq = metrics::compute_pq(make_map(4, 5, p, {seg(7, 1), seg(8, 1)}),
                                make_map(4, 5, g, {seg(1, 1), seg(2, 101, false)}));
  const double hand_pq = pq.per_class.at(1).pq;

  // TP at IoU 0.6.
  std::vector<std::vector<InstanceMask>> gts{{{1, box(0, 0, 2, 5)}}};
  std::vector<std::vector<metrics::ScoredInstance>> preds{{{1, 0.9, box(0, 0, 2, 3)}}};
  auto ap = metrics::compute_mask_ap(preds, gts);

  const bool ok = mismatches == 0 && hand_pq == 0.8 / 1.5 && std::abs(hand_pq - 0.5333) < 5e-5 &&
                  ap.ap50 == 1.0 && ap.ap75 == 0.0;
  return {ok, fmt("100 rasters, %zu mismatches; hand PQ %.4f; AP50 %.3f AP75 %.3f", mismatches, hand_pq, ap.ap50,
                  ap.ap75)};
}

// Kept across criteria 5 and 8.
std::optional<train::TrainResult> panoptic_reference;

Outcome panoptic_training() {
  const auto t0 = Clock::now();
  panoptic_reference = run_training(toy_config("toy_panoptic.json"), "panoptic_a");
  const auto& r = panoptic_reference->final_report;
  std::ostringstream stages;
  bool monotone = true;
  for (std::size_t s = 0; s < r.stages.size(); ++s) {
    stages << (s ? " " : "") << fmt("%.2f", 100 * r.stages[s].pq);
    if (s && r.stages[s].pq < r.stages[s - 1].pq - 0.01) monotone = false;
  }
  const double first = r.stages.front().pq, last = r.stages.back().pq;
  const bool ok = last - first >= 0.10 && monotone && last >= 0.60;
  return {ok, fmt("stage PQ [%s], gain %.2f (need 10), final %.2f (need 60), %.0fs", stages.str().c_str(),
                  100 * (last - first), 100 * last, seconds_since(t0))};
}

Outcome ablation_ordering() {
  const auto t0 = Clock::now();
  auto rows = train::ablate(toy_config("toy_instance.json"), train::AblationGrid::kUpdateInteraction, train_set(),
                            val_set(), work_dir() / "ablation");
  std::map<std::string, double> ap;
  for (const auto& row : rows) ap[row.name] = row.report.primary();
  const double full = ap["full"], ki = ap["ki_only"], aku = ap["aku_only"], none = ap["neither"];
  const bool ok = full > ki && ki > aku && aku > none && full - none >= 0.02;
  return {ok, fmt("AP full %.2f, ki_only %.2f, aku_only %.2f, neither %.2f (need strictly decreasing), "
                  "full-neither %.2f (need 2), %.0fs",
                  100 * full, 100 * ki, 100 * aku, 100 * none, 100 * (full - none), seconds_since(t0))};
}

Outcome nms_free() {
  // Inference path: backbone, head, binarization and merge, infer driver.
  const std::vector<std::string> files{"src/pipeline.cpp", "src/kernel_head.cpp", "src/train.cpp",
                                       "include/knet/pipeline.hpp", "include/knet/kernel_head.hpp"};
  const std::regex forbidden(R"(\bnms\b|suppress|\bbbox|\bbox(es)?\b|bounding|mask_iou|\biou\b)",
                             std::regex::icase);
  const bool scanner_live = std::regex_search("keep = nms(bboxes, 0.5);", forbidden) &&
                            std::regex_search("double o = mask_iou(a, b);", forbidden);
  std::vector<std::string> hits;
  for (const auto& f : files) {
    std::istringstream in(slurp(fs::path(KNET_SOURCE_DIR) / f));
    std::string line;
    for (int n = 1; std::getline(in, line); ++n)
      if (std::regex_search(line, forbidden)) hits.push_back(fmt("%s:%d", f.c_str(), n));
  }

  // Real matching on random predictions against generated targets.
  std::mt19937_64 rng(70);
  std::normal_distribution<double> nd(0.0, 2.0);
  data::SceneSpec spec;
  spec.seed = 70;
  spec.height = spec.width = 16;
  spec.size_min = 4;
  spec.size_max = 8;
  spec.min_visible_pixels = 2;
  spec.n_max = 6;
  ClassSpace cs;
  std::size_t violations = 0, pairs = 0;
  for (int b = 0; b < 1000; ++b) {
    const std::size_t batch = 1 + rng() % 3, n = 6 + rng() % 7;
    std::vector<loss::ImageTargets> targets;
    for (std::size_t i = 0; i < batch; ++i)
      targets.push_back(loss::make_targets(data::generate_sample(spec, b * 3 + i), cs, TaskMode::kInstance, 16, 16));
    std::vector<double> masks(batch * n * 16 * 16), cls(batch * n * cs.things());
    for (auto& x : masks) x = nd(rng);
    for (auto& x : cls) x = nd(rng);
    head::StageOutput st;
    st.masks = {Tensor({batch, n, 16, 16}, masks), head::MaskActivation::kSigmoid};
    st.class_logits = Tensor({batch, n, cs.things()}, cls);
    loss::LossConfig lc;
    lc.mode = TaskMode::kInstance;
    lc.instance_kernels = n;
    auto assigned = loss::stage_assignments({st}, targets, lc);
    for (std::size_t i = 0; i < batch; ++i) {
      const auto& a = assigned[0][i];
      std::set<std::size_t> ps, gs;
      for (auto [p, g] : a.pairs) {
        violations += !ps.insert(p).second || !gs.insert(g).second || p >= n;
        ++pairs;
      }
      violations += gs.size() != targets[i].thing_masks.size();
      for (auto p : a.unmatched_preds) violations += ps.count(p);
      violations += a.pairs.size() + a.unmatched_preds.size() != n;
    }
  }
  std::string where = hits.empty() ? "none" : hits.front();
  return {scanner_live && hits.empty() && violations == 0,
          fmt("suppression/box tokens: %zu (first %s); 1000 batches, %zu pairs, %zu violations", hits.size(),
              where.c_str(), pairs, violations)};
}

Outcome determinism() {
  const auto cfg = toy_config("toy_panoptic.json");
  if (!panoptic_reference) panoptic_reference = run_training(cfg, "panoptic_a");
  run_training(cfg, "panoptic_b");
  const auto a = slurp(work_dir() / "panoptic_a" / "metrics.json");
  const auto b = slurp(work_dir() / "panoptic_b" / "metrics.json");
  return {!a.empty() && a == b, fmt("metrics.json %zu bytes vs %zu bytes, %s", a.size(), b.size(),
                                    a == b ? "identical" : "different")};
}

Outcome semantic_head_gain() {
  auto cfg = toy_config("toy_semantic.json");
  const double with_head = run_training(cfg, "semantic_s3").final_report.primary();
  cfg.model.stages = 0;
  const double static_only = run_training(cfg, "semantic_s0").final_report.primary();
  return {with_head - static_only >= 0.02, fmt("mIoU S=3 %.2f vs S=0 %.2f, gain %.2f (need 2)", 100 * with_head,
                                               100 * static_only, 100 * (with_head - static_only))};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"matching oracle", matching_oracle},
      {"group feature oracle", group_feature_oracle},
      {"metric oracles", metric_oracles},
      {"toy panoptic training", panoptic_training},
      {"ablation ordering", ablation_ordering},
      {"nms-free and box-free", nms_free},
      {"determinism", determinism},
      {"semantic head gain", semantic_head_gain},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::stoul(argv[i]));

  std::size_t failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.passed;
    std::cout << (o.passed ? "[PASS] " : "[FAIL] ") << i + 1 << ' ' << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  std::error_code ec;
  fs::remove_all(work_dir(), ec);
  return failures ? 1 : 0;
}
