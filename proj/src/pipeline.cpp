#include "knet/pipeline.hpp"

#include <algorithm>
#include <cmath>

namespace knet::pipeline {

using nlohmann::json;

std::size_t ModelConfig::semantic_classes() const {
  // Instance mode learns things plus one background class.
  return mode == TaskMode::kInstance ? classes.things() + 1 : classes.total();
}

std::size_t ModelConfig::total_kernels() const {
  switch (mode) {
    case TaskMode::kSemantic: return classes.total();
    case TaskMode::kInstance: return instance_kernels;
    case TaskMode::kPanoptic: return instance_kernels + classes.stuff();
  }
  return 0;
}

void ModelConfig::validate() const {
  if (height % 4 || width % 4)
    throw ConfigError("image size " + std::to_string(height) + "x" + std::to_string(width) +
                      " must be divisible by 4");
  if (height < 8 || width < 8) throw ConfigError("images must be at least 8x8");
  if (channels < 4 || (positional_encoding && channels % 4))
    throw ConfigError("feature width must be a positive multiple of 4");
  if (kernel_interaction && channels % heads)
    throw ConfigError("feature width " + std::to_string(channels) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  if (mode != TaskMode::kSemantic && instance_kernels == 0) throw ConfigError("instance kernel count must be positive");
  if (classes.things() == 0 && mode != TaskMode::kSemantic) throw ConfigError("no thing classes");
  if (mask_threshold <= 0 || mask_threshold >= 1) throw ConfigError("mask threshold must lie in (0, 1)");
}

json to_json(const ModelConfig& c) {
  return json{{"mode", to_string(c.mode)},
              {"thing_ids", c.classes.thing_ids},
              {"stuff_ids", c.classes.stuff_ids},
              {"instance_kernels", c.instance_kernels},
              {"channels", c.channels},
              {"stages", c.stages},
              {"height", c.height},
              {"width", c.width},
              {"heads", c.heads},
              {"ffn_multiplier", c.ffn_multiplier},
              {"adaptive_update", c.adaptive_update},
              {"kernel_interaction", c.kernel_interaction},
              {"positional_encoding", c.positional_encoding},
              {"seed", c.seed},
              {"mask_threshold", c.mask_threshold},
              {"score_floor", c.score_floor},
              {"ap_score_floor", c.ap_score_floor},
              {"min_area", c.min_area},
              {"keep_fraction", c.keep_fraction}};
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  auto get = [&](const char* key, auto& slot) {
    if (j.contains(key)) j.at(key).get_to(slot);
  };
  if (j.contains("mode")) c.mode = parse_task_mode(j.at("mode").get<std::string>());
  get("thing_ids", c.classes.thing_ids);
  get("stuff_ids", c.classes.stuff_ids);
  get("instance_kernels", c.instance_kernels);
  get("channels", c.channels);
  get("stages", c.stages);
  get("height", c.height);
  get("width", c.width);
  get("heads", c.heads);
  get("ffn_multiplier", c.ffn_multiplier);
  get("adaptive_update", c.adaptive_update);
  get("kernel_interaction", c.kernel_interaction);
  get("positional_encoding", c.positional_encoding);
  get("seed", c.seed);
  get("mask_threshold", c.mask_threshold);
  get("score_floor", c.score_floor);
  get("ap_score_floor", c.ap_score_floor);
  get("min_area", c.min_area);
  get("keep_fraction", c.keep_fraction);
  return c;
}

BackboneLite::BackboneLite(std::size_t c, bool with_instance, bool pe, nn::Rng& rng)
    : stem1(3, c, 3, 2, 1, rng),
      stem2(c, c, 3, 2, 1, rng),
      instance_branch(with_instance),
      positional_encoding(pe) {
  if (with_instance) {
    ins1 = nn::Conv2d(c, c, 3, 1, 1, rng);
    ins2 = nn::Conv2d(c, c, 3, 1, 1, rng);
  }
  sem1 = nn::Conv2d(c, c, 3, 1, 1, rng);
  sem2 = nn::Conv2d(c, c, 3, 1, 1, rng);
}

BackboneFeatures BackboneLite::forward(const Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3)
    throw DimensionError("backbone expects [B, 3, H, W], got " + shape_str(images.shape()));
  if (images.size(2) % 4 || images.size(3) % 4)
    throw ConfigError("image size " + shape_str(images.shape()) + " is not divisible by 4");
  Tensor x = relu(stem1.forward(images));
  x = relu(stem2.forward(x));
  if (positional_encoding) {
    const std::size_t c = x.size(1), h = x.size(2), w = x.size(3);
    x = x + reshape(nn::positional_encoding_2d(h, w, c), {1, c, h, w});
  }
  BackboneFeatures f;
  if (instance_branch) f.instance = ins2.forward(relu(ins1.forward(x)));
  f.semantic = sem2.forward(relu(sem1.forward(x)));
  return f;
}

void BackboneLite::collect(const std::string& prefix, nn::ParameterList& out) const {
  stem1.collect(prefix + ".stem1", out);
  stem2.collect(prefix + ".stem2", out);
  if (instance_branch) {
    ins1.collect(prefix + ".ins1", out);
    ins2.collect(prefix + ".ins2", out);
  }
  sem1.collect(prefix + ".sem1", out);
  sem2.collect(prefix + ".sem2", out);
}

BackboneFeatures backbone_forward(const Tensor& images, const BackboneLite& backbone) {
  return backbone.forward(images);
}

InitialPredictions initial_predictions(const BackboneFeatures& f, const Tensor& static_instance,
                                       const Tensor& static_semantic) {
  InitialPredictions p;
  if (f.instance.defined() && static_instance.defined()) p.instance = head::kernel_conv(static_instance, f.instance);
  if (static_semantic.defined()) p.semantic = head::kernel_conv(static_semantic, f.semantic);
  return p;
}

PanopticInputs build_panoptic_inputs(const Tensor& m0_ins, const Tensor& m0_sem, const Tensor& k0_ins,
                                     const Tensor& k0_sem, const Tensor& f_ins, const Tensor& f_sem,
                                     std::size_t stuff) {
  const std::size_t k = m0_sem.size(1);
  if (stuff > k || k0_sem.size(0) != k)
    throw DimensionError("semantic predictions " + shape_str(m0_sem.shape()) + " cannot hold " +
                         std::to_string(stuff) + " stuff rows");
  PanopticInputs in;
  in.masks = concat({m0_ins, slice(m0_sem, 1, k - stuff, stuff)}, 1);
  in.kernels = concat({k0_ins, slice(k0_sem, 0, k - stuff, stuff)}, 0);
  in.features = f_ins + f_sem;
  return in;
}

Model::Model(const ModelConfig& cfg) : config(cfg) {
  config.validate();
  nn::Rng rng(config.seed);
  const std::size_t c = config.channels;
  backbone = BackboneLite(c, config.mode != TaskMode::kSemantic, config.positional_encoding, rng);
  const double bound = 1.0 / std::sqrt(static_cast<double>(c));
  if (config.mode != TaskMode::kSemantic)
    static_instance = nn::uniform_parameter({config.instance_kernels, c}, bound, rng);
  static_semantic = nn::uniform_parameter({config.semantic_classes(), c}, bound, rng);
  head::HeadConfig hc;
  hc.channels = c;
  hc.heads = config.heads;
  hc.ffn_multiplier = config.ffn_multiplier;
  hc.num_classes = config.mode == TaskMode::kSemantic ? 0 : config.classes.things();
  hc.adaptive_update = config.adaptive_update;
  hc.kernel_interaction = config.kernel_interaction;
  hc.activation = config.mode == TaskMode::kSemantic ? head::MaskActivation::kSoftmax : head::MaskActivation::kSigmoid;
  head = head::KernelUpdateHead(hc, config.stages, rng);
}

ForwardOutput Model::forward(const Tensor& images) const {
  auto feats = backbone.forward(images);
  auto init = initial_predictions(feats, static_instance, static_semantic);
  const std::size_t batch = images.size(0);
  ForwardOutput out;
  Tensor kernels, features;
  head::MaskLogits masks;
  switch (config.mode) {
    case TaskMode::kSemantic:
      kernels = static_semantic;
      features = feats.semantic;
      masks = {init.semantic, head::MaskActivation::kSoftmax};
      break;
    case TaskMode::kInstance:
      kernels = static_instance;
      features = feats.instance + feats.semantic;
      masks = {init.instance, head::MaskActivation::kSigmoid};
      out.semantic_logits = init.semantic;
      break;
    case TaskMode::kPanoptic: {
      auto in = build_panoptic_inputs(init.instance, init.semantic, static_instance, static_semantic,
                                      feats.instance, feats.semantic, config.classes.stuff());
      kernels = in.kernels;
      features = in.features;
      masks = {in.masks, head::MaskActivation::kSigmoid};
      out.semantic_logits = init.semantic;
      break;
    }
  }
  if (config.stages == 0)
    out.stages.push_back(head.initial_stage(kernels, masks, batch));
  else
    out.stages = head.run_iterative(kernels, masks, features, config.stages);
  return out;
}

loss::LossConfig Model::loss_config() const {
  loss::LossConfig lc;
  lc.mode = config.mode;
  lc.instance_kernels = config.instance_kernels;
  return lc;
}

loss::LossBreakdown Model::loss(const ForwardOutput& out, const std::vector<loss::ImageTargets>& targets) const {
  return loss::set_prediction_loss(out.stages, targets, loss_config(), out.semantic_logits);
}

nn::ParameterList Model::parameters() const {
  nn::ParameterList ps;
  backbone.collect("backbone", ps);
  if (static_instance.defined()) ps.emplace_back("kernels.instance", static_instance);
  ps.emplace_back("kernels.semantic", static_semantic);
  head.collect("head", ps);
  return ps;
}

Tensor stack_images(const std::vector<const GroundTruthSample*>& samples) {
  if (samples.empty()) throw ContractError("empty batch");
  const Shape s = samples[0]->image.shape();
  std::vector<double> v;
  v.reserve(samples.size() * shape_numel(s));
  for (const auto* g : samples) {
    if (g->image.shape() != s) throw DimensionError("batch images differ in size");
    auto d = g->image.data();
    v.insert(v.end(), d.begin(), d.end());
  }
  return Tensor({samples.size(), s[0], s[1], s[2]}, std::move(v));
}

namespace {

Tensor image_logits(const head::StageOutput& stage, std::size_t b, std::size_t h, std::size_t w) {
  Tensor l = slice(stage.masks.logits, 0, b, 1);
  if (l.size(2) != h || l.size(3) != w) l = upsample_bilinear(l, h, w);
  return l;
}

double sigmoid_d(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

struct ClassScore {
  double score;
  std::size_t index;
};

ClassScore best_class(const head::StageOutput& stage, std::size_t b, std::size_t n) {
  const std::size_t k = stage.class_logits.size(2), rows = stage.class_logits.size(1);
  auto d = stage.class_logits.data().subspan((b * rows + n) * k, k);
  ClassScore best{-1.0, 0};
  for (std::size_t c = 0; c < k; ++c) {
    const double p = sigmoid_d(d[c]);
    if (p > best.score) best = {p, c};
  }
  return best;
}

}  // namespace

std::vector<double> mask_probabilities(const head::StageOutput& stage, std::size_t b, std::size_t h,
                                       std::size_t w) {
  NoGradGuard no_grad;
  Tensor l = image_logits(stage, b, h, w);
  const std::size_t n = l.size(1);
  Tensor p = stage.masks.activation == head::MaskActivation::kSoftmax ? softmax(l, 1) : sigmoid(l);
  (void)n;
  return p.to_vector();
}

std::vector<metrics::ScoredInstance> binarize_instances(const head::StageOutput& stage, std::size_t b,
                                                        const ModelConfig& cfg, double threshold,
                                                        double score_floor) {
  if (cfg.mode == TaskMode::kSemantic) throw ContractError("no instances in semantic mode");
  const std::size_t h = cfg.height, w = cfg.width, px = h * w;
  const auto probs = mask_probabilities(stage, b, h, w);
  std::vector<metrics::ScoredInstance> out;
  for (std::size_t n = 0; n < cfg.instance_kernels; ++n) {
    const auto cs = best_class(stage, b, n);
    if (cs.score < score_floor) continue;
    metrics::ScoredInstance inst;
    inst.category = cfg.classes.thing_ids[cs.index];
    inst.score = cs.score;
    inst.mask.resize(px);
    for (std::size_t i = 0; i < px; ++i) inst.mask[i] = probs[n * px + i] >= threshold;
    out.push_back(std::move(inst));
  }
  return out;
}

PanopticMap merge_panoptic(const head::StageOutput& stage, std::size_t b, const ModelConfig& cfg) {
  if (cfg.mode != TaskMode::kPanoptic) throw ContractError("panoptic merge needs panoptic mode");
  const std::size_t h = cfg.height, w = cfg.width, px = h * w;
  const auto probs = mask_probabilities(stage, b, h, w);
  const double thr = cfg.mask_threshold;

  struct Candidate {
    std::size_t row;
    int category;
    bool thing;
    double score;
    std::size_t thresholded;
  };
  std::vector<Candidate> cands;
  auto thresholded = [&](std::size_t row) {
    std::size_t a = 0;
    for (std::size_t i = 0; i < px; ++i) a += probs[row * px + i] >= thr;
    return a;
  };
  for (std::size_t n = 0; n < cfg.instance_kernels; ++n) {
    const auto cs = best_class(stage, b, n);
    cands.push_back({n, cfg.classes.thing_ids[cs.index], true, cs.score, thresholded(n)});
  }
  for (std::size_t s = 0; s < cfg.classes.stuff(); ++s) {
    const std::size_t row = cfg.instance_kernels + s;
    double sum = 0.0;
    std::size_t area = 0;
    for (std::size_t i = 0; i < px; ++i)
      if (probs[row * px + i] >= thr) sum += probs[row * px + i], ++area;
    cands.push_back({row, cfg.classes.stuff_ids[s], false, area ? sum / area : 0.0, area});
  }
  std::vector<char> active(cands.size());
  for (std::size_t c = 0; c < cands.size(); ++c)
    active[c] = cands[c].score >= cfg.score_floor && cands[c].thresholded > 0;

  std::vector<int> owner(px, -1);
  for (;;) {
    std::vector<std::size_t> area(cands.size(), 0);
    for (std::size_t i = 0; i < px; ++i) {
      int best = -1;
      double best_v = -1.0;
      for (std::size_t c = 0; c < cands.size(); ++c) {
        if (!active[c]) continue;
        const double v = cands[c].score * probs[cands[c].row * px + i];
        if (v > best_v) best_v = v, best = static_cast<int>(c);
      }
      if (best >= 0 && probs[cands[best].row * px + i] < thr) best = -1;
      owner[i] = best;
      if (best >= 0) ++area[best];
    }
    bool removed = false;
    for (std::size_t c = 0; c < cands.size(); ++c) {
      if (!active[c]) continue;
      if (area[c] < cfg.min_area || area[c] < cfg.keep_fraction * cands[c].thresholded) {
        active[c] = 0;
        removed = true;
      }
    }
    if (!removed) break;
  }

  PanopticMap m;
  m.height = h;
  m.width = w;
  m.ids.assign(px, 0);
  std::vector<std::uint32_t> id_of(cands.size(), 0);
  std::uint32_t next = 1;
  for (std::size_t i = 0; i < px; ++i) {
    if (owner[i] < 0) continue;
    auto& id = id_of[owner[i]];
    if (!id) {
      id = next++;
      const auto& c = cands[owner[i]];
      m.segments.push_back({id, c.category, c.thing, c.score, 0});
    }
    m.ids[i] = id;
  }
  m.recount_areas();
  return m;
}

std::vector<int> semantic_prediction(const head::StageOutput& stage, std::size_t b, const ModelConfig& cfg) {
  const std::size_t h = cfg.height, w = cfg.width, px = h * w;
  NoGradGuard no_grad;
  Tensor l = image_logits(stage, b, h, w);
  const std::size_t n = l.size(1);
  auto d = l.data();
  std::vector<int> out(px);
  for (std::size_t i = 0; i < px; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < n; ++k)
      if (d[k * px + i] > d[best * px + i]) best = k;
    out[i] = cfg.classes.category_of_semantic(best);
  }
  return out;
}

}  // namespace knet::pipeline
