#include "knet/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include <zlib.h>

#include "knet/image_io.hpp"
#include "knet/serialize.hpp"

namespace knet::train {

using nlohmann::json;
namespace fs = std::filesystem;

double TrainConfig::effective_weight_decay() const {
  if (weight_decay) return *weight_decay;
  return model.mode == TaskMode::kSemantic ? 0.0005 : 0.05;
}

void TrainConfig::validate() const {
  model.validate();
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  if (effective_weight_decay() < 0) throw ConfigError("weight decay must be non-negative");
  if (beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1) throw ConfigError("betas must lie in [0, 1)");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (epochs == 0) throw ConfigError("epochs must be positive");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  double prev = 0.0;
  for (double m : milestones) {
    if (m <= prev || m >= 1.0)
      throw ConfigError("milestones must be strictly increasing inside (0, 1)");
    prev = m;
  }
}

json to_json(const TrainConfig& c) {
  return json{{"lr", c.lr},
              {"weight_decay", c.weight_decay ? json(*c.weight_decay) : json(nullptr)},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"adam_eps", c.adam_eps},
              {"grad_clip", c.grad_clip},
              {"epochs", c.epochs},
              {"milestones", c.milestones},
              {"decay", c.decay},
              {"batch_size", c.batch_size},
              {"seed", c.seed},
              {"eval_every", c.eval_every},
              {"model", pipeline::to_json(c.model)},
              {"train_data", c.train_data},
              {"val_data", c.val_data}};
}

TrainConfig train_config_from_json(const json& j) {
  TrainConfig c;
  auto get = [&](const char* key, auto& slot) {
    if (j.contains(key)) j.at(key).get_to(slot);
  };
  try {
    get("lr", c.lr);
    if (j.contains("weight_decay") && !j.at("weight_decay").is_null())
      c.weight_decay = j.at("weight_decay").get<double>();
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("adam_eps", c.adam_eps);
    get("grad_clip", c.grad_clip);
    get("epochs", c.epochs);
    get("milestones", c.milestones);
    get("decay", c.decay);
    get("batch_size", c.batch_size);
    get("seed", c.seed);
    get("eval_every", c.eval_every);
    if (j.contains("model")) c.model = pipeline::model_config_from_json(j.at("model"));
    get("train_data", c.train_data);
    get("val_data", c.val_data);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key.path=value: " + assignment);
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::stringstream ss(path);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    if (!node->is_object()) throw ConfigError("override path " + path + " crosses a non-object");
    node = &(*node)[parts[i]];
    if (node->is_null()) *node = json::object();
  }
  if (!node->is_object()) throw ConfigError("override path " + path + " crosses a non-object");
  (*node)[parts.back()] = value;
}

void adamw_step(const nn::ParameterList& params, AdamState& state, double lr, double weight_decay,
                double beta1, double beta2, double eps) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [key, p] = params[i];
    if (!p.has_grad()) continue;
    for (double g : p.grad())
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter " + key);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(beta1, t), c2 = 1.0 - std::pow(beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor p = params[i].second;
    auto theta = p.mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != theta.size()) {
      m.assign(theta.size(), 0.0);
      v.assign(theta.size(), 0.0);
    }
    const bool has = p.has_grad();
    std::span<const double> grad = has ? p.grad() : std::span<const double>();
    for (std::size_t k = 0; k < theta.size(); ++k) {
      const double g = has ? grad[k] : 0.0;
      m[k] = beta1 * m[k] + (1.0 - beta1) * g;
      v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
      const double mh = m[k] / c1, vh = v[k] / c2;
      theta[k] -= lr * (mh / (std::sqrt(vh) + eps) + weight_decay * theta[k]);
    }
    round_to_precision(theta);
  }
}

std::vector<std::size_t> milestone_iterations(const TrainConfig& cfg, std::size_t total) {
  std::vector<std::size_t> out;
  for (double f : cfg.milestones) out.push_back(static_cast<std::size_t>(std::floor(f * total)));
  return out;
}

double learning_rate(const TrainConfig& cfg, std::size_t iteration, std::size_t total) {
  double lr = cfg.lr;
  for (auto m : milestone_iterations(cfg, total))
    if (iteration >= m) lr *= cfg.decay;
  return lr;
}

double clip_gradients(const nn::ParameterList& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [key, p] : params)
    if (p.has_grad())
      for (double g : p.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& [key, p] : params) {
      if (!p.has_grad()) continue;
      Tensor t = p;
      for (double& g : t.mutable_grad()) g *= s;
    }
  }
  return norm;
}

std::uint32_t config_hash(const TrainConfig& cfg) {
  json j = to_json(cfg);
  // Data locations do not change the trajectory.
  j.erase("train_data");
  j.erase("val_data");
  const std::string s = j.dump();
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(s.data()),
                                          static_cast<uInt>(s.size())));
}

void save_checkpoint(const fs::path& path, const pipeline::Model& model, const AdamState& adam,
                     const TrainConfig& cfg, std::size_t iteration, std::size_t epoch, const json& history) {
  const auto params = model.parameters();
  json meta{{"format", "knet-checkpoint"},
            {"version", 1},
            {"config", to_json(cfg)},
            {"config_hash", config_hash(cfg)},
            {"iteration", iteration},
            {"epoch", epoch},
            {"adam_step", adam.step},
            {"parameters", params.size()},
            {"moments", adam.m.size()},
            {"history", history}};
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw FormatError("cannot write checkpoint " + path.string());
    os << meta.dump() << '\n';
    for (const auto& [key, p] : params) io::write_tensor(os, p, io::Dtype::kF64, {{"key", key}});
    for (std::size_t i = 0; i < adam.m.size(); ++i) {
      const Shape s{std::max<std::size_t>(adam.m[i].size(), 1)};
      std::vector<double> m = adam.m[i], v = adam.v[i];
      if (m.empty()) m.assign(1, 0.0), v.assign(1, 0.0);
      io::write_raw(os, s, m, io::Dtype::kF64, {{"key", params[i].first}, {"moment", "m"}, {"empty", adam.m[i].empty()}});
      io::write_raw(os, s, v, io::Dtype::kF64, {{"key", params[i].first}, {"moment", "v"}, {"empty", adam.v[i].empty()}});
    }
    if (!os) throw FormatError("failed writing checkpoint " + path.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  std::string line;
  std::getline(is, line);
  json meta;
  try {
    meta = json::parse(line);
  } catch (const json::parse_error&) {
    throw FormatError(path.string() + " is not a checkpoint");
  }
  if (meta.value("format", "") != "knet-checkpoint") throw FormatError(path.string() + " is not a checkpoint");
  Checkpoint c;
  c.config = train_config_from_json(meta.at("config"));
  if (meta.at("config_hash").get<std::uint32_t>() != config_hash(c.config))
    throw CorruptDataError(path.string() + ": config hash mismatch");
  c.iteration = meta.at("iteration");
  c.epoch = meta.at("epoch");
  c.adam.step = meta.at("adam_step");
  c.history = meta.at("history");
  const std::size_t n = meta.at("parameters"), moments = meta.at("moments");
  for (std::size_t i = 0; i < n; ++i) {
    auto rec = io::read_tensor(is);
    c.parameters.emplace_back(rec.header.at("key").get<std::string>(), rec.tensor);
  }
  for (std::size_t i = 0; i < moments; ++i) {
    auto m = io::read_tensor(is), v = io::read_tensor(is);
    c.adam.m.push_back(m.header.value("empty", false) ? std::vector<double>{} : m.tensor.to_vector());
    c.adam.v.push_back(v.header.value("empty", false) ? std::vector<double>{} : v.tensor.to_vector());
  }
  return c;
}

void restore_parameters(pipeline::Model& model, const Checkpoint& ckpt) {
  auto params = model.parameters();
  if (params.size() != ckpt.parameters.size())
    throw FormatError("checkpoint holds " + std::to_string(ckpt.parameters.size()) + " parameters, model has " +
                      std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [key, src] = ckpt.parameters[i];
    if (key != params[i].first) throw FormatError("checkpoint parameter " + key + " where " + params[i].first + " expected");
    if (src.shape() != params[i].second.shape()) throw FormatError("checkpoint parameter " + key + " has the wrong shape");
    auto dst = params[i].second.mutable_data();
    auto s = src.data();
    std::copy(s.begin(), s.end(), dst.begin());
  }
}

double EvalReport::primary(std::size_t s) const {
  const auto& m = stages.at(s);
  switch (mode) {
    case TaskMode::kSemantic: return m.miou;
    case TaskMode::kInstance: return m.ap;
    case TaskMode::kPanoptic: return m.pq;
  }
  return 0.0;
}

double EvalReport::primary() const { return stages.empty() ? 0.0 : primary(stages.size() - 1); }

json to_json(const EvalReport& r) {
  json stages = json::array();
  for (const auto& m : r.stages) {
    json s;
    if (r.mode == TaskMode::kPanoptic)
      s = {{"pq", m.pq}, {"sq", m.sq}, {"rq", m.rq}, {"pq_things", m.pq_things}, {"pq_stuff", m.pq_stuff},
           {"miou", m.miou}, {"ap", m.ap}, {"ap50", m.ap50}, {"ap75", m.ap75}};
    else if (r.mode == TaskMode::kInstance)
      s = {{"ap", m.ap}, {"ap50", m.ap50}, {"ap75", m.ap75}};
    else
      s = {{"miou", m.miou}};
    stages.push_back(s);
  }
  return json{{"mode", to_string(r.mode)}, {"stages", stages}};
}

std::string format_report(const EvalReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  if (r.mode == TaskMode::kPanoptic) {
    os << "stage     PQ   PQth   PQst     SQ     RQ   mIoU     AP\n";
    for (std::size_t s = 0; s < r.stages.size(); ++s) {
      const auto& m = r.stages[s];
      os << std::setw(5) << s << std::setw(7) << 100 * m.pq << std::setw(7) << 100 * m.pq_things << std::setw(7)
         << 100 * m.pq_stuff << std::setw(7) << 100 * m.sq << std::setw(7) << 100 * m.rq << std::setw(7)
         << 100 * m.miou << std::setw(7) << 100 * m.ap << '\n';
    }
  } else if (r.mode == TaskMode::kInstance) {
    os << "stage     AP   AP50   AP75\n";
    for (std::size_t s = 0; s < r.stages.size(); ++s) {
      const auto& m = r.stages[s];
      os << std::setw(5) << s << std::setw(7) << 100 * m.ap << std::setw(7) << 100 * m.ap50 << std::setw(7)
         << 100 * m.ap75 << '\n';
    }
  } else {
    os << "stage   mIoU\n";
    for (std::size_t s = 0; s < r.stages.size(); ++s)
      os << std::setw(5) << s << std::setw(7) << 100 * r.stages[s].miou << '\n';
  }
  return os.str();
}

namespace {

struct EvalShard {
  std::vector<metrics::PqAccumulator> pq;
  std::vector<metrics::MiouAccumulator> miou;
  std::vector<std::vector<std::vector<metrics::ScoredInstance>>> instances;  // stage, image
};

std::vector<int> panoptic_categories(const PanopticMap& m) {
  std::vector<int> out(m.ids.size(), -1);
  for (std::size_t i = 0; i < m.ids.size(); ++i)
    if (m.ids[i]) out[i] = m.find(m.ids[i])->category;
  return out;
}

void evaluate_range(const pipeline::Model& model, const std::vector<GroundTruthSample>& samples, std::size_t begin,
                    std::size_t end, std::size_t batch, EvalShard& shard) {
  NoGradGuard no_grad;
  const auto& cfg = model.config;
  const std::size_t n_stages = cfg.stages + 1;
  shard.pq.assign(n_stages, metrics::PqAccumulator(cfg.classes));
  shard.miou.assign(n_stages, {});
  shard.instances.assign(n_stages, {});
  for (std::size_t start = begin; start < end; start += batch) {
    const std::size_t stop = std::min(end, start + batch);
    std::vector<const GroundTruthSample*> group;
    for (std::size_t i = start; i < stop; ++i) group.push_back(&samples[i]);
    const auto out = model.forward(pipeline::stack_images(group));
    for (std::size_t s = 0; s < n_stages; ++s) {
      const auto& stage = out.stages[s];
      for (std::size_t b = 0; b < group.size(); ++b) {
        const auto& gt = *group[b];
        if (cfg.mode == TaskMode::kPanoptic) {
          const auto pred = pipeline::merge_panoptic(stage, b, cfg);
          shard.pq[s].add(pred, gt.panoptic);
          shard.miou[s].add(panoptic_categories(pred), gt.semantic);
        }
        if (cfg.mode == TaskMode::kSemantic)
          shard.miou[s].add(pipeline::semantic_prediction(stage, b, cfg), gt.semantic);
        else
          shard.instances[s].push_back(
              pipeline::binarize_instances(stage, b, cfg, cfg.mask_threshold, cfg.ap_score_floor));
      }
    }
  }
}

}  // namespace

EvalReport evaluate(const pipeline::Model& model, const std::vector<GroundTruthSample>& samples,
                    const EvalOptions& opts) {
  const auto& cfg = model.config;
  for (const auto& s : samples)
    if (s.height != cfg.height || s.width != cfg.width)
      throw ConfigError("sample size differs from the model input size");
  const std::size_t threads = std::clamp<std::size_t>(opts.threads, 1, std::max<std::size_t>(1, samples.size()));
  std::vector<EvalShard> shards(threads);
  const std::size_t per = (samples.size() + threads - 1) / threads;
  auto run = [&](std::size_t t) {
    const std::size_t b = std::min(samples.size(), t * per), e = std::min(samples.size(), b + per);
    evaluate_range(model, samples, b, e, std::max<std::size_t>(1, opts.batch_size), shards[t]);
  };
  if (threads == 1) {
    run(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        try {
          run(t);
        } catch (...) {
          errors[t] = std::current_exception();
        }
      });
    for (auto& th : pool) th.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  EvalReport r;
  r.mode = cfg.mode;
  const std::size_t n_stages = cfg.stages + 1;
  std::vector<std::vector<InstanceMask>> gts;
  for (const auto& s : samples) gts.push_back(s.instances);
  for (std::size_t s = 0; s < n_stages; ++s) {
    StageMetrics m;
    metrics::PqAccumulator pq = shards[0].pq[s];
    metrics::MiouAccumulator miou = shards[0].miou[s];
    std::vector<std::vector<metrics::ScoredInstance>> inst = shards[0].instances[s];
    for (std::size_t t = 1; t < threads; ++t) {
      pq.merge(shards[t].pq[s]);
      miou.merge(shards[t].miou[s]);
      for (auto& x : shards[t].instances[s]) inst.push_back(x);
    }
    if (cfg.mode == TaskMode::kPanoptic) {
      const auto p = pq.result();
      m.pq = p.pq;
      m.sq = p.sq;
      m.rq = p.rq;
      m.pq_things = p.pq_things;
      m.pq_stuff = p.pq_stuff;
    }
    if (cfg.mode != TaskMode::kInstance) m.miou = miou.result();
    if (cfg.mode != TaskMode::kSemantic) {
      const auto ap = metrics::compute_mask_ap(inst, gts);
      m.ap = ap.ap;
      m.ap50 = ap.ap50;
      m.ap75 = ap.ap75;
    }
    r.stages.push_back(m);
  }
  return r;
}

pipeline::Model load_model(const fs::path& checkpoint) {
  const auto ckpt = load_checkpoint(checkpoint);
  pipeline::Model model(ckpt.config.model);
  restore_parameters(model, ckpt);
  return model;
}

EvalReport evaluate_checkpoint(const fs::path& checkpoint, const std::vector<GroundTruthSample>& samples,
                               std::optional<TaskMode> expected_mode, const EvalOptions& opts) {
  const auto model = load_model(checkpoint);
  if (expected_mode && *expected_mode != model.config.mode)
    throw ConfigError("checkpoint was trained for " + to_string(model.config.mode) + ", not " +
                      to_string(*expected_mode));
  return evaluate(model, samples, opts);
}

namespace {

std::vector<std::size_t> epoch_order(std::uint64_t seed, std::size_t epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), 0x5eedu};
  std::mt19937_64 rng(seq);
  // Fisher-Yates with an explicit draw keeps the order independent of the
  // standard library's shuffle implementation.
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(order[i - 1], order[j]);
  }
  return order;
}

json loss_json(const loss::LossBreakdown& l) {
  json stages = json::array();
  for (const auto& s : l.stages) stages.push_back({{"total", s.total}, {"cls", s.cls}, {"ce", s.ce}, {"dice", s.dice}});
  return json{{"total", l.total}, {"cls", l.cls}, {"ce", l.ce}, {"dice", l.dice}, {"stages", stages}};
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot write " + path.string());
  os << text;
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const data::Dataset& train_set, const data::Dataset& val_set,
                  const fs::path& run_dir, const TrainOptions& opts) {
  cfg.validate();
  if (train_set.samples.empty()) throw DataError("training set is empty");
  if (val_set.samples.empty()) throw DataError("validation set is empty");
  for (const auto* set : {&train_set, &val_set})
    for (const auto& s : set->samples)
      if (s.height != cfg.model.height || s.width != cfg.model.width)
        throw DataError("dataset image size differs from the model input size");
  fs::create_directories(run_dir);

  pipeline::Model model(cfg.model);
  auto params = model.parameters();
  for (auto& [key, p] : params) p.set_requires_grad(true);

  AdamState adam;
  std::size_t iteration = 0, start_epoch = 0;
  json history = json::array();
  if (opts.resume) {
    auto ckpt = load_checkpoint(*opts.resume);
    if (config_hash(ckpt.config) != config_hash(cfg)) throw ConfigError("checkpoint was trained with another config");
    restore_parameters(model, ckpt);
    adam = std::move(ckpt.adam);
    iteration = ckpt.iteration;
    start_epoch = ckpt.epoch;
    history = ckpt.history;
  }

  const std::size_t n = train_set.samples.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = per_epoch * cfg.epochs;
  const double wd = cfg.effective_weight_decay();

  std::vector<loss::ImageTargets> targets;
  targets.reserve(n);
  for (const auto& s : train_set.samples)
    targets.push_back(loss::make_targets(s, cfg.model.classes, cfg.model.mode, cfg.model.height, cfg.model.width));

  std::ofstream log(run_dir / "log.jsonl", opts.resume ? std::ios::app : std::ios::trunc);
  if (!log) throw FormatError("cannot write " + (run_dir / "log.jsonl").string());

  TrainResult result;
  result.history = history;
  double best = -1.0;
  std::size_t best_epoch = 0;
  for (const auto& h : history)
    if (h.at("primary").get<double>() > best) best = h.at("primary"), best_epoch = h.at("epoch");

  const std::size_t end_epoch =
      opts.stop_after_epochs ? std::min(cfg.epochs, start_epoch + opts.stop_after_epochs) : cfg.epochs;
  for (std::size_t epoch = start_epoch; epoch < end_epoch; ++epoch) {
    const auto order = epoch_order(cfg.seed, epoch, n);
    double loss_sum = 0.0;
    for (std::size_t bi = 0; bi < per_epoch; ++bi) {
      std::vector<const GroundTruthSample*> group;
      std::vector<loss::ImageTargets> batch_targets;
      for (std::size_t k = bi * cfg.batch_size; k < std::min(n, (bi + 1) * cfg.batch_size); ++k) {
        group.push_back(&train_set.samples[order[k]]);
        batch_targets.push_back(targets[order[k]]);
      }
      const double lr = learning_rate(cfg, iteration, total);
      const auto out = model.forward(pipeline::stack_images(group));
      auto l = model.loss(out, batch_targets);
      if (!std::isfinite(l.total)) {
        graph::clear();
        throw TrainingError("non-finite loss at iteration " + std::to_string(iteration) + ": " + loss_json(l).dump());
      }
      l.value.backward();
      double norm = 0.0;
      if (cfg.grad_clip > 0) norm = clip_gradients(params, cfg.grad_clip);
      adamw_step(params, adam, lr, wd, cfg.beta1, cfg.beta2, cfg.adam_eps);
      for (auto& [key, p] : params) p.zero_grad();

      json entry = loss_json(l);
      entry["iteration"] = iteration;
      entry["epoch"] = epoch;
      entry["lr"] = lr;
      if (cfg.grad_clip > 0) entry["grad_norm"] = norm;
      log << entry.dump() << '\n';
      if (result.iterations == 0) result.first_loss = l.total;
      result.last_loss = l.total;
      loss_sum += l.total;
      ++iteration;
      ++result.iterations;
    }
    log.flush();

    const bool last = epoch + 1 == cfg.epochs;
    if ((epoch + 1) % cfg.eval_every == 0 || last) {
      EvalOptions eo;
      eo.batch_size = cfg.batch_size;
      eo.threads = opts.eval_threads;
      auto report = evaluate(model, val_set.samples, eo);
      json h{{"epoch", epoch},
             {"iteration", iteration},
             {"lr", learning_rate(cfg, iteration - 1, total)},
             {"train_loss", loss_sum / per_epoch},
             {"primary", report.primary()},
             {"val", to_json(report)}};
      history.push_back(h);
      result.final_report = report;
      if (!opts.quiet)
        std::cerr << "epoch " << epoch + 1 << "/" << cfg.epochs << " loss " << loss_sum / per_epoch << " val "
                  << report.primary() << '\n'
                  << format_report(report);
      if (report.primary() > best) {
        best = report.primary();
        best_epoch = epoch;
        save_checkpoint(run_dir / "best.ckpt", model, adam, cfg, iteration, epoch + 1, history);
      }
      json metrics{{"mode", to_string(cfg.model.mode)},
                   {"config_hash", config_hash(cfg)},
                   {"epochs_completed", epoch + 1},
                   {"iterations", iteration},
                   {"best_epoch", best_epoch},
                   {"best_primary", best},
                   {"final", to_json(report)},
                   {"history", history}};
      write_text(run_dir / "metrics.json", metrics.dump(2) + "\n");
    }
    save_checkpoint(run_dir / "last.ckpt", model, adam, cfg, iteration, epoch + 1, history);
  }
  result.history = history;
  return result;
}

namespace {

io::GrayImage binary_pgm(std::span<const std::uint8_t> mask, std::size_t h, std::size_t w) {
  io::GrayImage img{h, w, 255, {}};
  img.pixels.resize(h * w);
  for (std::size_t i = 0; i < h * w; ++i) img.pixels[i] = mask[i] ? 255 : 0;
  return img;
}

}  // namespace

json infer(const pipeline::Model& model, const Tensor& image, const fs::path& out_dir) {
  Tensor batch = image.dim() == 3 ? reshape(image, {1, image.size(0), image.size(1), image.size(2)}) : image;
  if (batch.dim() != 4 || batch.size(0) != 1 || batch.size(1) != 3)
    throw DimensionError("expected a [3, H, W] image, got " + shape_str(image.shape()));
  pipeline::ModelConfig cfg = model.config;
  cfg.height = batch.size(2);
  cfg.width = batch.size(3);
  if (cfg.height % 4 || cfg.width % 4) throw ConfigError("image size must be divisible by 4");
  fs::create_directories(out_dir);
  NoGradGuard no_grad;
  const auto out = model.forward(batch);
  const auto& stage = out.stages.back();
  const std::size_t h = cfg.height, w = cfg.width;
  json doc{{"mode", to_string(cfg.mode)}, {"height", h}, {"width", w}};
  if (cfg.mode == TaskMode::kPanoptic) {
    const auto pan = pipeline::merge_panoptic(stage, 0, cfg);
    io::GrayImage ids{h, w, 65535, {}};
    ids.pixels.assign(pan.ids.begin(), pan.ids.end());
    io::write_pgm(out_dir / "panoptic.pgm", ids);
    json segs = json::array();
    for (const auto& s : pan.segments) {
      json j{{"id", s.id}, {"category", s.category}, {"is_thing", s.is_thing}, {"score", s.score}, {"area", s.area}};
      if (s.is_thing) {
        std::vector<std::uint8_t> m(h * w);
        for (std::size_t i = 0; i < h * w; ++i) m[i] = pan.ids[i] == s.id;
        const std::string file = "instance_" + std::to_string(s.id) + ".pgm";
        io::write_pgm(out_dir / file, binary_pgm(m, h, w));
        j["mask"] = file;
      }
      segs.push_back(j);
    }
    doc["segments"] = segs;
    doc["panoptic"] = "panoptic.pgm";
    write_text(out_dir / "segments.json", doc.dump(2) + "\n");
  } else if (cfg.mode == TaskMode::kInstance) {
    const auto inst = pipeline::binarize_instances(stage, 0, cfg, cfg.mask_threshold, cfg.score_floor);
    json list = json::array();
    for (std::size_t k = 0; k < inst.size(); ++k) {
      const std::string file = "instance_" + std::to_string(k) + ".pgm";
      io::write_pgm(out_dir / file, binary_pgm(inst[k].mask, h, w));
      const auto area = std::count(inst[k].mask.begin(), inst[k].mask.end(), 1);
      list.push_back({{"index", k}, {"category", inst[k].category}, {"score", inst[k].score}, {"area", area}, {"mask", file}});
    }
    doc["instances"] = list;
    write_text(out_dir / "instances.json", doc.dump(2) + "\n");
  } else {
    const auto sem = pipeline::semantic_prediction(stage, 0, cfg);
    io::GrayImage img{h, w, 65535, {}};
    img.pixels.assign(sem.begin(), sem.end());
    io::write_pgm(out_dir / "semantic.pgm", img);
    std::map<int, std::size_t> areas;
    for (int c : sem) ++areas[c];
    json classes = json::array();
    for (const auto& [c, a] : areas) classes.push_back({{"category", c}, {"area", a}});
    doc["classes"] = classes;
    doc["semantic"] = "semantic.pgm";
    write_text(out_dir / "segments.json", doc.dump(2) + "\n");
  }
  return doc;
}

AblationGrid parse_grid(const std::string& name) {
  if (name == "aku_ki" || name == "update") return AblationGrid::kUpdateInteraction;
  if (name == "stages") return AblationGrid::kStages;
  if (name == "kernels") return AblationGrid::kKernels;
  throw ConfigError("unknown ablation grid '" + name + "' (aku_ki, stages, kernels)");
}

std::vector<AblationRow> ablation_cells(const TrainConfig& base, AblationGrid grid) {
  std::vector<AblationRow> rows;
  auto row = [&](std::string name, bool aku, bool ki, std::size_t s, std::size_t n) {
    rows.push_back(AblationRow{std::move(name), aku, ki, s, n, {}});
  };
  const auto& m = base.model;
  switch (grid) {
    case AblationGrid::kUpdateInteraction:
      row("full", true, true, m.stages, m.instance_kernels);
      row("ki_only", false, true, m.stages, m.instance_kernels);
      row("aku_only", true, false, m.stages, m.instance_kernels);
      row("neither", false, false, m.stages, m.instance_kernels);
      break;
    case AblationGrid::kStages:
      for (std::size_t s = 1; s <= 5; ++s)
        row("stages_" + std::to_string(s), m.adaptive_update, m.kernel_interaction, s, m.instance_kernels);
      break;
    case AblationGrid::kKernels:
      for (std::size_t n : {5, 10, 20})
        row("kernels_" + std::to_string(n), m.adaptive_update, m.kernel_interaction, m.stages, n);
      break;
  }
  return rows;
}

std::vector<AblationRow> ablate(const TrainConfig& base, AblationGrid grid, const data::Dataset& train_set,
                                const data::Dataset& val_set, const fs::path& out_dir, const TrainOptions& opts) {
  auto rows = ablation_cells(base, grid);
  fs::create_directories(out_dir);
  json table = json::array();
  for (auto& r : rows) {
    TrainConfig cfg = base;
    cfg.model.adaptive_update = r.adaptive_update;
    cfg.model.kernel_interaction = r.kernel_interaction;
    cfg.model.stages = r.stages;
    cfg.model.instance_kernels = r.instance_kernels;
    r.report = train(cfg, train_set, val_set, out_dir / r.name, opts).final_report;
    table.push_back({{"name", r.name},
                     {"adaptive_update", r.adaptive_update},
                     {"kernel_interaction", r.kernel_interaction},
                     {"stages", r.stages},
                     {"instance_kernels", r.instance_kernels},
                     {"primary", r.report.primary()},
                     {"report", to_json(r.report)}});
  }
  write_text(out_dir / "ablation.json", table.dump(2) + "\n");
  write_text(out_dir / "ablation.txt", format_ablation(rows));
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  const char* metric = "score";
  if (!rows.empty()) {
    switch (rows[0].report.mode) {
      case TaskMode::kSemantic: metric = "mIoU"; break;
      case TaskMode::kInstance: metric = "AP"; break;
      case TaskMode::kPanoptic: metric = "PQ"; break;
    }
  }
  os << std::left << std::setw(12) << "cell" << std::right << std::setw(5) << "AKU" << std::setw(5) << "KI"
     << std::setw(4) << "S" << std::setw(5) << "N" << std::setw(9) << metric << std::setw(9) << "stage0" << '\n';
  os << std::fixed << std::setprecision(2);
  for (const auto& r : rows) {
    os << std::left << std::setw(12) << r.name << std::right << std::setw(5) << (r.adaptive_update ? "y" : "n")
       << std::setw(5) << (r.kernel_interaction ? "y" : "n") << std::setw(4) << r.stages << std::setw(5)
       << r.instance_kernels << std::setw(9) << 100 * r.report.primary() << std::setw(9)
       << (r.report.stages.empty() ? 0.0 : 100 * r.report.primary(0)) << '\n';
  }
  return os.str();
}

}  // namespace knet::train
