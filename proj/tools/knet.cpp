#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "knet/grad_suite.hpp"
#include "knet/image_io.hpp"
#include "knet/synth_data.hpp"
#include "knet/train.hpp"

using namespace knet;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::size_t thread_cap() {
  if (const char* env = std::getenv("KNET_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return 1;
}

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

struct ConfigArgs {
  std::string file;
  std::vector<std::string> overrides;
  std::string train_data, val_data;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "JSON training config");
    app->add_option("--set", overrides, "override a config key, e.g. model.stages=2")->take_all();
    app->add_option("--train-data", train_data, "training dataset directory");
    app->add_option("--val-data", val_data, "validation dataset directory");
  }

  train::TrainConfig build() const {
    json doc = train::to_json(train::TrainConfig{});
    if (!file.empty()) doc.merge_patch(read_json(file));
    for (const auto& o : overrides) train::apply_override(doc, o);
    auto cfg = train::train_config_from_json(doc);
    if (!train_data.empty()) cfg.train_data = train_data;
    if (!val_data.empty()) cfg.val_data = val_data;
    if (cfg.train_data.empty() || cfg.val_data.empty())
      throw ConfigError("train_data and val_data must be set");
    cfg.validate();
    return cfg;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Kernel-based unified segmentation on synthetic scenes"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  data::SceneSpec spec;
  std::size_t count = 100, size = 64;
  std::string gen_out, spec_file;
  gen->add_option("--seed", spec.seed, "generator seed");
  gen->add_option("--count", count, "number of samples");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n-max", spec.n_max, "maximum instances per image");
  gen->add_option("--size", size, "image side length in pixels");
  gen->add_option("--shape-min", spec.size_min, "smallest shape extent");
  gen->add_option("--shape-max", spec.size_max, "largest shape extent");
  gen->add_option("--spec", spec_file, "JSON scene spec (flags override it)");

  auto* tr = app.add_subcommand("train", "train a model");
  ConfigArgs train_args;
  train_args.attach(tr);
  std::string run_dir, resume;
  bool verbose = false;
  tr->add_option("--out", run_dir, "run directory")->required();
  tr->add_option("--resume", resume, "checkpoint to resume from");
  tr->add_flag("--verbose", verbose, "print per-epoch metrics");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  std::string eval_ckpt, eval_data, eval_mode, eval_out;
  ev->add_option("--checkpoint", eval_ckpt)->required();
  ev->add_option("--data", eval_data, "dataset directory")->required();
  ev->add_option("--mode", eval_mode, "expected task mode");
  ev->add_option("--out", eval_out, "JSON report path");

  auto* inf = app.add_subcommand("infer", "predict one image");
  std::string inf_ckpt, inf_image, inf_out;
  inf->add_option("--checkpoint", inf_ckpt)->required();
  inf->add_option("--image", inf_image, "PPM or tensor file")->required();
  inf->add_option("--out", inf_out, "output directory")->required();

  auto* gc = app.add_subcommand("grad-check", "finite-difference checks of all layers (f64)");
  std::vector<std::string> gc_components;
  std::size_t gc_seeds = 10;
  gc->add_option("--component", gc_components, "components to check (default: all)");
  gc->add_option("--seeds", gc_seeds, "random seeds per component");

  auto* ab = app.add_subcommand("ablate", "train an ablation grid");
  ConfigArgs ablate_args;
  ablate_args.attach(ab);
  std::string grid = "aku_ki", ablate_out;
  ab->add_option("--grid", grid, "aku_ki, stages or kernels");
  ab->add_option("--out", ablate_out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      if (!spec_file.empty()) {
        auto base = data::spec_from_json(read_json(spec_file));
        auto* seed_opt = gen->get_option("--seed");
        auto* nmax_opt = gen->get_option("--n-max");
        if (!seed_opt->count()) spec.seed = base.seed;
        if (!nmax_opt->count()) spec.n_max = base.n_max;
        base.seed = spec.seed;
        base.n_max = spec.n_max;
        spec = base;
      }
      if (gen->get_option("--size")->count() || spec_file.empty()) spec.height = spec.width = size;
      data::write_dataset(spec, count, gen_out);
      std::cout << "wrote " << count << " samples to " << gen_out << '\n';
    } else if (*tr) {
      auto cfg = train_args.build();
      const auto train_set = data::read_dataset(cfg.train_data);
      const auto val_set = data::read_dataset(cfg.val_data);
      train::TrainOptions opts;
      if (!resume.empty()) opts.resume = resume;
      opts.eval_threads = thread_cap();
      opts.quiet = !verbose;
      auto result = train::train(cfg, train_set, val_set, run_dir, opts);
      std::cout << train::format_report(result.final_report);
    } else if (*ev) {
      std::optional<TaskMode> mode;
      if (!eval_mode.empty()) mode = parse_task_mode(eval_mode);
      const auto ds = data::read_dataset(eval_data);
      train::EvalOptions eo;
      eo.threads = thread_cap();
      const auto report = train::evaluate_checkpoint(eval_ckpt, ds.samples, mode, eo);
      std::cout << train::format_report(report);
      if (!eval_out.empty()) write_json(eval_out, train::to_json(report));
    } else if (*inf) {
      const auto model = train::load_model(inf_ckpt);
      const auto image = io::read_image(inf_image);
      const auto doc = train::infer(model, image, inf_out);
      std::cout << doc.dump(2) << '\n';
    } else if (*gc) {
      if (gc_components.empty()) gc_components = gradsuite::components();
      const auto results = gradsuite::run(gc_components, gc_seeds);
      bool ok = true;
      std::map<std::string, gradsuite::CaseResult> worst;
      for (const auto& r : results) {
        ok = ok && r.passed();
        auto it = worst.find(r.component);
        if (it == worst.end() || r.max_error > it->second.max_error) worst[r.component] = r;
      }
      for (const auto& name : gc_components) {
        const auto& r = worst.at(name);
        std::cout << std::left << std::setw(20) << name << std::scientific << std::setprecision(2) << " max rel err "
                  << r.max_error << " (tol " << r.tolerance << ", worst " << r.worst << ") "
                  << (r.passed() ? "ok" : "FAIL") << '\n';
      }
      return ok ? 0 : 1;
    } else if (*ab) {
      auto cfg = ablate_args.build();
      const auto train_set = data::read_dataset(cfg.train_data);
      const auto val_set = data::read_dataset(cfg.val_data);
      train::TrainOptions opts;
      opts.eval_threads = thread_cap();
      const auto rows = train::ablate(cfg, train::parse_grid(grid), train_set, val_set, ablate_out, opts);
      std::cout << train::format_ablation(rows);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
