#include "vlmkit/cli.h"

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "vlmkit/docgen.h"
#include "vlmkit/eval.h"
#include "vlmkit/model.h"
#include "vlmkit/trainer.h"

namespace vlmkit {

namespace fs = std::filesystem;

namespace {

ModelConfig model_config_from(const std::string& path, std::optional<uint64_t> seed) {
  ModelConfig cfg = path.empty() ? desk_model_config() : ModelConfig::load(path);
  if (seed) cfg.seed = *seed;
  return cfg;
}

VisionLanguageModel model_from_checkpoint(const Checkpoint& ck) {
  auto it = ck.meta.find("model.config");
  if (it == ck.meta.end()) throw FormatError("checkpoint has no model configuration");
  VisionLanguageModel model(ModelConfig::from_tree(parse_config(it->second, "checkpoint")));
  model.load(ck);
  return model;
}

TileConfig tiles_for(const ModelConfig& cfg, std::size_t max_long_side) {
  const std::size_t per_axis = std::clamp<std::size_t>(max_long_side / cfg.tile_side, 1, cfg.max_grid);
  return TileConfig{cfg.tile_side, cfg.tile_side, per_axis * cfg.tile_side};
}

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct PreprocessArgs {
  std::string image, model_config, out;
  std::size_t max_long_side = 1820;
  std::optional<uint64_t> seed;
};

int run_preprocess(const PreprocessArgs& a, std::ostream& out) {
  const ModelConfig cfg = model_config_from(a.model_config, a.seed);
  const RawImage img = load_image(a.image);
  const TileGrid grid = preprocess_image(img, tiles_for(cfg, a.max_long_side));
  const std::size_t per_tile = cfg.connector_config().tokens_per_tile(cfg.patch_grid(), cfg.patch_grid());
  out << "image " << img.width << "x" << img.height << "\n"
      << "grid " << grid.rows << "x" << grid.cols << "\n"
      << "tiles " << grid.tiles.size() << " + global\n"
      << "tokens_per_tile " << per_tile << "\n"
      << "image_tokens " << grid.image_count() * per_tile << "\n";
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    for (std::size_t r = 0; r < grid.rows; ++r)
      for (std::size_t c = 0; c < grid.cols; ++c) {
        save_png(grid.tiles[r * grid.cols + c],
                 fs::path(a.out) / ("tile_" + std::to_string(r + 1) + "_" + std::to_string(c + 1) + ".png"));
      }
    save_png(grid.global_image, fs::path(a.out) / "global.png");
    out << "wrote " << grid.image_count() << " images to " << a.out << "\n";
  }
  return 0;
}

struct TrainArgs {
  std::vector<std::string> stages;
  std::string model_config, checkpoint = "checkpoint.vlmk", resume, metrics;
  std::vector<std::string> data;
  std::size_t synthetic = 0;
  bool desk_scale = false;
  std::size_t stop_after = 0, prefetch = 0;
  std::optional<uint64_t> seed;
};

int run_train(const TrainArgs& a, std::ostream& out) {
  std::vector<StageConfig> stages;
  for (const auto& f : a.stages) {
    for (auto& s : load_stages(f)) stages.push_back(a.desk_scale ? s.desk_scale() : s);
  }

  std::optional<VisionLanguageModel> model;
  Checkpoint resume_ck;
  if (!a.resume.empty()) {
    resume_ck = Checkpoint::load(a.resume);
    model.emplace(model_from_checkpoint(resume_ck));
  } else {
    model.emplace(model_config_from(a.model_config, a.seed));
  }

  std::vector<Dataset> datasets;
  for (const auto& spec : a.data) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ConfigError("--data expects name=path, got '" + spec + "'");
    datasets.push_back(load_dataset_jsonl(spec.substr(0, eq), spec.substr(eq + 1)));
  }
  if (a.synthetic > 0) {
    for (const auto& st : stages)
      for (const auto& m : st.mixture) {
        const bool have = std::any_of(datasets.begin(), datasets.end(), [&](const Dataset& d) { return d.name == m.dataset; });
        if (!have) {
          datasets.push_back(synthetic_qa_dataset(m.dataset, a.synthetic, model->config().tile_side,
                                                  Rng::derive(a.seed.value_or(0), stable_hash(m.dataset))));
        }
      }
  }

  TrainOptions opts;
  opts.seed = a.seed.value_or(0);
  opts.prefetch = a.prefetch;
  opts.metrics_csv = a.metrics;
  opts.stop_after = a.stop_after;
  opts.on_step = [&out](const StepReport& r) {
    out << r.stage << " step " << r.step << " lr " << r.lr << " res " << r.resolution << " loss " << r.loss << "\n";
  };
  Trainer trainer(*model, std::move(datasets), opts);

  std::size_t first = 0;
  if (!a.resume.empty()) {
    trainer.load(resume_ck);
    auto it = std::find_if(stages.begin(), stages.end(), [&](const StageConfig& s) { return s.name == trainer.stage(); });
    if (it == stages.end()) throw ConfigError("checkpoint stage '" + trainer.stage() + "' is not in the schedule");
    first = static_cast<std::size_t>(it - stages.begin());
    if (trainer.step() >= it->steps) ++first;
  }
  for (std::size_t i = first; i < stages.size(); ++i) {
    const CheckpointMeta meta = trainer.run_stage(stages[i]);
    trainer.save(a.checkpoint);
    out << "stage " << meta.stage << ": " << meta.step << "/" << stages[i].steps << " steps, checkpoint "
        << a.checkpoint << "\n";
    if (!meta.completed) break;
  }
  return 0;
}

struct GenArgs {
  std::string transcripts, out_dir, templates, generator = "mock", report;
  std::size_t shard_size = 1000, workers = 1;
  std::optional<uint64_t> seed;
};

int run_gen_data(const GenArgs& a, std::ostream& out) {
  DocgenOptions opts;
  opts.transcripts = a.transcripts;
  opts.out_dir = a.out_dir;
  opts.report = a.report;
  opts.shard_size = a.shard_size;
  opts.workers = a.workers;
  opts.seed = a.seed.value_or(0);
  if (!a.templates.empty()) opts.templates = load_templates(a.templates);
  auto gen = make_generator(a.generator);
  const DocgenResult res = run_docgen(opts, *gen);
  out << "documents " << res.documents << " (" << res.load_issues.size() << " rejected lines)\n"
      << "pairs " << res.report.total << " kept " << res.report.kept << " dropped " << res.report.dropped_total()
      << "\n";
  for (const auto& [reason, n] : res.report.dropped) out << "  " << reason << " " << n << "\n";
  out << "shards " << res.manifest.shards.size() << " digest " << res.manifest.digest << "\n";
  return 0;
}

struct EvalArgs {
  std::vector<std::string> benchmarks;
  std::string checkpoint, report, per_example_dir, image_root;
  std::optional<std::size_t> resize_override;
  std::size_t max_tokens = 32;
  std::optional<uint64_t> seed;
};

int run_eval(const EvalArgs& a, std::ostream& out) {
  const VisionLanguageModel model = model_from_checkpoint(Checkpoint::load(a.checkpoint));
  const ModelRunner runner = model_runner(model, a.max_tokens);
  std::vector<std::pair<BenchmarkSpec, MetricResult>> rows;
  nlohmann::ordered_json report = nlohmann::ordered_json::array();
  for (const auto& path : a.benchmarks) {
    BenchmarkSpec spec = spec_for(path, model.config().tile_side);
    const auto examples = load_benchmark(path);
    RunOptions ro;
    ro.image_root = a.image_root.empty() ? fs::path(path).parent_path() : fs::path(a.image_root);
    ro.resize_override = a.resize_override;
    if (!a.per_example_dir.empty()) {
      fs::create_directories(a.per_example_dir);
      ro.per_example_jsonl = fs::path(a.per_example_dir) / (fs::path(path).stem().string() + ".predictions.jsonl");
    }
    MetricResult r = run_benchmark(spec, examples, runner, ro);
    for (const auto& e : r.errors) out << "skipped " << e << "\n";
    nlohmann::ordered_json j;
    j["benchmark"] = spec.name;
    j["file"] = path;
    j["metric"] = to_string(spec.metric);
    j["resize_longest_side"] = a.resize_override.value_or(spec.resize_longest_side);
    j["count"] = r.count();
    j["errors"] = r.errors.size();
    j["aggregate"] = r.aggregate;
    report.push_back(j);
    rows.emplace_back(spec, std::move(r));
  }
  out << format_summary_table(rows);
  if (!a.report.empty()) {
    std::ofstream os(a.report);
    if (!os) throw IoError("cannot write report " + a.report);
    os << report.dump(2) << "\n";
  }
  return 0;
}

struct InspectArgs {
  std::string sequence, checkpoint, model_config;
  std::size_t max_long_side = 1820;
  std::optional<uint64_t> seed;
};

int run_inspect(const InspectArgs& a, std::ostream& out) {
  if (a.sequence.empty() == a.checkpoint.empty()) {
    throw CLI::ValidationError("inspect needs exactly one of --sequence or --checkpoint");
  }
  if (!a.checkpoint.empty()) {
    const Checkpoint ck = Checkpoint::load(a.checkpoint);
    for (const auto& [k, v] : ck.meta) {
      if (v.find('\n') == std::string::npos) out << "meta " << k << " = " << v << "\n";
      else out << "meta " << k << " (" << v.size() << " bytes)\n";
    }
    std::size_t total = 0;
    for (const auto& [name, e] : ck.tensors) {
      out << "tensor " << name << " " << shape_str(e.shape) << "\n";
      total += e.values.size();
    }
    out << ck.tensors.size() << " tensors, " << total << " values\n";
    return 0;
  }
  const ModelConfig cfg = model_config_from(a.model_config, a.seed);
  const TrainingExample ex = parse_training_example(read_text(a.sequence), fs::path(a.sequence).parent_path());
  const TileConfig tc = tiles_for(cfg, a.max_long_side);
  std::vector<GridShape> shapes;
  for (const auto& img : ex.images) {
    const TileGrid g = preprocess_image(img, tc);
    shapes.push_back({g.rows, g.cols});
  }
  const Vocabulary vocab(cfg.max_grid);
  const std::size_t per_tile = cfg.connector_config().tokens_per_tile(cfg.patch_grid(), cfg.patch_grid());
  AssembleOptions opts;
  opts.layout = cfg.fusion.mode == FusionMode::self_attention ? ImageLayout::tiled : ImageLayout::placeholder;
  const MultimodalSequence seq = build_training_sequence(ex.turns, shapes, per_tile, vocab, opts);
  out << render_debug(seq, vocab);
  std::size_t supervised = 0;
  for (auto m : seq.loss_mask) supervised += m;
  out << "tokens " << seq.size() << " image_tokens " << seq.image_token_count() << " supervised " << supervised << "\n";
  return 0;
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"vlmkit: tiled-image vision-language toolkit"};
  app.name("vlmkit");
  app.require_subcommand(1);

  PreprocessArgs pa;
  auto* pre = app.add_subcommand("preprocess", "Split an image into tiles and report the visual token budget");
  pre->add_option("--image", pa.image, "PNG or PPM image")->required()->check(CLI::ExistingFile);
  pre->add_option("--model-config", pa.model_config, "model config file (default: desk model)");
  pre->add_option("--max-long-side", pa.max_long_side, "longest side cap in pixels")->capture_default_str();
  pre->add_option("--out", pa.out, "directory for tile PNGs");
  pre->add_option("--seed", pa.seed, "random seed");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Run training stages in order");
  train->add_option("stages", ta.stages, "stage config files")->required()->check(CLI::ExistingFile);
  train->add_option("--model-config", ta.model_config, "model config file (default: desk model)");
  train->add_option("--data", ta.data, "dataset as name=path.jsonl (repeatable)");
  train->add_option("--synthetic", ta.synthetic, "fill datasets missing from --data with N synthetic examples");
  train->add_flag("--desk-scale", ta.desk_scale, "shrink stages: steps/100, batch 8, sequence cap 512");
  train->add_option("--checkpoint", ta.checkpoint, "checkpoint written after each stage")->capture_default_str();
  train->add_option("--resume", ta.resume, "resume from a checkpoint")->check(CLI::ExistingFile);
  train->add_option("--metrics", ta.metrics, "per-step CSV log");
  train->add_option("--stop-after", ta.stop_after, "stop each stage after this many steps");
  train->add_option("--prefetch", ta.prefetch, "batches prepared ahead on a worker thread");
  train->add_option("--seed", ta.seed, "random seed");

  GenArgs ga;
  auto* gen = app.add_subcommand("gen-data", "Generate and filter synthetic document QA pairs");
  gen->add_option("--transcripts", ga.transcripts, "JSON-lines transcriptions")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", ga.out_dir, "output directory for shards and manifest")->required();
  gen->add_option("--templates", ga.templates, "directory with template_1.txt .. template_5.txt");
  gen->add_option("--generator", ga.generator, "mock or http")->capture_default_str();
  gen->add_option("--shard-size", ga.shard_size, "records per shard")->capture_default_str();
  gen->add_option("--workers", ga.workers, "parallel documents")->capture_default_str();
  gen->add_option("--report", ga.report, "JSON filter report");
  gen->add_option("--seed", ga.seed, "random seed");

  EvalArgs ea;
  std::size_t resize = 0;
  auto* ev = app.add_subcommand("eval", "Score a checkpoint on benchmark files");
  ev->add_option("--benchmark", ea.benchmarks, "benchmark JSON-lines file (repeatable)")->required()->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", ea.checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
  auto* resize_opt = ev->add_option("--resize-override", resize, "longest side in pixels instead of the benchmark's");
  ev->add_option("--report", ea.report, "JSON summary");
  ev->add_option("--per-example-dir", ea.per_example_dir, "directory for per-example predictions");
  ev->add_option("--image-root", ea.image_root, "base directory for image paths");
  ev->add_option("--max-tokens", ea.max_tokens, "generation length cap")->capture_default_str();
  ev->add_option("--seed", ea.seed, "random seed");

  InspectArgs ia;
  auto* insp = app.add_subcommand("inspect", "Show an assembled sequence or a checkpoint's contents");
  insp->add_option("--sequence", ia.sequence, "example JSON (training record format)")->check(CLI::ExistingFile);
  insp->add_option("--checkpoint", ia.checkpoint, "checkpoint file")->check(CLI::ExistingFile);
  insp->add_option("--model-config", ia.model_config, "model config file (default: desk model)");
  insp->add_option("--max-long-side", ia.max_long_side, "longest side cap in pixels")->capture_default_str();
  insp->add_option("--seed", ia.seed, "random seed");

  std::vector<const char*> argv{"vlmkit"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 2;
  }

  try {
    if (pre->parsed()) return run_preprocess(pa, out);
    if (train->parsed()) return run_train(ta, out);
    if (gen->parsed()) return run_gen_data(ga, out);
    if (ev->parsed()) {
      if (resize_opt->count() > 0) ea.resize_override = resize;
      return run_eval(ea, out);
    }
    if (insp->parsed()) return run_inspect(ia, out);
  } catch (const CLI::ValidationError& e) {
    err << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

int dispatch(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return dispatch(args);
}

}  // namespace vlmkit
