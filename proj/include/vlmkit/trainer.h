#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "vlmkit/checkpoint.h"
#include "vlmkit/config.h"
#include "vlmkit/model.h"

namespace vlmkit {

enum class LrShape { constant, linear_decay };

std::string to_string(LrShape s);
LrShape parse_lr_shape(const std::string& s);

struct ResolutionStep {
  std::size_t from_step = 0;
  std::size_t max_long_side = 0;
  friend bool operator==(const ResolutionStep&, const ResolutionStep&) = default;
};

struct MixtureEntry {
  std::string dataset;
  double weight = 0.0;
  friend bool operator==(const MixtureEntry&, const MixtureEntry&) = default;
};

struct StageConfig {
  std::string name;
  std::size_t steps = 1;
  double lr_max = 1e-4;
  double lr_min = 1e-4;
  LrShape lr_shape = LrShape::constant;
  std::size_t batch_size = 1;
  std::size_t seq_len_cap = 0;
  std::vector<ResolutionStep> resolution_schedule;
  Freezing freezing = Freezing::frozen;
  std::vector<MixtureEntry> mixture;
  bool neftune = false;

  void validate() const;
  friend bool operator==(const StageConfig&, const StageConfig&) = default;

  // Section body ("steps = ...", "learning_rate = max, min", ...).
  static StageConfig from_tree(const std::string& name, const ConfigTree& section);
  ConfigTree to_tree() const;

  // Same shapes at laptop size: steps / 100, batch 8, sequence cap 512.
  StageConfig desk_scale() const;
};

// Splits `steps` into equal segments, one per resolution, in order.
std::vector<ResolutionStep> equal_segments(const std::vector<std::size_t>& resolutions, std::size_t steps);

// Every section of a schedule file becomes one stage, in file order.
std::vector<StageConfig> parse_stages(const ConfigTree& tree);
std::vector<StageConfig> load_stages(const std::filesystem::path& path);
ConfigTree stages_to_tree(const std::vector<StageConfig>& stages);

// Linear decay reaches lr_min exactly at the last step (steps - 1).
double lr_at_step(const StageConfig& stage, std::size_t step);
std::size_t resolution_at_step(const StageConfig& stage, std::size_t step);

// ---- data ------------------------------------------------------------------

struct TrainingExample {
  std::string id;
  std::vector<RawImage> images;
  std::vector<ChatTurn> turns;  // ImageRef indices point into `images`
};

struct Dataset {
  std::string name;
  std::vector<TrainingExample> examples;
};

// JSON lines: {"id": .., "images": [paths], "turns": [{"role": "user"|"assistant",
// "text": .., "images": [indices]}]}. Turns without an "images" list get every
// image of the example prepended to the first user turn. Image paths are
// resolved relative to the file.
Dataset load_dataset_jsonl(const std::string& name, const std::filesystem::path& path);
// One record of the above. "image_sizes": [[w, h], ...] may stand in for
// "images" and yields blank images of those sizes.
TrainingExample parse_training_example(const std::string& json_text, const std::filesystem::path& base_dir);

// Solid-colour images with a short question/answer pair each; answers are
// distinct colour names.
Dataset synthetic_qa_dataset(const std::string& name, std::size_t count, std::size_t image_side, uint64_t seed);

class MixtureSampler {
 public:
  struct Draw {
    std::size_t dataset = 0;
    std::size_t example = 0;
    friend bool operator==(const Draw&, const Draw&) = default;
  };

  MixtureSampler(std::vector<double> weights, std::vector<std::size_t> dataset_sizes, uint64_t seed);

  Draw next();
  std::vector<Draw> sample_batch(std::size_t n);

  std::string state() const;
  void set_state(const std::string& s);

  const std::vector<double>& weights() const { return weights_; }

 private:
  std::vector<double> weights_;
  std::vector<double> cumulative_;
  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> cursors_;
  Rng rng_;
};

// ---- training --------------------------------------------------------------

struct StepReport {
  std::string stage;
  std::size_t step = 0;
  double lr = 0.0;
  std::size_t resolution = 0;
  double loss = 0.0;
  double tokens_per_sec = 0.0;
  std::size_t tokens = 0;
  // Gradient L2 norm per parameter role, before clipping.
  std::map<ParamRole, double> grad_norm;
};

struct TrainOptions {
  uint64_t seed = 0;
  // 0 trains synchronously; otherwise batches are prepared this many steps
  // ahead on a worker thread.
  std::size_t prefetch = 0;
  double clip_norm = 1.0;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  // Stop the stage once this many of its steps are done (0 = run to the end).
  std::size_t stop_after = 0;
  std::filesystem::path checkpoint;   // written at the end of run_stage if set
  std::filesystem::path metrics_csv;  // appended per step if set
  std::function<void(const StepReport&)> on_step;
};

struct CheckpointMeta {
  std::string stage;
  std::size_t step = 0;
  bool completed = false;
  std::filesystem::path path;
};

class Trainer {
 public:
  Trainer(VisionLanguageModel& model, std::vector<Dataset> datasets, TrainOptions opts = {});

  // Runs (or resumes) one stage. The stage's mixture names select datasets.
  CheckpointMeta run_stage(const StageConfig& stage);

  void save(Checkpoint& ck) const;
  void save(const std::filesystem::path& path) const;
  // Restores model, optimizer, sampler and position within the stage.
  void load(const Checkpoint& ck);
  void load(const std::filesystem::path& path);

  const std::string& stage() const { return stage_; }
  std::size_t step() const { return step_; }
  TrainOptions& options() { return opts_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  struct Prepared {
    std::vector<MultimodalSequence> seqs;
    std::vector<std::vector<TileGrid>> grids;
    std::string sampler_state;  // after drawing this batch
  };

  MixtureSampler make_sampler(const StageConfig& stage) const;
  Prepared prepare(const StageConfig& stage, std::size_t step, MixtureSampler& sampler) const;
  StepReport train_step(const StageConfig& stage, std::size_t step, const Prepared& batch);
  void append_metrics(const StepReport& r) const;

  VisionLanguageModel& model_;
  std::vector<Dataset> datasets_;
  TrainOptions opts_;
  std::string stage_;
  std::size_t step_ = 0;
  std::size_t adam_t_ = 0;
  std::string sampler_state_;
  std::map<std::string, Moments> moments_;
};

}  // namespace vlmkit
