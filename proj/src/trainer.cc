#include "vlmkit/trainer.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <exception>
#include <fstream>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace vlmkit {

std::string to_string(LrShape s) { return s == LrShape::constant ? "constant" : "linear_decay"; }

LrShape parse_lr_shape(const std::string& s) {
  if (s == "constant") return LrShape::constant;
  if (s == "linear_decay" || s == "linear") return LrShape::linear_decay;
  throw ConfigError("unknown lr_shape '" + s + "' (expected constant or linear_decay)");
}

namespace {

std::vector<std::string> split(const std::string& s, const std::string& sep) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = s.find(sep, pos);
    out.push_back(trim(s.substr(pos, next == std::string::npos ? std::string::npos : next - pos)));
    if (next == std::string::npos) break;
    pos = next + sep.size();
  }
  return out;
}

// "1820", "1820²" or "1820^2"
std::size_t parse_resolution(std::string s) {
  for (const char* suffix : {"\xc2\xb2", "^2"}) {
    const std::string suf(suffix);
    if (s.size() > suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0) {
      s.erase(s.size() - suf.size());
    }
  }
  return parse_count(s);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

std::vector<ResolutionStep> equal_segments(const std::vector<std::size_t>& resolutions, std::size_t steps) {
  if (resolutions.empty()) throw ConfigError("empty resolution list");
  if (steps < resolutions.size()) {
    throw ConfigError(std::to_string(resolutions.size()) + " resolutions do not fit into " + std::to_string(steps) +
                      " steps");
  }
  std::vector<ResolutionStep> out;
  for (std::size_t i = 0; i < resolutions.size(); ++i) out.push_back({i * steps / resolutions.size(), resolutions[i]});
  return out;
}

void StageConfig::validate() const {
  const std::string where = "stage '" + name + "': ";
  if (steps < 1) throw ConfigError(where + "steps must be >= 1");
  if (batch_size < 1) throw ConfigError(where + "batch_size must be >= 1");
  if (!(lr_max >= 0.0) || !(lr_min >= 0.0)) throw ConfigError(where + "learning rates must be >= 0");
  if (lr_shape == LrShape::constant && lr_max != lr_min) {
    throw ConfigError(where + "constant learning rate needs max == min");
  }
  for (std::size_t i = 0; i < resolution_schedule.size(); ++i) {
    if (resolution_schedule[i].max_long_side == 0) throw ConfigError(where + "resolution must be > 0");
    if (i == 0 && resolution_schedule[i].from_step != 0) throw ConfigError(where + "resolution schedule must start at step 0");
    if (i > 0 && resolution_schedule[i].from_step <= resolution_schedule[i - 1].from_step) {
      throw ConfigError(where + "resolution entries must be strictly increasing in from_step");
    }
    if (resolution_schedule[i].from_step >= steps) throw ConfigError(where + "resolution entry past the last step");
  }
  if (mixture.empty()) throw ConfigError(where + "empty data mixture");
  double total = 0.0;
  for (const auto& m : mixture) {
    if (!(m.weight >= 0.0)) throw ConfigError(where + "mixture weight for '" + m.dataset + "' must be >= 0");
    total += m.weight;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError(where + "mixture weights sum to " + fmt(total) + ", not 1");
}

StageConfig StageConfig::from_tree(const std::string& name, const ConfigTree& s) {
  for (const auto& [key, _] : s) {
    static const std::vector<std::string> known = {"steps",          "learning_rate",        "lr_shape",
                                                   "batch_size",     "sequence_length",      "max_image_resolution",
                                                   "backbones_training", "data",             "neftune"};
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("unknown key '" + key + "' in stage [" + name + "]");
    }
  }
  StageConfig c;
  c.name = name;
  c.steps = config_size(s, "steps");

  const auto lr = split(config_string(s, "learning_rate"), ",");
  if (lr.size() == 1) {
    c.lr_max = c.lr_min = parse_double(lr[0]);
  } else if (lr.size() == 2) {
    c.lr_max = parse_double(lr[0]);
    c.lr_min = parse_double(lr[1]);
  } else {
    throw ConfigError("stage [" + name + "]: learning_rate must be 'max, min'");
  }
  c.lr_shape = parse_lr_shape(
      config_string(s, "lr_shape", c.lr_max == c.lr_min ? std::string("constant") : std::string("linear_decay")));
  c.batch_size = config_size(s, "batch_size");
  c.seq_len_cap = config_size(s, "sequence_length", 0);

  const std::string res = config_string(s, "max_image_resolution");
  std::string arrows = res;
  for (std::size_t p; (p = arrows.find("\xe2\x86\x92")) != std::string::npos;) arrows.replace(p, 3, "->");
  if (arrows.find("->") != std::string::npos) {
    std::vector<std::size_t> values;
    for (const auto& part : split(arrows, "->")) values.push_back(parse_resolution(part));
    c.resolution_schedule = equal_segments(values, c.steps);
  } else {
    for (const auto& part : split(res, ",")) {
      const auto colon = part.find(':');
      if (colon == std::string::npos) {
        c.resolution_schedule.push_back({0, parse_resolution(part)});
      } else {
        c.resolution_schedule.push_back({parse_count(part.substr(0, colon)), parse_resolution(trim(part.substr(colon + 1)))});
      }
    }
  }

  c.freezing = parse_freezing(config_string(s, "backbones_training"));
  // "a:0.7, b:0.3", or bare names for an even split.
  const auto entries = split(config_string(s, "data"), ",");
  std::size_t weighted = 0;
  for (const auto& part : entries) weighted += part.find(':') != std::string::npos;
  if (weighted != 0 && weighted != entries.size()) {
    throw ConfigError("stage [" + name + "]: give a weight for every data entry or for none");
  }
  for (const auto& part : entries) {
    const auto colon = part.find(':');
    if (colon == std::string::npos) {
      c.mixture.push_back({part, 1.0 / static_cast<double>(entries.size())});
    } else {
      c.mixture.push_back({trim(part.substr(0, colon)), parse_double(part.substr(colon + 1))});
    }
  }
  c.neftune = config_bool(s, "neftune", false);
  c.validate();
  return c;
}

ConfigTree StageConfig::to_tree() const {
  ConfigTree t;
  t.put("steps", steps);
  t.put("learning_rate", fmt(lr_max) + ", " + fmt(lr_min));
  t.put("lr_shape", to_string(lr_shape));
  t.put("batch_size", batch_size);
  t.put("sequence_length", seq_len_cap);
  std::string res;
  for (const auto& r : resolution_schedule) {
    if (!res.empty()) res += ", ";
    res += std::to_string(r.from_step) + ":" + std::to_string(r.max_long_side);
  }
  t.put("max_image_resolution", res);
  t.put("backbones_training", freezing == Freezing::adapters ? std::string("lora") : to_string(freezing));
  std::string data;
  for (const auto& m : mixture) {
    if (!data.empty()) data += ", ";
    data += m.dataset + ":" + fmt(m.weight);
  }
  t.put("data", data);
  t.put("neftune", neftune ? "true" : "false");
  return t;
}

StageConfig StageConfig::desk_scale() const {
  StageConfig c = *this;
  c.steps = std::max<std::size_t>(1, steps / 100);
  c.batch_size = 8;
  c.seq_len_cap = 512;
  std::vector<std::size_t> values;
  for (const auto& r : resolution_schedule) values.push_back(r.max_long_side);
  if (!values.empty()) {
    c.resolution_schedule.clear();
    for (std::size_t i = 0; i < resolution_schedule.size(); ++i) {
      const std::size_t from = resolution_schedule[i].from_step * c.steps / steps;
      if (!c.resolution_schedule.empty() && from <= c.resolution_schedule.back().from_step) {
        c.resolution_schedule.back().max_long_side = values[i];
      } else {
        c.resolution_schedule.push_back({from, values[i]});
      }
    }
  }
  c.validate();
  return c;
}

std::vector<StageConfig> parse_stages(const ConfigTree& tree) {
  std::vector<StageConfig> out;
  for (const auto& [name, section] : tree) {
    if (section.empty()) throw ConfigError("schedule entry '" + name + "' is not a [section]");
    out.push_back(StageConfig::from_tree(name, section));
  }
  if (out.empty()) throw ConfigError("schedule defines no stages");
  return out;
}

std::vector<StageConfig> load_stages(const std::filesystem::path& path) { return parse_stages(read_config_file(path)); }

ConfigTree stages_to_tree(const std::vector<StageConfig>& stages) {
  ConfigTree t;
  for (const auto& s : stages) t.add_child(ConfigTree::path_type(s.name, '\0'), s.to_tree());
  return t;
}

double lr_at_step(const StageConfig& stage, std::size_t step) {
  if (step >= stage.steps) {
    throw RangeError("step " + std::to_string(step) + " outside stage '" + stage.name + "' of " +
                     std::to_string(stage.steps) + " steps");
  }
  if (stage.lr_shape == LrShape::constant || stage.steps == 1) return stage.lr_max;
  const double frac = static_cast<double>(step) / static_cast<double>(stage.steps - 1);
  return stage.lr_max + (stage.lr_min - stage.lr_max) * frac;
}

std::size_t resolution_at_step(const StageConfig& stage, std::size_t step) {
  if (stage.resolution_schedule.empty()) throw ConfigError("stage '" + stage.name + "' has no resolution schedule");
  if (step >= stage.steps) {
    throw RangeError("step " + std::to_string(step) + " outside stage '" + stage.name + "'");
  }
  std::size_t res = stage.resolution_schedule.front().max_long_side;
  for (const auto& r : stage.resolution_schedule) {
    if (r.from_step <= step) res = r.max_long_side;
  }
  return res;
}

// ---- data ------------------------------------------------------------------

TrainingExample parse_training_example(const std::string& json_text, const std::filesystem::path& base_dir) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(e.what());
  }
  try {
    TrainingExample ex;
    ex.id = j.value("id", std::string());
    for (const auto& p : j.value("images", nlohmann::json::array())) {
      std::filesystem::path ip = p.get<std::string>();
      if (ip.is_relative()) ip = base_dir / ip;
      ex.images.push_back(load_image(ip));
    }
    for (const auto& sz : j.value("image_sizes", nlohmann::json::array())) {
      ex.images.emplace_back(sz.at(0).get<std::size_t>(), sz.at(1).get<std::size_t>());
    }
    // Images go to the first user turn unless some turn lists them itself.
    bool placed = ex.images.empty();
    for (const auto& tj : j.at("turns")) placed = placed || tj.contains("images");
    for (const auto& tj : j.at("turns")) {
      ChatTurn turn;
      const std::string role = tj.at("role").get<std::string>();
      if (role == "user") {
        turn.role = Role::user;
      } else if (role == "assistant") {
        turn.role = Role::assistant;
      } else {
        throw DataError("unknown role '" + role + "'");
      }
      if (tj.contains("images")) {
        for (const auto& idx : tj.at("images")) turn.segments.push_back(ImageRef{idx.get<std::size_t>()});
        placed = true;
      } else if (!placed && turn.role == Role::user) {
        for (std::size_t i = 0; i < ex.images.size(); ++i) turn.segments.push_back(ImageRef{i});
        placed = true;
      }
      turn.segments.push_back(tj.at("text").get<std::string>());
      ex.turns.push_back(std::move(turn));
    }
    return ex;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(e.what());
  }
}

Dataset load_dataset_jsonl(const std::string& name, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read dataset " + path.string());
  Dataset ds{name, {}};
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      TrainingExample ex = parse_training_example(line, path.parent_path());
      if (ex.id.empty()) ex.id = name + ":" + std::to_string(lineno);
      ds.examples.push_back(std::move(ex));
    } catch (const DataError& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ds;
}

namespace {

struct Colour {
  const char* name;
  double r, g, b;
};

constexpr Colour kColours[] = {
    {"red", 0.9, 0.1, 0.1},    {"green", 0.1, 0.8, 0.2},  {"blue", 0.1, 0.2, 0.9},   {"yellow", 0.95, 0.9, 0.1},
    {"purple", 0.5, 0.1, 0.6}, {"orange", 1.0, 0.55, 0.0}, {"white", 1.0, 1.0, 1.0}, {"black", 0.0, 0.0, 0.0},
    {"cyan", 0.0, 0.9, 0.9},   {"pink", 1.0, 0.6, 0.75},  {"brown", 0.45, 0.25, 0.1}, {"grey", 0.5, 0.5, 0.5},
};

}  // namespace

Dataset synthetic_qa_dataset(const std::string& name, std::size_t count, std::size_t image_side, uint64_t seed) {
  Dataset ds{name, {}};
  Rng rng(seed);
  constexpr std::size_t palette = std::size(kColours);
  for (std::size_t i = 0; i < count; ++i) {
    const Colour& c = kColours[i % palette];
    RawImage img(image_side, image_side);
    for (std::size_t y = 0; y < image_side; ++y)
      for (std::size_t x = 0; x < image_side; ++x) {
        const double jitter = 0.05 * (rng.uniform() - 0.5);
        img.at(x, y, 0) = std::clamp(c.r + jitter, 0.0, 1.0);
        img.at(x, y, 1) = std::clamp(c.g + jitter, 0.0, 1.0);
        img.at(x, y, 2) = std::clamp(c.b + jitter, 0.0, 1.0);
      }
    std::string answer = c.name;
    if (i >= palette) answer += " " + std::to_string(i / palette);
    TrainingExample ex;
    ex.id = name + ":" + std::to_string(i);
    ex.images.push_back(std::move(img));
    ex.turns.push_back({Role::user, {ImageRef{0}, std::string("Item ") + std::to_string(i) + ": which colour?"}});
    ex.turns.push_back({Role::assistant, {answer}});
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

MixtureSampler::MixtureSampler(std::vector<double> weights, std::vector<std::size_t> dataset_sizes, uint64_t seed)
    : weights_(std::move(weights)), sizes_(std::move(dataset_sizes)), cursors_(sizes_.size(), 0), rng_(seed) {
  if (weights_.empty() || weights_.size() != sizes_.size()) throw ConfigError("mixture weights and datasets disagree");
  double total = 0.0;
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (!(weights_[i] >= 0.0)) throw ConfigError("mixture weights must be >= 0");
    if (weights_[i] > 0.0 && sizes_[i] == 0) {
      throw DataError("dataset " + std::to_string(i) + " is empty but has mixture weight " + fmt(weights_[i]));
    }
    total += weights_[i];
    cumulative_.push_back(total);
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("mixture weights sum to " + fmt(total) + ", not 1");
}

MixtureSampler::Draw MixtureSampler::next() {
  const double u = rng_.uniform() * cumulative_.back();
  std::size_t d = static_cast<std::size_t>(std::upper_bound(cumulative_.begin(), cumulative_.end(), u) - cumulative_.begin());
  d = std::min(d, weights_.size() - 1);
  while (weights_[d] == 0.0) --d;  // u landed on a zero-width boundary
  const std::size_t ex = cursors_[d]++ % sizes_[d];
  return {d, ex};
}

std::vector<MixtureSampler::Draw> MixtureSampler::sample_batch(std::size_t n) {
  std::vector<Draw> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(next());
  return out;
}

std::string MixtureSampler::state() const {
  std::ostringstream os;
  os << cursors_.size();
  for (auto c : cursors_) os << ' ' << c;
  os << ' ' << rng_.state();
  return os.str();
}

void MixtureSampler::set_state(const std::string& s) {
  std::istringstream is(s);
  std::size_t n = 0;
  is >> n;
  if (!is || n != cursors_.size()) throw FormatError("sampler state does not match the mixture");
  for (auto& c : cursors_) is >> c;
  std::string rest;
  std::getline(is, rest);
  rng_.set_state(trim(rest));
}

// ---- trainer ---------------------------------------------------------------

Trainer::Trainer(VisionLanguageModel& model, std::vector<Dataset> datasets, TrainOptions opts)
    : model_(model), datasets_(std::move(datasets)), opts_(std::move(opts)) {}

MixtureSampler Trainer::make_sampler(const StageConfig& stage) const {
  std::vector<double> weights;
  std::vector<std::size_t> sizes;
  for (const auto& m : stage.mixture) {
    auto it = std::find_if(datasets_.begin(), datasets_.end(), [&](const Dataset& d) { return d.name == m.dataset; });
    if (it == datasets_.end()) {
      if (m.weight > 0.0) throw DataError("stage '" + stage.name + "' uses unknown dataset '" + m.dataset + "'");
      sizes.push_back(0);
    } else {
      sizes.push_back(it->examples.size());
    }
    weights.push_back(m.weight);
  }
  return MixtureSampler(weights, sizes, Rng::derive(opts_.seed, stable_hash(stage.name)));
}

Trainer::Prepared Trainer::prepare(const StageConfig& stage, std::size_t step, MixtureSampler& sampler) const {
  const ModelConfig& mc = model_.config();
  const std::size_t res = resolution_at_step(stage, step);
  const std::size_t per_axis = std::clamp<std::size_t>(res / mc.tile_side, 1, mc.max_grid);
  const TileConfig tiles{mc.tile_side, mc.tile_side, per_axis * mc.tile_side};
  std::size_t cap = mc.lm.max_seq_len;
  if (stage.seq_len_cap > 0) cap = std::min(cap, stage.seq_len_cap);

  Prepared p;
  for (const auto& draw : sampler.sample_batch(stage.batch_size)) {
    const Dataset& ds = *std::find_if(datasets_.begin(), datasets_.end(),
                                      [&](const Dataset& d) { return d.name == stage.mixture[draw.dataset].dataset; });
    const TrainingExample& ex = ds.examples[draw.example];
    std::vector<TileGrid> grids;
    std::vector<GridShape> shapes;
    for (const RawImage& img : ex.images) {
      grids.push_back(preprocess_image(img, tiles));
      shapes.push_back({grids.back().rows, grids.back().cols});
    }
    try {
      p.seqs.push_back(build_training_sequence(ex.turns, shapes, model_.tokens_per_tile(), model_.vocab(),
                                               model_.assemble_options(cap)));
    } catch (const SequenceOverflowError& e) {
      throw SequenceOverflowError("example '" + ex.id + "' (stage '" + stage.name + "', step " + std::to_string(step) +
                                  "): " + e.what());
    }
    p.grids.push_back(std::move(grids));
  }
  p.sampler_state = sampler.state();
  return p;
}

StepReport Trainer::train_step(const StageConfig& stage, std::size_t step, const Prepared& batch) {
  const auto t0 = std::chrono::steady_clock::now();
  StepReport r;
  r.stage = stage.name;
  r.step = step;
  r.lr = lr_at_step(stage, step);
  r.resolution = resolution_at_step(stage, step);

  ParamList params = model_.parameters();
  for (auto& p : params) {
    Tensor t = p.tensor;
    t.zero_grad();
  }

  const double inv_batch = 1.0 / static_cast<double>(batch.seqs.size());
  double total = 0.0;
  for (std::size_t i = 0; i < batch.seqs.size(); ++i) {
    std::vector<ImageTokens> images;
    for (const TileGrid& g : batch.grids[i]) images.push_back(model_.encode_tiles(g));
    NoiseOptions noise;
    noise.training = stage.neftune;
    noise.alpha = model_.config().neftune_alpha;
    noise.seed = Rng::derive(opts_.seed, step * stage.batch_size + i);
    const Tensor loss = model_.loss(batch.seqs[i], images, noise);
    backward(scale(loss, inv_batch));
    total += loss.item();
    r.tokens += batch.seqs[i].size();
  }
  r.loss = total * inv_batch;

  double global_sq = 0.0;
  for (const auto& p : params) {
    double sq = 0.0;
    if (p.tensor.has_grad()) {
      for (double g : p.tensor.grad()) sq += g * g;
    }
    r.grad_norm[p.role] += sq;
    if (p.tensor.requires_grad()) global_sq += sq;
  }
  for (auto& [_, v] : r.grad_norm) v = std::sqrt(v);
  const double global = std::sqrt(global_sq);
  const double coef = (opts_.clip_norm > 0.0 && global > opts_.clip_norm) ? opts_.clip_norm / global : 1.0;

  ++adam_t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(adam_t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(adam_t_));
  for (auto& p : params) {
    if (!p.tensor.requires_grad()) continue;
    Tensor t = p.tensor;
    Moments& mo = moments_[p.name];
    if (mo.m.empty()) {
      mo.m.assign(t.numel(), 0.0);
      mo.v.assign(t.numel(), 0.0);
    }
    auto w = t.mutable_data();
    const bool has = t.has_grad();
    const auto g = has ? t.grad() : std::span<const double>();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = has ? g[k] * coef : 0.0;
      mo.m[k] = opts_.beta1 * mo.m[k] + (1.0 - opts_.beta1) * gk;
      mo.v[k] = opts_.beta2 * mo.v[k] + (1.0 - opts_.beta2) * gk * gk;
      const double mhat = mo.m[k] / bc1, vhat = mo.v[k] / bc2;
      w[k] -= r.lr * (mhat / (std::sqrt(vhat) + opts_.adam_eps) + opts_.weight_decay * w[k]);
    }
  }

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.tokens_per_sec = secs > 0.0 ? static_cast<double>(r.tokens) / secs : 0.0;
  return r;
}

void Trainer::append_metrics(const StepReport& r) const {
  if (opts_.metrics_csv.empty()) return;
  const bool fresh = !std::filesystem::exists(opts_.metrics_csv);
  std::ofstream os(opts_.metrics_csv, std::ios::app);
  if (!os) throw IoError("cannot write metrics to " + opts_.metrics_csv.string());
  if (fresh) os << "step,stage,lr,resolution,loss,tokens_per_sec\n";
  os << r.step << ',' << r.stage << ',' << fmt(r.lr) << ',' << r.resolution << ',' << fmt(r.loss) << ','
     << r.tokens_per_sec << '\n';
}

namespace {

// Single-producer bounded queue for prefetched batches.
template <typename T>
class BoundedQueue {
 public:
  explicit BoundedQueue(std::size_t cap) : cap_(cap) {}

  bool push(T item) {
    std::unique_lock lock(mu_);
    not_full_.wait(lock, [&] { return closed_ || items_.size() < cap_; });
    if (closed_) return false;
    items_.push_back(std::move(item));
    not_empty_.notify_one();
    return true;
  }

  T pop() {
    std::unique_lock lock(mu_);
    not_empty_.wait(lock, [&] { return !items_.empty(); });
    T item = std::move(items_.front());
    items_.pop_front();
    not_full_.notify_one();
    return item;
  }

  void close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    not_full_.notify_all();
  }

 private:
  std::size_t cap_;
  std::deque<T> items_;
  bool closed_ = false;
  std::mutex mu_;
  std::condition_variable not_empty_, not_full_;
};

}  // namespace

CheckpointMeta Trainer::run_stage(const StageConfig& stage) {
  stage.validate();
  if (stage.freezing != Freezing::frozen && !model_.has_adapters() && stage.freezing != Freezing::full) {
    model_.apply_adapters(model_.config().adapter);
  }
  model_.set_trainable(stage.freezing);

  MixtureSampler sampler = make_sampler(stage);
  if (stage_ == stage.name && step_ > 0) {
    if (!sampler_state_.empty()) sampler.set_state(sampler_state_);
  } else {
    stage_ = stage.name;
    step_ = 0;
    adam_t_ = 0;
    moments_.clear();
  }

  std::size_t end = stage.steps;
  if (opts_.stop_after > 0) end = std::min(end, opts_.stop_after);

  auto consume = [&](const Prepared& batch, std::size_t step) {
    const StepReport r = train_step(stage, step, batch);
    step_ = step + 1;
    sampler_state_ = batch.sampler_state;
    append_metrics(r);
    if (opts_.on_step) opts_.on_step(r);
  };

  if (opts_.prefetch == 0) {
    for (std::size_t s = step_; s < end; ++s) consume(prepare(stage, s, sampler), s);
  } else {
    using Item = std::pair<std::optional<Prepared>, std::exception_ptr>;
    BoundedQueue<Item> queue(opts_.prefetch);
    const std::size_t first = step_;
    std::thread producer([&] {
      for (std::size_t s = first; s < end; ++s) {
        Item item;
        try {
          item.first = prepare(stage, s, sampler);
        } catch (...) {
          item.second = std::current_exception();
        }
        const bool failed = static_cast<bool>(item.second);
        if (!queue.push(std::move(item)) || failed) return;
      }
    });
    try {
      for (std::size_t s = first; s < end; ++s) {
        Item item = queue.pop();
        if (item.second) std::rethrow_exception(item.second);
        consume(*item.first, s);
      }
    } catch (...) {
      queue.close();
      producer.join();
      throw;
    }
    queue.close();
    producer.join();
  }

  CheckpointMeta meta{stage_, step_, step_ == stage.steps, opts_.checkpoint};
  if (!opts_.checkpoint.empty()) save(opts_.checkpoint);
  return meta;
}

void Trainer::save(Checkpoint& ck) const {
  model_.save(ck);
  ck.meta["trainer.stage"] = stage_;
  ck.meta["trainer.step"] = std::to_string(step_);
  ck.meta["trainer.adam_t"] = std::to_string(adam_t_);
  ck.meta["trainer.sampler"] = sampler_state_;
  ck.meta["trainer.seed"] = std::to_string(opts_.seed);
  for (const auto& [name, mo] : moments_) {
    ck.put("optim.m." + name, Tensor::from({mo.m.size()}, mo.m));
    ck.put("optim.v." + name, Tensor::from({mo.v.size()}, mo.v));
  }
}

void Trainer::save(const std::filesystem::path& path) const {
  Checkpoint ck;
  save(ck);
  ck.save(path);
}

void Trainer::load(const Checkpoint& ck) {
  model_.load(ck);
  auto get = [&](const std::string& key) -> std::string {
    auto it = ck.meta.find(key);
    if (it == ck.meta.end()) throw FormatError("checkpoint lacks trainer state '" + key + "'");
    return it->second;
  };
  stage_ = get("trainer.stage");
  step_ = std::stoull(get("trainer.step"));
  adam_t_ = std::stoull(get("trainer.adam_t"));
  sampler_state_ = get("trainer.sampler");
  moments_.clear();
  const std::string prefix = "optim.m.";
  for (const auto& [name, entry] : ck.tensors) {
    if (name.rfind(prefix, 0) != 0) continue;
    const std::string param = name.substr(prefix.size());
    auto v = ck.tensors.find("optim.v." + param);
    if (v == ck.tensors.end()) throw FormatError("checkpoint lacks second moment for '" + param + "'");
    moments_[param] = Moments{entry.values, v->second.values};
  }
}

void Trainer::load(const std::filesystem::path& path) { load(Checkpoint::load(path)); }

}  // namespace vlmkit
