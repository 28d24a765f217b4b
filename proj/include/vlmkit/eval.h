#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vlmkit/error.h"
#include "vlmkit/image.h"

namespace vlmkit {

class VisionLanguageModel;

enum class TaskKind { open_ended, mcq };
enum class PromptKind { mcq, textvqa, docvqa };
enum class MetricKind { anls, vqa_acc, exact_letter };

std::string to_string(MetricKind m);

struct BenchmarkSpec {
  std::string name;
  TaskKind task = TaskKind::open_ended;
  PromptKind prompt = PromptKind::textvqa;
  std::size_t resize_longest_side = 1456;
  MetricKind metric = MetricKind::vqa_acc;
  double anls_tau = 0.5;

  void validate(std::size_t tile_side) const;
};

BenchmarkSpec textvqa_spec(std::size_t tile_side = 364);
BenchmarkSpec docvqa_spec(std::size_t tile_side = 364);
BenchmarkSpec mcq_spec(const std::string& name, std::size_t tile_side = 364);
// "textvqa", "docvqa", or anything else treated as multiple choice; the name
// may also be a file path whose stem contains one of those words.
BenchmarkSpec spec_for(const std::string& name, std::size_t tile_side = 364);

struct EvalExample {
  std::string id;
  std::string image;  // path, relative to the benchmark file
  std::string question;
  std::vector<std::string> references;
  std::vector<std::string> choices;
  std::string answer_letter;
};

// JSON lines {"id", "image", "question", "references"} or {..., "choices",
// "answer_letter"}.
std::vector<EvalExample> load_benchmark(const std::filesystem::path& path);

std::string format_mcq_prompt(const EvalExample& ex);
std::string format_textvqa_prompt(const std::string& question);
std::string format_docvqa_prompt(const std::string& question);
std::string format_prompt(const BenchmarkSpec& spec, const EvalExample& ex);

// Cuts at the first stop word and trims trailing whitespace.
std::string apply_stop_words(const std::string& text, std::span<const std::string> stop_words);

std::size_t levenshtein(const std::u32string& a, const std::u32string& b);
std::u32string utf8_to_u32(const std::string& s);

// Best 1 - normalized edit distance over the references (ASCII lowercase,
// trimmed); values under tau become 0.
double anls(const std::string& prediction, std::span<const std::string> references, double tau = 0.5);

// VQAv2-style answer normalization (see docs/vqa_normalization.md).
std::string vqa_normalize(const std::string& answer);
double vqa_accuracy(const std::string& prediction, std::span<const std::string> references);

std::optional<char> mcq_extract_letter(const std::string& generation, std::size_t n_choices);

double score_example(const BenchmarkSpec& spec, const EvalExample& ex, const std::string& prediction);

struct EvalInput {
  const EvalExample& example;
  const RawImage& image;  // already resized to the spec's longest side
  const std::string& prompt;
  std::size_t max_long_side;
};

using ModelRunner = std::function<std::string(const EvalInput&)>;

// Greedy generation with the evaluation stop words.
ModelRunner model_runner(const VisionLanguageModel& model, std::size_t max_tokens = 32);

struct ExampleResult {
  std::string id;
  std::string prediction;
  double score = 0.0;
};

struct MetricResult {
  std::vector<ExampleResult> examples;
  std::vector<std::string> errors;  // skipped examples with the reason
  double aggregate = 0.0;
  std::size_t count() const { return examples.size(); }
};

struct RunOptions {
  std::filesystem::path image_root;
  std::optional<std::size_t> resize_override;
  std::filesystem::path per_example_jsonl;
  std::filesystem::path summary_json;
};

MetricResult run_benchmark(const BenchmarkSpec& spec, std::span<const EvalExample> examples, const ModelRunner& runner,
                           const RunOptions& opts = {});

std::string format_summary_table(std::span<const std::pair<BenchmarkSpec, MetricResult>> rows);

}  // namespace vlmkit
