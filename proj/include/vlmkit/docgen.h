#pragma once

// Synthetic document QA: transcriptions -> prompts -> generator -> filter ->
// JSON-lines shards.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vlmkit/error.h"

namespace vlmkit {

inline constexpr std::size_t kMaxTranscriptPages = 4;

struct TranscriptRecord {
  std::string doc_id;
  std::vector<std::string> pages;
  std::map<std::string, std::string> source;
};

struct LoadIssue {
  std::size_t line = 0;
  std::string reason;  // "json", "schema", "page_count", "empty"
  std::string detail;
};

struct TranscriptLoad {
  std::vector<TranscriptRecord> records;
  std::vector<LoadIssue> issues;
  std::size_t lines = 0;  // nonblank lines seen
};

// One JSON object per line: {"doc_id": .., "pages": [..], "source": {..}}.
// Bad lines are reported and skipped.
TranscriptLoad parse_transcripts(std::istream& in);
TranscriptLoad load_transcripts(const std::filesystem::path& path);

// Nonempty pages joined by a blank line.
std::string join_pages(const TranscriptRecord& rec);

inline constexpr std::string_view kTranscriptionPlaceholder = "{transcription}";

struct PromptTemplate {
  int id = 0;
  std::string name;
  std::string text;
  std::string output_format;

  // Placeholder must occur exactly once.
  void validate() const;
};

const std::vector<PromptTemplate>& default_templates();
// Reads template_1.txt .. template_5.txt from `dir`.
std::vector<PromptTemplate> load_templates(const std::filesystem::path& dir);

// One prompt per template; the transcription is inserted verbatim.
std::vector<std::string> render_prompts(const TranscriptRecord& rec, std::span<const PromptTemplate> templates);

// Text-in/text-out completion. Throw TransientError for failures worth a
// retry; any other exception is treated as permanent.
class Generator {
 public:
  virtual ~Generator() = default;
  virtual std::string complete(const std::string& prompt, uint64_t seed) = 0;
  virtual std::string name() const = 0;
};

// Deterministic stand-in that writes Q:/A: pairs from words of the prompt.
// A fraction of answers are deliberately bad (unanswerable, code, malformed)
// so that the filter has something to do.
class MockGenerator : public Generator {
 public:
  struct Rates {
    double unanswerable = 0.08;
    double code = 0.05;
    double malformed = 0.03;
  };

  MockGenerator() = default;
  explicit MockGenerator(Rates rates) : rates_(rates) {}
  std::string complete(const std::string& prompt, uint64_t seed) override;
  std::string name() const override { return "mock"; }

 private:
  Rates rates_;
};

// POSTs {"prompt", "seed"} as JSON and reads {"text"} back. Endpoint and
// key come from VLMKIT_GEN_ENDPOINT ("http://host:port/path") and
// VLMKIT_GEN_API_KEY.
class HttpGenerator : public Generator {
 public:
  HttpGenerator(std::string endpoint, std::string api_key, std::chrono::seconds timeout = std::chrono::seconds(60));
  static std::unique_ptr<HttpGenerator> from_env();
  std::string complete(const std::string& prompt, uint64_t seed) override;
  std::string name() const override { return "http"; }

 private:
  std::string host_;
  int port_ = 80;
  std::string path_;
  std::string api_key_;
  std::chrono::seconds timeout_;
};

// "mock" or "http".
std::unique_ptr<Generator> make_generator(const std::string& name);

struct RetryPolicy {
  std::size_t max_attempts = 3;
  std::chrono::milliseconds base_delay{200};
  double backoff = 2.0;
  std::function<void(std::chrono::milliseconds)> sleep;  // defaults to sleeping the thread
};

struct Generation {
  std::string text;
  std::size_t attempts = 0;
  double seconds = 0.0;
  std::vector<std::string> retry_log;

  std::size_t retries() const { return attempts - 1; }
};

Generation generate_qa(const std::string& prompt, const std::string& doc_id, Generator& gen, uint64_t seed,
                       const RetryPolicy& policy = {});

struct QARecord {
  std::string doc_id;
  std::string question;
  std::string answer;
  int template_id = 0;
  std::optional<std::string> drop_reason;  // unset when kept

  bool kept() const { return !drop_reason; }
};

struct FilterConfig {
  std::vector<std::string> code_patterns = default_code_patterns();
  std::string banned_keyword = "unanswerable";

  static std::vector<std::string> default_code_patterns();
};

struct FilterReport {
  std::size_t total = 0;
  std::size_t kept = 0;
  std::map<std::string, std::size_t> dropped;

  std::size_t dropped_total() const;
  double drop_fraction() const;
  bool conserved() const { return total == kept + dropped_total(); }
  void add(const QARecord& r);
  void merge(const FilterReport& other);
};

class QAFilter {
 public:
  explicit QAFilter(const FilterConfig& cfg = {});
  // Reason a pair would be dropped, if any.
  std::optional<std::string> verdict(const std::string& question, const std::string& answer) const;
  bool looks_like_code(const std::string& text) const;
  bool has_banned_keyword(const std::string& text) const;

 private:
  FilterConfig cfg_;
  struct Compiled;
  std::shared_ptr<const Compiled> compiled_;
};

struct ParsedOutput {
  std::vector<QARecord> records;  // kept and dropped, in output order
  FilterReport report;
};

// Splits raw "Q: ... A: ..." text into pairs and applies the filter. Text
// with no pair at all yields one record dropped as "format".
ParsedOutput parse_and_filter(const std::string& raw, const std::string& doc_id, int template_id,
                              const QAFilter& filter);

struct ShardInfo {
  std::string file;
  std::size_t records = 0;
  std::string sha256;
};

struct Manifest {
  std::vector<ShardInfo> shards;
  std::size_t total_records = 0;
  std::string digest;  // sha256 over the shard digests in order
};

// Kept records only, at most shard_size per file, plus manifest.json.
Manifest shard_dataset(std::span<const QARecord> records, const std::filesystem::path& out_dir,
                       std::size_t shard_size);

std::string sha256_hex(std::string_view data);

struct DocgenOptions {
  std::filesystem::path transcripts;
  std::filesystem::path out_dir;
  std::filesystem::path report;  // optional JSON report
  std::size_t shard_size = 1000;
  std::size_t workers = 1;
  uint64_t seed = 0;
  std::vector<PromptTemplate> templates = default_templates();
  FilterConfig filter;
  RetryPolicy retry;
};

struct DocgenResult {
  FilterReport report;
  Manifest manifest;
  std::vector<LoadIssue> load_issues;
  std::size_t documents = 0;
  std::size_t retries = 0;
};

// The generator must be safe to call from several workers at once.
DocgenResult run_docgen(const DocgenOptions& opts, Generator& gen);

// Synthetic transcripts for tests and demos.
std::vector<TranscriptRecord> synthetic_transcripts(std::size_t count, uint64_t seed);
void write_transcripts(std::span<const TranscriptRecord> records, const std::filesystem::path& path);

}  // namespace vlmkit
