#include "vlmkit/docgen.h"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <iomanip>
#include <regex>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "vlmkit/config.h"
#include "vlmkit/rng.h"

namespace vlmkit {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

// ---- transcripts -----------------------------------------------------------

TranscriptLoad parse_transcripts(std::istream& in) {
  TranscriptLoad out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    ++out.lines;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      out.issues.push_back({lineno, "json", e.what()});
      continue;
    }
    TranscriptRecord rec;
    try {
      rec.doc_id = j.at("doc_id").get<std::string>();
      rec.pages = j.at("pages").get<std::vector<std::string>>();
      if (j.contains("source")) {
        for (const auto& [k, v] : j.at("source").items()) rec.source[k] = v.is_string() ? v.get<std::string>() : v.dump();
      }
    } catch (const json::exception& e) {
      out.issues.push_back({lineno, "schema", e.what()});
      continue;
    }
    if (rec.pages.size() > kMaxTranscriptPages) {
      out.issues.push_back({lineno, "page_count",
                            rec.doc_id + " has " + std::to_string(rec.pages.size()) + " pages (max " +
                                std::to_string(kMaxTranscriptPages) + ")"});
      continue;
    }
    if (std::all_of(rec.pages.begin(), rec.pages.end(), [](const std::string& p) { return trim(p).empty(); })) {
      out.issues.push_back({lineno, "empty", rec.doc_id + " has no text"});
      continue;
    }
    out.records.push_back(std::move(rec));
  }
  return out;
}

TranscriptLoad load_transcripts(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read transcripts " + path.string());
  return parse_transcripts(is);
}

std::string join_pages(const TranscriptRecord& rec) {
  std::string out;
  for (const auto& p : rec.pages) {
    if (trim(p).empty()) continue;
    if (!out.empty()) out += "\n\n";
    out += p;
  }
  return out;
}

// ---- templates -------------------------------------------------------------

void PromptTemplate::validate() const {
  std::size_t count = 0;
  for (std::size_t p = text.find(kTranscriptionPlaceholder); p != std::string::npos;
       p = text.find(kTranscriptionPlaceholder, p + 1)) {
    ++count;
  }
  if (count != 1) {
    throw ConfigError("template " + std::to_string(id) + " must contain " + std::string(kTranscriptionPlaceholder) +
                      " exactly once (found " + std::to_string(count) + ")");
  }
}

const std::vector<PromptTemplate>& default_templates() {
  static const std::vector<PromptTemplate> templates = [] {
    const std::string format = "one or more pairs, each as a line 'Q: <question>' followed by a line 'A: <answer>'";
    std::vector<PromptTemplate> t = {
        {1, "factual",
         "Read the document below and write one short factual question a reader could answer from it, with its "
         "answer.\n\nDocument:\n{transcription}\n\nReply as:\nQ: <question>\nA: <answer>",
         format},
        {2, "extraction",
         "Below is the text of a document. Write three questions that each ask for a specific detail stated in "
         "the text (a name, a date, an amount). Answer each one in a few words.\n\n{transcription}\n\n"
         "Use the format Q: ... then A: ... for every pair.",
         format},
        {3, "numeric",
         "Find numbers, totals or table values in this document and ask questions about them. Give the exact "
         "figure as the answer.\n\n---\n{transcription}\n---\n\nFormat each pair as 'Q: ...' and 'A: ...'.",
         format},
        {4, "verification",
         "Write yes/no questions that can be checked against the document, and answer each with yes or no plus "
         "a short reason.\n\nText:\n{transcription}\n\nPairs:\nQ: ...\nA: ...",
         format},
        {5, "section",
         "Pick one section of the document and ask what it is about. Answer in one sentence using only what the "
         "section says.\n\n<<<\n{transcription}\n>>>\n\nQ: <question>\nA: <answer>",
         format},
    };
    for (const auto& x : t) x.validate();
    return t;
  }();
  return templates;
}

std::vector<PromptTemplate> load_templates(const std::filesystem::path& dir) {
  std::vector<PromptTemplate> out;
  for (int id = 1; id <= 5; ++id) {
    const auto path = dir / ("template_" + std::to_string(id) + ".txt");
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot read template " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    PromptTemplate t{id, path.stem().string(), ss.str(), default_templates()[static_cast<std::size_t>(id - 1)].output_format};
    t.validate();
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<std::string> render_prompts(const TranscriptRecord& rec, std::span<const PromptTemplate> templates) {
  const std::string body = join_pages(rec);
  std::vector<std::string> out;
  out.reserve(templates.size());
  for (const auto& t : templates) {
    const std::size_t at = t.text.find(kTranscriptionPlaceholder);
    if (at == std::string::npos) throw ConfigError("template " + std::to_string(t.id) + " has no placeholder");
    out.push_back(t.text.substr(0, at) + body + t.text.substr(at + kTranscriptionPlaceholder.size()));
  }
  return out;
}

// ---- generators ------------------------------------------------------------

namespace {

std::vector<std::string> words_of(const std::string& text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    if (std::isalpha(static_cast<unsigned char>(ch))) {
      cur += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    } else {
      if (cur.size() >= 4) words.push_back(cur);
      cur.clear();
    }
  }
  if (cur.size() >= 4) words.push_back(cur);
  return words;
}

}  // namespace

std::string MockGenerator::complete(const std::string& prompt, uint64_t seed) {
  Rng rng(Rng::derive(seed, stable_hash(prompt)));
  if (rng.uniform() < rates_.malformed) return "I could not find anything worth asking about in this document.";
  auto words = words_of(prompt);
  if (words.empty()) words.push_back("document");
  auto pick = [&] { return words[rng.below(words.size())]; };

  std::ostringstream os;
  const std::size_t pairs = 1 + rng.below(3);
  for (std::size_t i = 0; i < pairs; ++i) {
    os << "Q: What does the text say about " << pick() << "?\n";
    const double roll = rng.uniform();
    if (roll < rates_.unanswerable) {
      os << "A: This is unanswerable from the given page.\n";
    } else if (roll < rates_.unanswerable + rates_.code) {
      os << "A: ```def " << pick() << "(x): return x```\n";
    } else {
      os << "A: It mentions " << pick() << " and " << pick() << " " << (1 + rng.below(99)) << ".\n";
    }
  }
  return os.str();
}

HttpGenerator::HttpGenerator(std::string endpoint, std::string api_key, std::chrono::seconds timeout)
    : api_key_(std::move(api_key)), timeout_(timeout) {
  static const std::regex url(R"(^http://([^/:]+)(?::(\d+))?(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(endpoint, m, url)) {
    throw ConfigError("generator endpoint '" + endpoint + "' is not an http://host[:port]/path URL");
  }
  host_ = m[1];
  if (m[2].matched) port_ = std::stoi(m[2]);
  path_ = m[3].matched ? std::string(m[3]) : "/";
}

std::unique_ptr<HttpGenerator> HttpGenerator::from_env() {
  const char* endpoint = std::getenv("VLMKIT_GEN_ENDPOINT");
  if (!endpoint || !*endpoint) throw ConfigError("VLMKIT_GEN_ENDPOINT is not set");
  const char* key = std::getenv("VLMKIT_GEN_API_KEY");
  return std::make_unique<HttpGenerator>(endpoint, key ? key : "");
}

std::string HttpGenerator::complete(const std::string& prompt, uint64_t seed) {
  httplib::Client cli(host_, port_);
  cli.set_connection_timeout(timeout_);
  cli.set_read_timeout(timeout_);
  httplib::Headers headers;
  if (!api_key_.empty()) headers.emplace("Authorization", "Bearer " + api_key_);
  const json body = {{"prompt", prompt}, {"seed", seed}};
  auto res = cli.Post(path_, headers, body.dump(), "application/json");
  if (!res) throw TransientError("request to " + host_ + " failed: " + httplib::to_string(res.error()));
  if (res->status == 429 || res->status >= 500) {
    throw TransientError("generator returned HTTP " + std::to_string(res->status));
  }
  if (res->status != 200) throw IoError("generator returned HTTP " + std::to_string(res->status));
  try {
    return json::parse(res->body).at("text").get<std::string>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("generator reply is not {\"text\": ...}: ") + e.what());
  }
}

std::unique_ptr<Generator> make_generator(const std::string& name) {
  if (name == "mock") return std::make_unique<MockGenerator>();
  if (name == "http") return HttpGenerator::from_env();
  throw ConfigError("unknown generator '" + name + "' (expected mock or http)");
}

Generation generate_qa(const std::string& prompt, const std::string& doc_id, Generator& gen, uint64_t seed,
                       const RetryPolicy& policy) {
  if (policy.max_attempts < 1) throw ConfigError("retry policy needs at least one attempt");
  Generation g;
  const auto t0 = std::chrono::steady_clock::now();
  auto delay = policy.base_delay;
  while (true) {
    ++g.attempts;
    try {
      g.text = gen.complete(prompt, seed);
      break;
    } catch (const TransientError& e) {
      if (g.attempts >= policy.max_attempts) {
        throw GenerationError(doc_id, "gave up after " + std::to_string(g.attempts) + " attempts: " + e.what());
      }
      g.retry_log.push_back("attempt " + std::to_string(g.attempts) + " failed (" + e.what() + "), retrying in " +
                            std::to_string(delay.count()) + " ms");
      if (policy.sleep) {
        policy.sleep(delay);
      } else {
        std::this_thread::sleep_for(delay);
      }
      delay = std::chrono::milliseconds(static_cast<long long>(static_cast<double>(delay.count()) * policy.backoff));
    } catch (const GenerationError&) {
      throw;
    } catch (const std::exception& e) {
      throw GenerationError(doc_id, e.what());
    }
  }
  g.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return g;
}

// ---- filtering -------------------------------------------------------------

std::vector<std::string> FilterConfig::default_code_patterns() {
  return {
      R"(```)",                                    // fenced block
      R"(</?[A-Za-z][A-Za-z0-9]*(\s[^<>]*)?/?>)",  // html tag
      R"([{};]([^{};\n]*[{};]){2,})",              // three or more braces/semicolons on a line
      R"(\b(def|function|class)\s+[A-Za-z_]\w*\s*\()",
      R"(#include\s*[<"])",
  };
}

std::size_t FilterReport::dropped_total() const {
  std::size_t n = 0;
  for (const auto& [_, v] : dropped) n += v;
  return n;
}

double FilterReport::drop_fraction() const {
  return total == 0 ? 0.0 : static_cast<double>(dropped_total()) / static_cast<double>(total);
}

void FilterReport::add(const QARecord& r) {
  ++total;
  if (r.kept()) {
    ++kept;
  } else {
    ++dropped[*r.drop_reason];
  }
}

void FilterReport::merge(const FilterReport& other) {
  total += other.total;
  kept += other.kept;
  for (const auto& [k, v] : other.dropped) dropped[k] += v;
}

struct QAFilter::Compiled {
  std::vector<std::regex> patterns;
};

QAFilter::QAFilter(const FilterConfig& cfg) : cfg_(cfg) {
  auto c = std::make_shared<Compiled>();
  for (const auto& p : cfg_.code_patterns) {
    try {
      c->patterns.emplace_back(p, std::regex::ECMAScript | std::regex::optimize);
    } catch (const std::regex_error& e) {
      throw ConfigError("bad code pattern '" + p + "': " + e.what());
    }
  }
  std::transform(cfg_.banned_keyword.begin(), cfg_.banned_keyword.end(), cfg_.banned_keyword.begin(),
                 [](unsigned char ch) { return std::tolower(ch); });
  compiled_ = std::move(c);
}

bool QAFilter::looks_like_code(const std::string& text) const {
  return std::any_of(compiled_->patterns.begin(), compiled_->patterns.end(),
                     [&](const std::regex& re) { return std::regex_search(text, re); });
}

bool QAFilter::has_banned_keyword(const std::string& text) const {
  if (cfg_.banned_keyword.empty()) return false;
  std::string lower = text;
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char ch) { return std::tolower(ch); });
  return lower.find(cfg_.banned_keyword) != std::string::npos;
}

std::optional<std::string> QAFilter::verdict(const std::string& question, const std::string& answer) const {
  if (question.empty() || answer.empty()) return "empty";
  if (has_banned_keyword(answer) || has_banned_keyword(question)) return "unanswerable";
  if (looks_like_code(answer) || looks_like_code(question)) return "code";
  return std::nullopt;
}

ParsedOutput parse_and_filter(const std::string& raw, const std::string& doc_id, int template_id,
                              const QAFilter& filter) {
  struct Marker {
    char kind;
    std::size_t start;  // first character after "Q:"/"A:"
    std::size_t at;     // position of the marker
  };
  std::vector<Marker> markers;
  for (std::size_t i = 0; i + 1 < raw.size(); ++i) {
    if ((raw[i] == 'Q' || raw[i] == 'A') && raw[i + 1] == ':' &&
        (i == 0 || std::isspace(static_cast<unsigned char>(raw[i - 1])))) {
      markers.push_back({raw[i], i + 2, i});
    }
  }
  auto content = [&](std::size_t k) {
    const std::size_t end = k + 1 < markers.size() ? markers[k + 1].at : raw.size();
    return trim(std::string_view(raw).substr(markers[k].start, end - markers[k].start));
  };

  ParsedOutput out;
  auto emit = [&](std::string q, std::string a, std::optional<std::string> reason) {
    QARecord r{doc_id, std::move(q), std::move(a), template_id, std::move(reason)};
    if (!r.drop_reason) r.drop_reason = filter.verdict(r.question, r.answer);
    out.report.add(r);
    out.records.push_back(std::move(r));
  };

  if (markers.empty()) {
    emit("", trim(raw), "format");
    return out;
  }
  for (std::size_t k = 0; k < markers.size(); ++k) {
    if (markers[k].kind == 'Q' && k + 1 < markers.size() && markers[k + 1].kind == 'A') {
      emit(content(k), content(k + 1), std::nullopt);
      ++k;
    } else if (markers[k].kind == 'Q') {
      emit(content(k), "", "format");
    } else {
      emit("", content(k), "format");
    }
  }
  return out;
}

// ---- sharding --------------------------------------------------------------

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write " + path.string());
  os << bytes;
  if (!os) throw IoError("write failed for " + path.string());
}

}  // namespace

Manifest shard_dataset(std::span<const QARecord> records, const std::filesystem::path& out_dir, std::size_t shard_size) {
  if (shard_size < 1) throw ConfigError("shard_size must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  // stale shards from an earlier run would otherwise linger next to the manifest
  for (const auto& entry : std::filesystem::directory_iterator(out_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("shard-", 0) == 0 && entry.path().extension() == ".jsonl") std::filesystem::remove(entry.path());
  }

  Manifest m;
  std::string shard;
  std::size_t in_shard = 0;
  auto flush = [&] {
    if (in_shard == 0) return;
    std::ostringstream name;
    name << "shard-" << std::setw(5) << std::setfill('0') << m.shards.size() << ".jsonl";
    write_file(out_dir / name.str(), shard);
    m.shards.push_back({name.str(), in_shard, sha256_hex(shard)});
    shard.clear();
    in_shard = 0;
  };
  for (const auto& r : records) {
    if (!r.kept()) continue;
    ojson j;
    j["doc_id"] = r.doc_id;
    j["question"] = r.question;
    j["answer"] = r.answer;
    j["template_id"] = r.template_id;
    shard += j.dump() + "\n";
    ++in_shard;
    ++m.total_records;
    if (in_shard == shard_size) flush();
  }
  flush();

  std::string all;
  for (const auto& s : m.shards) all += s.sha256;
  m.digest = sha256_hex(all);

  ojson mj;
  mj["shard_size"] = shard_size;
  mj["total_records"] = m.total_records;
  mj["digest"] = m.digest;
  mj["shards"] = ojson::array();
  for (const auto& s : m.shards) {
    ojson sj;
    sj["file"] = s.file;
    sj["records"] = s.records;
    sj["sha256"] = s.sha256;
    mj["shards"].push_back(sj);
  }
  write_file(out_dir / "manifest.json", mj.dump(2) + "\n");
  return m;
}

// ---- pipeline --------------------------------------------------------------

DocgenResult run_docgen(const DocgenOptions& opts, Generator& gen) {
  for (const auto& t : opts.templates) t.validate();
  TranscriptLoad load = load_transcripts(opts.transcripts);
  const QAFilter filter(opts.filter);

  struct DocResult {
    std::vector<QARecord> records;
    FilterReport report;
    std::size_t retries = 0;
    std::exception_ptr error;
  };
  std::vector<DocResult> results(load.records.size());

  auto process = [&](std::size_t i) {
    const TranscriptRecord& rec = load.records[i];
    DocResult& out = results[i];
    try {
      const auto prompts = render_prompts(rec, opts.templates);
      for (std::size_t t = 0; t < prompts.size(); ++t) {
        const int tid = opts.templates[t].id;
        const uint64_t seed = Rng::derive(opts.seed, stable_hash(rec.doc_id) + static_cast<uint64_t>(tid));
        const Generation g = generate_qa(prompts[t], rec.doc_id, gen, seed, opts.retry);
        out.retries += g.retries();
        ParsedOutput parsed = parse_and_filter(g.text, rec.doc_id, tid, filter);
        out.report.merge(parsed.report);
        for (auto& r : parsed.records) out.records.push_back(std::move(r));
      }
    } catch (...) {
      out.error = std::current_exception();
    }
  };

  const std::size_t workers = std::max<std::size_t>(1, std::min(opts.workers, results.size()));
  if (workers <= 1) {
    for (std::size_t i = 0; i < results.size(); ++i) process(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < results.size();) process(i);
      });
    }
    for (auto& th : pool) th.join();
  }

  DocgenResult res;
  res.documents = load.records.size();
  res.load_issues = load.issues;
  std::vector<QARecord> all;
  for (auto& r : results) {
    if (r.error) std::rethrow_exception(r.error);
    res.report.merge(r.report);
    res.retries += r.retries;
    for (auto& q : r.records) all.push_back(std::move(q));
  }
  res.manifest = shard_dataset(all, opts.out_dir, opts.shard_size);

  if (!opts.report.empty()) {
    ojson j;
    j["documents"] = res.documents;
    j["load_issues"] = ojson::array();
    for (const auto& is : res.load_issues) {
      j["load_issues"].push_back({{"line", is.line}, {"reason", is.reason}, {"detail", is.detail}});
    }
    j["total"] = res.report.total;
    j["kept"] = res.report.kept;
    j["dropped"] = res.report.dropped;
    j["drop_fraction"] = res.report.drop_fraction();
    j["retries"] = res.retries;
    j["digest"] = res.manifest.digest;
    write_file(opts.report, j.dump(2) + "\n");
  }
  return res;
}

std::vector<TranscriptRecord> synthetic_transcripts(std::size_t count, uint64_t seed) {
  static const char* const nouns[] = {"invoice", "budget",  "contract", "report",  "meeting", "quarter",
                                      "revenue", "shipment", "policy",  "schedule", "payment", "customer",
                                      "warehouse", "audit",  "proposal", "balance"};
  static const char* const verbs[] = {"covers", "lists", "describes", "records", "confirms", "summarises"};
  Rng rng(seed);
  std::vector<TranscriptRecord> out;
  for (std::size_t i = 0; i < count; ++i) {
    TranscriptRecord rec;
    std::ostringstream id;
    id << "doc-" << std::setw(6) << std::setfill('0') << i;
    rec.doc_id = id.str();
    rec.source["origin"] = "synthetic";
    const std::size_t pages = 1 + rng.below(kMaxTranscriptPages);
    for (std::size_t p = 0; p < pages; ++p) {
      std::ostringstream page;
      const std::size_t sentences = 2 + rng.below(4);
      for (std::size_t s = 0; s < sentences; ++s) {
        page << "The " << nouns[rng.below(std::size(nouns))] << ' ' << verbs[rng.below(std::size(verbs))] << " the "
             << nouns[rng.below(std::size(nouns))] << " of " << (10 + rng.below(990)) << " units. ";
      }
      if (rng.below(50) == 0) page << "Literal {transcription} marker in the source.";
      rec.pages.push_back(page.str());
    }
    out.push_back(std::move(rec));
  }
  return out;
}

void write_transcripts(std::span<const TranscriptRecord> records, const std::filesystem::path& path) {
  std::ostringstream os;
  for (const auto& r : records) {
    ojson j;
    j["doc_id"] = r.doc_id;
    j["pages"] = r.pages;
    if (!r.source.empty()) j["source"] = r.source;
    os << j.dump() << "\n";
  }
  write_file(path, os.str());
}

}  // namespace vlmkit
