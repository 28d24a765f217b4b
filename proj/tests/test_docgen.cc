#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "json.hpp"
#include "vlmkit/docgen.h"

using namespace vlmkit;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vlmkit_test_docgen_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

class ScriptedGenerator : public Generator {
 public:
  explicit ScriptedGenerator(std::vector<std::function<std::string()>> steps) : steps_(std::move(steps)) {}
  std::string complete(const std::string&, uint64_t) override { return steps_.at(calls_++)(); }
  std::string name() const override { return "scripted"; }
  std::size_t calls() const { return calls_; }

 private:
  std::vector<std::function<std::string()>> steps_;
  std::size_t calls_ = 0;
};

RetryPolicy no_sleep(std::vector<long long>* delays = nullptr) {
  RetryPolicy p;
  p.sleep = [delays](std::chrono::milliseconds d) {
    if (delays) delays->push_back(d.count());
  };
  return p;
}

}  // namespace

TEST_CASE("transcript loader reports and skips bad lines") {
  std::istringstream in(
      "{\"doc_id\": \"a\", \"pages\": [\"p1\", \"\", \"p3\"], \"source\": {\"n\": 3}}\n"
      "\n"
      "not json\n"
      "{\"doc_id\": \"b\"}\n"
      "{\"doc_id\": \"c\", \"pages\": [\"1\", \"2\", \"3\", \"4\", \"5\"]}\n"
      "{\"doc_id\": \"d\", \"pages\": [\"  \"]}\n");
  TranscriptLoad load = parse_transcripts(in);
  CHECK(load.lines == 5);
  REQUIRE(load.records.size() == 1);
  CHECK(load.records[0].source.at("n") == "3");
  CHECK(join_pages(load.records[0]) == "p1\n\np3");
  REQUIRE(load.issues.size() == 4);
  CHECK(load.issues[0].line == 3);
  CHECK(load.issues[0].reason == "json");
  CHECK(load.issues[1].reason == "schema");
  CHECK(load.issues[2].reason == "page_count");
  CHECK(load.issues[3].reason == "empty");
  CHECK_THROWS_AS(load_transcripts("/nonexistent/t.jsonl"), IoError);
}

TEST_CASE("templates hold one placeholder and substitute once") {
  CHECK(default_templates().size() == 5);
  TranscriptRecord rec{"d", {"body has {transcription} inside"}, {}};
  auto prompts = render_prompts(rec, default_templates());
  REQUIRE(prompts.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    const auto& t = default_templates()[i].text;
    const auto at = t.find(kTranscriptionPlaceholder);
    const std::string expect = t.substr(0, at) + rec.pages[0] + t.substr(at + kTranscriptionPlaceholder.size());
    CHECK(prompts[i] == expect);
  }
  CHECK_THROWS_AS((PromptTemplate{9, "x", "no slot", ""}.validate()), ConfigError);
  CHECK_THROWS_AS((PromptTemplate{9, "x", "{transcription}{transcription}", ""}.validate()), ConfigError);

  auto dir = temp_dir("templates");
  for (int i = 1; i <= 5; ++i) std::ofstream(dir / ("template_" + std::to_string(i) + ".txt")) << "T" << i << ": {transcription}";
  auto loaded = load_templates(dir);
  CHECK(loaded[2].text == "T3: {transcription}");
  std::filesystem::remove(dir / "template_4.txt");
  CHECK_THROWS_AS(load_templates(dir), IoError);
}

TEST_CASE("mock generator is deterministic per prompt and seed") {
  MockGenerator g;
  CHECK(g.complete("some prompt text", 1) == g.complete("some prompt text", 1));
  bool differs = false;
  for (uint64_t s = 2; s < 10; ++s) differs |= g.complete("some prompt text", 1) != g.complete("some prompt text", s);
  CHECK(differs);
}

TEST_CASE("filter verdicts") {
  QAFilter f;
  CHECK_FALSE(f.verdict("What is the total?", "42 dollars"));
  CHECK(f.verdict("What?", "This is Unanswerable.") == "unanswerable");
  CHECK(f.verdict("unanswerable?", "x") == "unanswerable");
  CHECK(f.verdict("Code?", "```x = 1```") == "code");
  CHECK(f.verdict("Code?", "<div class=\"a\">hi</div>") == "code");
  CHECK(f.verdict("Code?", "for (i = 0; i < n; i++) { x; }") == "code");
  CHECK(f.verdict("Code?", "def parse(x): return x") == "code");
  CHECK(f.verdict("Code?", "#include <stdio.h>") == "code");
  CHECK(f.verdict("", "a") == "empty");
  CHECK_FALSE(f.verdict("Is 3 < 5?", "yes; it is"));
  CHECK_FALSE(f.verdict("What class is it?", "The defined function class"));
  FilterConfig custom;
  custom.code_patterns = {"SELECT"};
  custom.banned_keyword = "";
  QAFilter g(custom);
  CHECK(g.verdict("q", "SELECT * FROM t") == "code");
  CHECK_FALSE(g.verdict("q", "unanswerable"));
  custom.code_patterns = {"("};
  CHECK_THROWS_AS(QAFilter{custom}, ConfigError);
}

TEST_CASE("parsing raw output into pairs") {
  QAFilter f;
  auto p = parse_and_filter("Q: one?\nA: first\nQ: two?\nA: it is unanswerable\nQ: orphan\n", "d", 2, f);
  REQUIRE(p.records.size() == 3);
  CHECK(p.records[0].question == "one?");
  CHECK(p.records[0].answer == "first");
  CHECK(p.records[0].template_id == 2);
  CHECK(p.records[0].kept());
  CHECK(p.records[1].drop_reason == "unanswerable");
  CHECK(p.records[2].drop_reason == "format");
  CHECK(p.report.total == 3);
  CHECK(p.report.kept == 1);
  CHECK(p.report.conserved());
  auto none = parse_and_filter("nothing here", "d", 1, f);
  REQUIRE(none.records.size() == 1);
  CHECK(none.records[0].drop_reason == "format");
  auto inline_markers = parse_and_filter("Q: what is X:Y? A: ratio", "d", 1, f);
  REQUIRE(inline_markers.records.size() == 1);
  CHECK(inline_markers.records[0].question == "what is X:Y?");
}

TEST_CASE("retries back off and then give up") {
  std::vector<long long> delays;
  ScriptedGenerator flaky({[]() -> std::string { throw TransientError("503"); },
                           []() -> std::string { throw TransientError("timeout"); }, [] { return std::string("ok"); }});
  Generation g = generate_qa("p", "doc", flaky, 0, no_sleep(&delays));
  CHECK(g.text == "ok");
  CHECK(g.attempts == 3);
  CHECK(g.retries() == 2);
  CHECK(g.retry_log.size() == 2);
  CHECK(delays == std::vector<long long>{200, 400});

  ScriptedGenerator dead({[]() -> std::string { throw TransientError("503"); },
                          []() -> std::string { throw TransientError("503"); },
                          []() -> std::string { throw TransientError("503"); }});
  try {
    generate_qa("p", "doc-7", dead, 0, no_sleep());
    FAIL("expected GenerationError");
  } catch (const GenerationError& e) {
    CHECK(e.doc_id() == "doc-7");
  }
  CHECK(dead.calls() == 3);

  ScriptedGenerator permanent({[]() -> std::string { throw IoError("401"); }});
  CHECK_THROWS_AS(generate_qa("p", "doc", permanent, 0, no_sleep()), GenerationError);
  CHECK(permanent.calls() == 1);
}

TEST_CASE("http generator talks json and maps status codes") {
  httplib::Server server;
  std::atomic<int> calls{0};
  server.Post("/gen", [&](const httplib::Request& req, httplib::Response& res) {
    if (calls++ == 0) {
      res.status = 503;
      return;
    }
    auto body = nlohmann::json::parse(req.body);
    CHECK(req.get_header_value("Authorization") == "Bearer k");
    res.set_content(nlohmann::json{{"text", "Q: " + body["prompt"].get<std::string>() + "\nA: yes"}}.dump(),
                    "application/json");
  });
  server.Post("/deny", [](const httplib::Request&, httplib::Response& res) { res.status = 403; });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  HttpGenerator gen("http://127.0.0.1:" + std::to_string(port) + "/gen", "k", std::chrono::seconds(5));
  Generation g = generate_qa("hello", "d", gen, 1, no_sleep());
  CHECK(g.text == "Q: hello\nA: yes");
  CHECK(g.retries() == 1);
  HttpGenerator deny("http://127.0.0.1:" + std::to_string(port) + "/deny", "", std::chrono::seconds(5));
  CHECK_THROWS_AS(deny.complete("x", 0), IoError);
  server.stop();
  th.join();
  CHECK_THROWS_AS(HttpGenerator("https://example.com/x", ""), ConfigError);
  CHECK_THROWS_AS(make_generator("gpt"), ConfigError);
}

TEST_CASE("sharding writes kept records and a manifest") {
  auto dir = temp_dir("shards");
  std::ofstream(dir / "shard-00009.jsonl") << "stale\n";
  std::vector<QARecord> recs;
  for (int i = 0; i < 5; ++i) recs.push_back({"d" + std::to_string(i), "q", "a", 1, std::nullopt});
  recs.push_back({"x", "q", "a", 1, std::string("code")});
  Manifest m = shard_dataset(recs, dir, 2);
  CHECK(m.total_records == 5);
  REQUIRE(m.shards.size() == 3);
  CHECK(m.shards[2].records == 1);
  CHECK_FALSE(std::filesystem::exists(dir / "shard-00009.jsonl"));
  const std::string first = slurp(dir / "shard-00000.jsonl");
  CHECK(first == "{\"doc_id\":\"d0\",\"question\":\"q\",\"answer\":\"a\",\"template_id\":1}\n"
                 "{\"doc_id\":\"d1\",\"question\":\"q\",\"answer\":\"a\",\"template_id\":1}\n");
  CHECK(m.shards[0].sha256 == sha256_hex(first));
  auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
  CHECK(manifest["total_records"] == 5);
  CHECK(manifest["digest"] == m.digest);
  CHECK_THROWS_AS(shard_dataset(recs, dir, 0), ConfigError);
}

TEST_CASE("sha256 of known inputs") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("pipeline output does not depend on the worker count") {
  auto dir = temp_dir("pipeline");
  write_transcripts(synthetic_transcripts(60, 3), dir / "t.jsonl");
  std::ofstream(dir / "t.jsonl", std::ios::app) << "broken line\n";
  MockGenerator gen;
  DocgenOptions a;
  a.transcripts = dir / "t.jsonl";
  a.out_dir = dir / "one";
  a.report = dir / "one.json";
  a.shard_size = 50;
  a.retry = no_sleep();
  DocgenOptions b = a;
  b.out_dir = dir / "four";
  b.report = dir / "four.json";
  b.workers = 4;
  DocgenResult ra = run_docgen(a, gen), rb = run_docgen(b, gen);
  CHECK(ra.documents == 60);
  CHECK(ra.load_issues.size() == 1);
  CHECK(ra.manifest.digest == rb.manifest.digest);
  CHECK(slurp(dir / "one" / "manifest.json") == slurp(dir / "four" / "manifest.json"));
  CHECK(ra.report.conserved());
  CHECK(ra.report.total > 60 * 5 - 1);
  CHECK(ra.report.kept == ra.manifest.total_records);
  CHECK(ra.report.drop_fraction() > 0.0);
  CHECK(ra.report.drop_fraction() < 0.5);
  auto report = nlohmann::json::parse(slurp(dir / "one.json"));
  CHECK(report["kept"] == ra.report.kept);
}
