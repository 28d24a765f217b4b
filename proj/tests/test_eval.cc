#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "oracles.h"
#include "vlmkit/eval.h"
#include "vlmkit/rng.h"
#include "vlmkit/sequence.h"

using namespace vlmkit;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vlmkit_test_eval_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string golden(const std::string& name) {
  std::ifstream is(std::filesystem::path(VLMKIT_GOLDEN_DIR) / name, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

double anls1(const std::string& p, const std::string& r, double tau = 0.5) {
  const std::vector<std::string> refs = {r};
  return anls(p, refs, tau);
}

}  // namespace

TEST_CASE("anls fixed cases") {
  CHECK(anls1("hello", "hallo") == 0.8);
  CHECK(anls1("Hello ", "hello") == 1.0);
  CHECK(anls1("abc", "xyz") == 0.0);
  CHECK(anls1("ab", "abcd") == 0.5);  // exactly at the threshold counts
  CHECK(anls1("", "") == 1.0);
  const std::vector<std::string> refs = {"nope", "total 42", "42"};
  CHECK(anls("42", refs) == 1.0);
  CHECK_THROWS_AS(anls("x", std::vector<std::string>{}), MetricError);
  CHECK_THROWS_AS(anls1("x", "x", 1.5), MetricError);
  CHECK(anls1("caf\xc3\xa9", "cafe") == 0.75);  // one code point differs
}

TEST_CASE("anls matches the brute-force oracle on all short strings") {
  const auto strings = oracle::all_strings("ab", 6);
  for (const auto& a : strings)
    for (const auto& b : strings) REQUIRE(anls1(a, b) == oracle::anls(a, b));
}

TEST_CASE("anls matches the oracle on random pairs") {
  Rng rng(1);
  const std::string alphabet = "abcAB";
  auto random_string = [&] {
    std::string s;
    const std::size_t n = rng.below(16);
    for (std::size_t i = 0; i < n; ++i) s += alphabet[rng.below(alphabet.size())];
    return s;
  };
  for (int i = 0; i < 2000; ++i) {
    const std::string a = random_string(), b = random_string();
    REQUIRE(anls1(a, b) == oracle::anls(a, b));
  }
}

TEST_CASE("levenshtein counts code points") {
  CHECK(levenshtein(U"kitten", U"sitting") == 3);
  CHECK(levenshtein(U"", U"abc") == 3);
  CHECK(utf8_to_u32("\xe2\x86\x92x") == std::u32string{U'→', U'x'});
}

TEST_CASE("vqa normalization") {
  CHECK(vqa_normalize("Two") == "2");
  CHECK(vqa_normalize("The Cat.") == "cat");
  CHECK(vqa_normalize("an apple") == "apple");
  CHECK(vqa_normalize("dont") == "don't");
  CHECK(vqa_normalize("3.5") == "3.5");
  CHECK(vqa_normalize("1,000") == "1000");
  CHECK(vqa_normalize("yes!") == "yes");
  CHECK(vqa_normalize("red-blue") == "red blue");
  CHECK(vqa_normalize("red - blue") == "red blue");
  CHECK(vqa_normalize("  Hello\nWorld ") == "hello world");
}

TEST_CASE("vqa accuracy consensus formula") {
  auto refs = [](std::size_t matches) {
    std::vector<std::string> r(10, "other");
    for (std::size_t i = 0; i < matches; ++i) r[i] = "yes";
    return r;
  };
  CHECK(vqa_accuracy("yes", refs(0)) == 0.0);
  CHECK(vqa_accuracy("yes", refs(1)) == 1.0 / 3.0);
  CHECK(vqa_accuracy("yes", refs(2)) == 2.0 / 3.0);
  CHECK(vqa_accuracy("yes", refs(3)) == 1.0);
  CHECK(vqa_accuracy("yes", refs(10)) == 1.0);
  CHECK(vqa_accuracy("Yes.", refs(3)) == 1.0);
  CHECK_THROWS_AS(vqa_accuracy("x", std::vector<std::string>{}), MetricError);
}

TEST_CASE("multiple-choice letter extraction") {
  CHECK(mcq_extract_letter("B", 4) == 'B');
  CHECK(mcq_extract_letter("b", 4) == 'B');
  CHECK(mcq_extract_letter("The answer is C.", 4) == 'C');
  CHECK(mcq_extract_letter("(d) black", 4) == 'D');
  CHECK(mcq_extract_letter("answer: b.", 4) == 'B');
  CHECK(mcq_extract_letter("A chart shows B", 4) == 'B');
  CHECK(mcq_extract_letter("I think D", 4) == 'D');
  CHECK_FALSE(mcq_extract_letter("E", 4));
  CHECK_FALSE(mcq_extract_letter("blue", 4));
  CHECK_FALSE(mcq_extract_letter("a", 1));
}

TEST_CASE("prompt formats match the golden files byte for byte") {
  EvalExample ex;
  ex.question = "Which colour is the sky?";
  ex.choices = {"red", "blue", "green", "black"};
  CHECK(format_mcq_prompt(ex) == golden("mcq_prompt.txt"));
  CHECK(format_textvqa_prompt("What time is it?") == golden("textvqa_prompt.txt"));
  CHECK(format_docvqa_prompt("What is the invoice total?") == golden("docvqa_prompt.txt"));
  EvalExample none;
  CHECK_THROWS_AS(format_mcq_prompt(none), FormatError);
  EvalExample many;
  many.choices.assign(27, "x");
  CHECK_THROWS_AS(format_mcq_prompt(many), FormatError);
}

TEST_CASE("benchmark specs") {
  CHECK(textvqa_spec().resize_longest_side == 1456);
  CHECK(docvqa_spec().resize_longest_side == 1820);
  CHECK(docvqa_spec().metric == MetricKind::anls);
  CHECK(spec_for("data/DocVQA_val.jsonl").name == "docvqa");
  CHECK(spec_for("textvqa").metric == MetricKind::vqa_acc);
  CHECK(spec_for("mmmu.jsonl").metric == MetricKind::exact_letter);
  BenchmarkSpec bad = textvqa_spec();
  bad.resize_longest_side = 1000;
  CHECK_THROWS_AS(bad.validate(364), ConfigError);
  CHECK(apply_stop_words("blue\nQuestion: x", default_stop_words()) == "blue");
}

TEST_CASE("run_benchmark resizes, scores and reports") {
  auto dir = temp_dir("run");
  save_ppm(RawImage(100, 50), dir / "wide.ppm");
  save_ppm(RawImage(30, 60), dir / "tall.ppm");
  std::ofstream(dir / "docvqa.jsonl")
      << R"({"id": "1", "image": "wide.ppm", "question": "q1", "references": ["hello"]})" << "\n"
      << R"({"id": "2", "image": "tall.ppm", "question": "q2", "references": ["abc"]})" << "\n"
      << R"({"id": "3", "image": "missing.ppm", "question": "q3", "references": ["x"]})" << "\n";
  auto examples = load_benchmark(dir / "docvqa.jsonl");
  REQUIRE(examples.size() == 3);

  std::vector<std::pair<std::size_t, std::size_t>> sizes;
  std::vector<std::string> prompts;
  ModelRunner runner = [&](const EvalInput& in) {
    sizes.emplace_back(in.image.width, in.image.height);
    prompts.push_back(in.prompt);
    return in.example.id == "1" ? std::string("hallo\nQuestion: more") : std::string("zzz");
  };
  RunOptions opts;
  opts.image_root = dir;
  opts.per_example_jsonl = dir / "per.jsonl";
  opts.summary_json = dir / "summary.json";
  MetricResult r = run_benchmark(docvqa_spec(), examples, runner, opts);
  CHECK(r.count() == 2);
  REQUIRE(r.errors.size() == 1);
  CHECK(r.errors[0].rfind("3:", 0) == 0);
  CHECK(sizes == std::vector<std::pair<std::size_t, std::size_t>>{{1820, 910}, {910, 1820}});
  CHECK(prompts[0] == format_docvqa_prompt("q1"));
  CHECK(r.examples[0].prediction == "hallo");
  CHECK(r.examples[0].score == 0.8);
  CHECK(r.examples[1].score == 0.0);
  CHECK(r.aggregate == 0.4);
  auto summary = nlohmann::json::parse(std::ifstream(dir / "summary.json"));
  CHECK(summary["resize_longest_side"] == 1820);
  CHECK(summary["count"] == 2);

  sizes.clear();
  run_benchmark(textvqa_spec(), examples, runner, opts);
  CHECK(sizes[0] == std::pair<std::size_t, std::size_t>{1456, 728});
  sizes.clear();
  opts.resize_override = 728;
  run_benchmark(textvqa_spec(), examples, runner, opts);
  CHECK(sizes[0] == std::pair<std::size_t, std::size_t>{728, 364});

  std::vector<std::pair<BenchmarkSpec, MetricResult>> rows = {{docvqa_spec(), r}};
  CHECK(format_summary_table(rows).find("docvqa") != std::string::npos);
}

TEST_CASE("benchmark loader validates records") {
  auto dir = temp_dir("load");
  std::ofstream(dir / "a.jsonl") << R"({"image": "x", "question": "q", "choices": ["a"], "answer_letter": "A"})" << "\n";
  CHECK_THROWS_AS(load_benchmark(dir / "a.jsonl"), DataError);
  std::ofstream(dir / "b.jsonl") << R"({"image": "x", "question": "q", "choices": ["a", "b"], "answer_letter": "C"})" << "\n";
  CHECK_THROWS_AS(load_benchmark(dir / "b.jsonl"), DataError);
  std::ofstream(dir / "c.jsonl") << R"({"image": "x", "question": "q", "references": []})" << "\n";
  CHECK_THROWS_AS(load_benchmark(dir / "c.jsonl"), DataError);
  CHECK_THROWS_AS(load_benchmark(dir / "none.jsonl"), IoError);
}
