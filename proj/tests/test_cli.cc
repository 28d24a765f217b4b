#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "vlmkit/checkpoint.h"
#include "vlmkit/cli.h"
#include "vlmkit/image.h"

using namespace vlmkit;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("vlmkit_test_cli_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

struct Run {
  int code;
  std::string out, err;
};

Run run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = dispatch(args, out, err);
  return {code, out.str(), err.str()};
}

const std::string kStage1 = std::string(VLMKIT_SOURCE_DIR) + "/configs/table3_stage1.cfg";

}  // namespace

TEST_CASE("help and usage errors") {
  CHECK(run({"--help"}).code == 0);
  for (const char* verb : {"preprocess", "train", "gen-data", "eval", "inspect"}) {
    const Run r = run({verb, "--help"});
    CHECK(r.code == 0);
    CHECK_FALSE(r.out.empty());
  }
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  CHECK(run({"train", kStage1, "--no-such-flag"}).code == 2);
  CHECK(run({"eval", "--benchmark", kStage1}).code == 2);
  CHECK(run({"inspect"}).code == 2);
}

TEST_CASE("domain errors exit with 1") {
  auto dir = temp_dir("domain");
  std::ofstream(dir / "bad.cfg") << "[s]\nsteps = ten\n";
  const Run r = run({"train", (dir / "bad.cfg").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("error:") == 0);
  std::ofstream(dir / "junk.vlmk") << "not a checkpoint";
  CHECK(run({"inspect", "--checkpoint", (dir / "junk.vlmk").string()}).code == 1);
}

TEST_CASE("preprocess reports the visual token budget") {
  auto dir = temp_dir("pre");
  save_png(RawImage(800, 400), dir / "img.png");
  const Run r = run({"preprocess", "--image", (dir / "img.png").string(), "--out", (dir / "tiles").string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("grid 2x3") != std::string::npos);
  CHECK(r.out.find("tokens_per_tile 49") != std::string::npos);
  CHECK(r.out.find("image_tokens 343") != std::string::npos);
  CHECK(std::filesystem::exists(dir / "tiles" / "tile_2_3.png"));
  CHECK(std::filesystem::exists(dir / "tiles" / "global.png"));
}

TEST_CASE("inspect renders an assembled sequence") {
  auto dir = temp_dir("inspect");
  save_ppm(RawImage(40, 20), dir / "a.ppm");
  std::ofstream(dir / "ex.json")
      << R"({"images": ["a.ppm"], "turns": [{"role": "user", "text": "Q?"}, {"role": "assistant", "text": "A"}]})";
  const Run r = run({"inspect", "--sequence", (dir / "ex.json").string(), "--max-long-side", "364"});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("[image 0 tile 0 x49]") != std::string::npos);
  CHECK(r.out.find("[image 0 global x49]") != std::string::npos);
  CHECK(r.out.find("supervised 2") != std::string::npos);
}

TEST_CASE("train, inspect and eval round trip") {
  auto dir = temp_dir("train");
  const std::string ck = (dir / "model.vlmk").string();
  const Run t = run({"train", kStage1, "--desk-scale", "--synthetic", "4", "--stop-after", "2", "--checkpoint", ck,
                     "--metrics", (dir / "m.csv").string(), "--seed", "5"});
  REQUIRE_MESSAGE(t.code == 0, t.err);
  CHECK(t.out.find("stage1 step 1") != std::string::npos);
  CHECK(t.out.find("stage stage1: 2/10 steps") != std::string::npos);
  REQUIRE(std::filesystem::exists(ck));
  CHECK(Checkpoint::load(ck).meta.count("model.config") == 1);

  const Run i = run({"inspect", "--checkpoint", ck});
  REQUIRE(i.code == 0);
  CHECK(i.out.find("meta trainer.stage = stage1") != std::string::npos);

  save_ppm(RawImage(60, 30), dir / "doc.ppm");
  std::ofstream(dir / "docvqa_mini.jsonl")
      << R"({"id": "d1", "image": "doc.ppm", "question": "Total?", "references": ["42"]})" << "\n";
  const Run e = run({"eval", "--benchmark", (dir / "docvqa_mini.jsonl").string(), "--checkpoint", ck,
                     "--resize-override", "364", "--max-tokens", "4", "--report", (dir / "r.json").string()});
  REQUIRE_MESSAGE(e.code == 0, e.err);
  auto report = nlohmann::json::parse(std::ifstream(dir / "r.json"));
  CHECK(report[0]["benchmark"] == "docvqa");
  CHECK(report[0]["resize_longest_side"] == 364);
  CHECK(report[0]["count"] == 1);
}

TEST_CASE("gen-data writes shards and a manifest") {
  auto dir = temp_dir("gen");
  std::ofstream os(dir / "t.jsonl");
  for (int d = 0; d < 3; ++d)
    os << R"({"doc_id": "doc)" << d << R"(", "pages": ["Invoice number )" << d
       << R"( total 12 dollars", "Signed by the clerk"]})" << "\n";
  os.close();
  const Run r = run({"gen-data", "--transcripts", (dir / "t.jsonl").string(), "--out", (dir / "out").string(),
                     "--shard-size", "2", "--report", (dir / "report.json").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(r.out.find("documents 3") != std::string::npos);
  CHECK(std::filesystem::exists(dir / "out" / "manifest.json"));
  CHECK(std::filesystem::exists(dir / "report.json"));
  CHECK(run({"gen-data", "--transcripts", (dir / "t.jsonl").string(), "--out", (dir / "o2").string(), "--generator",
             "nope"})
            .code == 1);
}
