#include "vlmkit/eval.h"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iomanip>
#include <map>
#include <regex>
#include <sstream>

#include "json.hpp"
#include "vlmkit/config.h"
#include "vlmkit/model.h"

namespace vlmkit {

using nlohmann::json;
using ojson = nlohmann::ordered_json;

std::string to_string(MetricKind m) {
  switch (m) {
    case MetricKind::anls:
      return "anls";
    case MetricKind::vqa_acc:
      return "vqa_acc";
    case MetricKind::exact_letter:
      return "exact_letter";
  }
  return "?";
}

void BenchmarkSpec::validate(std::size_t tile_side) const {
  if (resize_longest_side == 0 || tile_side == 0 || resize_longest_side % tile_side != 0) {
    throw ConfigError("benchmark '" + name + "': resize " + std::to_string(resize_longest_side) +
                      " is not a positive multiple of tile side " + std::to_string(tile_side));
  }
  if (!(anls_tau >= 0.0 && anls_tau < 1.0)) throw ConfigError("anls tau must be in [0, 1)");
}

BenchmarkSpec textvqa_spec(std::size_t tile_side) {
  return {"textvqa", TaskKind::open_ended, PromptKind::textvqa, 4 * tile_side, MetricKind::vqa_acc, 0.5};
}

BenchmarkSpec docvqa_spec(std::size_t tile_side) {
  return {"docvqa", TaskKind::open_ended, PromptKind::docvqa, 5 * tile_side, MetricKind::anls, 0.5};
}

BenchmarkSpec mcq_spec(const std::string& name, std::size_t tile_side) {
  return {name, TaskKind::mcq, PromptKind::mcq, 4 * tile_side, MetricKind::exact_letter, 0.5};
}

BenchmarkSpec spec_for(const std::string& name, std::size_t tile_side) {
  std::string stem = std::filesystem::path(name).stem().string();
  std::transform(stem.begin(), stem.end(), stem.begin(), [](unsigned char c) { return std::tolower(c); });
  if (stem.find("docvqa") != std::string::npos) return docvqa_spec(tile_side);
  if (stem.find("textvqa") != std::string::npos) return textvqa_spec(tile_side);
  return mcq_spec(stem, tile_side);
}

std::vector<EvalExample> load_benchmark(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read benchmark " + path.string());
  std::vector<EvalExample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    try {
      const json j = json::parse(line);
      EvalExample ex;
      ex.id = j.value("id", std::to_string(lineno));
      ex.image = j.at("image").get<std::string>();
      ex.question = j.at("question").get<std::string>();
      if (j.contains("choices")) {
        ex.choices = j.at("choices").get<std::vector<std::string>>();
        ex.answer_letter = j.at("answer_letter").get<std::string>();
        if (ex.choices.size() < 2 || ex.choices.size() > 26) throw DataError(where + ": mcq needs 2 to 26 choices");
        if (ex.answer_letter.size() != 1 || ex.answer_letter[0] < 'A' ||
            ex.answer_letter[0] >= static_cast<char>('A' + ex.choices.size())) {
          throw DataError(where + ": answer_letter '" + ex.answer_letter + "' is not one of the choices");
        }
      } else {
        ex.references = j.at("references").get<std::vector<std::string>>();
        if (ex.references.empty()) throw DataError(where + ": open-ended example needs at least one reference");
      }
      out.push_back(std::move(ex));
    } catch (const json::exception& e) {
      throw DataError(where + ": " + e.what());
    }
  }
  return out;
}

// ---- prompts ---------------------------------------------------------------

std::string format_mcq_prompt(const EvalExample& ex) {
  if (ex.choices.empty()) throw FormatError("multiple-choice prompt without choices");
  if (ex.choices.size() > 26) {
    throw FormatError(std::to_string(ex.choices.size()) + " choices do not fit letters A-Z");
  }
  std::string out = "Question: " + ex.question + "\nChoices:\n";
  for (std::size_t i = 0; i < ex.choices.size(); ++i) {
    out += static_cast<char>('A' + i);
    out += ". " + ex.choices[i] + "\n";
  }
  out += "Answer with the letter.";
  return out;
}

std::string format_textvqa_prompt(const std::string& question) {
  return "Answer the following question about the image using as few words as possible. Follow these additional "
         "instructions:\n"
         "-Always answer a binary question with Yes or No.\n"
         "-When asked what time it is, reply with the time seen in the image.\n"
         "-Do not put any full stops at the end of the answer.\n"
         "-Do not put quotation marks around the answer.\n"
         "-An answer with one or two words is favorable.\n"
         "-Do not apply common sense knowledge. The answer can be found in the image.\n"
         "Question: " +
         question;
}

std::string format_docvqa_prompt(const std::string& question) {
  return "Give a short and terse answer to the following question. Do not paraphrase or reformat the text you see "
         "in the image. Do not include any full stops. Just give the answer without additional explanation.\n"
         "Question: " +
         question;
}

std::string format_prompt(const BenchmarkSpec& spec, const EvalExample& ex) {
  switch (spec.prompt) {
    case PromptKind::mcq:
      return format_mcq_prompt(ex);
    case PromptKind::textvqa:
      return format_textvqa_prompt(ex.question);
    case PromptKind::docvqa:
      return format_docvqa_prompt(ex.question);
  }
  throw FormatError("unknown prompt kind");
}

std::string apply_stop_words(const std::string& text, std::span<const std::string> stop_words) {
  std::size_t cut = text.size();
  for (const auto& w : stop_words) {
    if (w.empty()) continue;
    cut = std::min(cut, text.find(w));
  }
  std::string out = text.substr(0, cut);
  while (!out.empty() && std::isspace(static_cast<unsigned char>(out.back()))) out.pop_back();
  return out;
}

// ---- metrics ---------------------------------------------------------------

std::u32string utf8_to_u32(const std::string& s) {
  std::u32string out;
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = 1;
    char32_t cp = c;
    if (c >= 0xF0 && c < 0xF8) {
      len = 4;
      cp = c & 0x07;
    } else if (c >= 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if (c >= 0xC0) {
      len = 2;
      cp = c & 0x1F;
    }
    if (len > 1 && i + len <= s.size()) {
      for (std::size_t k = 1; k < len; ++k) cp = (cp << 6) | (static_cast<unsigned char>(s[i + k]) & 0x3F);
    } else {
      len = 1;  // stray byte: keep as is
      cp = c;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::size_t levenshtein(const std::u32string& a, const std::u32string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

namespace {

std::string lower_ascii(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

double anls(const std::string& prediction, std::span<const std::string> references, double tau) {
  if (references.empty()) throw MetricError("anls needs at least one reference");
  if (!(tau >= 0.0 && tau < 1.0)) throw MetricError("anls tau must be in [0, 1)");
  const std::u32string p = utf8_to_u32(lower_ascii(trim(prediction)));
  double best = 0.0;
  for (const auto& ref : references) {
    const std::u32string r = utf8_to_u32(lower_ascii(trim(ref)));
    const std::size_t longest = std::max(p.size(), r.size());
    const double sim =
        longest == 0 ? 1.0 : 1.0 - static_cast<double>(levenshtein(p, r)) / static_cast<double>(longest);
    best = std::max(best, sim);
  }
  return best < tau ? 0.0 : best;
}

std::string vqa_normalize(const std::string& answer) {
  static const std::string punct = ";/[]\"{}()=+\\_-><@`,?!";
  static const std::regex comma_digits(R"((\d)(,)(\d))");
  static const std::map<std::string, std::string> numbers = {
      {"none", "0"}, {"zero", "0"}, {"one", "1"}, {"two", "2"},   {"three", "3"}, {"four", "4"},
      {"five", "5"}, {"six", "6"},  {"seven", "7"}, {"eight", "8"}, {"nine", "9"},  {"ten", "10"}};
  static const std::map<std::string, std::string> contractions = {
      {"aint", "ain't"},     {"arent", "aren't"},   {"cant", "can't"},       {"couldnt", "couldn't"},
      {"didnt", "didn't"},   {"doesnt", "doesn't"}, {"dont", "don't"},       {"hadnt", "hadn't"},
      {"hasnt", "hasn't"},   {"havent", "haven't"}, {"hes", "he's"},         {"im", "i'm"},
      {"isnt", "isn't"},     {"itd", "it'd"},       {"itll", "it'll"},       {"ive", "i've"},
      {"lets", "let's"},     {"shes", "she's"},     {"shouldnt", "shouldn't"}, {"thats", "that's"},
      {"theres", "there's"}, {"theyre", "they're"}, {"wasnt", "wasn't"},     {"werent", "weren't"},
      {"whats", "what's"},   {"wont", "won't"},     {"wouldnt", "wouldn't"}, {"youre", "you're"},
  };

  std::string s = answer;
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\t', ' ');
  s = lower_ascii(trim(s));

  const bool digit_comma = std::regex_search(s, comma_digits);
  std::string out = s;
  for (char p : punct) {
    const std::string ps(1, p);
    const bool spaced = s.find(ps + " ") != std::string::npos || s.find(" " + ps) != std::string::npos;
    std::string next;
    for (char c : out) {
      if (c != p) {
        next += c;
      } else if (!(spaced || digit_comma)) {
        next += ' ';
      }
    }
    out = next;
  }
  // periods go unless they sit before a digit
  std::string no_period;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] == '.' && !(i + 1 < out.size() && std::isdigit(static_cast<unsigned char>(out[i + 1])))) continue;
    no_period += out[i];
  }

  std::istringstream words(no_period);
  std::string w, result;
  while (words >> w) {
    if (auto n = numbers.find(w); n != numbers.end()) w = n->second;
    if (w == "a" || w == "an" || w == "the") continue;
    if (auto c = contractions.find(w); c != contractions.end()) w = c->second;
    if (!result.empty()) result += ' ';
    result += w;
  }
  return result;
}

double vqa_accuracy(const std::string& prediction, std::span<const std::string> references) {
  if (references.empty()) throw MetricError("vqa_accuracy needs at least one reference");
  const std::string p = vqa_normalize(prediction);
  std::size_t matches = 0;
  for (const auto& r : references) matches += vqa_normalize(r) == p ? 1 : 0;
  return std::min(static_cast<double>(matches) / 3.0, 1.0);
}

std::optional<char> mcq_extract_letter(const std::string& generation, std::size_t n_choices) {
  if (n_choices < 2 || n_choices > 26) return std::nullopt;
  const std::string g = trim(generation);
  const char last = static_cast<char>('A' + n_choices - 1);
  auto in_range = [&](char c) { return c >= 'A' && c <= last; };
  if (g.size() == 1) {
    const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(g[0])));
    if (in_range(c)) return c;
  }
  auto alnum = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  for (std::size_t i = 0; i < g.size(); ++i) {
    const char c = g[i];
    if (!std::isalpha(static_cast<unsigned char>(c))) continue;
    const char prev = i > 0 ? g[i - 1] : ' ';
    const char next = i + 1 < g.size() ? g[i + 1] : ' ';
    if (alnum(prev) || alnum(next)) continue;
    if (std::isupper(static_cast<unsigned char>(c))) {
      // "A chart ..." / "I think ..." use the letter as a word
      const bool wordlike = (c == 'A' || c == 'I') && next == ' ' && i + 2 < g.size() &&
                            std::islower(static_cast<unsigned char>(g[i + 2]));
      if (in_range(c) && !wordlike) return c;
    } else {
      const bool marked = prev == '(' || next == '.' || next == ')' || next == ':';
      const char up = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
      if (marked && in_range(up)) return up;
    }
  }
  return std::nullopt;
}

double score_example(const BenchmarkSpec& spec, const EvalExample& ex, const std::string& prediction) {
  switch (spec.metric) {
    case MetricKind::anls:
      return anls(prediction, ex.references, spec.anls_tau);
    case MetricKind::vqa_acc:
      return vqa_accuracy(prediction, ex.references);
    case MetricKind::exact_letter: {
      const auto letter = mcq_extract_letter(prediction, ex.choices.size());
      return letter && ex.answer_letter.size() == 1 && *letter == ex.answer_letter[0] ? 1.0 : 0.0;
    }
  }
  throw MetricError("unknown metric");
}

// ---- running ---------------------------------------------------------------

ModelRunner model_runner(const VisionLanguageModel& model, std::size_t max_tokens) {
  return [&model, max_tokens](const EvalInput& in) {
    const std::size_t tile = model.config().tile_side;
    const std::size_t per_axis = std::clamp<std::size_t>(in.max_long_side / tile, 1, model.config().max_grid);
    const TileConfig tc{tile, tile, per_axis * tile};
    std::vector<TileGrid> grids{preprocess_image(in.image, tc)};
    std::vector<ChatTurn> turns{{Role::user, {ImageRef{0}, in.prompt}}};
    return model.generate(grids, turns, max_tokens);
  };
}

MetricResult run_benchmark(const BenchmarkSpec& spec, std::span<const EvalExample> examples, const ModelRunner& runner,
                           const RunOptions& opts) {
  const std::size_t target = opts.resize_override.value_or(spec.resize_longest_side);
  if (target == 0) throw ConfigError("resize target must be > 0");
  MetricResult res;
  std::string per_example;
  double total = 0.0;
  for (const EvalExample& ex : examples) {
    std::filesystem::path ip = ex.image;
    if (ip.is_relative() && !opts.image_root.empty()) ip = opts.image_root / ip;
    RawImage img;
    try {
      img = load_image(ip);
    } catch (const Error& e) {
      res.errors.push_back(ex.id + ": " + e.what());
      continue;
    }
    const RawImage resized = resize_longest_side(img, target);
    const std::string prompt = format_prompt(spec, ex);
    const std::string raw = runner(EvalInput{ex, resized, prompt, target});
    const std::string prediction = apply_stop_words(raw, default_stop_words());
    const double s = score_example(spec, ex, prediction);
    total += s;
    res.examples.push_back({ex.id, prediction, s});
    ojson j;
    j["id"] = ex.id;
    j["prediction"] = prediction;
    j["score"] = s;
    per_example += j.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
  }
  res.aggregate = res.examples.empty() ? 0.0 : total / static_cast<double>(res.examples.size());

  auto write = [](const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot write " + p.string());
    os << bytes;
  };
  if (!opts.per_example_jsonl.empty()) write(opts.per_example_jsonl, per_example);
  if (!opts.summary_json.empty()) {
    ojson j;
    j["benchmark"] = spec.name;
    j["metric"] = to_string(spec.metric);
    j["resize_longest_side"] = target;
    j["count"] = res.count();
    j["errors"] = res.errors.size();
    j["aggregate"] = res.aggregate;
    write(opts.summary_json, j.dump(2) + "\n");
  }
  return res;
}

std::string format_summary_table(std::span<const std::pair<BenchmarkSpec, MetricResult>> rows) {
  std::ostringstream os;
  os << std::left << std::setw(16) << "benchmark" << std::setw(14) << "metric" << std::right << std::setw(8) << "n"
     << std::setw(8) << "errors" << std::setw(10) << "score" << "\n";
  for (const auto& [spec, r] : rows) {
    os << std::left << std::setw(16) << spec.name << std::setw(14) << to_string(spec.metric) << std::right
       << std::setw(8) << r.count() << std::setw(8) << r.errors.size() << std::setw(10) << std::fixed
       << std::setprecision(4) << r.aggregate << "\n";
  }
  return os.str();
}

}  // namespace vlmkit
