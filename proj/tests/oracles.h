#pragma once

#include <algorithm>
#include <cctype>
#include <string>
#include <vector>

namespace oracle {

// Full-table edit distance over bytes.
inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::vector<std::size_t>> d(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1])});
  return d[a.size()][b.size()];
}

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Single-reference ANLS for ASCII strings without surrounding whitespace.
inline double anls(const std::string& pred, const std::string& ref, double tau = 0.5) {
  const std::string p = lower(pred), r = lower(ref);
  const std::size_t longest = std::max(p.size(), r.size());
  if (longest == 0) return 1.0;
  const double s = 1.0 - static_cast<double>(edit_distance(p, r)) / static_cast<double>(longest);
  return s < tau ? 0.0 : s;
}

// Every string over `alphabet` of length 0..max_len.
inline std::vector<std::string> all_strings(const std::string& alphabet, std::size_t max_len) {
  std::vector<std::string> out = {""};
  std::vector<std::string> frontier = {""};
  for (std::size_t len = 1; len <= max_len; ++len) {
    std::vector<std::string> next;
    for (const auto& s : frontier)
      for (char c : alphabet) next.push_back(s + c);
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

}  // namespace oracle
