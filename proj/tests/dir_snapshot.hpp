#pragma once

#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <regex>
#include <string>

namespace fflab::testing {

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Relative path -> contents with the manifest wall_clock values blanked.
inline std::map<std::string, std::string> dir_snapshot(const std::filesystem::path& root) {
  static const std::regex clock("\"wall_clock\": ?\"[^\"]*\"");
  std::map<std::string, std::string> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    out[std::filesystem::relative(e.path(), root).string()] =
        std::regex_replace(read_file(e.path()), clock, "\"wall_clock\":\"\"");
  }
  return out;
}

// Empty when identical, else the first differing relative path.
inline std::string first_difference(const std::map<std::string, std::string>& a,
                                    const std::map<std::string, std::string>& b) {
  for (const auto& [k, v] : a) {
    auto it = b.find(k);
    if (it == b.end()) return k + " (missing in second)";
    if (it->second != v) return k;
  }
  for (const auto& [k, v] : b)
    if (!a.count(k)) return k + " (missing in first)";
  return "";
}

}  // namespace fflab::testing
