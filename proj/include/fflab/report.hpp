#pragma once

#include "fflab/attack.hpp"
#include "fflab/attribution.hpp"
#include "fflab/dataset.hpp"
#include "fflab/headlab.hpp"
#include "fflab/trainer.hpp"

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

namespace fflab {

inline constexpr const char* kSchemaVersion = "fflab-report/1";

std::string sha256_hex(const void* data, std::size_t size);
std::string sha256_hex(const std::string& bytes);
// Content hash of a file, excluding any embedded manifest (the "# manifest" first line,
// or everything but "data" in a report JSON). Empty string when the path is empty;
// InputError when it cannot be read.
std::string sha256_file(const std::string& path);

struct RunManifest {
  std::string subcommand;
  std::string config_hash;
  std::string checkpoint_hash;
  std::string dataset_hash;
  std::uint64_t seed = 0;
  std::string tool_version = FFLAB_VERSION;
  std::string wall_clock;  // UTC, ISO 8601; the only field that varies between identical runs

  static RunManifest now(const std::string& subcommand);
};

nlohmann::json manifest_to_json(const RunManifest& m);
RunManifest manifest_from_json(const nlohmann::json& j);

// Writes {"schema": ..., "manifest": ..., "data": data}. Throws InputError naming the path on failure.
void write_report_json(const std::string& path, const RunManifest& m, const nlohmann::json& data);
// Returns the "data" member; `manifest` receives the embedded manifest when non-null.
nlohmann::json read_report_json(const std::string& path, RunManifest* manifest = nullptr);

// CSV with a leading "# manifest {...}" comment line and a fixed header.
class CsvWriter {
 public:
  CsvWriter(const std::string& path, const RunManifest& m, const std::vector<std::string>& columns);
  CsvWriter& cell(const std::string& s);
  CsvWriter& cell(double v);
  CsvWriter& cell(long long v);
  CsvWriter& cell(int v) { return cell(static_cast<long long>(v)); }
  CsvWriter& cell(bool v) { return cell(static_cast<long long>(v)); }
  void end_row();
  int columns() const { return static_cast<int>(n_cols_); }

 private:
  std::ofstream os_;
  std::string path_;
  std::size_t n_cols_ = 0, in_row_ = 0;
};

std::string format_double(double v);

// Parsed CSV: header plus rows of raw cells, the manifest line stripped.
struct CsvTable {
  nlohmann::json manifest;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};
CsvTable read_csv(const std::string& path);

// ---- JSON views of the analysis results ----
nlohmann::json to_json(const FilterReport& r);
nlohmann::json to_json(const OriginReport& r);
nlohmann::json to_json(const ImportanceTable& t, const ModelConfig& c);
ImportanceTable importance_from_json(const nlohmann::json& j, const ModelConfig& c);
nlohmann::json to_json(const CumulativeCurve& c);
nlohmann::json to_json(const IndependenceReport& r);
nlohmann::json to_json(const Histogram& h);
nlohmann::json to_json(const OVProfile& p);
nlohmann::json to_json(const EnrichmentCurve& c);
nlohmann::json to_json(const BehaviorSplit& s);

}  // namespace fflab
