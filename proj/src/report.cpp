#include "fflab/report.hpp"

#include "fflab/errors.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <iterator>
#include <sstream>

namespace fflab {

std::string sha256_hex(const void* data, std::size_t size) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data, size, md, &len, EVP_sha256(), nullptr) != 1) throw DomainError("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

std::string sha256_hex(const std::string& bytes) { return sha256_hex(bytes.data(), bytes.size()); }

std::string sha256_file(const std::string& path) {
  if (path.empty()) return "";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  // Embedded manifests carry a timestamp; hash the payload only.
  if (bytes.rfind("# manifest ", 0) == 0) {
    const auto nl = bytes.find('\n');
    bytes.erase(0, nl == std::string::npos ? bytes.size() : nl + 1);
  } else if (!bytes.empty() && bytes[0] == '{') {
    const auto doc = nlohmann::json::parse(bytes, nullptr, false);
    if (doc.is_object() && doc.contains("manifest") && doc.contains("data") && doc.value("schema", "") == kSchemaVersion)
      bytes = doc["data"].dump();
  }
  return sha256_hex(bytes);
}

RunManifest RunManifest::now(const std::string& subcommand) {
  RunManifest m;
  m.subcommand = subcommand;
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  m.wall_clock = buf;
  return m;
}

nlohmann::json manifest_to_json(const RunManifest& m) {
  return {{"subcommand", m.subcommand},     {"config_hash", m.config_hash}, {"checkpoint_hash", m.checkpoint_hash},
          {"dataset_hash", m.dataset_hash}, {"seed", m.seed},               {"tool_version", m.tool_version},
          {"wall_clock", m.wall_clock}};
}

RunManifest manifest_from_json(const nlohmann::json& j) {
  try {
    RunManifest m;
    m.subcommand = j.at("subcommand").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.checkpoint_hash = j.at("checkpoint_hash").get<std::string>();
    m.dataset_hash = j.at("dataset_hash").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.tool_version = j.at("tool_version").get<std::string>();
    m.wall_clock = j.at("wall_clock").get<std::string>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
}

namespace {

std::ofstream open_out(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty()) std::filesystem::create_directories(parent, ec);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InputError("cannot write " + path);
  return os;
}

}  // namespace

void write_report_json(const std::string& path, const RunManifest& m, const nlohmann::json& data) {
  std::ofstream os = open_out(path);
  const nlohmann::json doc = {{"schema", kSchemaVersion}, {"manifest", manifest_to_json(m)}, {"data", data}};
  os << doc.dump(2) << '\n';
  if (!os) throw InputError("write failed: " + path);
}

nlohmann::json read_report_json(const std::string& path, RunManifest* manifest) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  if (!doc.is_object() || !doc.contains("data") || !doc.contains("manifest"))
    throw FormatError(path + ": not a report file (missing data or manifest)");
  if (doc.value("schema", "") != kSchemaVersion) throw FormatError(path + ": unsupported schema");
  if (manifest) *manifest = manifest_from_json(doc["manifest"]);
  return doc["data"];
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

CsvWriter::CsvWriter(const std::string& path, const RunManifest& m, const std::vector<std::string>& columns)
    : os_(open_out(path)), path_(path), n_cols_(columns.size()) {
  os_ << "# manifest " << manifest_to_json(m).dump() << '\n';
  for (std::size_t i = 0; i < columns.size(); ++i) os_ << (i ? "," : "") << columns[i];
  os_ << '\n';
}

CsvWriter& CsvWriter::cell(const std::string& s) {
  if (in_row_ >= n_cols_) throw DomainError(path_ + ": too many cells in row");
  if (s.find_first_of(",\"\n") != std::string::npos) throw DomainError(path_ + ": cell needs quoting: " + s);
  os_ << (in_row_ ? "," : "") << s;
  ++in_row_;
  return *this;
}

CsvWriter& CsvWriter::cell(double v) { return cell(format_double(v)); }
CsvWriter& CsvWriter::cell(long long v) { return cell(std::to_string(v)); }

void CsvWriter::end_row() {
  if (in_row_ != n_cols_) throw DomainError(path_ + ": row has " + std::to_string(in_row_) + " cells, expected " + std::to_string(n_cols_));
  os_ << '\n';
  in_row_ = 0;
  if (!os_) throw InputError("write failed: " + path_);
}

CsvTable read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path);
  CsvTable t;
  std::string line;
  auto split = [](const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!s.empty() && s.back() == ',') out.emplace_back();
    return out;
  };
  bool header = false;
  while (std::getline(in, line)) {
    if (line.rfind("# manifest ", 0) == 0) {
      try {
        t.manifest = nlohmann::json::parse(line.substr(11));
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(path + ": bad manifest line: " + e.what());
      }
      continue;
    }
    if (!header) {
      t.header = split(line);
      header = true;
    } else {
      t.rows.push_back(split(line));
    }
  }
  if (!header) throw FormatError(path + ": missing header");
  return t;
}

// ---- JSON views ----

nlohmann::json to_json(const FilterReport& r) {
  nlohmann::json scores = nlohmann::json::array();
  for (const auto& s : r.scores)
    scores.push_back({{"fact_id", s.fact_id},
                      {"p_competing", s.p_competing},
                      {"p_relevant", s.p_relevant},
                      {"p_irrelevant", s.p_irrelevant},
                      {"lo_competing", s.lo_competing},
                      {"lo_relevant", s.lo_relevant},
                      {"lo_irrelevant", s.lo_irrelevant},
                      {"log_odds_ratio", s.log_odds_ratio},
                      {"kept", s.kept}});
  static const char* qs[] = {"q0", "q10", "q25", "q50", "q75", "q90", "q100"};
  nlohmann::json quant = nlohmann::json::object();
  for (std::size_t i = 0; i < r.ratio_quantiles.size() && i < 7; ++i) quant[qs[i]] = r.ratio_quantiles[i];
  return {{"criteria",
           {{"min_noncompeting_prob", r.criteria.min_noncompeting_prob},
            {"min_odds_reduction_factor", r.criteria.min_odds_reduction_factor}}},
          {"n_input", r.n_input},
          {"n_kept", r.n_kept},
          {"empty", r.empty},
          {"mean_log_odds_ratio", r.mean_log_odds_ratio},
          {"ratio_quantiles", quant},
          {"scores", scores}};
}

nlohmann::json to_json(const OriginReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& o : r.rows)
    rows.push_back({{"fact_id", o.fact_id},
                    {"noncompeting_top", o.noncompeting_top},
                    {"predicted", o.predicted},
                    {"competing_top", o.competing_top},
                    {"undetermined", o.undetermined},
                    {"match", o.match}});
  return {{"n_determined", r.n_determined}, {"n_match", r.n_match}, {"match_rate", r.match_rate}, {"rows", rows}};
}

nlohmann::json to_json(const ImportanceTable& t, const ModelConfig& c) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : t.rows)
    rows.push_back({{"component", r.id.name()}, {"mean_lbf", r.mean_lbf}, {"std_lbf", r.std_lbf}, {"n", r.n}, {"rank", r.rank}});
  nlohmann::json ranking = nlohmann::json::array();
  for (int i : t.ranking) ranking.push_back(ComponentId::from_index(c, i).name());
  return {{"rows", rows}, {"ranking", ranking}, {"saturated", t.saturated}};
}

ImportanceTable importance_from_json(const nlohmann::json& j, const ModelConfig& c) {
  try {
    ImportanceTable t;
    for (const auto& r : j.at("rows")) {
      ImportanceRow row;
      row.id = ComponentId::parse(r.at("component").get<std::string>());
      row.mean_lbf = r.at("mean_lbf").get<double>();
      row.std_lbf = r.at("std_lbf").get<double>();
      row.n = r.at("n").get<int>();
      row.rank = r.at("rank").get<int>();
      t.rows.push_back(row);
    }
    for (const auto& name : j.at("ranking")) t.ranking.push_back(ComponentId::parse(name.get<std::string>()).index(c));
    t.saturated = j.at("saturated").get<int>();
    if (static_cast<int>(t.rows.size()) != c.n_components() || static_cast<int>(t.ranking.size()) != c.n_components())
      throw FormatError("importance table does not match the model's component count");
    for (int i = 0; i < c.n_components(); ++i)
      if (t.rows[static_cast<size_t>(i)].id.index(c) != i) throw FormatError("importance rows out of component order");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("importance table: ") + e.what());
  }
}

nlohmann::json to_json(const CumulativeCurve& c) {
  return {{"effect", c.effect}, {"reference", c.reference}, {"k_star", c.k_star}, {"threshold", c.threshold},
          {"saturated", c.saturated}};
}

nlohmann::json to_json(const IndependenceReport& r) {
  return {{"joint", r.joint}, {"summed", r.summed}, {"gap", r.gap}};
}

nlohmann::json to_json(const Histogram& h) {
  return {{"lo", h.lo}, {"hi", h.hi}, {"fraction", h.fraction}, {"count", h.count}};
}

nlohmann::json to_json(const OVProfile& p) {
  nlohmann::json top = nlohmann::json::array();
  for (const auto& [tok, r] : p.top_downweighted) top.push_back({{"token", tok}, {"self_response", r}});
  return {{"head", p.head.id().name()},
          {"suppression_score", p.suppression_score},
          {"std_error", p.std_error},
          {"n_pairs", p.n_pairs},
          {"exhaustive", p.exhaustive},
          {"seed", p.seed},
          {"response_hist", to_json(p.response_hist)},
          {"top_downweighted", top}};
}

nlohmann::json to_json(const EnrichmentCurve& c) {
  return {{"head", c.head.id().name()},
          {"mode", mode_name(c.mode)},
          {"median_log_odds", c.median_log_odds},
          {"median_attention", c.median_attention},
          {"n", c.n}};
}

nlohmann::json to_json(const BehaviorSplit& s) {
  return {{"n", s.n},
          {"noncompeting_accuracy", s.noncompeting_accuracy},
          {"compliance", s.compliance},
          {"mean_log_bayes_factor", s.mean_log_bayes_factor}};
}

}  // namespace fflab
