#pragma once

#include "fflab/dataset.hpp"
#include "fflab/model.hpp"
#include "fflab/trainer.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

namespace fflab {

// Everything a pipeline run depends on besides its input files. The top-level seed
// drives the world, the model init, training, and every sampled analysis.
struct PipelineConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  int n_facts = 300;
  WorldSizes world;
  TrainConfig train;
  FilterCriteria filter;
  int planted_facts = 64;
  bool planted_control = false;
  int analysis_heads = 3;        // heads analyzed by enrich/attack, taken from the importance ranking
  int summary_top_k = 10;        // heads summarized as "top" in heads_summary.json
  double curve_threshold = 0.95;
  std::int64_t ov_samples = 200000;  // pair samples when exhaustive scoring is too large
  int ov_top_n = 10;
  int origin_top_k = 10;

  // Pushes the seed into the nested configs.
  void apply_seed(std::uint64_t s);
};

nlohmann::json pipeline_config_to_json(const PipelineConfig& c);
// Missing keys take defaults; unknown keys raise FormatError.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j);

// Runs the command line. Returns 0 on success, 1 on bad usage or input, 2 on internal errors.
int run_cli(int argc, const char* const* argv);
int run_cli(const std::vector<std::string>& args);  // args[0] is the program name

}  // namespace fflab
