#pragma once

#include "fflab/dataset.hpp"
#include "fflab/model.hpp"

#include <json.hpp>

#include <optional>
#include <vector>

namespace fflab {

struct HeadRef {
  int layer = 0;
  int head = 0;
  ComponentId id() const { return ComponentId::attn_head(layer, head); }
  bool operator==(const HeadRef&) const = default;
};

struct PlantedSuppressor {
  int layer = 0;
  int head = 0;
  double target_strength = 4.0;  // logit drop (nats) on the attended class at full attention
  HeadRef ref() const { return {layer, head}; }
};

struct PlantedSpec {
  std::vector<PlantedSuppressor> suppressor_heads;
  HeadRef copier_head{1, 0};
  std::optional<int> preferred_token;
  // Optional head whose attention is keyed purely on relative position (peaks on the
  // forbidden slot from the final position). Used to check the positional probe.
  std::optional<HeadRef> control_head;
  double salience_min = 0.8;  // per-fact query salience range
  double salience_max = 1.2;
};

nlohmann::json planted_spec_to_json(const PlantedSpec& s);
PlantedSpec planted_spec_from_json(const nlohmann::json& j);

// 6 layers, 4 heads of width 32: the construction needs 12 rotary pairs per head.
ModelConfig planted_config(std::uint64_t seed = 0);
// 4 categories x 4 classes, so every class fits in one head's value space.
WorldSizes planted_world_sizes();
FactWorld planted_world(std::uint64_t seed, int n_facts = 64);
// Copier L1H0, suppressors L3H1/L4H2/L5H3 at strength 4, preferred token = the alias of the
// first fact whose top class has one (its primary when no alias exists).
PlantedSpec default_planted_spec(const FactWorld& world, bool with_control = false);

// Builds weights implementing: copier marks the forbidden slot; each suppressor
// attends from the final position to the slot and writes minus its strength along
// the attended class's unembedding direction; remaining heads are small noise with
// an attention sink on BOS. The spec is stored in the bundle metadata.
ModelBundle plant_model(const ModelConfig& config, const PlantedSpec& spec, const FactWorld& world);

// Planted spec recorded in a bundle's metadata, if any.
std::optional<PlantedSpec> planted_spec_of(const ModelBundle& model);

// Score margin of the copier's previous-token peak over the best other offset.
double copier_margin(const ModelBundle& model, const PlantedSpec& spec);

}  // namespace fflab
