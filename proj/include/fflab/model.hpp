#pragma once

#include "fflab/numerics.hpp"

#include <json.hpp>

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace fflab {

struct ModelConfig {
  int n_layers = 8;
  int n_heads = 8;
  int d_model = 128;
  int d_head = 16;
  int d_mlp = 512;
  int vocab_size = 512;
  int max_seq = 64;
  std::uint64_t seed = 0;

  // Throws ConstructionError naming the first violated invariant.
  void validate() const;
  int n_components() const { return 1 + n_layers * n_heads + n_layers; }
  int qkv_width() const { return n_heads * d_head; }
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct LayerWeights {
  Vector attn_gain;  // d_model
  Matrix wq, wk, wv;  // d_model x (n_heads*d_head); head h owns columns [h*d_head, (h+1)*d_head)
  Matrix wo;          // (n_heads*d_head) x d_model; head h owns rows [h*d_head, (h+1)*d_head)
  Vector mlp_gain;    // d_model
  Matrix w_gate, w_up;  // d_model x d_mlp
  Matrix w_down;        // d_mlp x d_model
};

struct Weights {
  ModelConfig config;
  Matrix embedding;  // vocab x d_model
  std::vector<LayerWeights> layers;
  Vector final_gain;   // d_model
  Matrix unembedding;  // d_model x vocab
};

// Zero-filled weights of the right shapes with unit gains.
Weights zero_weights(const ModelConfig& config);
// Scaled normal init from config.seed.
Weights init_weights(const ModelConfig& config);
// Throws ConstructionError on shape mismatch or non-finite entries.
void validate_weights(const Weights& w);

// Immutable model. Weights are rounded to float32 precision on construction so
// that a checkpoint round trip reproduces them exactly.
class ModelBundle {
 public:
  explicit ModelBundle(Weights weights, nlohmann::json metadata = nlohmann::json::object());

  const Weights& weights() const { return *weights_; }
  const ModelConfig& config() const { return weights_->config; }
  // Free-form provenance (planted spec, training config). Saved with checkpoints.
  const nlohmann::json& metadata() const { return *metadata_; }

 private:
  std::shared_ptr<const Weights> weights_;
  std::shared_ptr<const nlohmann::json> metadata_;
};

struct ComponentId {
  enum class Kind { Embedding, Head, Mlp };
  Kind kind = Kind::Embedding;
  int layer = -1;
  int head = -1;

  static ComponentId embedding() { return {}; }
  static ComponentId attn_head(int layer, int head) { return {Kind::Head, layer, head}; }
  static ComponentId mlp(int layer) { return {Kind::Mlp, layer, -1}; }
  // Layer-major order: embedding, then for each layer its heads followed by its MLP.
  static ComponentId from_index(const ModelConfig& c, int index);
  // Parses "EMB", "L3H1", "M3".
  static ComponentId parse(const std::string& name);

  int index(const ModelConfig& c) const;
  std::string name() const;
  bool operator==(const ComponentId&) const = default;
};

std::vector<ComponentId> all_components(const ModelConfig& c);

struct ActivationTrace {
  std::vector<int> tokens;
  std::vector<int> positions;  // rotary positions used, normally 0..n-1
  std::vector<Matrix> resid_pre;  // [n_layers + 1], seq x d_model; resid_pre[0] is the embedding
  std::vector<Matrix> resid_mid;  // [n_layers], after attention, before the MLP
  std::vector<Matrix> queries;    // [n_layers], seq x (n_heads*d_head), rotated
  std::vector<Matrix> keys;       // [n_layers], seq x (n_heads*d_head), rotated
  std::vector<std::vector<Matrix>> patterns;  // [layer][head], seq x seq
  Matrix components;  // n_components x d_model, last-token contributions in component order
  Vector final_logits;

  int length() const { return static_cast<int>(tokens.size()); }
  Vector component(const ModelConfig& c, const ComponentId& id) const { return components.row(id.index(c)).transpose(); }
  // Residual stream at the last position before the final norm.
  Vector final_residual() const { return resid_pre.back().row(resid_pre.back().rows() - 1).transpose(); }
};

// Building blocks shared by the forward pass and the headlab probes, so a probe
// that feeds unchanged inputs reproduces the forward pass bitwise.
Matrix norm_rows(const Matrix& x, const Vector& gain);
Matrix project(const Matrix& x, const Matrix& w);
void rope_rows(Matrix& m, int n_heads, int d_head, const std::vector<int>& positions);
// Causal softmax pattern of one head from rotated queries and keys.
Matrix attention_pattern(const Matrix& q, const Matrix& k, int head, int d_head);
Vector unembed(const Weights& w, const Vector& residual);

ActivationTrace forward(const Weights& w, const std::vector<int>& tokens);
ActivationTrace forward(const ModelBundle& model, const std::vector<int>& tokens);

// Sum of softmax(final_logits) over the class.
Probability answer_probability(const ActivationTrace& trace, const std::vector<int>& answer_class);

// Logits of the recombined residual: components in order, overridden rows replaced.
Vector recombine(const Weights& w, const Matrix& components,
                 const std::vector<std::pair<ComponentId, Vector>>& overrides);
Vector recombine(const ModelBundle& model, const Matrix& components,
                 const std::vector<std::pair<ComponentId, Vector>>& overrides);

// Row-mask variant used by patching: rows with mask[i] set come from `source`.
Vector recombine_masked(const Weights& w, const Matrix& dest, const Matrix& source, const std::vector<char>& mask);

void save_checkpoint(const ModelBundle& model, const std::string& path);
ModelBundle load_checkpoint(const std::string& path);
std::vector<std::uint8_t> serialize_checkpoint(const ModelBundle& model);
ModelBundle deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);

}  // namespace fflab
