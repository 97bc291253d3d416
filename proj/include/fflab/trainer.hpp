#pragma once

#include "fflab/dataset.hpp"
#include "fflab/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <iosfwd>
#include <random>
#include <string>
#include <vector>

namespace fflab {

struct TrainConfig {
  int steps = 1600;
  int batch_size = 32;
  double learning_rate = 2e-3;
  int warmup_steps = 100;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  double competing_fraction = 0.5;
  double window_fraction = 0.25;  // share of examples with [FROM, filler] in the preamble window
  // Draw each forbidden word afresh within its kind (any answer-class token for
  // competing, any same-category non-answer or any filler otherwise) instead of
  // reusing the triple's fixed words.
  bool fresh_forbidden = true;
  double grad_clip = 1.0;         // global norm; <= 0 disables
  double beta1 = 0.9, beta2 = 0.98, adam_eps = 1e-8;
  int shard_size = 8;             // gradient shards, summed in order

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct TrainTarget {
  std::vector<int> tokens;
  int target = 0;
  int fact_id = 0;
  bool competing = false;
};

// Deterministic example stream. Competing examples forbid the fact's answer and
// target the best answer outside that class; held-out facts are never competing.
class CorpusSampler {
 public:
  CorpusSampler(const FactWorld& world, const TrainConfig& config);
  TrainTarget next();

 private:
  const FactWorld* world_;
  TrainConfig config_;
  std::mt19937_64 rng_;
  std::vector<int> seen_, all_;
};

std::vector<TrainTarget> build_corpus(const FactWorld& world, const TrainConfig& config, int n);

// Mean answer-position cross-entropy and its gradient, same shapes as the weights.
struct LossGrad {
  double loss = 0;
  Weights grad;
};
LossGrad loss_and_grad(const Weights& w, const std::vector<TrainTarget>& batch, int shard_size = 8, int threads = 0);
// Same loss evaluated through forward().
double reference_loss(const Weights& w, const std::vector<TrainTarget>& batch);

struct LossPoint {
  int step = 0;
  double loss = 0;
  double lr = 0;
};

struct TrainResult {
  ModelBundle model;
  std::vector<LossPoint> curve;
};

double learning_rate_at(const TrainConfig& c, int step);

// Throws DivergenceError on a non-finite loss or gradient.
TrainResult train(const ModelBundle& init, const FactWorld& world, const TrainConfig& config, int threads = 0);

void write_loss_csv(std::ostream& os, const std::vector<LossPoint>& curve);

// Named views over every tensor, checkpoint names and order.
struct TensorView {
  std::string name;
  double* data = nullptr;
  std::size_t size = 0;
  bool matrix = false;
};
std::vector<TensorView> tensor_views(Weights& w);

struct GradCheckFamily {
  std::string family;  // embedding, attention, mlp, gains, unembedding
  double max_rel_error = 0;
  int checked = 0;
};

// Central finite differences of reference_loss against loss_and_grad on
// `per_tensor` sampled entries of every tensor.
std::vector<GradCheckFamily> gradient_check(const Weights& w, const std::vector<TrainTarget>& batch, int per_tensor,
                                            std::uint64_t seed, double h = 1e-5);

struct TripleBehavior {
  int fact_id = 0;
  bool held_out = false;
  double p_competing = 0, p_relevant = 0, p_irrelevant = 0;
  double log_bayes_factor = 0;  // LO(competing) - mean of the two noncompeting LOs, clamped
  bool relevant_correct = false, irrelevant_correct = false;
  bool compliant = false;  // top token of the competing run is outside the answer class
};

struct BehaviorSplit {
  int n = 0;
  double noncompeting_accuracy = 0;
  double compliance = 0;
  double mean_log_bayes_factor = 0;
};

struct BehaviorReport {
  std::vector<TripleBehavior> rows;
  BehaviorSplit all, seen, held_out;
};

BehaviorReport evaluate(const ModelBundle& model, const std::vector<PromptTriple>& triples, int threads = 0);

}  // namespace fflab
