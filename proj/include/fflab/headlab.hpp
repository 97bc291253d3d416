#pragma once

#include "fflab/dataset.hpp"
#include "fflab/model.hpp"
#include "fflab/planted.hpp"

#include <cstdint>
#include <optional>
#include <vector>

namespace fflab {

inline constexpr int kHistogramBins = 10;

struct Histogram {
  double lo = 0, hi = 1;
  std::vector<double> fraction;  // kHistogramBins entries summing to 1 (or all 0 when empty)
  int count = 0;
};

Histogram make_histogram(const std::vector<double>& values, double lo, double hi, int bins = kHistogramBins);

// Final-token attention mass of `head` on the slot position.
Probability attention_to_forbidden(const ActivationTrace& trace, const HeadRef& head, int slot);

struct KindStats {
  double mean = 0, median = 0;
  Histogram hist;
  std::vector<double> values;  // per triple, input order
};

struct HeadAttention {
  HeadRef head;
  KindStats competing, relevant, irrelevant;
  const KindStats& of(PromptTriple::Kind k) const;
};

struct AttentionStats {
  std::vector<HeadAttention> heads;
  int n_triples = 0;
  // Mean competing attention of the top-k heads (by that mean) vs the rest.
  int top_k = 0;
  double top_mean = 0, rest_mean = 0;
};

std::vector<HeadRef> all_heads(const ModelConfig& c);
AttentionStats attention_stats(const ModelBundle& model, const std::vector<PromptTriple>& triples,
                               const std::vector<HeadRef>& heads, int top_k = 10, int threads = 0);

// phi(e_i): the head's OV map applied to the normalized embedding of token i, then unembedded.
// Evaluated position-free, without the final norm.
Vector ov_logits(const ModelBundle& model, const HeadRef& head, int token);
// R(i -> j): log-odds of coordinate j of softmax(phi(e_i)).
double ov_response(const ModelBundle& model, const HeadRef& head, int i, int j);

struct PairSampler {
  bool exhaustive = true;  // all ordered pairs i != j
  std::uint64_t seed = 0;
  std::int64_t count = 0;  // samples when not exhaustive
  // Exhaustive when vocab^2 <= 1e6, else `count` uniform pairs from `seed`.
  static PairSampler automatic(int vocab, std::uint64_t seed = 0, std::int64_t count = 200000);
};

struct OVProfile {
  HeadRef head;
  double suppression_score = 0;
  double std_error = 0;
  std::int64_t n_pairs = 0;
  bool exhaustive = true;
  std::uint64_t seed = 0;
  Histogram response_hist;  // of R(i->i) - R(i->j) over the evaluated pairs
  std::vector<std::pair<int, double>> top_downweighted;  // (token, R(i->i)) ascending
};

OVProfile suppression_score(const ModelBundle& model, const HeadRef& head, const PairSampler& sampler,
                            int top_n = 10);

enum class EnrichMode { Key, Query };
const char* mode_name(EnrichMode m);

// Attention of `head` from the final position to `slot`, with the slot's key input
// (Key) or the final query input (Query) replaced by the residual stream after
// layers < cutoff. cutoff == head.layer reproduces the forward pass bitwise.
Probability enrichment_attention(const ModelBundle& model, const ActivationTrace& trace, const HeadRef& head,
                                 int slot, int cutoff, EnrichMode mode);

struct EnrichmentCurve {
  HeadRef head;
  EnrichMode mode = EnrichMode::Key;
  std::vector<double> median_log_odds;  // index = cutoff, 0..head.layer
  std::vector<double> median_attention;
  int n = 0;
};

EnrichmentCurve enrichment_curve(const ModelBundle& model, const std::vector<ActivationTrace>& traces,
                                 const HeadRef& head, int slot, EnrichMode mode, int threads = 0);

struct AttentionPair {
  LogOdds baseline;
  LogOdds probed;
};

// Competing final-token query against the noncompeting run's keys.
AttentionPair cross_run_attention(const ModelBundle& model, const ActivationTrace& competing,
                                  const ActivationTrace& noncompeting, const HeadRef& head, int slot);

// The slot key recomputed with its rotary index set to `position`.
AttentionPair positional_probe(const ModelBundle& model, const ActivationTrace& trace, const HeadRef& head, int slot,
                               int position);
// Same, with the position drawn uniformly from [0, final position] using `seed`.
AttentionPair positional_randomization(const ModelBundle& model, const ActivationTrace& trace, const HeadRef& head,
                                       int slot, std::uint64_t seed);

struct ScatterSummary {
  std::vector<double> baseline, probed;  // log-odds
  double correlation = 0;
  int n = 0;
};

double pearson(const std::vector<double>& x, const std::vector<double>& y);

ScatterSummary cross_run_scatter(const ModelBundle& model, const std::vector<ActivationTrace>& competing,
                                 const std::vector<ActivationTrace>& noncompeting, const HeadRef& head, int slot);
ScatterSummary positional_scatter(const ModelBundle& model, const std::vector<ActivationTrace>& traces,
                                  const HeadRef& head, int slot, std::uint64_t seed);

}  // namespace fflab
