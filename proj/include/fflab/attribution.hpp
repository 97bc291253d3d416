#pragma once

#include "fflab/dataset.hpp"
#include "fflab/model.hpp"

#include <vector>

namespace fflab {

inline constexpr double kLogOddsClamp = 30.0;

// Log-odds of the answer class, clamped to +-kLogOddsClamp; `saturated` is set when clamped.
LogOdds clamped_log_odds(const Vector& logits, const std::vector<int>& answer_class);

// LO of the destination run with the components in S taken from the source run.
// Throws InputError when the two prompts are not paired.
LogOdds first_order_patch(const ModelBundle& model, const ActivationTrace& dest, const ActivationTrace& source,
                          const std::vector<ComponentId>& S, const std::vector<int>& answer_class);

// Last-token components of the three renders of each triple.
struct PatchSet {
  std::vector<PromptTriple> triples;
  std::vector<Matrix> competing, relevant, irrelevant;
};

PatchSet prepare_patch_set(const ModelBundle& model, const std::vector<PromptTriple>& triples, int threads = 0);

// Per-triple effect of patching the masked components from the competing run into
// each noncompeting run, averaged over the two destinations.
double triple_patch_effect(const Weights& w, const PatchSet& ps, std::size_t t, const std::vector<char>& mask,
                           int* saturated = nullptr);

struct ImportanceRow {
  ComponentId id;
  double mean_lbf = 0;  // nats
  double std_lbf = 0;
  int n = 0;
  int rank = 0;
};

struct ImportanceTable {
  std::vector<ImportanceRow> rows;   // component order
  std::vector<int> ranking;          // component indices, most negative first
  int saturated = 0;                 // clamped log-odds evaluations
  const ImportanceRow& ranked(int r) const { return rows[static_cast<size_t>(ranking[static_cast<size_t>(r)])]; }
};

ImportanceTable component_importance(const ModelBundle& model, const PatchSet& ps, int threads = 0);
ImportanceTable component_importance(const ModelBundle& model, const std::vector<PromptTriple>& triples, int threads = 0);

// Ascending by value, ties by component index.
std::vector<int> rank_ascending(const std::vector<double>& values);

struct CumulativeCurve {
  std::vector<double> effect;  // index k: mean effect of patching the top-k ranked components
  double reference = 0;        // full patch
  int k_star = 0;              // smallest k reaching `threshold` of the reference
  double threshold = 0.95;
  int saturated = 0;
};

CumulativeCurve cumulative_curve(const ModelBundle& model, const PatchSet& ps, const std::vector<int>& ranking,
                                 double threshold = 0.95, int threads = 0);
int k_star_of(const std::vector<double>& effect, double reference, double threshold);

struct IndependenceReport {
  std::vector<double> joint;  // cumulative joint patching, k = 0..N
  std::vector<double> summed;  // sum of the top-k single-component importances
  std::vector<double> gap;     // joint - summed
};

IndependenceReport independence_compare(const ImportanceTable& table, const CumulativeCurve& curve);
IndependenceReport independence_compare(const ModelBundle& model, const PatchSet& ps, const ImportanceTable& table,
                                        int threads = 0);

}  // namespace fflab
