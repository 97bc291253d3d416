#pragma once

#include "fflab/model.hpp"
#include "fflab/numerics.hpp"

#include <json.hpp>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace fflab {

namespace tok {
inline constexpr int PAD = 0;
inline constexpr int BOS = 1;
inline constexpr int SYS = 2;
inline constexpr int ESYS = 3;
inline constexpr int ASSIST = 4;
inline constexpr int SINGLE = 5;
inline constexpr int TRUTH = 6;
inline constexpr int FORBID = 7;
inline constexpr int MARKER = 8;  // "word", immediately before the forbidden slot
inline constexpr int FROM = 9;    // opens the two-token injection window in attack prompts
inline constexpr int kNumSpecial = 16;
}  // namespace tok

// Fixed prompt template, 13 tokens:
//   BOS SYS ASSIST [w0 w1] SINGLE TRUTH FORBID MARKER <forbidden> ESYS <relation> <subject>
// [w0 w1] is the injection window (PAD PAD in clean prompts).
namespace tmpl {
inline constexpr int kLength = 13;
inline constexpr int kWindowStart = 3;
inline constexpr int kWindowWidth = 2;
inline constexpr int kForbiddenSlot = 9;
inline constexpr int kPrefixStart = 11;
inline constexpr int kFinal = 12;
}  // namespace tmpl

struct WorldSizes {
  int n_categories = 8;
  int classes_per_category = 6;
  double alias_fraction = 0.5;  // share of answer classes that get a second token
  int n_fillers = 64;
  int answers_per_fact = 3;    // ranked classes per fact
  double held_out_fraction = 0.2;
  bool operator==(const WorldSizes&) const = default;
};

struct AnswerClass {
  int id = 0;
  int category = 0;
  int primary = 0;
  int alias = -1;
  std::vector<int> tokens() const { return alias < 0 ? std::vector<int>{primary} : std::vector<int>{primary, alias}; }
};

struct Fact {
  int id = 0;
  int subject = 0;
  int relation = 0;
  int category = 0;
  std::vector<int> ranked_classes;  // best first, distinct, all in `category`
  std::vector<int> ranked_answers;  // primary then alias of each ranked class
  int relevant_forbidden = 0;       // primary of a same-category class outside ranked_classes
  int irrelevant_forbidden = 0;     // a filler token
  bool held_out = false;            // never seen as a competing training example
};

struct FactWorld {
  std::uint64_t seed = 0;
  WorldSizes sizes;
  int vocab_size = 0;
  std::vector<int> fillers;
  std::vector<int> relations;  // one per category
  std::vector<int> subjects;   // one per fact
  std::vector<AnswerClass> classes;
  std::vector<Fact> facts;
  std::vector<int> alias_map;  // token -> answer class id, -1 for non-answers

  const Fact& fact(int id) const;
  int class_of(int token) const;
  std::vector<int> class_tokens(int class_id) const { return classes.at(static_cast<size_t>(class_id)).tokens(); }
  std::vector<int> answer_class(int fact_id) const { return class_tokens(fact(fact_id).ranked_classes.front()); }
  int tokens_used() const;
};

// Throws ConstructionError if the world does not fit in vocab_size.
FactWorld generate_world(std::uint64_t seed, int n_facts, const WorldSizes& sizes, int vocab_size);
// Exhaustive structural check; returns a list of violations (empty when valid).
std::vector<std::string> validate_world(const FactWorld& world);

nlohmann::json world_to_json(const FactWorld& world);
FactWorld world_from_json(const nlohmann::json& j);

std::vector<int> render_tokens(const std::vector<int>& prefix, int forbidden, const std::vector<int>& window = {});
std::vector<int> render_prompt(const FactWorld& world, int fact_id, int forbidden);

struct PromptTriple {
  int fact_id = 0;
  std::vector<int> prefix_tokens;
  int answer = 0;
  std::vector<int> answer_class;  // answer plus its aliases
  int competing_forbidden = 0;
  int relevant_forbidden = 0;
  int irrelevant_forbidden = 0;
  int forbidden_slot_index = tmpl::kForbiddenSlot;
  bool held_out = false;

  enum class Kind { Competing, Relevant, Irrelevant };
  int forbidden(Kind k) const;
  std::vector<int> render(Kind k) const { return render_tokens(prefix_tokens, forbidden(k)); }
  bool operator==(const PromptTriple&) const = default;
};

inline constexpr PromptTriple::Kind kAllKinds[] = {PromptTriple::Kind::Competing, PromptTriple::Kind::Relevant,
                                                    PromptTriple::Kind::Irrelevant};
const char* kind_name(PromptTriple::Kind k);

PromptTriple make_triple(const FactWorld& world, int fact_id);
std::vector<PromptTriple> make_triples(const FactWorld& world);

nlohmann::json triple_to_json(const PromptTriple& t);
PromptTriple triple_from_json(const nlohmann::json& j);
void write_triples_jsonl(const std::vector<PromptTriple>& triples, const std::string& path);
std::vector<PromptTriple> read_triples_jsonl(const std::string& path);

// True when both prompts have the same length and agree everywhere except the
// forbidden slot and the injection window.
bool prompts_paired(const std::vector<int>& a, const std::vector<int>& b);

struct FilterCriteria {
  double min_noncompeting_prob = 0.5;
  double min_odds_reduction_factor = 100.0;
  void validate() const;
};

struct TripleScore {
  int fact_id = 0;
  double p_competing = 0, p_relevant = 0, p_irrelevant = 0;
  double lo_competing = 0, lo_relevant = 0, lo_irrelevant = 0;  // class log-odds, nats
  double log_odds_ratio = 0;  // lo_competing - min(lo_relevant, lo_irrelevant)
  bool kept = false;
};

struct FilterReport {
  FilterCriteria criteria;
  std::vector<TripleScore> scores;  // input order
  int n_input = 0;
  int n_kept = 0;
  bool empty = true;
  double mean_log_odds_ratio = 0;  // over kept triples
  std::vector<double> ratio_quantiles;  // 0, .1, .25, .5, .75, .9, 1 over kept triples
};

// Scores every triple on all three renders. Parallel over triples; output in input order.
std::vector<TripleScore> score_triples(const ModelBundle& model, const std::vector<PromptTriple>& triples, int threads = 0);
bool passes_filter(const TripleScore& s, const FilterCriteria& c);

struct FilterResult {
  std::vector<PromptTriple> kept;  // sorted by fact_id
  FilterReport report;
};

FilterResult filter_dataset(const ModelBundle& model, const std::vector<PromptTriple>& triples,
                            const FilterCriteria& criteria, int threads = 0);

struct OriginRow {
  int fact_id = 0;
  std::vector<int> noncompeting_top;  // top-k tokens of the noncompeting run, best first
  int predicted = -1;                 // first of those outside the correct answer class
  int competing_top = -1;             // argmax of the competing run
  bool undetermined = false;          // the class covers the entire top-k
  bool match = false;
};

struct OriginReport {
  std::vector<OriginRow> rows;
  int n_determined = 0;
  int n_match = 0;
  double match_rate = 0;  // over determined rows; 0 when none
};

// Pure part of the analysis, from logits.
OriginRow origin_from_logits(int fact_id, const Vector& noncompeting_logits, const Vector& competing_logits,
                             const std::vector<int>& answer_class, int top_k = 10);
OriginReport incorrect_answer_origin(const ModelBundle& model, const std::vector<PromptTriple>& triples,
                                     int top_k = 10, int threads = 0);

// Indices of the k largest entries, ties by index.
std::vector<int> top_k_tokens(const Vector& logits, int k);

double quantile(std::vector<double> v, double q);

}  // namespace fflab
