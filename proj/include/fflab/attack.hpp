#pragma once

#include "fflab/dataset.hpp"
#include "fflab/model.hpp"
#include "fflab/planted.hpp"

#include <json.hpp>

#include <vector>

namespace fflab {

// Window contents of an attacked prompt: [FROM, distractor].
inline constexpr int kInjectionPosition = tmpl::kWindowStart + 1;

struct AttackCandidate {
  HeadRef head;
  int distractor = 0;
  double preference = 0;  // final-token attention on the injection position
  int injection_position = kInjectionPosition;
};

// Every vocab token in the injection window of the context's irrelevant render,
// ranked by the head's attention to it (descending, ties by token id).
std::vector<AttackCandidate> token_preference_scan(const ModelBundle& model, const HeadRef& head,
                                                   const PromptTriple& context, int threads = 0);

// Noncompeting prompt with [FROM, distractor] in the preamble window.
std::vector<int> build_attack_prompt(const FactWorld& world, int fact_id, int distractor, int irrelevant_forbidden);
std::vector<int> build_attack_prompt(const PromptTriple& t, int distractor);

struct ReversalRow {
  int k = 0;
  double probability = 0;
  int top_token = 0;
  bool correct_top = false;
};

struct AttackResult {
  int fact_id = 0;
  HeadRef head;
  int distractor = 0;
  double clean_probability = 0, attacked_probability = 0;
  double delta_log_odds = 0;  // attacked - clean, clamped
  int top_before = 0, top_after = 0;
  bool flipped = false;  // correct answer was top before and is not after
  std::vector<ReversalRow> reversal;

  // delta <= -1 nat with a flip.
  bool success() const { return delta_log_odds <= -1.0 && flipped; }
};

// Throws InputError when the candidate would make the prompt competing.
AttackResult evaluate_attack(const ModelBundle& model, const PromptTriple& t, const AttackCandidate& candidate);

// Patches the top-k ranked components of the clean run into the attacked run.
AttackResult reverse_attack_by_patching(const ModelBundle& model, const PromptTriple& t,
                                        const AttackCandidate& candidate, const std::vector<int>& ranking,
                                        const std::vector<int>& k_values);

// Facts whose top-ranked class contains `token`.
std::vector<int> facts_answered_by(const FactWorld& world, int token);

nlohmann::json attack_result_to_json(const AttackResult& r);
AttackResult attack_result_from_json(const nlohmann::json& j);

}  // namespace fflab
