#include "fflab/attack.hpp"

#include "fflab/attribution.hpp"
#include "fflab/errors.hpp"
#include "fflab/parallel.hpp"

#include <algorithm>
#include <numeric>

namespace fflab {

namespace {

int argmax(const Vector& v) {
  Eigen::Index i = 0;
  v.maxCoeff(&i);
  return static_cast<int>(i);
}

bool in_class(const std::vector<int>& cls, int token) { return std::find(cls.begin(), cls.end(), token) != cls.end(); }

void check_candidate(const ModelBundle& model, const PromptTriple& t, const AttackCandidate& c) {
  const ModelConfig& cfg = model.config();
  if (c.distractor < 0 || c.distractor >= cfg.vocab_size) throw InputError("distractor token out of range");
  if (c.distractor == t.competing_forbidden)
    throw InputError("distractor equals the fact's competing forbidden word");
  if (in_class(t.answer_class, t.irrelevant_forbidden))
    throw InputError("attack prompt would forbid the correct answer");
  if (c.injection_position != kInjectionPosition) throw InputError("unsupported injection position");
}

}  // namespace

std::vector<int> build_attack_prompt(const PromptTriple& t, int distractor) {
  return render_tokens(t.prefix_tokens, t.irrelevant_forbidden, {tok::FROM, distractor});
}

std::vector<int> build_attack_prompt(const FactWorld& world, int fact_id, int distractor, int irrelevant_forbidden) {
  const Fact& f = world.fact(fact_id);
  if (distractor < 0 || distractor >= world.vocab_size) throw InputError("distractor token out of range");
  if (irrelevant_forbidden < 0 || irrelevant_forbidden >= world.vocab_size)
    throw InputError("forbidden token out of range");
  return render_tokens({f.relation, f.subject}, irrelevant_forbidden, {tok::FROM, distractor});
}

std::vector<AttackCandidate> token_preference_scan(const ModelBundle& model, const HeadRef& head,
                                                   const PromptTriple& context, int threads) {
  const ModelConfig& c = model.config();
  if (head.layer < 0 || head.layer >= c.n_layers || head.head < 0 || head.head >= c.n_heads)
    throw InputError("head not in model");
  const auto att = parallel_map<double>(
      static_cast<std::size_t>(c.vocab_size),
      [&](std::size_t t) {
        const auto tr = forward(model, build_attack_prompt(context, static_cast<int>(t)));
        const Matrix& p = tr.patterns[static_cast<size_t>(head.layer)][static_cast<size_t>(head.head)];
        return p(p.rows() - 1, kInjectionPosition);
      },
      threads);
  std::vector<int> order(att.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return att[static_cast<size_t>(a)] > att[static_cast<size_t>(b)]; });
  std::vector<AttackCandidate> out;
  for (int t : order) out.push_back({head, t, att[static_cast<size_t>(t)], kInjectionPosition});
  return out;
}

AttackResult evaluate_attack(const ModelBundle& model, const PromptTriple& t, const AttackCandidate& candidate) {
  check_candidate(model, t, candidate);
  const auto clean = forward(model, t.render(PromptTriple::Kind::Irrelevant));
  const auto attacked = forward(model, build_attack_prompt(t, candidate.distractor));
  AttackResult r;
  r.fact_id = t.fact_id;
  r.head = candidate.head;
  r.distractor = candidate.distractor;
  r.clean_probability = class_probability(clean.final_logits, t.answer_class);
  r.attacked_probability = class_probability(attacked.final_logits, t.answer_class);
  r.delta_log_odds = clamped_log_odds(attacked.final_logits, t.answer_class).nats -
                     clamped_log_odds(clean.final_logits, t.answer_class).nats;
  r.top_before = argmax(clean.final_logits);
  r.top_after = argmax(attacked.final_logits);
  r.flipped = in_class(t.answer_class, r.top_before) && !in_class(t.answer_class, r.top_after);
  return r;
}

AttackResult reverse_attack_by_patching(const ModelBundle& model, const PromptTriple& t,
                                        const AttackCandidate& candidate, const std::vector<int>& ranking,
                                        const std::vector<int>& k_values) {
  AttackResult r = evaluate_attack(model, t, candidate);
  const ModelConfig& c = model.config();
  const int nc = c.n_components();
  if (static_cast<int>(ranking.size()) != nc) throw InputError("ranking must cover every component");
  const auto clean = forward(model, t.render(PromptTriple::Kind::Irrelevant));
  const auto attacked = forward(model, build_attack_prompt(t, candidate.distractor));
  for (int k : k_values) {
    if (k < 0 || k > nc) throw InputError("patch size " + std::to_string(k) + " outside [0, " + std::to_string(nc) + "]");
    std::vector<char> mask(static_cast<size_t>(nc), 0);
    for (int i = 0; i < k; ++i) mask[static_cast<size_t>(ranking[static_cast<size_t>(i)])] = 1;
    const Vector logits = recombine_masked(model.weights(), attacked.components, clean.components, mask);
    ReversalRow row;
    row.k = k;
    row.probability = class_probability(logits, t.answer_class);
    row.top_token = argmax(logits);
    row.correct_top = in_class(t.answer_class, row.top_token);
    r.reversal.push_back(row);
  }
  return r;
}

std::vector<int> facts_answered_by(const FactWorld& world, int token) {
  std::vector<int> out;
  for (const auto& f : world.facts) {
    const auto toks = world.classes[static_cast<size_t>(f.ranked_classes.front())].tokens();
    if (in_class(toks, token)) out.push_back(f.id);
  }
  return out;
}

nlohmann::json attack_result_to_json(const AttackResult& r) {
  nlohmann::json rev = nlohmann::json::array();
  for (const auto& row : r.reversal)
    rev.push_back({{"k", row.k}, {"probability", row.probability}, {"top_token", row.top_token},
                   {"correct_top", row.correct_top}});
  return {{"fact_id", r.fact_id},
          {"head", r.head.id().name()},
          {"distractor", r.distractor},
          {"clean_probability", r.clean_probability},
          {"attacked_probability", r.attacked_probability},
          {"delta_log_odds", r.delta_log_odds},
          {"top_before", r.top_before},
          {"top_after", r.top_after},
          {"flipped", r.flipped},
          {"success", r.success()},
          {"reversal", rev}};
}

AttackResult attack_result_from_json(const nlohmann::json& j) {
  try {
    AttackResult r;
    r.fact_id = j.at("fact_id").get<int>();
    const auto id = ComponentId::parse(j.at("head").get<std::string>());
    if (id.kind != ComponentId::Kind::Head) throw FormatError("attack result: head field is not an attention head");
    r.head = {id.layer, id.head};
    r.distractor = j.at("distractor").get<int>();
    r.clean_probability = j.at("clean_probability").get<double>();
    r.attacked_probability = j.at("attacked_probability").get<double>();
    r.delta_log_odds = j.at("delta_log_odds").get<double>();
    r.top_before = j.at("top_before").get<int>();
    r.top_after = j.at("top_after").get<int>();
    r.flipped = j.at("flipped").get<bool>();
    for (const auto& row : j.at("reversal"))
      r.reversal.push_back({row.at("k").get<int>(), row.at("probability").get<double>(), row.at("top_token").get<int>(),
                            row.at("correct_top").get<bool>()});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("attack result: ") + e.what());
  }
}

}  // namespace fflab
