#include "fflab/dataset.hpp"

#include "fflab/errors.hpp"
#include "fflab/parallel.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

namespace fflab {

const Fact& FactWorld::fact(int id) const {
  if (id < 0 || id >= static_cast<int>(facts.size())) throw InputError("unknown fact id " + std::to_string(id));
  return facts[static_cast<size_t>(id)];
}

int FactWorld::class_of(int token) const {
  if (token < 0 || token >= static_cast<int>(alias_map.size())) return -1;
  return alias_map[static_cast<size_t>(token)];
}

int FactWorld::tokens_used() const {
  int n = tok::kNumSpecial + static_cast<int>(fillers.size() + relations.size() + subjects.size());
  for (const auto& c : classes) n += c.alias < 0 ? 1 : 2;
  return n;
}

namespace {

int draw(std::mt19937_64& rng, int n) { return std::uniform_int_distribution<int>(0, n - 1)(rng); }

}  // namespace

FactWorld generate_world(std::uint64_t seed, int n_facts, const WorldSizes& s, int vocab_size) {
  if (n_facts < 0) throw ConstructionError("n_facts must be non-negative");
  if (s.n_categories <= 0 || s.classes_per_category <= 0 || s.n_fillers <= 0)
    throw ConstructionError("world sizes must be positive");
  if (s.answers_per_fact < 3) throw ConstructionError("answers_per_fact must be at least 3");
  if (s.classes_per_category < s.answers_per_fact + 1)
    throw ConstructionError("classes_per_category must exceed answers_per_fact so a relevant forbidden word exists");
  if (s.alias_fraction < 0 || s.alias_fraction > 1) throw ConstructionError("alias_fraction must be in [0,1]");
  if (s.held_out_fraction < 0 || s.held_out_fraction > 1) throw ConstructionError("held_out_fraction must be in [0,1]");

  std::mt19937_64 rng(seed);
  FactWorld w;
  w.seed = seed;
  w.sizes = s;
  w.vocab_size = vocab_size;

  // count first so overflow is reported before any allocation
  std::vector<char> has_alias;
  std::bernoulli_distribution coin(s.alias_fraction);
  const int n_classes = s.n_categories * s.classes_per_category;
  for (int i = 0; i < n_classes; ++i) has_alias.push_back(coin(rng) ? 1 : 0);
  const int n_answers = n_classes + static_cast<int>(std::count(has_alias.begin(), has_alias.end(), 1));
  const long need = static_cast<long>(tok::kNumSpecial) + s.n_fillers + s.n_categories + n_answers + n_facts;
  if (need > vocab_size)
    throw ConstructionError("world needs " + std::to_string(need) + " tokens but vocab_size is " +
                            std::to_string(vocab_size));

  int next = tok::kNumSpecial;
  for (int i = 0; i < s.n_fillers; ++i) w.fillers.push_back(next++);
  for (int i = 0; i < s.n_categories; ++i) w.relations.push_back(next++);
  w.alias_map.assign(static_cast<size_t>(vocab_size), -1);
  for (int cat = 0; cat < s.n_categories; ++cat) {
    for (int k = 0; k < s.classes_per_category; ++k) {
      AnswerClass c;
      c.id = static_cast<int>(w.classes.size());
      c.category = cat;
      c.primary = next++;
      w.alias_map[static_cast<size_t>(c.primary)] = c.id;
      if (has_alias[static_cast<size_t>(c.id)]) {
        c.alias = next++;
        w.alias_map[static_cast<size_t>(c.alias)] = c.id;
      }
      w.classes.push_back(c);
    }
  }
  for (int f = 0; f < n_facts; ++f) w.subjects.push_back(next++);

  for (int f = 0; f < n_facts; ++f) {
    Fact fact;
    fact.id = f;
    fact.subject = w.subjects[static_cast<size_t>(f)];
    fact.category = f % s.n_categories;
    fact.relation = w.relations[static_cast<size_t>(fact.category)];
    std::vector<int> pool(static_cast<size_t>(s.classes_per_category));
    std::iota(pool.begin(), pool.end(), fact.category * s.classes_per_category);
    for (int i = static_cast<int>(pool.size()) - 1; i > 0; --i) std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(draw(rng, i + 1))]);
    fact.ranked_classes.assign(pool.begin(), pool.begin() + s.answers_per_fact);
    for (int c : fact.ranked_classes)
      for (int t : w.class_tokens(c)) fact.ranked_answers.push_back(t);
    const int spare = s.answers_per_fact + draw(rng, s.classes_per_category - s.answers_per_fact);
    fact.relevant_forbidden = w.classes[static_cast<size_t>(pool[static_cast<size_t>(spare)])].primary;
    fact.irrelevant_forbidden = w.fillers[static_cast<size_t>(draw(rng, s.n_fillers))];
    w.facts.push_back(std::move(fact));
  }

  std::vector<int> order(static_cast<size_t>(n_facts));
  std::iota(order.begin(), order.end(), 0);
  for (int i = n_facts - 1; i > 0; --i) std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(draw(rng, i + 1))]);
  const int n_held = static_cast<int>(std::lround(s.held_out_fraction * n_facts));
  for (int i = 0; i < n_held; ++i) w.facts[static_cast<size_t>(order[static_cast<size_t>(i)])].held_out = true;
  return w;
}

std::vector<std::string> validate_world(const FactWorld& w) {
  std::vector<std::string> bad;
  auto fail = [&](int f, const std::string& what) { bad.push_back("fact " + std::to_string(f) + ": " + what); };
  const std::set<int> fillers(w.fillers.begin(), w.fillers.end());
  for (std::size_t t = 0; t < w.alias_map.size(); ++t) {
    const int c = w.alias_map[t];
    if (c < 0) continue;
    const auto toks = w.class_tokens(c);
    if (std::find(toks.begin(), toks.end(), static_cast<int>(t)) == toks.end())
      bad.push_back("alias map entry for token " + std::to_string(t) + " disagrees with its class");
  }
  for (const auto& f : w.facts) {
    if (static_cast<int>(f.ranked_classes.size()) < 3) fail(f.id, "fewer than 3 ranked answers");
    if (std::set<int>(f.ranked_classes.begin(), f.ranked_classes.end()).size() != f.ranked_classes.size())
      fail(f.id, "ranked classes not distinct");
    for (int c : f.ranked_classes)
      if (w.classes.at(static_cast<size_t>(c)).category != f.category) fail(f.id, "ranked class outside category");
    const int top = w.classes.at(static_cast<size_t>(f.ranked_classes.front())).primary;
    const int rel = w.class_of(f.relevant_forbidden);
    if (rel < 0) {
      fail(f.id, "relevant forbidden word is not an answer");
    } else {
      if (w.classes[static_cast<size_t>(rel)].category != f.category) fail(f.id, "relevant forbidden word off-category");
      if (std::find(f.ranked_classes.begin(), f.ranked_classes.end(), rel) != f.ranked_classes.end())
        fail(f.id, "relevant forbidden word is one of the fact's answers");
    }
    if (!fillers.count(f.irrelevant_forbidden)) fail(f.id, "irrelevant forbidden word is not a filler");
    const std::set<int> three = {top, f.relevant_forbidden, f.irrelevant_forbidden};
    if (three.size() != 3) fail(f.id, "forbidden candidates not distinct");
    if (w.class_of(f.subject) >= 0 || f.subject < tok::kNumSpecial) fail(f.id, "subject token overlaps answers/specials");
  }
  return bad;
}

nlohmann::json world_to_json(const FactWorld& w) {
  nlohmann::json j;
  j["seed"] = w.seed;
  j["vocab_size"] = w.vocab_size;
  j["sizes"] = {{"n_categories", w.sizes.n_categories},
                {"classes_per_category", w.sizes.classes_per_category},
                {"alias_fraction", w.sizes.alias_fraction},
                {"n_fillers", w.sizes.n_fillers},
                {"answers_per_fact", w.sizes.answers_per_fact},
                {"held_out_fraction", w.sizes.held_out_fraction}};
  j["fillers"] = w.fillers;
  j["relations"] = w.relations;
  j["subjects"] = w.subjects;
  auto& cls = j["classes"] = nlohmann::json::array();
  for (const auto& c : w.classes)
    cls.push_back({{"id", c.id}, {"category", c.category}, {"primary", c.primary}, {"alias", c.alias}});
  auto& facts = j["facts"] = nlohmann::json::array();
  for (const auto& f : w.facts)
    facts.push_back({{"id", f.id},
                     {"subject", f.subject},
                     {"relation", f.relation},
                     {"category", f.category},
                     {"ranked_classes", f.ranked_classes},
                     {"ranked_answers", f.ranked_answers},
                     {"relevant_forbidden", f.relevant_forbidden},
                     {"irrelevant_forbidden", f.irrelevant_forbidden},
                     {"held_out", f.held_out}});
  return j;
}

FactWorld world_from_json(const nlohmann::json& j) {
  try {
    FactWorld w;
    w.seed = j.at("seed").get<std::uint64_t>();
    w.vocab_size = j.at("vocab_size").get<int>();
    const auto& s = j.at("sizes");
    w.sizes.n_categories = s.at("n_categories");
    w.sizes.classes_per_category = s.at("classes_per_category");
    w.sizes.alias_fraction = s.at("alias_fraction");
    w.sizes.n_fillers = s.at("n_fillers");
    w.sizes.answers_per_fact = s.at("answers_per_fact");
    w.sizes.held_out_fraction = s.at("held_out_fraction");
    w.fillers = j.at("fillers").get<std::vector<int>>();
    w.relations = j.at("relations").get<std::vector<int>>();
    w.subjects = j.at("subjects").get<std::vector<int>>();
    w.alias_map.assign(static_cast<size_t>(w.vocab_size), -1);
    for (const auto& c : j.at("classes")) {
      AnswerClass a{c.at("id"), c.at("category"), c.at("primary"), c.at("alias")};
      if (a.id != static_cast<int>(w.classes.size())) throw FormatError("world field 'classes' is out of order");
      for (int t : a.tokens()) {
        if (t < 0 || t >= w.vocab_size) throw FormatError("world field 'classes' has token out of range");
        w.alias_map[static_cast<size_t>(t)] = a.id;
      }
      w.classes.push_back(a);
    }
    for (const auto& f : j.at("facts")) {
      Fact x;
      x.id = f.at("id");
      x.subject = f.at("subject");
      x.relation = f.at("relation");
      x.category = f.at("category");
      x.ranked_classes = f.at("ranked_classes").get<std::vector<int>>();
      x.ranked_answers = f.at("ranked_answers").get<std::vector<int>>();
      x.relevant_forbidden = f.at("relevant_forbidden");
      x.irrelevant_forbidden = f.at("irrelevant_forbidden");
      x.held_out = f.at("held_out");
      if (x.id != static_cast<int>(w.facts.size())) throw FormatError("world field 'facts' is out of order");
      for (int c : x.ranked_classes)
        if (c < 0 || c >= static_cast<int>(w.classes.size())) throw FormatError("world field 'ranked_classes' out of range");
      w.facts.push_back(std::move(x));
    }
    return w;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed world file: ") + e.what());
  }
}

std::vector<int> render_tokens(const std::vector<int>& prefix, int forbidden, const std::vector<int>& window) {
  if (prefix.size() != 2) throw InputError("fact prefix must be [relation, subject]");
  if (!window.empty() && static_cast<int>(window.size()) != tmpl::kWindowWidth)
    throw InputError("injection window must hold exactly 2 tokens");
  std::vector<int> t = {tok::BOS, tok::SYS, tok::ASSIST, tok::PAD, tok::PAD, tok::SINGLE, tok::TRUTH,
                        tok::FORBID, tok::MARKER, forbidden, tok::ESYS, prefix[0], prefix[1]};
  if (!window.empty()) std::copy(window.begin(), window.end(), t.begin() + tmpl::kWindowStart);
  return t;
}

std::vector<int> render_prompt(const FactWorld& world, int fact_id, int forbidden) {
  const Fact& f = world.fact(fact_id);
  if (forbidden < 0 || forbidden >= world.vocab_size) throw InputError("forbidden token out of range");
  return render_tokens({f.relation, f.subject}, forbidden);
}

int PromptTriple::forbidden(Kind k) const {
  switch (k) {
    case Kind::Competing:
      return competing_forbidden;
    case Kind::Relevant:
      return relevant_forbidden;
    case Kind::Irrelevant:
      return irrelevant_forbidden;
  }
  return -1;
}

const char* kind_name(PromptTriple::Kind k) {
  switch (k) {
    case PromptTriple::Kind::Competing:
      return "competing";
    case PromptTriple::Kind::Relevant:
      return "relevant";
    case PromptTriple::Kind::Irrelevant:
      return "irrelevant";
  }
  return "?";
}

PromptTriple make_triple(const FactWorld& world, int fact_id) {
  const Fact& f = world.fact(fact_id);
  PromptTriple t;
  t.fact_id = f.id;
  t.prefix_tokens = {f.relation, f.subject};
  t.answer = world.classes[static_cast<size_t>(f.ranked_classes.front())].primary;
  t.answer_class = world.answer_class(f.id);
  t.competing_forbidden = t.answer;
  t.relevant_forbidden = f.relevant_forbidden;
  t.irrelevant_forbidden = f.irrelevant_forbidden;
  t.held_out = f.held_out;
  return t;
}

std::vector<PromptTriple> make_triples(const FactWorld& world) {
  std::vector<PromptTriple> out;
  for (const auto& f : world.facts) out.push_back(make_triple(world, f.id));
  return out;
}

nlohmann::json triple_to_json(const PromptTriple& t) {
  return {{"fact_id", t.fact_id},
          {"prefix_tokens", t.prefix_tokens},
          {"answer", t.answer},
          {"answer_class", t.answer_class},
          {"competing_forbidden", t.competing_forbidden},
          {"relevant_forbidden", t.relevant_forbidden},
          {"irrelevant_forbidden", t.irrelevant_forbidden},
          {"forbidden_slot_index", t.forbidden_slot_index},
          {"held_out", t.held_out}};
}

PromptTriple triple_from_json(const nlohmann::json& j) {
  try {
    PromptTriple t;
    t.fact_id = j.at("fact_id");
    t.prefix_tokens = j.at("prefix_tokens").get<std::vector<int>>();
    t.answer = j.at("answer");
    t.answer_class = j.value("answer_class", std::vector<int>{t.answer});
    t.competing_forbidden = j.at("competing_forbidden");
    t.relevant_forbidden = j.at("relevant_forbidden");
    t.irrelevant_forbidden = j.at("irrelevant_forbidden");
    t.forbidden_slot_index = j.at("forbidden_slot_index");
    t.held_out = j.value("held_out", false);
    if (t.prefix_tokens.size() != 2) throw FormatError("triple field 'prefix_tokens' must have 2 tokens");
    if (t.forbidden_slot_index != tmpl::kForbiddenSlot) throw FormatError("triple field 'forbidden_slot_index' mismatch");
    if (t.competing_forbidden != t.answer) throw FormatError("triple field 'competing_forbidden' must equal 'answer'");
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed triple: ") + e.what());
  }
}

void write_triples_jsonl(const std::vector<PromptTriple>& triples, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw InputError("cannot write dataset: " + path);
  for (const auto& t : triples) f << triple_to_json(t).dump() << '\n';
  if (!f) throw InputError("failed writing dataset: " + path);
}

std::vector<PromptTriple> read_triples_jsonl(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw InputError("cannot open dataset: " + path);
  std::vector<PromptTriple> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    try {
      out.push_back(triple_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

bool prompts_paired(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.size() != static_cast<size_t>(tmpl::kLength)) return false;
  for (int i = 0; i < tmpl::kLength; ++i) {
    const bool free = i == tmpl::kForbiddenSlot || (i >= tmpl::kWindowStart && i < tmpl::kWindowStart + tmpl::kWindowWidth);
    if (!free && a[static_cast<size_t>(i)] != b[static_cast<size_t>(i)]) return false;
  }
  return true;
}

void FilterCriteria::validate() const {
  if (!(min_noncompeting_prob >= 0 && min_noncompeting_prob < 1))
    throw InputError("min_noncompeting_prob must be in [0,1)");
  if (!(min_odds_reduction_factor >= 1)) throw InputError("min_odds_reduction_factor must be at least 1");
}

std::vector<TripleScore> score_triples(const ModelBundle& model, const std::vector<PromptTriple>& triples, int threads) {
  return parallel_map<TripleScore>(
      triples.size(),
      [&](std::size_t i) {
        const PromptTriple& t = triples[i];
        TripleScore s;
        s.fact_id = t.fact_id;
        const Vector lc = forward(model, t.render(PromptTriple::Kind::Competing)).final_logits;
        const Vector lr = forward(model, t.render(PromptTriple::Kind::Relevant)).final_logits;
        const Vector li = forward(model, t.render(PromptTriple::Kind::Irrelevant)).final_logits;
        s.p_competing = class_probability(lc, t.answer_class);
        s.p_relevant = class_probability(lr, t.answer_class);
        s.p_irrelevant = class_probability(li, t.answer_class);
        s.lo_competing = class_log_odds(lc, t.answer_class).nats;
        s.lo_relevant = class_log_odds(lr, t.answer_class).nats;
        s.lo_irrelevant = class_log_odds(li, t.answer_class).nats;
        s.log_odds_ratio = s.lo_competing - std::min(s.lo_relevant, s.lo_irrelevant);
        return s;
      },
      threads);
}

bool passes_filter(const TripleScore& s, const FilterCriteria& c) {
  const bool likely = s.p_relevant > c.min_noncompeting_prob && s.p_irrelevant > c.min_noncompeting_prob;
  const bool reduced = s.log_odds_ratio <= -std::log(c.min_odds_reduction_factor);
  return likely && reduced;
}

double quantile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

FilterResult filter_dataset(const ModelBundle& model, const std::vector<PromptTriple>& triples,
                            const FilterCriteria& criteria, int threads) {
  criteria.validate();
  FilterResult r;
  r.report.criteria = criteria;
  r.report.scores = score_triples(model, triples, threads);
  r.report.n_input = static_cast<int>(triples.size());
  std::vector<double> ratios;
  for (std::size_t i = 0; i < triples.size(); ++i) {
    TripleScore& s = r.report.scores[i];
    s.kept = passes_filter(s, criteria);
    if (s.kept) {
      r.kept.push_back(triples[i]);
      ratios.push_back(s.log_odds_ratio);
    }
  }
  std::stable_sort(r.kept.begin(), r.kept.end(), [](const auto& a, const auto& b) { return a.fact_id < b.fact_id; });
  r.report.n_kept = static_cast<int>(r.kept.size());
  r.report.empty = r.kept.empty();
  if (!ratios.empty()) {
    double total = 0;
    for (double x : ratios) total += x;
    r.report.mean_log_odds_ratio = total / static_cast<double>(ratios.size());
    for (double q : {0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0}) r.report.ratio_quantiles.push_back(quantile(ratios, q));
  }
  return r;
}

std::vector<int> top_k_tokens(const Vector& logits, int k) {
  std::vector<int> idx(static_cast<size_t>(logits.size()));
  std::iota(idx.begin(), idx.end(), 0);
  k = std::min<int>(k, static_cast<int>(idx.size()));
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    return logits[a] != logits[b] ? logits[a] > logits[b] : a < b;
  });
  idx.resize(static_cast<size_t>(k));
  return idx;
}

OriginRow origin_from_logits(int fact_id, const Vector& noncompeting_logits, const Vector& competing_logits,
                             const std::vector<int>& answer_class, int top_k) {
  OriginRow r;
  r.fact_id = fact_id;
  r.noncompeting_top = top_k_tokens(noncompeting_logits, top_k);
  r.competing_top = top_k_tokens(competing_logits, 1).front();
  for (int t : r.noncompeting_top) {
    if (std::find(answer_class.begin(), answer_class.end(), t) == answer_class.end()) {
      r.predicted = t;
      break;
    }
  }
  r.undetermined = r.predicted < 0;
  r.match = !r.undetermined && r.predicted == r.competing_top;
  return r;
}

OriginReport incorrect_answer_origin(const ModelBundle& model, const std::vector<PromptTriple>& triples, int top_k,
                                     int threads) {
  OriginReport rep;
  rep.rows = parallel_map<OriginRow>(
      triples.size(),
      [&](std::size_t i) {
        const PromptTriple& t = triples[i];
        const Vector nc = forward(model, t.render(PromptTriple::Kind::Irrelevant)).final_logits;
        const Vector c = forward(model, t.render(PromptTriple::Kind::Competing)).final_logits;
        return origin_from_logits(t.fact_id, nc, c, t.answer_class, top_k);
      },
      threads);
  for (const auto& r : rep.rows) {
    if (r.undetermined) continue;
    ++rep.n_determined;
    if (r.match) ++rep.n_match;
  }
  rep.match_rate = rep.n_determined ? static_cast<double>(rep.n_match) / rep.n_determined : 0.0;
  return rep;
}

}  // namespace fflab
