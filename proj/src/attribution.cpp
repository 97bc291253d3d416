#include "fflab/attribution.hpp"

#include "fflab/errors.hpp"
#include "fflab/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace fflab {

LogOdds clamped_log_odds(const Vector& logits, const std::vector<int>& answer_class) {
  LogOdds lo = class_log_odds(logits, answer_class);
  if (lo.nats > kLogOddsClamp || lo.nats < -kLogOddsClamp) {
    lo.nats = std::clamp(lo.nats, -kLogOddsClamp, kLogOddsClamp);
    lo.saturated = true;
  }
  return lo;
}

LogOdds first_order_patch(const ModelBundle& model, const ActivationTrace& dest, const ActivationTrace& source,
                          const std::vector<ComponentId>& S, const std::vector<int>& answer_class) {
  if (!prompts_paired(dest.tokens, source.tokens)) throw InputError("first_order_patch: traces are not paired");
  const ModelConfig& c = model.config();
  std::vector<char> mask(static_cast<size_t>(c.n_components()), 0);
  for (const auto& id : S) mask[static_cast<size_t>(id.index(c))] = 1;
  return clamped_log_odds(recombine_masked(model.weights(), dest.components, source.components, mask), answer_class);
}

PatchSet prepare_patch_set(const ModelBundle& model, const std::vector<PromptTriple>& triples, int threads) {
  PatchSet ps;
  ps.triples = triples;
  const std::size_t n = triples.size();
  ps.competing.resize(n);
  ps.relevant.resize(n);
  ps.irrelevant.resize(n);
  parallel_for(
      n,
      [&](std::size_t i) {
        const PromptTriple& t = triples[i];
        const auto c = t.render(PromptTriple::Kind::Competing);
        const auto r = t.render(PromptTriple::Kind::Relevant);
        const auto x = t.render(PromptTriple::Kind::Irrelevant);
        if (!prompts_paired(c, r) || !prompts_paired(c, x))
          throw InputError("triple for fact " + std::to_string(t.fact_id) + " is not paired");
        ps.competing[i] = forward(model, c).components;
        ps.relevant[i] = forward(model, r).components;
        ps.irrelevant[i] = forward(model, x).components;
      },
      threads);
  return ps;
}

double triple_patch_effect(const Weights& w, const PatchSet& ps, std::size_t t, const std::vector<char>& mask,
                           int* saturated) {
  const std::vector<int>& cls = ps.triples[t].answer_class;
  const std::vector<char> none(mask.size(), 0);
  auto effect = [&](const Matrix& dest) {
    const LogOdds base = clamped_log_odds(recombine_masked(w, dest, ps.competing[t], none), cls);
    const LogOdds patched = clamped_log_odds(recombine_masked(w, dest, ps.competing[t], mask), cls);
    if (saturated) *saturated += static_cast<int>(base.saturated) + static_cast<int>(patched.saturated);
    return patched.nats - base.nats;
  };
  const double r = effect(ps.relevant[t]);
  const double x = effect(ps.irrelevant[t]);
  return 0.5 * (r + x);
}

std::vector<int> rank_ascending(const std::vector<double>& values) {
  std::vector<int> idx(values.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) {
    return values[static_cast<size_t>(a)] < values[static_cast<size_t>(b)];
  });
  return idx;
}

namespace {

double ordered_mean(const std::vector<double>& v) {
  double total = 0;
  for (double x : v) total += x;
  return v.empty() ? 0.0 : total / static_cast<double>(v.size());
}

double ordered_std(const std::vector<double>& v, double mean) {
  if (v.size() < 2) return 0.0;
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

ImportanceTable component_importance(const ModelBundle& model, const PatchSet& ps, int threads) {
  if (ps.triples.empty()) throw InputError("component_importance: empty dataset");
  const ModelConfig& c = model.config();
  const int nc = c.n_components();
  const std::size_t n = ps.triples.size();
  std::vector<std::vector<double>> per_triple(n);
  std::vector<int> sat(n, 0);
  parallel_for(
      n,
      [&](std::size_t t) {
        per_triple[t].resize(static_cast<size_t>(nc));
        std::vector<char> mask(static_cast<size_t>(nc), 0);
        for (int i = 0; i < nc; ++i) {
          mask[static_cast<size_t>(i)] = 1;
          per_triple[t][static_cast<size_t>(i)] = triple_patch_effect(model.weights(), ps, t, mask, &sat[t]);
          mask[static_cast<size_t>(i)] = 0;
        }
      },
      threads);

  ImportanceTable table;
  std::vector<double> means;
  for (int i = 0; i < nc; ++i) {
    std::vector<double> col(n);
    for (std::size_t t = 0; t < n; ++t) col[t] = per_triple[t][static_cast<size_t>(i)];
    ImportanceRow row;
    row.id = ComponentId::from_index(c, i);
    row.mean_lbf = ordered_mean(col);
    row.std_lbf = ordered_std(col, row.mean_lbf);
    row.n = static_cast<int>(n);
    table.rows.push_back(row);
    means.push_back(row.mean_lbf);
  }
  table.ranking = rank_ascending(means);
  for (int r = 0; r < nc; ++r) table.rows[static_cast<size_t>(table.ranking[static_cast<size_t>(r)])].rank = r;
  for (int s : sat) table.saturated += s;
  return table;
}

ImportanceTable component_importance(const ModelBundle& model, const std::vector<PromptTriple>& triples, int threads) {
  if (triples.empty()) throw InputError("component_importance: empty dataset");
  return component_importance(model, prepare_patch_set(model, triples, threads), threads);
}

int k_star_of(const std::vector<double>& effect, double reference, double threshold) {
  if (reference == 0.0) return 0;
  for (std::size_t k = 0; k < effect.size(); ++k)
    if (effect[k] / reference >= threshold) return static_cast<int>(k);
  return static_cast<int>(effect.size()) - 1;
}

CumulativeCurve cumulative_curve(const ModelBundle& model, const PatchSet& ps, const std::vector<int>& ranking,
                                 double threshold, int threads) {
  const ModelConfig& c = model.config();
  const int nc = c.n_components();
  std::vector<int> check = ranking;
  std::sort(check.begin(), check.end());
  for (int i = 0; i < nc; ++i)
    if (static_cast<int>(check.size()) != nc || check[static_cast<size_t>(i)] != i)
      throw InputError("cumulative_curve: ranking must be a permutation of all components");
  const std::size_t n = ps.triples.size();
  std::vector<std::vector<double>> per_triple(n);
  std::vector<int> sat(n, 0);
  parallel_for(
      n,
      [&](std::size_t t) {
        per_triple[t].resize(static_cast<size_t>(nc) + 1);
        std::vector<char> mask(static_cast<size_t>(nc), 0);
        for (int k = 0; k <= nc; ++k) {
          if (k > 0) mask[static_cast<size_t>(ranking[static_cast<size_t>(k - 1)])] = 1;
          per_triple[t][static_cast<size_t>(k)] = triple_patch_effect(model.weights(), ps, t, mask, &sat[t]);
        }
      },
      threads);
  CumulativeCurve curve;
  curve.threshold = threshold;
  for (int k = 0; k <= nc; ++k) {
    std::vector<double> col(n);
    for (std::size_t t = 0; t < n; ++t) col[t] = per_triple[t][static_cast<size_t>(k)];
    curve.effect.push_back(ordered_mean(col));
  }
  curve.reference = curve.effect.back();
  curve.k_star = k_star_of(curve.effect, curve.reference, threshold);
  for (int s : sat) curve.saturated += s;
  return curve;
}

IndependenceReport independence_compare(const ImportanceTable& table, const CumulativeCurve& curve) {
  if (curve.effect.size() != table.ranking.size() + 1)
    throw InputError("independence_compare: curve and table sizes disagree");
  IndependenceReport rep;
  rep.joint = curve.effect;
  double running = 0;
  rep.summed.push_back(0.0);
  for (std::size_t k = 0; k < table.ranking.size(); ++k) {
    running += table.ranked(static_cast<int>(k)).mean_lbf;
    rep.summed.push_back(running);
  }
  for (std::size_t k = 0; k < rep.joint.size(); ++k) rep.gap.push_back(rep.joint[k] - rep.summed[k]);
  return rep;
}

IndependenceReport independence_compare(const ModelBundle& model, const PatchSet& ps, const ImportanceTable& table,
                                        int threads) {
  return independence_compare(table, cumulative_curve(model, ps, table.ranking, 0.95, threads));
}

}  // namespace fflab
