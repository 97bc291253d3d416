#include "fflab/headlab.hpp"

#include "fflab/attribution.hpp"
#include "fflab/errors.hpp"
#include "fflab/parallel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <random>

namespace fflab {

namespace {

constexpr double kAttnClamp = 30.0;

double attention_log_odds(double a) {
  const LogOdds lo = log_odds(Probability(std::clamp(a, 0.0, 1.0)));
  return std::clamp(lo.nats, -kAttnClamp, kAttnClamp);
}

LogOdds to_log_odds(double a) {
  LogOdds lo = log_odds(Probability(std::clamp(a, 0.0, 1.0)));
  if (std::abs(lo.nats) > kAttnClamp) {
    lo.nats = std::clamp(lo.nats, -kAttnClamp, kAttnClamp);
    lo.saturated = true;
  }
  return lo;
}

void check_head(const ModelConfig& c, const HeadRef& h) {
  if (h.layer < 0 || h.layer >= c.n_layers || h.head < 0 || h.head >= c.n_heads)
    throw InputError("head L" + std::to_string(h.layer) + "H" + std::to_string(h.head) + " not in model");
}

void check_slot(const ActivationTrace& tr, int slot) {
  if (slot < 0 || slot >= tr.length()) throw InputError("slot index " + std::to_string(slot) + " outside the prompt");
}

}  // namespace

Histogram make_histogram(const std::vector<double>& values, double lo, double hi, int bins) {
  Histogram h;
  h.lo = lo;
  h.hi = hi;
  h.fraction.assign(static_cast<size_t>(bins), 0.0);
  h.count = static_cast<int>(values.size());
  if (values.empty()) return h;
  const double width = (hi - lo) / bins;
  std::vector<long> counts(static_cast<size_t>(bins), 0);
  for (double v : values) {
    int b = width > 0 ? static_cast<int>(std::floor((v - lo) / width)) : 0;
    b = std::clamp(b, 0, bins - 1);
    ++counts[static_cast<size_t>(b)];
  }
  for (int b = 0; b < bins; ++b)
    h.fraction[static_cast<size_t>(b)] = static_cast<double>(counts[static_cast<size_t>(b)]) / static_cast<double>(values.size());
  return h;
}

Probability attention_to_forbidden(const ActivationTrace& trace, const HeadRef& head, int slot) {
  check_slot(trace, slot);
  if (head.layer < 0 || head.layer >= static_cast<int>(trace.patterns.size()) || head.head < 0 ||
      head.head >= static_cast<int>(trace.patterns[static_cast<size_t>(head.layer)].size()))
    throw InputError("head not in trace");
  const Matrix& p = trace.patterns[static_cast<size_t>(head.layer)][static_cast<size_t>(head.head)];
  return Probability(std::clamp(p(p.rows() - 1, slot), 0.0, 1.0));
}

const KindStats& HeadAttention::of(PromptTriple::Kind k) const {
  switch (k) {
    case PromptTriple::Kind::Competing:
      return competing;
    case PromptTriple::Kind::Relevant:
      return relevant;
    case PromptTriple::Kind::Irrelevant:
      return irrelevant;
  }
  return competing;
}

std::vector<HeadRef> all_heads(const ModelConfig& c) {
  std::vector<HeadRef> out;
  for (int l = 0; l < c.n_layers; ++l)
    for (int h = 0; h < c.n_heads; ++h) out.push_back({l, h});
  return out;
}

AttentionStats attention_stats(const ModelBundle& model, const std::vector<PromptTriple>& triples,
                               const std::vector<HeadRef>& heads, int top_k, int threads) {
  for (const auto& h : heads) check_head(model.config(), h);
  const std::size_t n = triples.size();
  // values[t][kind][head]
  std::vector<std::array<std::vector<double>, 3>> values(n);
  parallel_for(
      n,
      [&](std::size_t t) {
        int ki = 0;
        for (auto kind : kAllKinds) {
          const auto tr = forward(model, triples[t].render(kind));
          auto& row = values[t][static_cast<size_t>(ki++)];
          for (const auto& h : heads) row.push_back(attention_to_forbidden(tr, h, triples[t].forbidden_slot_index).value());
        }
      },
      threads);
  AttentionStats stats;
  stats.n_triples = static_cast<int>(n);
  for (std::size_t hi = 0; hi < heads.size(); ++hi) {
    HeadAttention ha;
    ha.head = heads[hi];
    KindStats* slots[3] = {&ha.competing, &ha.relevant, &ha.irrelevant};
    for (int k = 0; k < 3; ++k) {
      KindStats& ks = *slots[k];
      for (std::size_t t = 0; t < n; ++t) ks.values.push_back(values[t][static_cast<size_t>(k)][hi]);
      double total = 0;
      for (double v : ks.values) total += v;
      ks.mean = n ? total / static_cast<double>(n) : 0.0;
      ks.median = quantile(ks.values, 0.5);
      ks.hist = make_histogram(ks.values, 0.0, 1.0);
    }
    stats.heads.push_back(std::move(ha));
  }
  std::vector<double> means;
  for (const auto& h : stats.heads) means.push_back(-h.competing.mean);
  const auto order = rank_ascending(means);
  stats.top_k = std::min<int>(top_k, static_cast<int>(order.size()));
  double top = 0, rest = 0;
  for (std::size_t r = 0; r < order.size(); ++r)
    (static_cast<int>(r) < stats.top_k ? top : rest) += -means[static_cast<size_t>(order[r])];
  stats.top_mean = stats.top_k ? top / stats.top_k : 0.0;
  const int n_rest = static_cast<int>(order.size()) - stats.top_k;
  stats.rest_mean = n_rest > 0 ? rest / n_rest : 0.0;
  return stats;
}

Vector ov_logits(const ModelBundle& model, const HeadRef& head, int token) {
  const Weights& w = model.weights();
  const ModelConfig& c = w.config;
  check_head(c, head);
  if (token < 0 || token >= c.vocab_size) throw InputError("ov_logits: token out of range");
  const LayerWeights& L = w.layers[static_cast<size_t>(head.layer)];
  const Vector xn = rms_normalize(w.embedding.row(token).transpose(), L.attn_gain);
  const Vector v = L.wv.middleCols(head.head * c.d_head, c.d_head).transpose() * xn;
  const Vector o = L.wo.middleRows(head.head * c.d_head, c.d_head).transpose() * v;
  return w.unembedding.transpose() * o;
}

namespace {

// R(i -> j) for every j from one row of OV logits.
Vector responses(const Vector& phi) {
  const Eigen::Index n = phi.size();
  const double m = phi.maxCoeff();
  double s = 0;
  for (Eigen::Index k = 0; k < n; ++k) s += std::exp(phi[k] - m);
  Vector r(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double ej = std::exp(phi[j] - m);
    double rest;
    if (ej > 0.5 * s) {  // dominant coordinate: sum the others directly
      rest = 0;
      for (Eigen::Index k = 0; k < n; ++k)
        if (k != j) rest += std::exp(phi[k] - m);
    } else {
      rest = s - ej;
    }
    r[j] = phi[j] - (std::log(rest) + m);
  }
  return r;
}

Matrix all_ov_logits(const ModelBundle& model, const HeadRef& head) {
  const Weights& w = model.weights();
  const ModelConfig& c = w.config;
  const LayerWeights& L = w.layers[static_cast<size_t>(head.layer)];
  const Matrix xn = norm_rows(w.embedding, L.attn_gain);
  const Matrix v = project(xn, L.wv.middleCols(head.head * c.d_head, c.d_head));
  const Matrix o = project(v, L.wo.middleRows(head.head * c.d_head, c.d_head));
  return project(o, w.unembedding);
}

}  // namespace

double ov_response(const ModelBundle& model, const HeadRef& head, int i, int j) {
  const ModelConfig& c = model.config();
  if (j < 0 || j >= c.vocab_size) throw InputError("ov_response: token out of range");
  return responses(ov_logits(model, head, i))[j];
}

PairSampler PairSampler::automatic(int vocab, std::uint64_t seed, std::int64_t count) {
  PairSampler s;
  s.exhaustive = static_cast<double>(vocab) * vocab <= 1e6;
  s.seed = seed;
  s.count = count;
  return s;
}

OVProfile suppression_score(const ModelBundle& model, const HeadRef& head, const PairSampler& sampler, int top_n) {
  const ModelConfig& c = model.config();
  check_head(c, head);
  const int V = c.vocab_size;
  OVProfile prof;
  prof.head = head;
  prof.exhaustive = sampler.exhaustive;
  prof.seed = sampler.seed;
  std::vector<double> diffs;
  std::vector<std::pair<int, double>> self;

  if (sampler.exhaustive) {
    const Matrix phi = all_ov_logits(model, head);
    diffs.reserve(static_cast<size_t>(V) * static_cast<size_t>(V - 1));
    for (int i = 0; i < V; ++i) {
      const Vector r = responses(phi.row(i).transpose());
      self.emplace_back(i, r[i]);
      for (int j = 0; j < V; ++j)
        if (j != i) diffs.push_back(r[i] - r[j]);
    }
  } else {
    if (sampler.count <= 0) throw InputError("suppression_score: sampled mode needs a positive count");
    std::mt19937_64 rng(sampler.seed);
    std::uniform_int_distribution<int> pick(0, V - 1);
    std::vector<std::pair<int, int>> pairs;
    for (std::int64_t s = 0; s < sampler.count; ++s) {
      const int i = pick(rng);
      int j = pick(rng);
      while (j == i) j = pick(rng);
      pairs.emplace_back(i, j);
    }
    std::map<int, Vector> cache;
    for (const auto& [i, j] : pairs) {
      auto it = cache.find(i);
      if (it == cache.end()) it = cache.emplace(i, responses(ov_logits(model, head, i))).first;
      diffs.push_back(it->second[i] - it->second[j]);
    }
    for (const auto& [i, r] : cache) self.emplace_back(i, r[i]);
  }
  double total = 0;
  for (double d : diffs) total += d;
  prof.n_pairs = static_cast<std::int64_t>(diffs.size());
  prof.suppression_score = diffs.empty() ? 0.0 : total / static_cast<double>(diffs.size());
  double ss = 0;
  for (double d : diffs) ss += (d - prof.suppression_score) * (d - prof.suppression_score);
  if (diffs.size() > 1) prof.std_error = std::sqrt(ss / static_cast<double>(diffs.size() - 1) / static_cast<double>(diffs.size()));
  double lo = 0, hi = 0;
  if (!diffs.empty()) {
    lo = *std::min_element(diffs.begin(), diffs.end());
    hi = *std::max_element(diffs.begin(), diffs.end());
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  prof.response_hist = make_histogram(diffs, lo, hi);
  std::stable_sort(self.begin(), self.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second < b.second : a.first < b.first;
  });
  self.resize(std::min<std::size_t>(self.size(), static_cast<std::size_t>(top_n)));
  prof.top_downweighted = self;
  return prof;
}

const char* mode_name(EnrichMode m) { return m == EnrichMode::Key ? "key" : "query"; }

Probability enrichment_attention(const ModelBundle& model, const ActivationTrace& trace, const HeadRef& head, int slot,
                                 int cutoff, EnrichMode mode) {
  const ModelConfig& c = model.config();
  check_head(c, head);
  check_slot(trace, slot);
  if (cutoff < 0 || cutoff > head.layer)
    throw InputError("enrichment cutoff " + std::to_string(cutoff) + " outside [0, " + std::to_string(head.layer) + "]");
  const LayerWeights& L = model.weights().layers[static_cast<size_t>(head.layer)];
  const int last = trace.length() - 1;
  const int row = mode == EnrichMode::Key ? slot : last;
  Matrix x = trace.resid_pre[static_cast<size_t>(head.layer)];
  x.row(row) = trace.resid_pre[static_cast<size_t>(cutoff)].row(row);
  const Matrix xn = norm_rows(x, L.attn_gain);
  Matrix pattern;
  if (mode == EnrichMode::Key) {
    Matrix k = project(xn, L.wk);
    rope_rows(k, c.n_heads, c.d_head, trace.positions);
    pattern = attention_pattern(trace.queries[static_cast<size_t>(head.layer)], k, head.head, c.d_head);
  } else {
    Matrix q = project(xn, L.wq);
    rope_rows(q, c.n_heads, c.d_head, trace.positions);
    pattern = attention_pattern(q, trace.keys[static_cast<size_t>(head.layer)], head.head, c.d_head);
  }
  return Probability(std::clamp(pattern(last, slot), 0.0, 1.0));
}

EnrichmentCurve enrichment_curve(const ModelBundle& model, const std::vector<ActivationTrace>& traces,
                                 const HeadRef& head, int slot, EnrichMode mode, int threads) {
  EnrichmentCurve curve;
  curve.head = head;
  curve.mode = mode;
  curve.n = static_cast<int>(traces.size());
  for (int L = 0; L <= head.layer; ++L) {
    const auto att = parallel_map<double>(
        traces.size(), [&](std::size_t t) { return enrichment_attention(model, traces[t], head, slot, L, mode).value(); },
        threads);
    std::vector<double> lo;
    for (double a : att) lo.push_back(attention_log_odds(a));
    curve.median_log_odds.push_back(quantile(lo, 0.5));
    curve.median_attention.push_back(quantile(att, 0.5));
  }
  return curve;
}

AttentionPair cross_run_attention(const ModelBundle& model, const ActivationTrace& competing,
                                  const ActivationTrace& noncompeting, const HeadRef& head, int slot) {
  const ModelConfig& c = model.config();
  check_head(c, head);
  check_slot(competing, slot);
  if (!prompts_paired(competing.tokens, noncompeting.tokens)) throw InputError("cross_run_attention: traces are not paired");
  const auto& q = competing.queries[static_cast<size_t>(head.layer)];
  const Matrix base = attention_pattern(q, competing.keys[static_cast<size_t>(head.layer)], head.head, c.d_head);
  const Matrix crossed = attention_pattern(q, noncompeting.keys[static_cast<size_t>(head.layer)], head.head, c.d_head);
  const int last = competing.length() - 1;
  return {to_log_odds(base(last, slot)), to_log_odds(crossed(last, slot))};
}

AttentionPair positional_probe(const ModelBundle& model, const ActivationTrace& trace, const HeadRef& head, int slot,
                               int position) {
  const ModelConfig& c = model.config();
  check_head(c, head);
  check_slot(trace, slot);
  const int last = trace.length() - 1;
  if (position < 0 || position > last) throw InputError("positional_probe: position outside [0, final position]");
  const LayerWeights& L = model.weights().layers[static_cast<size_t>(head.layer)];
  const auto& q = trace.queries[static_cast<size_t>(head.layer)];
  const Matrix base = attention_pattern(q, trace.keys[static_cast<size_t>(head.layer)], head.head, c.d_head);
  Matrix k = project(norm_rows(trace.resid_pre[static_cast<size_t>(head.layer)], L.attn_gain), L.wk);
  std::vector<int> pos = trace.positions;
  pos[static_cast<size_t>(slot)] = position;
  rope_rows(k, c.n_heads, c.d_head, pos);
  const Matrix moved = attention_pattern(q, k, head.head, c.d_head);
  return {to_log_odds(base(last, slot)), to_log_odds(moved(last, slot))};
}

AttentionPair positional_randomization(const ModelBundle& model, const ActivationTrace& trace, const HeadRef& head,
                                       int slot, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int position = std::uniform_int_distribution<int>(0, trace.length() - 1)(rng);
  return positional_probe(model, trace, head, slot, position);
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw InputError("pearson: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx <= 0 || syy <= 0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

ScatterSummary cross_run_scatter(const ModelBundle& model, const std::vector<ActivationTrace>& competing,
                                 const std::vector<ActivationTrace>& noncompeting, const HeadRef& head, int slot) {
  if (competing.size() != noncompeting.size()) throw InputError("cross_run_scatter: run lists differ in length");
  ScatterSummary s;
  for (std::size_t i = 0; i < competing.size(); ++i) {
    const auto p = cross_run_attention(model, competing[i], noncompeting[i], head, slot);
    s.baseline.push_back(p.baseline.nats);
    s.probed.push_back(p.probed.nats);
  }
  s.n = static_cast<int>(s.baseline.size());
  s.correlation = pearson(s.baseline, s.probed);
  return s;
}

ScatterSummary positional_scatter(const ModelBundle& model, const std::vector<ActivationTrace>& traces,
                                  const HeadRef& head, int slot, std::uint64_t seed) {
  ScatterSummary s;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    const auto p = positional_randomization(model, traces[i], head, slot, seed + i);
    s.baseline.push_back(p.baseline.nats);
    s.probed.push_back(p.probed.nats);
  }
  s.n = static_cast<int>(s.baseline.size());
  s.correlation = pearson(s.baseline, s.probed);
  return s;
}

}  // namespace fflab
