#include "fflab/planted.hpp"

#include "fflab/errors.hpp"

#include <array>
#include <cmath>
#include <random>
#include <set>

namespace fflab {

namespace {

constexpr double kBias = 400.0;  // constant coordinate on every embedding; keeps every row's RMS near 35
constexpr double kFeature = 10.0;
constexpr double kBeta = 10.0;  // unembedding weight on recall / write coordinates
constexpr double kEmbedNoise = 0.3;
constexpr double kHeadNoise = 0.02;
constexpr double kMlpNoise = 0.01;
constexpr double kSinkScore = 10.0;

// Suppressor attention score = A*salience*[sig] + P*[preferred] + C*cat.cat' + I*idx.idx'
constexpr double kSigCoef = 2.5;
constexpr double kPrefCoef = 3.0;
constexpr double kCatCoef = 1.0;
constexpr double kIdxCoef = 1.2;
constexpr double kCopierCoef = 12.0;
constexpr double kControlCoef = 6.0;
constexpr int kOffsetPairs = 4;  // high-frequency rotary pairs used by position-keyed heads
constexpr int kControlOffset = tmpl::kFinal - tmpl::kForbiddenSlot;
constexpr std::array<double, 3> kRecallLogits = {12.0, 8.0, 6.0};
constexpr double kPrimaryBias = 0.5;
constexpr double kNonAnswerBias = -6.0;

// Four unit vectors in R^3 with pairwise dot -1/3.
const std::array<std::array<double, 3>, 4> kSimplex = {{
    {1 / std::sqrt(3.0), 1 / std::sqrt(3.0), 1 / std::sqrt(3.0)},
    {1 / std::sqrt(3.0), -1 / std::sqrt(3.0), -1 / std::sqrt(3.0)},
    {-1 / std::sqrt(3.0), 1 / std::sqrt(3.0), -1 / std::sqrt(3.0)},
    {-1 / std::sqrt(3.0), -1 / std::sqrt(3.0), 1 / std::sqrt(3.0)},
}};

struct Layout {
  static constexpr int bias = 0, bos = 1, marker = 2, sig = 3, pref = 4, salience = 5;
  static constexpr int qcat = 6, qidx = 9, kcat = 12, kidx = 15, class_in = 18;
  int n_classes = 0;
  int recall = 0;
  std::vector<int> write;  // one block per suppressor
  int noise_begin = 0;

  Layout(int classes, int n_suppressors) : n_classes(classes) {
    recall = class_in + classes;
    for (int h = 0; h < n_suppressors; ++h) write.push_back(recall + classes * (1 + h));
    noise_begin = recall + classes * (1 + n_suppressors);
  }
};

void check(bool ok, const std::string& what) {
  if (!ok) throw ConstructionError("plant_model: " + what);
}

void check_head(const ModelConfig& c, const HeadRef& h, const std::string& role) {
  check(h.layer >= 0 && h.layer < c.n_layers && h.head >= 0 && h.head < c.n_heads,
        role + " head L" + std::to_string(h.layer) + "H" + std::to_string(h.head) + " outside the model");
}

double row_rms(const Matrix& m, int r) { return std::sqrt(m.row(r).squaredNorm() / static_cast<double>(m.cols())); }

void add_noise(Matrix& m, Eigen::Index r0, Eigen::Index c0, Eigen::Index rows, Eigen::Index cols, double sd,
               std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, sd);
  for (Eigen::Index r = r0; r < r0 + rows; ++r)
    for (Eigen::Index c = c0; c < c0 + cols; ++c) m(r, c) += g(rng);
}

}  // namespace

nlohmann::json planted_spec_to_json(const PlantedSpec& s) {
  nlohmann::json j;
  auto& sup = j["suppressor_heads"] = nlohmann::json::array();
  for (const auto& h : s.suppressor_heads)
    sup.push_back({{"layer", h.layer}, {"head", h.head}, {"target_strength", h.target_strength}});
  j["copier_head"] = {{"layer", s.copier_head.layer}, {"head", s.copier_head.head}};
  j["preferred_token"] = s.preferred_token ? nlohmann::json(*s.preferred_token) : nlohmann::json(nullptr);
  j["control_head"] = s.control_head ? nlohmann::json{{"layer", s.control_head->layer}, {"head", s.control_head->head}}
                                     : nlohmann::json(nullptr);
  j["salience_min"] = s.salience_min;
  j["salience_max"] = s.salience_max;
  return j;
}

PlantedSpec planted_spec_from_json(const nlohmann::json& j) {
  try {
    PlantedSpec s;
    for (const auto& h : j.at("suppressor_heads"))
      s.suppressor_heads.push_back({h.at("layer"), h.at("head"), h.at("target_strength")});
    s.copier_head = {j.at("copier_head").at("layer"), j.at("copier_head").at("head")};
    if (j.contains("preferred_token") && !j["preferred_token"].is_null()) s.preferred_token = j["preferred_token"].get<int>();
    if (j.contains("control_head") && !j["control_head"].is_null())
      s.control_head = HeadRef{j["control_head"].at("layer"), j["control_head"].at("head")};
    s.salience_min = j.value("salience_min", 0.8);
    s.salience_max = j.value("salience_max", 1.2);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed planted spec: ") + e.what());
  }
}

ModelConfig planted_config(std::uint64_t seed) {
  ModelConfig c;
  c.n_layers = 6;
  c.n_heads = 4;
  c.d_head = 32;
  c.d_model = 128;
  c.d_mlp = 512;
  c.vocab_size = 512;
  c.max_seq = 64;
  c.seed = seed;
  return c;
}

WorldSizes planted_world_sizes() {
  WorldSizes s;
  s.n_categories = 4;
  s.classes_per_category = 4;
  s.alias_fraction = 0.5;
  s.n_fillers = 32;
  s.answers_per_fact = 3;
  s.held_out_fraction = 0.0;
  return s;
}

FactWorld planted_world(std::uint64_t seed, int n_facts) {
  return generate_world(seed, n_facts, planted_world_sizes(), 512);
}

PlantedSpec default_planted_spec(const FactWorld& world, bool with_control) {
  PlantedSpec s;
  s.copier_head = {1, 0};
  s.suppressor_heads = {{3, 1, 4.0}, {4, 2, 4.0}, {5, 3, 4.0}};
  // Prefer an alias: aliases never appear as forbidden words, so the preference
  // does not leak into the ordinary competing prompts.
  for (const auto& f : world.facts) {
    const int a = world.classes[static_cast<size_t>(f.ranked_classes.front())].alias;
    if (a >= 0) {
      s.preferred_token = a;
      break;
    }
  }
  if (!s.preferred_token && !world.facts.empty()) s.preferred_token = make_triple(world, 0).answer;
  if (with_control) s.control_head = HeadRef{2, 1};
  return s;
}

ModelBundle plant_model(const ModelConfig& c, const PlantedSpec& spec, const FactWorld& world) {
  c.validate();
  const int pairs = c.d_head / 2;
  check(pairs >= 12, "d_head must be at least 24 (needs 12 rotary pairs)");
  check(world.vocab_size <= c.vocab_size, "world vocabulary exceeds model vocabulary");
  check(world.sizes.n_categories <= 4 && world.sizes.classes_per_category <= 4,
        "at most 4 categories of 4 classes (3-d simplex codes)");
  const int n_classes = static_cast<int>(world.classes.size());
  check(n_classes <= c.d_head - 1, "answer classes exceed the value space of one head");
  check(!spec.suppressor_heads.empty(), "at least one suppressor head is required");
  const Layout lay(n_classes, static_cast<int>(spec.suppressor_heads.size()));
  check(lay.noise_begin <= c.d_model, "d_model too small for the planted feature layout");

  std::set<std::pair<int, int>> used;
  auto claim = [&](const HeadRef& h, const std::string& role) {
    check_head(c, h, role);
    check(used.insert({h.layer, h.head}).second, role + " head L" + std::to_string(h.layer) + "H" +
                                                     std::to_string(h.head) + " assigned twice");
  };
  claim(spec.copier_head, "copier");
  for (const auto& s : spec.suppressor_heads) {
    claim(s.ref(), "suppressor");
    check(s.target_strength > 0, "suppressor strengths must be positive");
    check(s.layer > spec.copier_head.layer, "suppressors must sit above the copier");
  }
  if (spec.control_head) claim(*spec.control_head, "control");
  if (spec.preferred_token)
    check(*spec.preferred_token >= 0 && *spec.preferred_token < world.vocab_size, "preferred token out of range");
  check(spec.salience_min > 0 && spec.salience_max >= spec.salience_min, "bad salience range");

  std::mt19937_64 rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
  Weights w = zero_weights(c);
  const double sqrt_dh = std::sqrt(static_cast<double>(c.d_head));

  // ---- embedding ----
  Matrix& E = w.embedding;
  E.col(Layout::bias).setConstant(kBias);
  add_noise(E, 0, lay.noise_begin, c.vocab_size, c.d_model - lay.noise_begin, kEmbedNoise, rng);
  E(tok::BOS, Layout::bos) = kFeature;
  E(tok::MARKER, Layout::marker) = kFeature;
  if (spec.preferred_token) E(*spec.preferred_token, Layout::pref) = kFeature;
  const int cpc = world.sizes.classes_per_category;
  for (const auto& cls : world.classes) {
    const auto& cat = kSimplex[static_cast<size_t>(cls.category)];
    const auto& idx = kSimplex[static_cast<size_t>(cls.id % cpc)];
    for (int t : cls.tokens()) {
      for (int m = 0; m < 3; ++m) {
        E(t, Layout::kcat + m) = kFeature * cat[static_cast<size_t>(m)];
        E(t, Layout::kidx + m) = kFeature * idx[static_cast<size_t>(m)];
      }
      E(t, Layout::class_in + cls.id) = kFeature;
    }
  }
  std::uniform_real_distribution<double> sal(spec.salience_min, spec.salience_max);
  for (const auto& f : world.facts) {
    const auto& top = world.classes[static_cast<size_t>(f.ranked_classes.front())];
    const auto& cat = kSimplex[static_cast<size_t>(top.category)];
    const auto& idx = kSimplex[static_cast<size_t>(top.id % cpc)];
    const int s = f.subject;
    E(s, Layout::salience) = kFeature * sal(rng);
    for (int m = 0; m < 3; ++m) {
      E(s, Layout::qcat + m) = kFeature * cat[static_cast<size_t>(m)];
      E(s, Layout::qidx + m) = kFeature * idx[static_cast<size_t>(m)];
    }
    // recall coordinates are set so that, after the final norm, ranked class k gets logit kRecallLogits[k]
    for (int it = 0; it < 8; ++it) {
      const double rms = row_rms(E, s);
      for (std::size_t k = 0; k < f.ranked_classes.size() && k < kRecallLogits.size(); ++k)
        E(s, lay.recall + f.ranked_classes[k]) = kRecallLogits[k] * rms / kBeta;
    }
  }

  // typical row RMS; unit feature after normalization is kFeature / rms
  double rms_sum = 0;
  for (int t = 0; t < c.vocab_size; ++t) rms_sum += row_rms(E, t);
  const double rms_tok = rms_sum / c.vocab_size;
  double rms_subj = 0;
  for (const auto& f : world.facts) rms_subj += row_rms(E, f.subject);
  rms_subj = world.facts.empty() ? rms_tok : rms_subj / static_cast<double>(world.facts.size());
  const double u0 = kFeature / rms_tok;  // normalized unit feature
  const double b0 = kBias / rms_tok;     // normalized bias coordinate
  auto coef = [&](double score) { return std::sqrt(score * sqrt_dh); };

  auto is_planted = [&](int l, int h) { return used.count({l, h}) > 0; };

  // ---- attention ----
  for (int l = 0; l < c.n_layers; ++l) {
    LayerWeights& L = w.layers[static_cast<size_t>(l)];
    for (int h = 0; h < c.n_heads; ++h) {
      if (is_planted(l, h)) continue;
      const int base = h * c.d_head;
      add_noise(L.wq, 0, base, c.d_model, c.d_head, kHeadNoise, rng);
      add_noise(L.wk, 0, base, c.d_model, c.d_head, kHeadNoise, rng);
      add_noise(L.wv, 0, base, c.d_model, c.d_head, kHeadNoise, rng);
      add_noise(L.wo, base, 0, c.d_head, c.d_model, kHeadNoise, rng);
      // attention sink: every query finds BOS
      const double a = coef(kSinkScore);
      L.wq(Layout::bias, base + c.d_head - 1) += a / b0;
      L.wk(Layout::bos, base + c.d_head - 1) += a / u0;
    }
    add_noise(L.w_gate, 0, 0, c.d_model, c.d_mlp, kMlpNoise, rng);
    add_noise(L.w_up, 0, 0, c.d_model, c.d_mlp, kMlpNoise, rng);
    add_noise(L.w_down, 0, 0, c.d_mlp, c.d_model, kMlpNoise, rng);
  }

  // position-keyed head: constant keys, query rotated back by `offset` so the score peaks there
  auto offset_head = [&](const HeadRef& hr, int offset, double score, int query_feature, double query_unit) {
    LayerWeights& L = w.layers[static_cast<size_t>(hr.layer)];
    const int base = hr.head * c.d_head;
    const double a = coef(score);
    for (int j = 0; j < kOffsetPairs; ++j) {
      const double th = rope_frequency(j, c.d_head) * offset;
      L.wq(query_feature, base + 2 * j) = a * std::cos(th) / query_unit;
      L.wq(query_feature, base + 2 * j + 1) = -a * std::sin(th) / query_unit;
      L.wk(Layout::bias, base + 2 * j) = a / b0;
    }
  };

  {
    const HeadRef& cp = spec.copier_head;
    offset_head(cp, 1, kCopierCoef, Layout::bias, b0);
    LayerWeights& L = w.layers[static_cast<size_t>(cp.layer)];
    const int base = cp.head * c.d_head;
    L.wv(Layout::marker, base + c.d_head / 2) = 1.0;
    L.wo(base + c.d_head / 2, Layout::sig) = kFeature / u0;
  }
  if (spec.control_head) offset_head(*spec.control_head, kControlOffset, kControlCoef, Layout::salience, u0);

  for (std::size_t s = 0; s < spec.suppressor_heads.size(); ++s) {
    const auto& sh = spec.suppressor_heads[s];
    LayerWeights& L = w.layers[static_cast<size_t>(sh.layer)];
    const int base = sh.head * c.d_head;
    // content features ride on the first coordinate of the slowest rotary pairs
    auto col = [&](int from_top) { return base + 2 * (pairs - 1 - from_top); };
    const double aA = coef(kSigCoef), aP = coef(kPrefCoef), aC = coef(kCatCoef), aI = coef(kIdxCoef);
    L.wq(Layout::salience, col(0)) = aA / u0;
    L.wk(Layout::sig, col(0)) = aA / u0;
    L.wq(Layout::bias, col(1)) = aP / b0;
    L.wk(Layout::pref, col(1)) = aP / u0;
    for (int m = 0; m < 3; ++m) {
      L.wq(Layout::qcat + m, col(2 + m)) = aC / u0;
      L.wk(Layout::kcat + m, col(2 + m)) = aC / u0;
      L.wq(Layout::qidx + m, col(5 + m)) = aI / u0;
      L.wk(Layout::kidx + m, col(5 + m)) = aI / u0;
    }
    // OV: read the class indicator, write -m along this head's copy of the class's unembedding direction
    const double m = sh.target_strength * rms_subj / kBeta;
    for (int cls = 0; cls < n_classes; ++cls) {
      L.wv(Layout::class_in + cls, base + cls) = 1.0;
      L.wo(base + cls, lay.write[s] + cls) = -m / u0;
    }
  }

  // ---- unembedding ----
  const double b_final = kBias / rms_subj;
  for (int t = 0; t < c.vocab_size; ++t) {
    const int cls = world.class_of(t);
    if (cls < 0) {
      w.unembedding(Layout::bias, t) = kNonAnswerBias / b_final;
      continue;
    }
    const bool primary = world.classes[static_cast<size_t>(cls)].primary == t;
    w.unembedding(Layout::bias, t) = (primary ? kPrimaryBias : 0.0) / b_final;
    w.unembedding(lay.recall + cls, t) = kBeta;
    for (int wb : lay.write) w.unembedding(wb + cls, t) = kBeta;
  }

  nlohmann::json meta = {{"kind", "planted"}, {"planted", planted_spec_to_json(spec)}, {"world_seed", world.seed}};
  return ModelBundle(std::move(w), std::move(meta));
}

std::optional<PlantedSpec> planted_spec_of(const ModelBundle& model) {
  const auto& m = model.metadata();
  if (!m.is_object() || !m.contains("planted")) return std::nullopt;
  return planted_spec_from_json(m["planted"]);
}

double copier_margin(const ModelBundle& model, const PlantedSpec& spec) {
  const Weights& w = model.weights();
  const ModelConfig& c = w.config;
  const LayerWeights& L = w.layers[static_cast<size_t>(spec.copier_head.layer)];
  Vector x = Vector::Zero(c.d_model);
  x[Layout::bias] = kBias;
  const Vector xn = rms_normalize(x, L.attn_gain);
  const int base = spec.copier_head.head * c.d_head;
  const Vector q = (xn.transpose() * L.wq.middleCols(base, c.d_head)).transpose();
  const Vector k = (xn.transpose() * L.wk.middleCols(base, c.d_head)).transpose();
  double peak = 0, best_other = -1e300;
  for (int delta = 0; delta < tmpl::kLength; ++delta) {
    const double s = rope_apply(q, delta).dot(k) / std::sqrt(static_cast<double>(c.d_head));
    if (delta == 1)
      peak = s;
    else
      best_other = std::max(best_other, s);
  }
  return peak - best_other;
}

}  // namespace fflab
