#include "fflab/attribution.hpp"
#include "fflab/errors.hpp"
#include "fflab/planted.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace fflab;

namespace {

struct Planted {
  FactWorld world = planted_world(7);
  PlantedSpec spec = default_planted_spec(world);
  ModelBundle model = plant_model(planted_config(7), spec, world);
  std::vector<PromptTriple> triples = make_triples(world);
  PatchSet ps = prepare_patch_set(model, triples, 1);
  ImportanceTable table = component_importance(model, ps, 1);
  CumulativeCurve curve = cumulative_curve(model, ps, table.ranking, 0.95, 1);
};

const Planted& planted() {
  static const Planted p;
  return p;
}

ModelConfig small_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_head = 8;
  c.d_model = 16;
  c.d_mlp = 32;
  c.vocab_size = 160;
  c.max_seq = 16;
  c.seed = 5;
  return c;
}

FactWorld small_world() {
  WorldSizes s;
  s.n_categories = 2;
  s.classes_per_category = 4;
  s.n_fillers = 8;
  return generate_world(3, 12, s, 160);
}

double lo_of(const Vector& logits, const std::vector<int>& cls) {
  const double p = class_probability(logits, cls);
  return std::log(p) - std::log1p(-p);
}

}  // namespace

TEST(FirstOrderPatch, EmptySetIsDestination) {
  const ModelBundle m(init_weights(small_config()));
  const auto t = make_triple(small_world(), 0);
  const auto dest = forward(m, t.render(PromptTriple::Kind::Relevant));
  const auto src = forward(m, t.render(PromptTriple::Kind::Competing));
  const LogOdds lo = first_order_patch(m, dest, src, {}, t.answer_class);
  EXPECT_NEAR(lo.nats, lo_of(dest.final_logits, t.answer_class), 1e-9);
}

TEST(FirstOrderPatch, FullSetIsSource) {
  const ModelBundle m(init_weights(small_config()));
  const auto world = small_world();
  for (const auto& t : make_triples(world)) {
    const auto dest = forward(m, t.render(PromptTriple::Kind::Irrelevant));
    const auto src = forward(m, t.render(PromptTriple::Kind::Competing));
    const LogOdds lo = first_order_patch(m, dest, src, all_components(m.config()), t.answer_class);
    EXPECT_NEAR(lo.nats, lo_of(src.final_logits, t.answer_class), 1e-6);
  }
}

TEST(FirstOrderPatch, UnpairedThrows) {
  const ModelBundle m(init_weights(small_config()));
  const auto world = small_world();
  const auto a = forward(m, make_triple(world, 0).render(PromptTriple::Kind::Relevant));
  const auto b = forward(m, make_triple(world, 1).render(PromptTriple::Kind::Competing));
  EXPECT_THROW(first_order_patch(m, a, b, {}, make_triple(world, 0).answer_class), InputError);
}

TEST(FirstOrderPatch, AntisymmetricOnConstructedTraces) {
  const ModelBundle m(init_weights(small_config()));
  const auto t = make_triple(small_world(), 2);
  ActivationTrace a = forward(m, t.render(PromptTriple::Kind::Relevant));
  ActivationTrace b = forward(m, t.render(PromptTriple::Kind::Competing));
  const ComponentId id = ComponentId::attn_head(1, 0);
  const int i = id.index(m.config());
  b.components = a.components;
  b.components.row(i) += Vector::LinSpaced(16, -1.0, 1.0).transpose();
  const double base_a = first_order_patch(m, a, b, {}, t.answer_class).nats;
  const double base_b = first_order_patch(m, b, a, {}, t.answer_class).nats;
  const double ab = first_order_patch(m, a, b, {id}, t.answer_class).nats - base_a;
  const double ba = first_order_patch(m, b, a, {id}, t.answer_class).nats - base_b;
  EXPECT_NE(ab, 0.0);
  EXPECT_NEAR(ab, -ba, 1e-12);
}

TEST(ClampedLogOdds, SaturatesAtThirty) {
  Vector logits = Vector::Zero(4);
  logits[0] = 200;
  const LogOdds hi = clamped_log_odds(logits, {0});
  EXPECT_TRUE(hi.saturated);
  EXPECT_EQ(hi.nats, kLogOddsClamp);
  const LogOdds lo = clamped_log_odds(logits, {1});
  EXPECT_TRUE(lo.saturated);
  EXPECT_EQ(lo.nats, -kLogOddsClamp);
  EXPECT_FALSE(clamped_log_odds(Vector::Zero(4), {1}).saturated);
}

TEST(RankAscending, TiesBreakByIndex) {
  EXPECT_EQ(rank_ascending({0.0, -1.0, 0.0, -1.0, 2.0}), (std::vector<int>{1, 3, 0, 2, 4}));
}

TEST(ComponentImportance, EmptyDatasetThrows) {
  const ModelBundle m(init_weights(small_config()));
  EXPECT_THROW(component_importance(m, std::vector<PromptTriple>{}), InputError);
}

TEST(ComponentImportance, MatchesIndependentRecompute) {
  const ModelBundle m(init_weights(small_config()));
  const auto triples = make_triples(small_world());
  const auto table = component_importance(m, triples, 1);
  const ModelConfig& c = m.config();
  ASSERT_EQ(static_cast<int>(table.rows.size()), c.n_components());
  for (int i = 0; i < c.n_components(); ++i) {
    const ComponentId id = ComponentId::from_index(c, i);
    double total = 0;
    for (const auto& t : triples) {
      const auto comp = forward(m, t.render(PromptTriple::Kind::Competing));
      for (auto kind : {PromptTriple::Kind::Relevant, PromptTriple::Kind::Irrelevant}) {
        const auto nc = forward(m, t.render(kind));
        const Vector patched = recombine(m, nc.components, {{id, comp.component(c, id)}});
        total += 0.5 * (lo_of(patched, t.answer_class) - lo_of(nc.final_logits, t.answer_class));
      }
    }
    EXPECT_NEAR(table.rows[static_cast<size_t>(i)].mean_lbf, total / static_cast<double>(triples.size()), 1e-6)
        << id.name();
    EXPECT_EQ(table.rows[static_cast<size_t>(i)].n, static_cast<int>(triples.size()));
  }
  // the last token is shared, so the embedding component is identical across runs
  EXPECT_EQ(table.rows[0].mean_lbf, 0.0);
}

TEST(ComponentImportance, IndependentOfThreadCount) {
  const ModelBundle m(init_weights(small_config()));
  const auto triples = make_triples(small_world());
  const auto a = component_importance(m, triples, 1);
  const auto b = component_importance(m, triples, 3);
  EXPECT_EQ(a.ranking, b.ranking);
  for (std::size_t i = 0; i < a.rows.size(); ++i) {
    EXPECT_EQ(a.rows[i].mean_lbf, b.rows[i].mean_lbf);
    EXPECT_EQ(a.rows[i].std_lbf, b.rows[i].std_lbf);
  }
}

TEST(CumulativeCurve, EndpointsAndPermutationCheck) {
  const ModelBundle m(init_weights(small_config()));
  const auto ps = prepare_patch_set(m, make_triples(small_world()), 1);
  const auto table = component_importance(m, ps, 1);
  const auto curve = cumulative_curve(m, ps, table.ranking);
  ASSERT_EQ(static_cast<int>(curve.effect.size()), m.config().n_components() + 1);
  EXPECT_EQ(curve.effect.front(), 0.0);
  EXPECT_EQ(curve.effect.back(), curve.reference);
  std::vector<int> bad = table.ranking;
  bad[0] = bad[1];
  EXPECT_THROW(cumulative_curve(m, ps, bad), InputError);
}

TEST(KStar, SmallestReachingThreshold) {
  EXPECT_EQ(k_star_of({0, -1, -9.4, -9.6, -10}, -10, 0.95), 3);
  EXPECT_EQ(k_star_of({0, -10}, -10, 0.95), 1);
  EXPECT_EQ(k_star_of({0, 0}, 0, 0.95), 0);
}

TEST(Independence, FirstPointsCoincide) {
  const ModelBundle m(init_weights(small_config()));
  const auto ps = prepare_patch_set(m, make_triples(small_world()), 1);
  const auto table = component_importance(m, ps, 1);
  const auto rep = independence_compare(m, ps, table);
  EXPECT_EQ(rep.joint[0], 0.0);
  EXPECT_EQ(rep.summed[0], 0.0);
  EXPECT_EQ(rep.joint[1], rep.summed[1]);
  EXPECT_EQ(rep.gap[1], 0.0);
}

TEST(PlantedAttribution, SingleSuppressorPatchDrops) {
  const auto& p = planted();
  for (const auto& t : p.triples) {
    const auto dest = forward(p.model, t.render(PromptTriple::Kind::Relevant));
    const auto src = forward(p.model, t.render(PromptTriple::Kind::Competing));
    const double base = first_order_patch(p.model, dest, src, {}, t.answer_class).nats;
    for (const auto& s : p.spec.suppressor_heads)
      EXPECT_LE(first_order_patch(p.model, dest, src, {s.ref().id()}, t.answer_class).nats - base, -2.0);
  }
}

TEST(PlantedAttribution, SuppressorsRankFirst) {
  const auto& p = planted();
  std::vector<int> planted_idx;
  for (const auto& s : p.spec.suppressor_heads) planted_idx.push_back(s.ref().id().index(p.model.config()));
  std::vector<int> top(p.table.ranking.begin(), p.table.ranking.begin() + 3);
  std::sort(top.begin(), top.end());
  std::sort(planted_idx.begin(), planted_idx.end());
  EXPECT_EQ(top, planted_idx);
  EXPECT_LE(p.curve.k_star, 4);
}

TEST(PlantedAttribution, SummedImportanceNearFullPatch) {
  const auto& p = planted();
  double sum = 0;
  for (const auto& r : p.table.rows) sum += r.mean_lbf;
  EXPECT_LT(std::abs(sum - p.curve.reference), 0.25 * std::abs(p.curve.reference));
}

TEST(PlantedAttribution, CurveNonIncreasingOverPlantedPrefix) {
  const auto& p = planted();
  for (int k = 1; k <= 3; ++k) EXPECT_LT(p.curve.effect[static_cast<size_t>(k)], p.curve.effect[static_cast<size_t>(k - 1)]);
}

TEST(PlantedAttribution, IndependenceGapSmall) {
  const auto& p = planted();
  const auto rep = independence_compare(p.table, p.curve);
  for (int k = 0; k <= 3; ++k) EXPECT_LT(std::abs(rep.gap[static_cast<size_t>(k)]), 0.1) << "k=" << k;
}
