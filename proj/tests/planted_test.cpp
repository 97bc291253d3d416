#include "fflab/errors.hpp"
#include "fflab/planted.hpp"

#include <gtest/gtest.h>

using namespace fflab;

namespace {

struct Planted {
  FactWorld world = planted_world(7);
  PlantedSpec spec = default_planted_spec(world, true);
  ModelBundle model = plant_model(planted_config(7), spec, world);
};

const Planted& planted() {
  static const Planted p;
  return p;
}

}  // namespace

TEST(PlantedSpec, JsonRoundTrip) {
  const auto& p = planted();
  const PlantedSpec back = planted_spec_from_json(planted_spec_to_json(p.spec));
  EXPECT_EQ(back.copier_head, p.spec.copier_head);
  ASSERT_EQ(back.suppressor_heads.size(), p.spec.suppressor_heads.size());
  for (std::size_t i = 0; i < back.suppressor_heads.size(); ++i) {
    EXPECT_EQ(back.suppressor_heads[i].ref(), p.spec.suppressor_heads[i].ref());
    EXPECT_EQ(back.suppressor_heads[i].target_strength, p.spec.suppressor_heads[i].target_strength);
  }
  EXPECT_EQ(back.preferred_token, p.spec.preferred_token);
  EXPECT_EQ(back.control_head, p.spec.control_head);
}

TEST(PlantedSpec, StoredInMetadata) {
  const auto& p = planted();
  const auto spec = planted_spec_of(p.model);
  ASSERT_TRUE(spec.has_value());
  EXPECT_EQ(planted_spec_to_json(*spec), planted_spec_to_json(p.spec));
  EXPECT_FALSE(planted_spec_of(ModelBundle(zero_weights(planted_config()))).has_value());
}

TEST(PlantedSpec, PreferredTokenIsNeverForbidden) {
  const auto& p = planted();
  ASSERT_TRUE(p.spec.preferred_token.has_value());
  const int pref = *p.spec.preferred_token;
  for (const auto& t : make_triples(p.world)) {
    EXPECT_NE(t.competing_forbidden, pref);
    EXPECT_NE(t.relevant_forbidden, pref);
    EXPECT_NE(t.irrelevant_forbidden, pref);
  }
  EXPECT_GE(p.world.class_of(pref), 0);
}

TEST(PlantModel, RejectsBadSpecs) {
  const auto& p = planted();
  PlantedSpec s = p.spec;
  s.suppressor_heads.push_back({3, 1, 4.0});
  EXPECT_THROW(plant_model(planted_config(7), s, p.world), ConstructionError);
  s = p.spec;
  s.copier_head = {9, 0};
  EXPECT_THROW(plant_model(planted_config(7), s, p.world), ConstructionError);
  s = p.spec;
  s.suppressor_heads.clear();
  EXPECT_THROW(plant_model(planted_config(7), s, p.world), ConstructionError);
  ModelConfig narrow = planted_config(7);
  narrow.d_head = 16;
  narrow.d_model = 64;
  EXPECT_THROW(plant_model(narrow, p.spec, p.world), ConstructionError);
}

TEST(PlantModel, Deterministic) {
  const auto& p = planted();
  const ModelBundle again = plant_model(planted_config(7), p.spec, p.world);
  EXPECT_EQ(serialize_checkpoint(again), serialize_checkpoint(p.model));
}

TEST(PlantModel, CopierPeaksOnPreviousToken) {
  const auto& p = planted();
  EXPECT_GT(copier_margin(p.model, p.spec), 1.0);
  // oracle: the copier's pattern row argmax is the previous position on a real prompt
  const auto tr = forward(p.model, make_triple(p.world, 3).render(PromptTriple::Kind::Competing));
  const Matrix& a = tr.patterns[1][0];
  for (int i = 1; i < tr.length(); ++i) {
    Eigen::Index arg = 0;
    a.row(i).maxCoeff(&arg);
    EXPECT_EQ(arg, i - 1) << "row " << i;
  }
}

TEST(PlantModel, SuppressorsAttendToCompetingSlot) {
  const auto& p = planted();
  for (const auto& t : make_triples(p.world)) {
    const auto tr = forward(p.model, t.render(PromptTriple::Kind::Competing));
    for (const auto& s : p.spec.suppressor_heads) {
      const Matrix& a = tr.patterns[static_cast<size_t>(s.layer)][static_cast<size_t>(s.head)];
      EXPECT_GT(a(tr.length() - 1, t.forbidden_slot_index), 0.5) << "fact " << t.fact_id;
    }
  }
}

TEST(PlantModel, BehaviourMatchesTheTask) {
  const auto& p = planted();
  for (const auto& t : make_triples(p.world)) {
    const double pc = answer_probability(forward(p.model, t.render(PromptTriple::Kind::Competing)), t.answer_class).value();
    const double pr = answer_probability(forward(p.model, t.render(PromptTriple::Kind::Relevant)), t.answer_class).value();
    const double pi = answer_probability(forward(p.model, t.render(PromptTriple::Kind::Irrelevant)), t.answer_class).value();
    EXPECT_GT(pr, 0.9);
    EXPECT_GT(pi, 0.9);
    EXPECT_LT(pc, 0.05);
  }
}
