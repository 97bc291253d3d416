#include "fflab/errors.hpp"
#include "fflab/trainer.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <sstream>

using namespace fflab;

namespace {

ModelConfig micro_config() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_head = 8;
  c.d_model = 16;
  c.d_mlp = 32;
  c.vocab_size = 96;
  c.max_seq = 16;
  c.seed = 13;
  return c;
}

FactWorld micro_world() {
  WorldSizes s;
  s.n_categories = 2;
  s.classes_per_category = 4;
  s.n_fillers = 8;
  return generate_world(21, 20, s, 96);
}

bool same_weights(const Weights& a, const Weights& b) {
  Weights x = a, y = b;
  const auto va = tensor_views(x);
  const auto vb = tensor_views(y);
  if (va.size() != vb.size()) return false;
  for (std::size_t i = 0; i < va.size(); ++i)
    if (va[i].size != vb[i].size || !std::equal(va[i].data, va[i].data + va[i].size, vb[i].data)) return false;
  return true;
}

}  // namespace

TEST(Corpus, NoCompetingMeansTopAnswers) {
  const auto world = micro_world();
  TrainConfig c;
  c.competing_fraction = 0;
  for (const auto& ex : build_corpus(world, c, 500)) {
    EXPECT_FALSE(ex.competing);
    EXPECT_EQ(ex.target, world.classes[static_cast<size_t>(world.fact(ex.fact_id).ranked_classes[0])].primary);
  }
}

TEST(Corpus, AllCompetingAvoidsForbiddenClass) {
  const auto world = micro_world();
  TrainConfig c;
  c.competing_fraction = 1;
  for (const auto& ex : build_corpus(world, c, 500)) {
    EXPECT_TRUE(ex.competing);
    EXPECT_FALSE(world.fact(ex.fact_id).held_out);
    const int forbidden = ex.tokens[tmpl::kForbiddenSlot];
    EXPECT_NE(world.class_of(ex.target), world.class_of(forbidden));
    // best-ranked answer outside the forbidden class
    EXPECT_EQ(ex.target, world.classes[static_cast<size_t>(world.fact(ex.fact_id).ranked_classes[1])].primary);
  }
}

TEST(Corpus, MixMatchesFraction) {
  const auto world = micro_world();
  for (double f : {0.2, 0.5, 0.8}) {
    TrainConfig c;
    c.competing_fraction = f;
    c.seed = 3;
    const auto corpus = build_corpus(world, c, 10000);
    const double got = static_cast<double>(std::count_if(corpus.begin(), corpus.end(), [](const TrainTarget& t) {
                         return t.competing;
                       })) /
                       10000.0;
    EXPECT_NEAR(got, f, 0.02);
  }
}

TEST(Corpus, DeterministicInSeed) {
  const auto world = micro_world();
  TrainConfig c;
  c.seed = 8;
  const auto a = build_corpus(world, c, 200);
  const auto b = build_corpus(world, c, 200);
  c.seed = 9;
  const auto d = build_corpus(world, c, 200);
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].tokens, b[i].tokens);
    EXPECT_EQ(a[i].target, b[i].target);
    differs |= a[i].tokens != d[i].tokens;
  }
  EXPECT_TRUE(differs);
}

TEST(Corpus, WindowAugmentationUsesFillers) {
  const auto world = micro_world();
  TrainConfig c;
  c.window_fraction = 1;
  for (const auto& ex : build_corpus(world, c, 100)) {
    EXPECT_EQ(ex.tokens[tmpl::kWindowStart], tok::FROM);
    EXPECT_NE(std::find(world.fillers.begin(), world.fillers.end(), ex.tokens[tmpl::kWindowStart + 1]),
              world.fillers.end());
  }
}

TEST(TrainConfig, ValidationAndJson) {
  TrainConfig c;
  c.steps = 7;
  c.learning_rate = 0.5;
  c.seed = 99;
  nlohmann::json j = c;
  EXPECT_EQ(j.get<TrainConfig>(), c);
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), InputError);
  c = TrainConfig{};
  c.competing_fraction = 1.5;
  EXPECT_THROW(c.validate(), InputError);
}

TEST(LossGrad, LossMatchesForward) {
  const Weights w = init_weights(micro_config());
  const auto batch = build_corpus(micro_world(), TrainConfig{}, 11);
  EXPECT_NEAR(loss_and_grad(w, batch, 4, 1).loss, reference_loss(w, batch), 1e-10);
}

TEST(LossGrad, IndependentOfThreadCount) {
  const Weights w = init_weights(micro_config());
  const auto batch = build_corpus(micro_world(), TrainConfig{}, 20);
  auto a = loss_and_grad(w, batch, 4, 1);
  auto b = loss_and_grad(w, batch, 4, 3);
  EXPECT_EQ(a.loss, b.loss);
  EXPECT_TRUE(same_weights(a.grad, b.grad));
}

TEST(LossGrad, FiniteDifferenceCheck) {
  Weights w = init_weights(micro_config());
  // non-trivial gains so their gradients are exercised away from 1
  for (auto& L : w.layers)
    for (int i = 0; i < L.attn_gain.size(); ++i) {
      L.attn_gain[i] = 1.0 + 0.1 * std::sin(i);
      L.mlp_gain[i] = 1.0 - 0.1 * std::cos(i);
    }
  const auto batch = build_corpus(micro_world(), TrainConfig{}, 5);
  const auto fams = gradient_check(w, batch, 25, 7);
  std::vector<std::string> names;
  for (const auto& f : fams) {
    names.push_back(f.family);
    EXPECT_GT(f.checked, 0) << f.family;
    EXPECT_LT(f.max_rel_error, 1e-4) << f.family;
  }
  std::sort(names.begin(), names.end());
  EXPECT_EQ(names, (std::vector<std::string>{"attention", "embedding", "gains", "mlp", "unembedding"}));
}

TEST(LearningRate, WarmupThenCosine) {
  TrainConfig c;
  c.steps = 110;
  c.warmup_steps = 10;
  c.learning_rate = 1.0;
  EXPECT_DOUBLE_EQ(learning_rate_at(c, 0), 0.1);
  EXPECT_DOUBLE_EQ(learning_rate_at(c, 9), 1.0);
  EXPECT_DOUBLE_EQ(learning_rate_at(c, 10), 1.0);
  EXPECT_NEAR(learning_rate_at(c, 60), 0.5, 1e-12);
  EXPECT_NEAR(learning_rate_at(c, 110), 0.0, 1e-12);
}

TEST(Train, ZeroStepsKeepsWeights) {
  const ModelBundle init(init_weights(micro_config()));
  TrainConfig c;
  c.steps = 0;
  const auto r = train(init, micro_world(), c);
  EXPECT_TRUE(same_weights(r.model.weights(), init.weights()));
  EXPECT_TRUE(r.curve.empty());
}

TEST(Train, DeterministicAndDoesNotMutateInput) {
  const ModelBundle init(init_weights(micro_config()));
  const auto before = serialize_checkpoint(init);
  TrainConfig c;
  c.steps = 15;
  c.batch_size = 8;
  c.warmup_steps = 3;
  const auto a = train(init, micro_world(), c, 1);
  const auto b = train(init, micro_world(), c, 3);
  EXPECT_EQ(serialize_checkpoint(a.model), serialize_checkpoint(b.model));
  EXPECT_EQ(serialize_checkpoint(init), before);
  EXPECT_FALSE(same_weights(a.model.weights(), init.weights()));
}

TEST(Train, LossDecreases) {
  const ModelBundle init(init_weights(micro_config()));
  TrainConfig c;
  c.steps = 200;
  c.batch_size = 16;
  c.warmup_steps = 20;
  c.learning_rate = 5e-3;
  const auto r = train(init, micro_world(), c);
  ASSERT_EQ(r.curve.size(), 200u);
  double head = 0, tail = 0;
  for (int i = 0; i < 20; ++i) {
    head += r.curve[static_cast<size_t>(i)].loss;
    tail += r.curve[r.curve.size() - 1 - static_cast<size_t>(i)].loss;
  }
  EXPECT_LT(tail, 0.5 * head);
}

TEST(Train, DivergenceIsReported) {
  const ModelBundle init(init_weights(micro_config()));
  TrainConfig c;
  c.steps = 20;
  c.batch_size = 4;
  c.warmup_steps = 0;
  c.learning_rate = 1e300;
  c.grad_clip = 0;
  EXPECT_THROW(train(init, micro_world(), c), DivergenceError);
}

TEST(LossCsv, HeaderAndRows) {
  std::ostringstream os;
  write_loss_csv(os, {{0, 1.5, 0.1}, {1, 1.25, 0.2}});
  EXPECT_EQ(os.str(), "step,loss,lr\n0,1.5,0.10000000000000001\n1,1.25,0.20000000000000001\n");
}

TEST(Evaluate, EmptyAndRecompute) {
  const ModelBundle m(init_weights(micro_config()));
  const auto empty = evaluate(m, {});
  EXPECT_TRUE(empty.rows.empty());
  EXPECT_EQ(empty.all.n, 0);
  const auto world = micro_world();
  const auto triples = make_triples(world);
  const auto rep = evaluate(m, triples);
  ASSERT_EQ(rep.rows.size(), triples.size());
  EXPECT_EQ(rep.seen.n + rep.held_out.n, rep.all.n);
  for (std::size_t i = 0; i < triples.size(); ++i) {
    const auto& t = triples[i];
    EXPECT_NEAR(rep.rows[i].p_competing,
                answer_probability(forward(m, t.render(PromptTriple::Kind::Competing)), t.answer_class).value(), 1e-12);
    EXPECT_NEAR(rep.rows[i].p_relevant,
                answer_probability(forward(m, t.render(PromptTriple::Kind::Relevant)), t.answer_class).value(), 1e-12);
    EXPECT_NEAR(rep.rows[i].p_irrelevant,
                answer_probability(forward(m, t.render(PromptTriple::Kind::Irrelevant)), t.answer_class).value(), 1e-12);
  }
}
