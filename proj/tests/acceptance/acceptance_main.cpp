// Acceptance run: one PASS/FAIL line per criterion on stdout, progress on stderr.
// Usage: fflab_acceptance [work_dir]   (work_dir defaults to ./acceptance_runs)

#include "fflab/attack.hpp"
#include "fflab/attribution.hpp"
#include "fflab/cli.hpp"
#include "fflab/headlab.hpp"
#include "fflab/numerics.hpp"
#include "fflab/planted.hpp"
#include "fflab/report.hpp"
#include "fflab/trainer.hpp"

#include "../dir_snapshot.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

using namespace fflab;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::map<int, std::string> g_lines;
int g_failed = 0;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

std::string head_name_of(const HeadRef& h) { return h.id().name(); }

void record(int ac, const std::string& name, const Outcome& o, double secs) {
  std::ostringstream line;
  line << "AC" << ac << (ac < 10 ? "  " : " ") << (o.pass ? "PASS" : "FAIL") << "  " << name << ": " << o.detail << " ("
       << fmt("%.1f", secs) << " s)";
  g_lines[ac] = line.str();
  if (!o.pass) ++g_failed;
  std::cerr << line.str() << '\n';
}

void run(int ac, const std::string& name, const std::function<Outcome()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  record(ac, name, o, seconds_since(t0));
}

// Class log-odds straight from logits, in long double.
double oracle_log_odds(const Vector& logits, const std::vector<int>& cls) {
  const double m = logits.maxCoeff();
  long double in = 0, out = 0;
  for (Eigen::Index j = 0; j < logits.size(); ++j) {
    const long double e = std::exp(static_cast<long double>(logits[j] - m));
    if (std::find(cls.begin(), cls.end(), static_cast<int>(j)) != cls.end())
      in += e;
    else
      out += e;
  }
  return static_cast<double>(std::log(in) - std::log(out));
}

// ---- shared planted fixture ----

struct Planted {
  FactWorld world = planted_world(7);
  PlantedSpec spec = default_planted_spec(world);
  ModelBundle model = plant_model(planted_config(7), spec, world);
  std::vector<PromptTriple> triples = filter_dataset(model, make_triples(world), FilterCriteria{}).kept;
  std::vector<HeadRef> planted_heads() const {
    std::vector<HeadRef> h;
    for (const auto& s : spec.suppressor_heads) h.push_back(s.ref());
    return h;
  }
};

const Planted& planted() {
  static const Planted p;
  return p;
}

// ---- criteria ----

Outcome ac1() {
  std::mt19937_64 rng(2024);
  std::normal_distribution<double> g(0, 3);
  std::uniform_int_distribution<int> len(2, 64);
  std::uniform_real_distribution<double> shift(-8, 8);
  double worst = 0;
  for (int t = 0; t < 1000; ++t) {
    Vector x(len(rng));
    for (auto& v : x) v = g(rng);
    const Eigen::Index i = std::uniform_int_distribution<Eigen::Index>(0, x.size() - 1)(rng);
    const double c = shift(rng);
    worst = std::max(worst, std::abs(logit_bump_shift(x, i, c).nats - c));
  }
  return {worst < 1e-9, "max |shift - c| = " + fmt("%.2e", worst) + " nats over 1000 cases (bound 1e-9)"};
}

Outcome ac2() {
  const ModelBundle model(init_weights(ModelConfig{}));
  const auto& c = model.config();
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> tok(0, c.vocab_size - 1), len(1, c.max_seq);
  double sum_err = 0, logit_err = 0;
  for (int p = 0; p < 200; ++p) {
    std::vector<int> tokens(static_cast<size_t>(len(rng)));
    for (auto& t : tokens) t = tok(rng);
    const ActivationTrace tr = forward(model, tokens);
    const Vector summed = tr.components.colwise().sum().transpose();
    sum_err = std::max(sum_err, (summed - tr.final_residual()).cwiseAbs().maxCoeff());
    logit_err = std::max(logit_err, (recombine(model, tr.components, {}) - tr.final_logits).cwiseAbs().maxCoeff());
  }
  return {sum_err < 1e-5 && logit_err < 1e-6, "max |sum r_i - residual| = " + fmt("%.2e", sum_err) +
                                                   ", max |recombine - forward| = " + fmt("%.2e", logit_err) +
                                                   " over 200 prompts (bounds 1e-5, 1e-6)"};
}

Outcome ac3() {
  const ModelBundle model(init_weights(ModelConfig{}));
  const FactWorld world = generate_world(3, 100, WorldSizes{}, model.config().vocab_size);
  const auto all = all_components(model.config());
  double worst = 0;
  int n = 0;
  for (const auto& t : make_triples(world)) {
    const auto source = forward(model, t.render(PromptTriple::Kind::Competing));
    for (auto kind : {PromptTriple::Kind::Relevant, PromptTriple::Kind::Irrelevant}) {
      if (n == 100) break;
      const auto dest = forward(model, t.render(kind));
      const double patched = first_order_patch(model, dest, source, all, t.answer_class).nats;
      worst = std::max(worst, std::abs(patched - oracle_log_odds(source.final_logits, t.answer_class)));
      ++n;
    }
  }
  return {n == 100 && worst < 1e-6,
          "max |LO(patched all) - LO(source)| = " + fmt("%.2e", worst) + " nats over " + std::to_string(n) + " pairs (bound 1e-6)"};
}

Outcome ac4() {
  const Planted& P = planted();
  const auto& c = P.model.config();
  const PatchSet ps = prepare_patch_set(P.model, P.triples);
  const ImportanceTable table = component_importance(P.model, ps);
  const CumulativeCurve curve = cumulative_curve(P.model, ps, table.ranking);
  std::vector<int> top3(table.ranking.begin(), table.ranking.begin() + 3), want;
  for (const auto& h : P.planted_heads()) want.push_back(h.id().index(c));
  std::sort(top3.begin(), top3.end());
  std::sort(want.begin(), want.end());
  const bool ranks_ok = top3 == want;

  const PairSampler sampler = PairSampler::automatic(c.vocab_size, 7);
  double worst_planted = -1e300;
  int quiet = 0, others = 0;
  for (const auto& h : all_heads(c)) {
    const double s = suppression_score(P.model, h, sampler).suppression_score;
    const auto ph = P.planted_heads();
    if (std::find(ph.begin(), ph.end(), h) != ph.end()) {
      worst_planted = std::max(worst_planted, s);
    } else {
      ++others;
      quiet += std::abs(s) < 0.2;
    }
  }
  const double quiet_frac = static_cast<double>(quiet) / others;
  const bool pass = ranks_ok && curve.k_star <= 4 && worst_planted < -1 && quiet_frac >= 0.95;
  return {pass, std::string("top-3 ") + (ranks_ok ? "= " : "!= ") + "planted suppressors, k* = " + std::to_string(curve.k_star) +
                    " (<= 4), max planted score = " + fmt("%.3f", worst_planted) + " (< -1), |score| < 0.2 for " +
                    fmt("%.1f", 100 * quiet_frac) + "% of other heads (>= 95%), " + std::to_string(P.triples.size()) + " triples"};
}

Outcome ac5() {
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_head = 8;
  c.d_model = 16;
  c.d_mlp = 32;
  c.vocab_size = 96;
  c.max_seq = 16;
  c.seed = 13;
  WorldSizes s;
  s.n_categories = 2;
  s.classes_per_category = 4;
  s.n_fillers = 8;
  Weights w = init_weights(c);
  for (auto& L : w.layers)
    for (int i = 0; i < L.attn_gain.size(); ++i) {
      L.attn_gain[i] = 1.0 + 0.1 * std::sin(i);
      L.mlp_gain[i] = 1.0 - 0.1 * std::cos(i);
    }
  const auto batch = build_corpus(generate_world(21, 20, s, 96), TrainConfig{}, 6);
  const auto fams = gradient_check(w, batch, 40, 99);
  double worst = 0;
  std::string parts;
  bool all_checked = fams.size() == 5;
  for (const auto& f : fams) {
    worst = std::max(worst, f.max_rel_error);
    all_checked = all_checked && f.checked > 0;
    parts += " " + f.family + "=" + fmt("%.1e", f.max_rel_error);
  }
  return {all_checked && worst < 1e-4, "max relative error " + fmt("%.2e", worst) + " (bound 1e-4);" + parts};
}

Outcome ac7() {
  const Planted& P = planted();
  const int slot = tmpl::kForbiddenSlot;
  std::string detail;
  bool pass = true;
  for (const auto& h : P.planted_heads()) {
    double m[3] = {0, 0, 0};
    for (const auto& t : P.triples) {
      int k = 0;
      for (auto kind : kAllKinds) {
        const auto tr = forward(P.model, t.render(kind));
        const Matrix& pat = tr.patterns[static_cast<size_t>(h.layer)][static_cast<size_t>(h.head)];
        m[k++] += pat(pat.rows() - 1, slot) / static_cast<double>(P.triples.size());
      }
    }
    pass = pass && m[0] - m[1] > 0.05 && m[1] - m[2] > 0.05;
    detail += (detail.empty() ? "" : "; ") + head_name_of(h) + " " + fmt("%.3f", m[0]) + " > " + fmt("%.3f", m[1]) + " > " +
              fmt("%.3f", m[2]);
  }
  return {pass, "competing > relevant > irrelevant, gaps > 0.05: " + detail};
}

Outcome ac8(const fs::path& trained_dir) {
  const Planted& P = planted();
  const int slot = tmpl::kForbiddenSlot;
  // Bitwise identity at cutoff == layer: every planted head, plus the trained model's analyzed heads.
  long long checked = 0, mismatched = 0;
  auto identity = [&](const ModelBundle& model, const std::vector<PromptTriple>& triples, const std::vector<HeadRef>& heads) {
    for (const auto& t : triples) {
      const auto tr = forward(model, t.render(PromptTriple::Kind::Competing));
      for (const auto& h : heads) {
        const Matrix& pat = tr.patterns[static_cast<size_t>(h.layer)][static_cast<size_t>(h.head)];
        for (auto mode : {EnrichMode::Key, EnrichMode::Query}) {
          ++checked;
          mismatched += enrichment_attention(model, tr, h, slot, h.layer, mode).value() != pat(pat.rows() - 1, slot);
        }
      }
    }
  };
  identity(P.model, P.triples, all_heads(P.model.config()));
  const ModelBundle trained = load_checkpoint((trained_dir / "model.ffck").string());
  const auto filtered = read_triples_jsonl((trained_dir / "filtered.jsonl").string());
  std::vector<HeadRef> trained_heads;
  const nlohmann::json spec = read_report_json((trained_dir / "specificity.json").string());
  for (const auto& h : spec.at("heads")) {
    const auto id = ComponentId::parse(h.at("head").get<std::string>());
    trained_heads.push_back({id.layer, id.head});
  }
  identity(trained, filtered, trained_heads);

  // Key enrichment of each planted suppressor: the first cutoff above 0.5 is the first
  // one whose residual includes the copier's output.
  std::vector<ActivationTrace> traces;
  for (const auto& t : P.triples) traces.push_back(forward(P.model, t.render(PromptTriple::Kind::Competing)));
  const int expect = P.spec.copier_head.layer + 1;
  bool jumps = true;
  std::string crossings;
  for (const auto& h : P.planted_heads()) {
    const auto curve = enrichment_curve(P.model, traces, h, slot, EnrichMode::Key);
    int first = -1;
    for (std::size_t L = 0; L < curve.median_attention.size(); ++L)
      if (curve.median_attention[L] > 0.5) {
        first = static_cast<int>(L);
        break;
      }
    jumps = jumps && first == expect;
    crossings += " " + head_name_of(h) + "@" + std::to_string(first);
  }
  return {mismatched == 0 && jumps && !trained_heads.empty(),
          std::to_string(mismatched) + " of " + std::to_string(checked) + " cutoff=layer evaluations differ from the forward pass (" +
              std::to_string(trained_heads.size()) + " trained heads included); key curve first exceeds 0.5 at cutoff" + crossings +
              " (copier L" + std::to_string(P.spec.copier_head.layer) + ", expected cutoff " + std::to_string(expect) + ")"};
}

Outcome ac9() {
  const Planted& P = planted();
  const int preferred = *P.spec.preferred_token;
  bool scans_ok = true;
  for (const auto& h : P.planted_heads()) scans_ok = scans_ok && token_preference_scan(P.model, h, P.triples.front()).front().distractor == preferred;

  const ImportanceTable table = component_importance(P.model, P.triples);
  const int n_planted = static_cast<int>(P.spec.suppressor_heads.size());
  std::vector<int> ks;
  for (int k = 0; k <= P.model.config().n_components(); ++k) ks.push_back(k);
  int n = 0, ok = 0, restored = 0;
  double worst_delta = -1e300;
  for (const auto& t : P.triples) {
    if (std::find(t.answer_class.begin(), t.answer_class.end(), preferred) == t.answer_class.end()) continue;
    const AttackCandidate cand{P.planted_heads().front(), preferred, 0.0, kInjectionPosition};
    const AttackResult r = reverse_attack_by_patching(P.model, t, cand, table.ranking, ks);
    ++n;
    worst_delta = std::max(worst_delta, r.delta_log_odds);
    ok += r.delta_log_odds <= -2 && r.flipped;
    restored += r.reversal[static_cast<size_t>(n_planted)].correct_top;
  }
  const bool pass = scans_ok && n > 0 && ok == n && restored == n;
  return {pass, std::string("preferred token ") + std::to_string(preferred) + (scans_ok ? " ranks first" : " does NOT rank first") +
                    " for every suppressor; " + std::to_string(ok) + "/" + std::to_string(n) +
                    " attacks with delta <= -2 and a flip (worst delta " + fmt("%.2f", worst_delta) + "); correct top restored at k=" +
                    std::to_string(n_planted) + " in " + std::to_string(restored) + "/" + std::to_string(n)};
}

Outcome ac10(const fs::path& trained_dir) {
  const Planted& P = planted();
  const PatchSet ps = prepare_patch_set(P.model, P.triples);
  const ImportanceTable table = component_importance(P.model, ps);
  const IndependenceReport rep = independence_compare(P.model, ps, table);
  const std::size_t n_planted = P.spec.suppressor_heads.size();
  double worst = 0;
  for (std::size_t k = 0; k <= n_planted; ++k) worst = std::max(worst, std::abs(rep.gap[k]));
  const bool k1 = rep.joint[1] == rep.summed[1];

  const nlohmann::json tj = read_report_json((trained_dir / "independence.json").string());
  const auto tjoint = tj.at("joint").get<std::vector<double>>();
  const auto tsummed = tj.at("summed").get<std::vector<double>>();
  const bool tk1 = tjoint.size() > 1 && tjoint[1] == tsummed[1];
  const double tmax = tj.at("max_abs_gap").get<double>();
  return {k1 && tk1 && worst < 0.1,
          std::string("k=1 joint == summed ") + (k1 && tk1 ? "exactly" : "NOT exactly") + " (planted and trained); planted max |gap| for k <= " +
              std::to_string(n_planted) + " = " + fmt("%.4f", worst) + " (< 0.1); trained max |gap| = " + fmt("%.3f", tmax) +
              " nats (emitted in trained/independence.csv)"};
}

Outcome ac6(const fs::path& trained_dir, double pipeline_seconds) {
  const ModelBundle model = load_checkpoint((trained_dir / "model.ffck").string());
  const auto kept = read_triples_jsonl((trained_dir / "filtered.jsonl").string());
  const double bound = -std::log(100.0);
  double worst = -1e300, min_p = 1;
  for (const auto& t : kept) {
    double lo[3];
    int i = 0;
    for (auto kind : kAllKinds) lo[i++] = oracle_log_odds(forward(model, t.render(kind)).final_logits, t.answer_class);
    worst = std::max(worst, lo[0] - std::min(lo[1], lo[2]));
    min_p = std::min(min_p, 1 / (1 + std::exp(-std::min(lo[1], lo[2]))));
  }
  // The filter and this recomputation differ only in rounding.
  const bool pass = kept.size() >= 50 && worst <= bound + 1e-9 && min_p > 0.5 && pipeline_seconds <= 1800;
  return {pass, std::to_string(kept.size()) + " triples retained (>= 50); max competing-vs-noncompeting log Bayes factor " +
                    fmt("%.3f", worst) + " nats (<= " + fmt("%.3f", bound) + "); min noncompeting probability " + fmt("%.3f", min_p) +
                    "; pipeline run took " + fmt("%.1f", pipeline_seconds / 60) + " min (<= 30)"};
}

Outcome ac11(const fs::path& a, const fs::path& b) {
  const auto sa = fflab::testing::dir_snapshot(a), sb = fflab::testing::dir_snapshot(b);
  const std::string diff = fflab::testing::first_difference(sa, sb);
  std::size_t bytes = 0;
  for (const auto& [k, v] : sa) bytes += v.size();
  return {diff.empty() && sa.size() > 30, std::to_string(sa.size()) + " files, " + std::to_string(bytes / 1024) + " KiB compared" +
                                              (diff.empty() ? ", identical apart from manifest timestamps" : ", first difference: " + diff)};
}

void info_training(const fs::path& trained_dir) {
  const nlohmann::json s = read_report_json((trained_dir / "train_summary.json").string());
  const auto& h = s.at("held_out");
  std::cout << "INFO trained model, held-out facts (n=" << h.at("n").get<int>() << "): noncompeting accuracy "
            << fmt("%.3f", h.at("noncompeting_accuracy").get<double>()) << " (target 0.9), compliance "
            << fmt("%.3f", h.at("compliance").get<double>()) << " (target 0.7); seen-fact compliance "
            << fmt("%.3f", s.at("seen").at("compliance").get<double>()) << "; final loss " << fmt("%.4f", s.at("final_loss").get<double>())
            << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_runs");
  const fs::path run1 = work / "run1", run2 = work / "run2";

  run(1, "Theorem 1 logit bump", ac1);
  run(2, "Decomposition exactness", ac2);
  run(3, "Full-override equivalence", ac3);
  run(4, "Planted-circuit recovery", ac4);
  run(5, "Gradient correctness", ac5);
  run(7, "Attention ordering on the planted model", ac7);
  run(9, "Attack recovery", ac9);

  // Two full pipeline runs with seed 7; the first also feeds the trained-model checks.
  fs::remove_all(work);
  fs::create_directories(work);
  double t1 = 0, t2 = 0;
  int code1 = -1, code2 = -1;
  {
    std::cerr << "pipeline run 1\n";
    auto t0 = std::chrono::steady_clock::now();
    code1 = run_cli({"fflab", "report", "--seed", "7", "--out", run1.string()});
    t1 = seconds_since(t0);
    std::cerr << "pipeline run 2\n";
    t0 = std::chrono::steady_clock::now();
    code2 = run_cli({"fflab", "report", "--seed", "7", "--out", run2.string()});
    t2 = seconds_since(t0);
  }
  const fs::path trained = run1 / "trained";
  if (code1 != 0) {
    const Outcome o{false, "pipeline run 1 exited with " + std::to_string(code1)};
    for (int ac : {6, 8, 10}) record(ac, "needs pipeline run 1", o, 0);
  } else {
    run(6, "Behavioral reproduction", [&] { return ac6(trained, t1); });
    run(8, "Enrichment boundary identities", [&] { return ac8(trained); });
    run(10, "Independence curves", [&] { return ac10(trained); });
  }
  if (code1 != 0 || code2 != 0)
    record(11, "End-to-end determinism",
           {false, "pipeline exit codes " + std::to_string(code1) + ", " + std::to_string(code2)}, t1 + t2);
  else
    record(11, "End-to-end determinism", ac11(run1, run2), t1 + t2);

  for (const auto& [ac, line] : g_lines) std::cout << line << '\n';
  if (code1 == 0) info_training(trained);
  std::cout << (g_failed == 0 ? "ALL PASS" : std::to_string(g_failed) + " FAILED") << '\n';
  return g_failed == 0 ? 0 : 1;
}
