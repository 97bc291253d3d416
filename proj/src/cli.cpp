#include "fflab/cli.hpp"

#include "fflab/attack.hpp"
#include "fflab/attribution.hpp"
#include "fflab/errors.hpp"
#include "fflab/headlab.hpp"
#include "fflab/parallel.hpp"
#include "fflab/planted.hpp"
#include "fflab/report.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;

namespace fflab {

void PipelineConfig::apply_seed(std::uint64_t s) {
  seed = s;
  model.seed = s;
  train.seed = s;
}

nlohmann::json pipeline_config_to_json(const PipelineConfig& c) {
  nlohmann::json model = c.model;
  nlohmann::json train = c.train;
  return {{"seed", c.seed},
          {"model", model},
          {"world",
           {{"n_facts", c.n_facts},
            {"n_categories", c.world.n_categories},
            {"classes_per_category", c.world.classes_per_category},
            {"alias_fraction", c.world.alias_fraction},
            {"n_fillers", c.world.n_fillers},
            {"answers_per_fact", c.world.answers_per_fact},
            {"held_out_fraction", c.world.held_out_fraction}}},
          {"train", train},
          {"filter",
           {{"min_noncompeting_prob", c.filter.min_noncompeting_prob},
            {"min_odds_reduction_factor", c.filter.min_odds_reduction_factor}}},
          {"planted", {{"n_facts", c.planted_facts}, {"with_control", c.planted_control}}},
          {"analysis",
           {{"analysis_heads", c.analysis_heads},
            {"summary_top_k", c.summary_top_k},
            {"curve_threshold", c.curve_threshold},
            {"ov_samples", c.ov_samples},
            {"ov_top_n", c.ov_top_n},
            {"origin_top_k", c.origin_top_k}}}};
}

namespace {

void check_keys(const nlohmann::json& given, const nlohmann::json& known, const std::string& where) {
  if (!given.is_object()) throw FormatError("config: '" + where + "' must be an object");
  for (const auto& [k, v] : given.items()) {
    if (!known.contains(k)) throw FormatError("config: unknown key '" + where + k + "'");
    if (known[k].is_object()) check_keys(v, known[k], where + k + ".");
  }
}

}  // namespace

PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  const nlohmann::json defaults = pipeline_config_to_json(PipelineConfig{});
  check_keys(j, defaults, "");
  nlohmann::json m = defaults;
  m.merge_patch(j);
  try {
    PipelineConfig c;
    c.model = m.at("model").get<ModelConfig>();
    c.train = m.at("train").get<TrainConfig>();
    const auto& w = m.at("world");
    c.n_facts = w.at("n_facts");
    c.world.n_categories = w.at("n_categories");
    c.world.classes_per_category = w.at("classes_per_category");
    c.world.alias_fraction = w.at("alias_fraction");
    c.world.n_fillers = w.at("n_fillers");
    c.world.answers_per_fact = w.at("answers_per_fact");
    c.world.held_out_fraction = w.at("held_out_fraction");
    c.filter.min_noncompeting_prob = m.at("filter").at("min_noncompeting_prob");
    c.filter.min_odds_reduction_factor = m.at("filter").at("min_odds_reduction_factor");
    c.planted_facts = m.at("planted").at("n_facts");
    c.planted_control = m.at("planted").at("with_control");
    const auto& a = m.at("analysis");
    c.analysis_heads = a.at("analysis_heads");
    c.summary_top_k = a.at("summary_top_k");
    c.curve_threshold = a.at("curve_threshold");
    c.ov_samples = a.at("ov_samples");
    c.ov_top_n = a.at("ov_top_n");
    c.origin_top_k = a.at("origin_top_k");
    c.apply_seed(m.at("seed").get<std::uint64_t>());
    c.model.validate();
    c.train.validate();
    c.filter.validate();
    if (c.n_facts < 0 || c.planted_facts < 0) throw InputError("config: fact counts must be non-negative");
    if (c.analysis_heads < 1 || c.summary_top_k < 1 || c.ov_top_n < 0 || c.origin_top_k < 1 || c.ov_samples < 1)
      throw InputError("config: analysis counts must be positive");
    if (!(c.curve_threshold > 0 && c.curve_threshold <= 1)) throw InputError("config: curve_threshold must be in (0,1]");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("config: ") + e.what());
  }
}

namespace {

// ---- shared plumbing ----

struct Ctx {
  PipelineConfig cfg;
  std::string config_hash;
  std::string out;

  std::string path(const std::string& name) const { return (fs::path(out) / name).string(); }
  RunManifest manifest(const std::string& sub, const std::string& checkpoint = "", const std::string& dataset = "") const {
    RunManifest m = RunManifest::now(sub);
    m.config_hash = config_hash;
    m.checkpoint_hash = sha256_file(checkpoint);
    m.dataset_hash = sha256_file(dataset);
    m.seed = cfg.seed;
    return m;
  }
};

void note(const std::string& msg) { std::cerr << "fflab: " << msg << '\n'; }

void write_jsonl(const std::string& path, const RunManifest& m, const std::vector<nlohmann::json>& rows) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InputError("cannot write " + path);
  os << "# manifest " << manifest_to_json(m).dump() << '\n';
  for (const auto& r : rows) os << r.dump() << '\n';
  if (!os) throw InputError("write failed: " + path);
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path);
  std::vector<nlohmann::json> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_triples(const std::string& path, const RunManifest& m, const std::vector<PromptTriple>& triples) {
  std::vector<nlohmann::json> rows;
  for (const auto& t : triples) rows.push_back(triple_to_json(t));
  write_jsonl(path, m, rows);
}

std::string require(const std::string& value, const std::string& flag, const std::string& hint) {
  if (value.empty()) throw InputError(flag + " is required: " + hint);
  if (!fs::exists(value)) throw InputError(flag + " " + value + " does not exist: " + hint);
  return value;
}

ModelBundle load_model(const std::string& path) {
  return load_checkpoint(require(path, "--checkpoint", "pass a model.ffck written by `fflab train` or `fflab plant`"));
}

// Analysis inputs must be non-empty triples that fit the model.
std::vector<PromptTriple> load_analysis_dataset(const std::string& path, const ModelBundle& model) {
  const std::string hint = "run `fflab filter` and pass its filtered.jsonl";
  auto triples = read_triples_jsonl(require(path, "--dataset", hint));
  if (triples.empty())
    throw InputError("--dataset " + path + " contains no triples; the filter kept nothing, so there is nothing to attribute (" +
                     hint + " for a model that performs the task)");
  const int v = model.config().vocab_size;
  for (const auto& t : triples)
    for (int tok : t.render(PromptTriple::Kind::Competing))
      if (tok < 0 || tok >= v)
        throw InputError("--dataset " + path + ": fact " + std::to_string(t.fact_id) + " uses token " + std::to_string(tok) +
                         " outside the model vocab");
  return triples;
}

std::vector<PromptTriple> load_any_dataset(const std::string& path) {
  return read_triples_jsonl(require(path, "--dataset", "pass a triples.jsonl written by `fflab render-data` or `fflab plant`"));
}

FactWorld load_world(const std::string& path) { return world_from_json(read_report_json(path)); }

const char* layer_slot(const ComponentId& id) {
  switch (id.kind) {
    case ComponentId::Kind::Embedding:
      return "emb";
    case ComponentId::Kind::Mlp:
      return "mlp";
    case ComponentId::Kind::Head:
      return "head";
  }
  return "?";
}

std::string head_name(const HeadRef& h) { return h.id().name(); }

HeadRef parse_head(const std::string& s, const ModelConfig& c) {
  ComponentId id;
  try {
    id = ComponentId::parse(s);
  } catch (const std::exception&) {
    throw InputError("--heads: cannot parse '" + s + "', expected names like L3H1");
  }
  if (id.kind != ComponentId::Kind::Head || id.layer >= c.n_layers || id.head >= c.n_heads)
    throw InputError("--heads: '" + s + "' is not an attention head of this model");
  return {id.layer, id.head};
}

// Heads in importance order, most suppressive first.
std::vector<HeadRef> ranked_heads(const ModelConfig& c, const ImportanceTable& table) {
  std::vector<HeadRef> out;
  for (int i : table.ranking) {
    const auto id = ComponentId::from_index(c, i);
    if (id.kind == ComponentId::Kind::Head) out.push_back({id.layer, id.head});
  }
  return out;
}

std::vector<HeadRef> select_heads(const std::vector<std::string>& names, const ModelBundle& model,
                                  const std::vector<PromptTriple>& triples, int n) {
  std::vector<HeadRef> heads;
  if (!names.empty()) {
    for (const auto& s : names) heads.push_back(parse_head(s, model.config()));
    return heads;
  }
  const auto table = component_importance(model, triples);
  heads = ranked_heads(model.config(), table);
  heads.resize(std::min<std::size_t>(heads.size(), static_cast<std::size_t>(n)));
  return heads;
}

nlohmann::json paper_context() {
  // Reference values measured on Llama-2-chat. Reported for comparison, never asserted.
  return {{"source_model", "Llama-2-7b-chat"},
          {"components_for_full_suppression", 35},
          {"top10_mean_attention_to_forbidden", 0.1964},
          {"other_heads_mean_attention_to_forbidden", 0.0086},
          {"top10_mean_suppression_score", -1.22},
          {"top10_suppression_score_std", 0.80},
          {"other_heads_mean_suppression_score", 0.12},
          {"other_heads_suppression_score_std", 0.40},
          {"mean_log10_odds_ratio_competing_vs_noncompeting", -3.055},
          {"attack_clean_probability", 0.963},
          {"attack_attacked_probability", 0.177}};
}

// ---- subcommands ----

FactWorld make_world(const PipelineConfig& c) { return generate_world(c.seed, c.n_facts, c.world, c.model.vocab_size); }

void cmd_gen_world(const Ctx& ctx) {
  write_report_json(ctx.path("world.json"), ctx.manifest("gen-world"), world_to_json(make_world(ctx.cfg)));
}

void cmd_render_data(const Ctx& ctx, const std::string& world_path) {
  const FactWorld world = world_path.empty() ? make_world(ctx.cfg) : load_world(world_path);
  write_triples(ctx.path("triples.jsonl"), ctx.manifest("render-data", "", world_path), make_triples(world));
}

void cmd_train(const Ctx& ctx, const std::string& world_path) {
  const FactWorld world = world_path.empty() ? make_world(ctx.cfg) : load_world(world_path);
  const ModelBundle init(init_weights(ctx.cfg.model));
  const TrainResult res = train(init, world, ctx.cfg.train);
  const std::string ckpt = ctx.path("model.ffck");
  save_checkpoint(res.model, ckpt);
  const RunManifest m = ctx.manifest("train", ckpt, world_path);
  {
    std::ofstream os(ctx.path("loss.csv"), std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot write " + ctx.path("loss.csv"));
    os << "# manifest " << manifest_to_json(m).dump() << '\n';
    write_loss_csv(os, res.curve);
  }
  const BehaviorReport rep = evaluate(res.model, make_triples(world));
  nlohmann::json cfg = ctx.cfg.train;
  const double final_loss = res.curve.empty() ? 0.0 : res.curve.back().loss;
  write_report_json(ctx.path("train_summary.json"), m,
                    {{"train", cfg},
                     {"steps", ctx.cfg.train.steps},
                     {"final_loss", final_loss},
                     {"all", to_json(rep.all)},
                     {"seen", to_json(rep.seen)},
                     {"held_out", to_json(rep.held_out)},
                     {"targets", {{"held_out_noncompeting_accuracy", 0.9}, {"held_out_compliance", 0.7}}},
                     {"meets_targets",
                      {{"held_out_noncompeting_accuracy", rep.held_out.noncompeting_accuracy >= 0.9},
                       {"held_out_compliance", rep.held_out.compliance >= 0.7}}}});
}

void cmd_plant(const Ctx& ctx) {
  const FactWorld world = planted_world(ctx.cfg.seed, ctx.cfg.planted_facts);
  const PlantedSpec spec = default_planted_spec(world, ctx.cfg.planted_control);
  const ModelBundle model = plant_model(planted_config(ctx.cfg.seed), spec, world);
  const std::string ckpt = ctx.path("model.ffck");
  save_checkpoint(model, ckpt);
  const RunManifest m = ctx.manifest("plant", ckpt);
  write_report_json(ctx.path("world.json"), m, world_to_json(world));
  write_report_json(ctx.path("planted_spec.json"), m,
                    {{"spec", planted_spec_to_json(spec)}, {"copier_margin", copier_margin(model, spec)}});
  write_triples(ctx.path("triples.jsonl"), m, make_triples(world));
}

void cmd_filter(const Ctx& ctx, const std::string& ckpt, const std::string& dataset) {
  const ModelBundle model = load_model(ckpt);
  const auto triples = load_any_dataset(dataset);
  const FilterResult fr = filter_dataset(model, triples, ctx.cfg.filter);
  const RunManifest m = ctx.manifest("filter", ckpt, dataset);
  write_triples(ctx.path("filtered.jsonl"), m, fr.kept);
  nlohmann::json rep = to_json(fr.report);
  rep["mean_log10_odds_ratio"] = fr.report.mean_log_odds_ratio / std::log(10.0);
  rep["paper_context"] = {{"mean_log10_odds_ratio", -3.055}};
  write_report_json(ctx.path("filter_report.json"), m, rep);
  write_report_json(ctx.path("origin.json"), m, to_json(incorrect_answer_origin(model, fr.kept, ctx.cfg.origin_top_k)));
  if (fr.report.empty) note("filter kept no triples");
}

void cmd_evaluate(const Ctx& ctx, const std::string& ckpt, const std::string& dataset) {
  const ModelBundle model = load_model(ckpt);
  const auto triples = load_any_dataset(dataset);
  const BehaviorReport rep = evaluate(model, triples);
  const RunManifest m = ctx.manifest("evaluate", ckpt, dataset);
  CsvWriter csv(ctx.path("behavior.csv"), m,
                {"fact_id", "held_out", "p_competing", "p_relevant", "p_irrelevant", "log_bayes_factor",
                 "relevant_correct", "irrelevant_correct", "compliant"});
  for (const auto& r : rep.rows) {
    csv.cell(r.fact_id).cell(r.held_out).cell(r.p_competing).cell(r.p_relevant).cell(r.p_irrelevant);
    csv.cell(r.log_bayes_factor).cell(r.relevant_correct).cell(r.irrelevant_correct).cell(r.compliant).end_row();
  }
  write_report_json(ctx.path("behavior.json"), m,
                    {{"all", to_json(rep.all)}, {"seen", to_json(rep.seen)}, {"held_out", to_json(rep.held_out)}});
}

void write_importance(const Ctx& ctx, const RunManifest& m, const ModelConfig& c, const ImportanceTable& table,
                      const CumulativeCurve& curve, int n_triples) {
  CsvWriter csv(ctx.path("importance.csv"), m, {"component", "layer", "head_or_mlp", "mean_lbf_nats", "std", "rank"});
  for (const auto& r : table.rows) {
    csv.cell(r.id.name()).cell(r.id.layer);
    if (r.id.kind == ComponentId::Kind::Head)
      csv.cell(r.id.head);
    else
      csv.cell(std::string(layer_slot(r.id)));
    csv.cell(r.mean_lbf).cell(r.std_lbf).cell(r.rank).end_row();
  }
  nlohmann::json j = to_json(table, c);
  j["n_triples"] = n_triples;
  j["k_star"] = curve.k_star;
  j["threshold"] = curve.threshold;
  j["full_patch_effect"] = curve.reference;
  write_report_json(ctx.path("importance.json"), m, j);
}

void cmd_rank(const Ctx& ctx, const std::string& ckpt, const std::string& dataset) {
  const ModelBundle model = load_model(ckpt);
  const auto triples = load_analysis_dataset(dataset, model);
  const PatchSet ps = prepare_patch_set(model, triples);
  const ImportanceTable table = component_importance(model, ps);
  const CumulativeCurve curve = cumulative_curve(model, ps, table.ranking, ctx.cfg.curve_threshold);
  write_importance(ctx, ctx.manifest("rank", ckpt, dataset), model.config(), table, curve, static_cast<int>(triples.size()));
}

void cmd_patch_curve(const Ctx& ctx, const std::string& ckpt, const std::string& dataset) {
  const ModelBundle model = load_model(ckpt);
  const auto triples = load_analysis_dataset(dataset, model);
  const PatchSet ps = prepare_patch_set(model, triples);
  const ImportanceTable table = component_importance(model, ps);
  const CumulativeCurve curve = cumulative_curve(model, ps, table.ranking, ctx.cfg.curve_threshold);
  const RunManifest m = ctx.manifest("patch-curve", ckpt, dataset);
  const auto& c = model.config();
  CsvWriter csv(ctx.path("patch_curve.csv"), m, {"k", "component", "effect", "fraction_of_full"});
  for (std::size_t k = 0; k < curve.effect.size(); ++k) {
    csv.cell(static_cast<long long>(k));
    csv.cell(k == 0 ? std::string("none") : ComponentId::from_index(c, table.ranking[k - 1]).name());
    csv.cell(curve.effect[k]).cell(curve.reference != 0 ? curve.effect[k] / curve.reference : 0.0).end_row();
  }
  nlohmann::json j = to_json(curve);
  j["n_components"] = c.n_components();
  j["n_triples"] = static_cast<int>(triples.size());
  j["paper_context"] = {{"components_for_full_suppression", 35}};
  write_report_json(ctx.path("patch_curve.json"), m, j);
}

void cmd_independence(const Ctx& ctx, const std::string& ckpt, const std::string& dataset) {
  const ModelBundle model = load_model(ckpt);
  const auto triples = load_analysis_dataset(dataset, model);
  const PatchSet ps = prepare_patch_set(model, triples);
  const ImportanceTable table = component_importance(model, ps);
  const IndependenceReport rep = independence_compare(model, ps, table);
  const RunManifest m = ctx.manifest("independence", ckpt, dataset);
  CsvWriter csv(ctx.path("independence.csv"), m, {"k", "joint", "summed", "gap"});
  for (std::size_t k = 0; k < rep.joint.size(); ++k)
    csv.cell(static_cast<long long>(k)).cell(rep.joint[k]).cell(rep.summed[k]).cell(rep.gap[k]).end_row();
  nlohmann::json j = to_json(rep);
  double max_gap = 0;
  for (double g : rep.gap) max_gap = std::max(max_gap, std::abs(g));
  j["max_abs_gap"] = max_gap;
  write_report_json(ctx.path("independence.json"), m, j);
}

void hist_rows(CsvWriter& csv, const HeadRef& h, const std::string& kind, const Histogram& hist) {
  const int bins = static_cast<int>(hist.fraction.size());
  for (int b = 0; b < bins; ++b) {
    const double w = (hist.hi - hist.lo) / bins;
    csv.cell(h.layer).cell(h.head);
    if (!kind.empty()) csv.cell(kind);
    csv.cell(b).cell(hist.lo + b * w).cell(hist.lo + (b + 1) * w).cell(hist.fraction[static_cast<size_t>(b)]).end_row();
  }
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0;
  const double mu = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - mu) * (x - mu);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

void cmd_heads(const Ctx& ctx, const std::string& ckpt, const std::string& dataset) {
  const ModelBundle model = load_model(ckpt);
  const auto triples = load_analysis_dataset(dataset, model);
  const auto& c = model.config();
  const auto heads = all_heads(c);
  const AttentionStats stats = attention_stats(model, triples, heads, ctx.cfg.summary_top_k);
  const PairSampler sampler = PairSampler::automatic(c.vocab_size, ctx.cfg.seed, ctx.cfg.ov_samples);
  std::vector<OVProfile> profiles;
  for (const auto& h : heads) profiles.push_back(suppression_score(model, h, sampler, ctx.cfg.ov_top_n));
  const ImportanceTable table = component_importance(model, triples);
  const RunManifest m = ctx.manifest("heads", ckpt, dataset);

  CsvWriter att(ctx.path("attention_stats.csv"), m, {"layer", "head", "kind", "mean", "median", "n"});
  CsvWriter ahist(ctx.path("attention_hist.csv"), m, {"layer", "head", "kind", "bin", "lo", "hi", "fraction"});
  for (const auto& ha : stats.heads)
    for (auto k : kAllKinds) {
      const KindStats& ks = ha.of(k);
      att.cell(ha.head.layer).cell(ha.head.head).cell(std::string(kind_name(k))).cell(ks.mean).cell(ks.median);
      att.cell(static_cast<long long>(ks.values.size())).end_row();
      hist_rows(ahist, ha.head, kind_name(k), ks.hist);
    }

  CsvWriter ov(ctx.path("ov_scores.csv"), m,
               {"layer", "head", "suppression_score", "std_error", "n_pairs", "exhaustive", "importance_rank"});
  CsvWriter ohist(ctx.path("ov_hist.csv"), m, {"layer", "head", "bin", "lo", "hi", "fraction"});
  nlohmann::json prof = nlohmann::json::array();
  for (const auto& p : profiles) {
    const int rank = table.rows[static_cast<size_t>(p.head.id().index(c))].rank;
    ov.cell(p.head.layer).cell(p.head.head).cell(p.suppression_score).cell(p.std_error);
    ov.cell(static_cast<long long>(p.n_pairs)).cell(p.exhaustive).cell(rank).end_row();
    hist_rows(ohist, p.head, "", p.response_hist);
    prof.push_back(to_json(p));
  }
  write_report_json(ctx.path("ov_profiles.json"), m, prof);

  // Top-k heads by first-order importance against the rest.
  const auto ranked = ranked_heads(c, table);
  const std::size_t top = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(ctx.cfg.summary_top_k));
  std::vector<double> att_top, att_rest, sup_top, sup_rest;
  nlohmann::json top_names = nlohmann::json::array();
  for (std::size_t r = 0; r < ranked.size(); ++r) {
    const HeadRef& h = ranked[r];
    const std::size_t hi = static_cast<std::size_t>(h.layer * c.n_heads + h.head);
    const double a = stats.heads[hi].competing.mean;
    const double s = profiles[hi].suppression_score;
    if (r < top) {
      att_top.push_back(a);
      sup_top.push_back(s);
      top_names.push_back(head_name(h));
    } else {
      att_rest.push_back(a);
      sup_rest.push_back(s);
    }
  }
  write_report_json(ctx.path("heads_summary.json"), m,
                    {{"n_triples", stats.n_triples},
                     {"top_k", static_cast<int>(top)},
                     {"top_heads_by_importance", top_names},
                     {"top_mean_attention_to_forbidden", mean_of(att_top)},
                     {"rest_mean_attention_to_forbidden", mean_of(att_rest)},
                     {"top_mean_suppression_score", mean_of(sup_top)},
                     {"top_suppression_score_std", std_of(sup_top)},
                     {"rest_mean_suppression_score", mean_of(sup_rest)},
                     {"rest_suppression_score_std", std_of(sup_rest)},
                     {"paper_context", paper_context()}});
}

std::vector<ActivationTrace> traces_of(const ModelBundle& model, const std::vector<PromptTriple>& triples,
                                       PromptTriple::Kind kind) {
  return parallel_map<ActivationTrace>(triples.size(), [&](std::size_t i) { return forward(model, triples[i].render(kind)); });
}

int first_crossing(const std::vector<double>& attention, double level) {
  for (std::size_t i = 0; i < attention.size(); ++i)
    if (attention[i] > level) return static_cast<int>(i);
  return -1;
}

void scatter_rows(CsvWriter& csv, const HeadRef& h, const std::vector<PromptTriple>& triples, const ScatterSummary& s) {
  for (std::size_t i = 0; i < s.baseline.size(); ++i)
    csv.cell(h.layer).cell(h.head).cell(triples[i].fact_id).cell(s.baseline[i]).cell(s.probed[i]).end_row();
}

void cmd_enrich(const Ctx& ctx, const std::string& ckpt, const std::string& dataset, const std::vector<std::string>& names) {
  const ModelBundle model = load_model(ckpt);
  const auto triples = load_analysis_dataset(dataset, model);
  const auto heads = select_heads(names, model, triples, ctx.cfg.analysis_heads);
  const auto competing = traces_of(model, triples, PromptTriple::Kind::Competing);
  const auto irrelevant = traces_of(model, triples, PromptTriple::Kind::Irrelevant);
  const int slot = tmpl::kForbiddenSlot;
  const RunManifest m = ctx.manifest("enrich", ckpt, dataset);

  CsvWriter en(ctx.path("enrichment.csv"), m, {"layer", "head", "mode", "cutoff", "median_attention", "median_log_odds", "n"});
  CsvWriter cr(ctx.path("cross_run.csv"), m, {"layer", "head", "fact_id", "baseline_log_odds", "probed_log_odds"});
  CsvWriter po(ctx.path("positional.csv"), m, {"layer", "head", "fact_id", "baseline_log_odds", "probed_log_odds"});
  nlohmann::json spec = nlohmann::json::array();
  for (const auto& h : heads) {
    nlohmann::json hj = {{"head", head_name(h)}};
    for (auto mode : {EnrichMode::Key, EnrichMode::Query}) {
      const EnrichmentCurve curve = enrichment_curve(model, competing, h, slot, mode);
      for (std::size_t L = 0; L < curve.median_attention.size(); ++L) {
        en.cell(h.layer).cell(h.head).cell(std::string(mode_name(mode))).cell(static_cast<long long>(L));
        en.cell(curve.median_attention[L]).cell(curve.median_log_odds[L]).cell(curve.n).end_row();
      }
      hj[std::string(mode_name(mode)) + "_first_cutoff_above_half"] = first_crossing(curve.median_attention, 0.5);
    }
    const ScatterSummary cross = cross_run_scatter(model, competing, irrelevant, h, slot);
    const ScatterSummary pos = positional_scatter(model, competing, h, slot, ctx.cfg.seed);
    scatter_rows(cr, h, triples, cross);
    scatter_rows(po, h, triples, pos);
    hj["cross_run_correlation"] = cross.correlation;
    hj["positional_correlation"] = pos.correlation;
    hj["n"] = cross.n;
    spec.push_back(hj);
  }
  write_report_json(ctx.path("specificity.json"), m, {{"slot", slot}, {"heads", spec}});
}

void cmd_attack(const Ctx& ctx, const std::string& ckpt, const std::string& dataset, const std::vector<std::string>& names) {
  const ModelBundle model = load_model(ckpt);
  const auto triples = load_analysis_dataset(dataset, model);
  const auto heads = select_heads(names, model, triples, ctx.cfg.analysis_heads);
  const RunManifest m = ctx.manifest("attack", ckpt, dataset);
  CsvWriter pref(ctx.path("preference.csv"), m, {"layer", "head", "rank", "token", "preference"});
  CsvWriter sum(ctx.path("attack_summary.csv"), m,
                {"layer", "head", "distractor", "preference", "n_targets", "n_success", "mean_delta_log_odds",
                 "mean_clean_probability", "mean_attacked_probability"});
  std::vector<nlohmann::json> rows;
  for (const auto& h : heads) {
    // Scan in the first triple's context; attack every triple whose answer class holds the winner.
    const auto scan = token_preference_scan(model, h, triples.front());
    for (std::size_t r = 0; r < scan.size(); ++r)
      pref.cell(h.layer).cell(h.head).cell(static_cast<long long>(r + 1)).cell(scan[r].distractor).cell(scan[r].preference).end_row();
    const AttackCandidate& best = scan.front();
    std::vector<double> deltas, clean, attacked;
    int n_success = 0;
    for (const auto& t : triples) {
      if (std::find(t.answer_class.begin(), t.answer_class.end(), best.distractor) == t.answer_class.end()) continue;
      if (best.distractor == t.competing_forbidden) continue;
      if (std::find(t.answer_class.begin(), t.answer_class.end(), t.irrelevant_forbidden) != t.answer_class.end()) continue;
      const AttackResult res = evaluate_attack(model, t, best);
      deltas.push_back(res.delta_log_odds);
      clean.push_back(res.clean_probability);
      attacked.push_back(res.attacked_probability);
      n_success += res.success();
      nlohmann::json j = attack_result_to_json(res);
      j["preference"] = best.preference;
      rows.push_back(j);
    }
    sum.cell(h.layer).cell(h.head).cell(best.distractor).cell(best.preference).cell(static_cast<long long>(deltas.size()));
    sum.cell(n_success).cell(mean_of(deltas)).cell(mean_of(clean)).cell(mean_of(attacked)).end_row();
  }
  write_jsonl(ctx.path("attacks.jsonl"), m, rows);
}

void cmd_reverse_attack(const Ctx& ctx, const std::string& ckpt, const std::string& dataset, const std::string& attacks) {
  const ModelBundle model = load_model(ckpt);
  const auto triples = load_analysis_dataset(dataset, model);
  const auto rows = read_jsonl(require(attacks, "--attacks", "run `fflab attack` and pass its attacks.jsonl"));
  const ImportanceTable table = component_importance(model, triples);
  std::vector<int> ks;
  for (int k = 0; k <= model.config().n_components(); ++k) ks.push_back(k);
  const RunManifest m = ctx.manifest("reverse-attack", ckpt, dataset);
  CsvWriter csv(ctx.path("reversal.csv"), m,
                {"fact_id", "layer", "head", "distractor", "k", "probability", "top_token", "correct_top"});
  std::vector<nlohmann::json> out;
  for (const auto& j : rows) {
    const AttackResult a = attack_result_from_json(j);
    const auto it = std::find_if(triples.begin(), triples.end(), [&](const PromptTriple& t) { return t.fact_id == a.fact_id; });
    if (it == triples.end())
      throw InputError("--attacks: fact " + std::to_string(a.fact_id) + " is not in --dataset " + dataset);
    AttackCandidate cand{a.head, a.distractor, j.value("preference", 0.0), kInjectionPosition};
    const AttackResult r = reverse_attack_by_patching(model, *it, cand, table.ranking, ks);
    for (const auto& row : r.reversal) {
      csv.cell(r.fact_id).cell(r.head.layer).cell(r.head.head).cell(r.distractor).cell(row.k);
      csv.cell(row.probability).cell(row.top_token).cell(row.correct_top).end_row();
    }
    out.push_back(attack_result_to_json(r));
  }
  write_jsonl(ctx.path("reversal.jsonl"), m, out);
}

// Runs the analysis chain on one model. Returns false when the filter kept nothing.
bool analysis_chain(const Ctx& ctx, const std::string& ckpt, const std::string& triples) {
  note("filter (" + ctx.out + ")");
  cmd_filter(ctx, ckpt, triples);
  note("evaluate");
  cmd_evaluate(ctx, ckpt, triples);
  const std::string filtered = ctx.path("filtered.jsonl");
  if (read_triples_jsonl(filtered).empty()) {
    write_report_json(ctx.path("skipped.json"), ctx.manifest("report", ckpt, filtered),
                      {{"reason", "filter kept no triples"},
                       {"skipped", {"rank", "patch-curve", "independence", "heads", "enrich", "attack", "reverse-attack"}}});
    return false;
  }
  note("rank");
  cmd_rank(ctx, ckpt, filtered);
  note("patch-curve");
  cmd_patch_curve(ctx, ckpt, filtered);
  note("independence");
  cmd_independence(ctx, ckpt, filtered);
  note("heads");
  cmd_heads(ctx, ckpt, filtered);
  note("enrich");
  cmd_enrich(ctx, ckpt, filtered, {});
  note("attack");
  cmd_attack(ctx, ckpt, filtered, {});
  note("reverse-attack");
  cmd_reverse_attack(ctx, ckpt, filtered, ctx.path("attacks.jsonl"));
  return true;
}

nlohmann::json figure_index() {
  return {
      {"fig1_left_competing_vs_noncompeting", {"behavior.csv", "behavior.json"}},
      {"fig1_right_cumulative_patching", {"patch_curve.csv", "patch_curve.json"}},
      {"eq2_importance_table", {"importance.csv", "importance.json"}},
      {"fig2_attention_to_forbidden", {"attention_stats.csv", "attention_hist.csv", "heads_summary.json"}},
      {"fig3_enrichment", {"enrichment.csv", "specificity.json"}},
      {"fig3_semantic_specificity", {"cross_run.csv", "specificity.json"}},
      {"fig3_positional_specificity", {"positional.csv", "specificity.json"}},
      {"fig4_top_log_odds_ratio", {"filter_report.json"}},
      {"fig4_bottom_suppression_score_distribution", {"ov_hist.csv", "ov_scores.csv", "ov_profiles.json"}},
      {"fig5_fig6_per_head_attention", {"attention_hist.csv"}},
      {"fig7_independence", {"independence.csv", "independence.json"}},
      {"appendix_b_filter_and_origin", {"filter_report.json", "origin.json", "filtered.jsonl"}},
      {"appendix_h_attack", {"preference.csv", "attacks.jsonl", "attack_summary.csv"}},
      {"appendix_h_reversal", {"reversal.csv", "reversal.jsonl"}},
      {"training", {"loss.csv", "train_summary.json"}},
  };
}

void cmd_report(const Ctx& ctx) {
  Ctx planted = ctx;
  planted.out = ctx.path("planted");
  Ctx trained = ctx;
  trained.out = ctx.path("trained");
  fs::create_directories(planted.out);
  fs::create_directories(trained.out);

  note("plant");
  cmd_plant(planted);
  const bool planted_ok = analysis_chain(planted, planted.path("model.ffck"), planted.path("triples.jsonl"));

  note("gen-world");
  cmd_gen_world(trained);
  note("render-data");
  cmd_render_data(trained, trained.path("world.json"));
  note("train");
  cmd_train(trained, trained.path("world.json"));
  const bool trained_ok = analysis_chain(trained, trained.path("model.ffck"), trained.path("triples.jsonl"));

  const RunManifest m = ctx.manifest("report");
  write_report_json(ctx.path("figure_index.json"), m,
                    {{"directories", {"planted", "trained"}},
                     {"figures", figure_index()},
                     {"complete", {{"planted", planted_ok}, {"trained", trained_ok}}}});
  write_report_json(ctx.path("paper_context.json"), m, paper_context());
  write_report_json(ctx.path("config.json"), m, pipeline_config_to_json(ctx.cfg));
}

// ---- argument handling ----

struct Options {
  std::string config, checkpoint, dataset, out = ".", world, attacks;
  std::uint64_t seed = 0;
  int threads = 0;
  std::vector<std::string> heads;
};

Ctx make_ctx(const Options& o, bool seed_given) {
  Ctx ctx;
  if (!o.config.empty()) {
    std::ifstream in(require(o.config, "--config", "pass a JSON pipeline config"));
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(o.config + ": " + e.what());
    }
    ctx.cfg = pipeline_config_from_json(j);
  }
  if (seed_given) ctx.cfg.apply_seed(o.seed);
  ctx.config_hash = sha256_hex(pipeline_config_to_json(ctx.cfg).dump());
  ctx.out = o.out;
  std::error_code ec;
  fs::create_directories(ctx.out, ec);
  if (!fs::is_directory(ctx.out)) throw InputError("--out " + ctx.out + " is not a writable directory");
  return ctx;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Forbidden-fact interpretability pipeline on toy transformers", "fflab"};
  app.require_subcommand(1);
  app.set_version_flag("--version", FFLAB_VERSION);
  Options o;

  struct Sub {
    CLI::App* app;
    std::function<void(const Ctx&)> run;
  };
  std::vector<Sub> subs;

  auto add = [&](const std::string& name, const std::string& desc, std::vector<std::string> flags,
                 std::function<void(const Ctx&)> run) {
    CLI::App* s = app.add_subcommand(name, desc);
    s->add_option("--config", o.config, "pipeline config (JSON)");
    s->add_option("--seed", o.seed, "seed for world, init, training and sampling");
    s->add_option("--out", o.out, "output directory")->capture_default_str();
    s->add_option("--threads", o.threads, "worker threads (default: FFCK_THREADS, else all cores)");
    for (const auto& f : flags) {
      if (f == "checkpoint") s->add_option("--checkpoint", o.checkpoint, "model checkpoint (.ffck)");
      if (f == "dataset") s->add_option("--dataset", o.dataset, "triples (JSON lines)");
      if (f == "world") s->add_option("--world", o.world, "world.json (default: generate from config and seed)");
      if (f == "attacks") s->add_option("--attacks", o.attacks, "attacks.jsonl from `fflab attack`");
      if (f == "heads") s->add_option("--heads", o.heads, "heads to analyze, e.g. L3H1 (default: top ranked)")->delimiter(',');
    }
    subs.push_back({s, std::move(run)});
  };

  add("gen-world", "generate a fact world", {}, [](const Ctx& c) { cmd_gen_world(c); });
  add("render-data", "render every fact as a prompt triple", {"world"},
      [&](const Ctx& c) { cmd_render_data(c, o.world); });
  add("train", "train the default model on a world", {"world"}, [&](const Ctx& c) { cmd_train(c, o.world); });
  add("plant", "build the planted suppression model with its world and triples", {}, [](const Ctx& c) { cmd_plant(c); });
  add("filter", "apply the dataset filter and the incorrect-answer origin analysis", {"checkpoint", "dataset"},
      [&](const Ctx& c) { cmd_filter(c, o.checkpoint, o.dataset); });
  add("evaluate", "competing vs noncompeting behavior per triple", {"checkpoint", "dataset"},
      [&](const Ctx& c) { cmd_evaluate(c, o.checkpoint, o.dataset); });
  add("rank", "first-order patching importance of every component", {"checkpoint", "dataset"},
      [&](const Ctx& c) { cmd_rank(c, o.checkpoint, o.dataset); });
  add("patch-curve", "cumulative patching of the ranked components", {"checkpoint", "dataset"},
      [&](const Ctx& c) { cmd_patch_curve(c, o.checkpoint, o.dataset); });
  add("independence", "joint patching vs summed single-component effects", {"checkpoint", "dataset"},
      [&](const Ctx& c) { cmd_independence(c, o.checkpoint, o.dataset); });
  add("heads", "attention statistics and OV suppression scores of every head", {"checkpoint", "dataset"},
      [&](const Ctx& c) { cmd_heads(c, o.checkpoint, o.dataset); });
  add("enrich", "enrichment curves and semantic/positional specificity", {"checkpoint", "dataset", "heads"},
      [&](const Ctx& c) { cmd_enrich(c, o.checkpoint, o.dataset, o.heads); });
  add("attack", "distractor preference scan and attacks", {"checkpoint", "dataset", "heads"},
      [&](const Ctx& c) { cmd_attack(c, o.checkpoint, o.dataset, o.heads); });
  add("reverse-attack", "undo attacks by patching top-ranked components", {"checkpoint", "dataset", "attacks"},
      [&](const Ctx& c) { cmd_reverse_attack(c, o.checkpoint, o.dataset, o.attacks); });
  add("report", "run the full pipeline on the planted and trained models", {}, [](const Ctx& c) { cmd_report(c); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    std::cout << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::CallForVersion&) {
    std::cout << FFLAB_VERSION << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "fflab: error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    for (const auto& s : subs) {
      if (!s.app->parsed()) continue;
      set_default_threads(o.threads);
      const Ctx ctx = make_ctx(o, s.app->count("--seed") > 0);
      s.run(ctx);
    }
    return 0;
  } catch (const InputError& e) {
    std::cerr << "fflab: error: " << e.what() << '\n';
    return 1;
  } catch (const FormatError& e) {
    std::cerr << "fflab: format error: " << e.what() << '\n';
    return 1;
  } catch (const ConstructionError& e) {
    std::cerr << "fflab: invalid configuration: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "fflab: internal error: " << e.what() << '\n';
    return 2;
  }
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace fflab
