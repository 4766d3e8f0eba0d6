// Command-line surface for the steering laboratory.
//
//   psr world   --config cfg.json        build + gate-check a synthetic world, emit dataset
//   psr train   --config cfg.json        fit a steering module on the world's dataset
//   psr eval    --config cfg.json        score it: coefficient search, trait alignment,
//                                        faithfulness profiles, similarity matrices
//   psr analyze --config cfg.json        intervention-strength heat data and profiles
//
// Exit codes: 0 success, 2 validation/config/file problems, 3 world failed its
// behavioral gates, 4 numeric breakdown, 1 anything else.

#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "psr/config.hpp"
#include "psr/delta.hpp"
#include "psr/evaluator.hpp"
#include "psr/report.hpp"
#include "psr/steering.hpp"
#include "psr/trainer.hpp"
#include "psr/world.hpp"

namespace {

using namespace psr;

struct Overrides {
  std::string config_path;
  std::optional<uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::string> precision;
  std::optional<double> alpha;
  std::optional<double> target_coherence;
};

RunConfig resolve(const Overrides& ov, bool alpha_is_fixed_eval_alpha) {
  RunConfig cfg = load_run_config(ov.config_path);
  if (ov.seed) cfg.seed = *ov.seed;
  if (ov.out_dir) cfg.out_dir = *ov.out_dir;
  if (ov.precision) cfg.precision = *ov.precision;
  if (ov.target_coherence) cfg.target_coherence = *ov.target_coherence;
  if (ov.alpha) {
    if (alpha_is_fixed_eval_alpha)
      cfg.fixed_alpha = *ov.alpha;
    else
      cfg.module.alpha = *ov.alpha;
  }
  cfg.validate();
  return cfg;
}

std::string art(const std::string& dir, const char* name) { return dir + "/" + name; }

// ----------------------------- world -----------------------------

template <class S>
int run_world(const RunConfig& cfg) {
  std::string dir = resolve_out_dir(cfg);
  ensure_dir(dir);
  World<S> w = train_base_model<S>(cfg.model, cfg.world, cfg.seed);
  w.model.save(art(dir, "model.json"));
  w.spec.save(art(dir, "spec.json"));
  SteeringDataset ds = build_dataset(w.model, w.spec, cfg.world, derive_seed(cfg.seed, {seed_tag("dataset")}));
  save_dataset(ds, art(dir, "dataset.jsonl"));
  nlohmann::json summary{{"gates", to_json(w.gates)},
                         {"n_positives", ds.positives.size()},
                         {"n_negatives", ds.negatives.size()},
                         {"seed", cfg.seed}};
  write_json_file(art(dir, "world_summary.json"), summary);
  std::printf("world: steered attr %.3f, unsteered attr %.3f, dataset %zu+/%zu- -> %s\n",
              w.gates.steered_attr, w.gates.unsteered_attr, ds.positives.size(), ds.negatives.size(),
              dir.c_str());
  return 0;
}

// ----------------------------- train -----------------------------

template <class S>
SteeringModule<S> build_module(const RunConfig& cfg, const Model<S>& model, const SteeringDataset& ds) {
  const ModelConfig& mc = model.config();
  PositionPolicy pos = cfg.module.position_policy();
  bool all = cfg.module.scope == "all";
  uint64_t zseed = derive_seed(cfg.seed, {seed_tag("module-z")});
  uint64_t pseed = derive_seed(cfg.seed, {seed_tag("module-probe")});
  SteeringModule<S> m;
  if (cfg.module.init == "dim") {
    if (!all) {
      m = dim_const_module(model, ds, cfg.module.layer, pos);
    } else {
      std::vector<Tensor<S>> zs;
      for (int l = 1; l <= mc.n_layers; ++l)
        zs.push_back(dim_const_module(model, ds, l, pos).units.front().z);
      m = SteeringModule<S>::make_const_all(mc, pos, zs);
    }
  } else if (cfg.module.kind == "const") {
    if (!all) {
      m = SteeringModule<S>::make_const(mc, cfg.module.layer, pos,
                                        SteeringModule<S>::random_direction(mc.d_model, zseed));
    } else {
      std::vector<Tensor<S>> zs;
      for (int l = 1; l <= mc.n_layers; ++l)
        zs.push_back(SteeringModule<S>::random_direction(mc.d_model, derive_seed(zseed, {uint64_t(l)})));
      m = SteeringModule<S>::make_const_all(mc, pos, zs);
    }
  } else {
    if (!all) {
      m = SteeringModule<S>::make_psr(mc, cfg.module.layer, pos,
                                      SteeringModule<S>::random_direction(mc.d_model, zseed), pseed);
    } else {
      std::vector<Tensor<S>> zs;
      for (int l = 1; l <= mc.n_layers; ++l)
        zs.push_back(SteeringModule<S>::random_direction(mc.d_model, derive_seed(zseed, {uint64_t(l)})));
      m = SteeringModule<S>::make_psr_all(mc, pos, zs, pseed);
    }
  }
  m.alpha = cfg.module.alpha;
  return m;
}

template <class S>
int run_train(const RunConfig& cfg) {
  std::string dir = resolve_out_dir(cfg);
  Model<S> model = Model<S>::load(art(dir, "model.json"));
  SteeringDataset ds = load_dataset(art(dir, "dataset.jsonl"));
  SteeringModule<S> module = build_module<S>(cfg, model, ds);

  nlohmann::json summary{{"kind", cfg.module.kind},
                         {"scope", cfg.module.scope},
                         {"init", cfg.module.init},
                         {"trained", false}};
  if (cfg.module.init == "dim") {
    // Closed-form baseline; nothing to optimize.
    module.save(art(dir, "module.json"));
    std::printf("train: difference-in-means module built from %zu+/%zu- examples -> %s\n",
                ds.positives.size(), ds.negatives.size(), art(dir, "module.json").c_str());
  } else {
    TrainConfig tc = cfg.train;
    tc.seed = derive_seed(cfg.seed, {seed_tag("train")});
    FitResult<S> fr = fit(model, module, ds, tc);
    module.save(art(dir, "module.json"));
    write_train_log(art(dir, "train_log.jsonl"), fr.log);
    summary["trained"] = true;
    summary["objective"] = to_string(tc.objective);
    summary["initial_loss"] = fr.initial_loss;
    summary["final_loss"] = fr.final_loss;
    summary["loss_ratio"] = fr.initial_loss != 0 ? fr.final_loss / fr.initial_loss : 0.0;
    if (!fr.judge_bias.empty()) {
      nlohmann::json jb;
      for (const auto& [l, b] : fr.judge_bias) jb[std::to_string(l)] = b;
      summary["judge_bias"] = jb;
    }
    std::printf("train: %s loss %.6g -> %.6g (ratio %.4f) -> %s\n", to_string(tc.objective), fr.initial_loss,
                fr.final_loss, fr.initial_loss != 0 ? fr.final_loss / fr.initial_loss : 0.0,
                art(dir, "module.json").c_str());
  }
  write_json_file(art(dir, "train_summary.json"), summary);
  return 0;
}

// ----------------------------- eval -----------------------------

// Fresh prompt-steered generations used as faithfulness references.
template <class S>
std::vector<Triplet> faithfulness_triplets(const Model<S>& model, const AttributeSpec& spec,
                                           const std::vector<std::vector<int>>& prompts, int max_new,
                                           uint64_t seed) {
  std::vector<Triplet> out;
  for (size_t p = 0; p < prompts.size() && out.size() < 12; ++p) {
    std::vector<int> xs = spec.x_attr;
    xs.insert(xs.end(), prompts[p].begin(), prompts[p].end());
    Rng rng(derive_seed(seed, {seed_tag("faith-gen"), uint64_t(p)}));
    GenResult<S> g = model.generate(xs, max_new, 1.0, 1.0, rng);
    if (g.tokens.empty()) continue;
    out.push_back(Triplet{prompts[p], xs, g.tokens, judge_attr(g.tokens, spec),
                          judge_coherence(g.tokens, spec)});
  }
  if (out.empty()) throw ValidationError("eval: no non-empty prompt-steered generations for faithfulness");
  return out;
}

template <class S>
int run_eval(const RunConfig& cfg) {
  std::string dir = resolve_out_dir(cfg);
  Model<S> model = Model<S>::load(art(dir, "model.json"));
  AttributeSpec spec = AttributeSpec::load_file(art(dir, "spec.json"));
  SteeringModule<S> module = SteeringModule<S>::load(art(dir, "module.json"));
  if (module.d_model != model.config().d_model || module.n_layers != model.config().n_layers)
    throw ValidationError("eval: module and model checkpoint disagree on dimensions");

  uint64_t eseed = derive_seed(cfg.seed, {seed_tag("eval")});
  auto prompts = make_eval_prompts(spec, cfg.world, cfg.eval.n_prompts,
                                   derive_seed(cfg.seed, {seed_tag("eval-prompts")}));

  EvalPoint ps = eval_prompt_steering(model, spec, prompts, cfg.eval, eseed);
  nlohmann::json report{{"prompt_steering", to_json(ps)}, {"target_coherence", cfg.target_coherence}};

  std::vector<EvalPoint> curve;
  if (cfg.fixed_alpha) {
    EvalPoint pt = eval_at_alpha(model, spec, module, prompts, *cfg.fixed_alpha, cfg.eval, eseed);
    curve.push_back(pt);
    report["fixed_alpha"] = to_json(pt);
    std::printf("eval: alpha %.3f -> attr %.3f, coher %.1f", pt.alpha, pt.mean_attr, pt.mean_coher);
  } else {
    SearchTrace tr =
        search_module_alpha(model, spec, module, prompts, cfg.target_coherence, cfg.eval, eseed);
    curve = tr.points;
    TraitAlignment ta = trait_alignment_at_coherence(tr.points, cfg.target_coherence);
    report["search"] = to_json(tr);
    report["trait_alignment"] = to_json(ta);
    std::printf("eval: trait alignment %.3f at coherence %.1f (alpha %.3f%s)", ta.value,
                cfg.target_coherence, tr.final_alpha(), ta.interpolated ? "" : ", nearest-point fallback");
  }
  std::printf(" | prompt steering attr %.3f coher %.1f\n", ps.mean_attr, ps.mean_coher);

  std::vector<Triplet> faith = faithfulness_triplets(model, spec, prompts, cfg.eval.max_new,
                                                     derive_seed(cfg.seed, {seed_tag("faith")}));
  nlohmann::json profiles = nlohmann::json::array();
  profiles.push_back(to_json(faithfulness_profile<S>(model, faith, nullptr, "no-steering")));
  profiles.push_back(
      to_json(faithfulness_profile(model, faith, method_module(model, module), "module")));
  profiles.push_back(to_json(equivalent_prompts_profile(model, spec, faith)));
  report["faithfulness"] = profiles;

  std::vector<std::pair<std::string, SteeringModule<S>>> named{{"module", module}};
  if (std::filesystem::exists(art(dir, "dataset.jsonl"))) {
    SteeringDataset ds = load_dataset(art(dir, "dataset.jsonl"));
    if (!ds.negatives.empty()) {
      for (const auto& u : module.units)
        named.emplace_back("dim-layer-" + std::to_string(u.layer),
                           dim_const_module(model, ds, u.layer, module.positions));
    }
  }
  report["similarity"] = to_json(steering_vector_similarity(named, model.config().n_layers));

  write_curve_csv(art(dir, "curve.csv"), curve);
  write_json_file(art(dir, "eval_report.json"), report);
  return 0;
}

// ----------------------------- analyze -----------------------------

template <class S>
int run_analyze(const RunConfig& cfg) {
  std::string dir = resolve_out_dir(cfg);
  Model<S> model = Model<S>::load(art(dir, "model.json"));
  AttributeSpec spec = AttributeSpec::load_file(art(dir, "spec.json"));
  auto prompts = make_eval_prompts(spec, cfg.world, cfg.eval.n_prompts,
                                   derive_seed(cfg.seed, {seed_tag("eval-prompts")}));
  std::vector<Triplet> trips = faithfulness_triplets(model, spec, prompts, cfg.eval.max_new,
                                                     derive_seed(cfg.seed, {seed_tag("analyze")}));

  std::vector<DeltaTrace<S>> acc;
  std::vector<DeltaTrace<S>> loc_excl, loc_subst;
  for (const auto& t : trips) {
    acc.push_back(delta_acc(model, t.x, t.x_steered, t.y));
    loc_excl.push_back(delta_loc(model, t.x, t.x_steered, t.y, LocalVariant::kAttentionExclusion));
    loc_subst.push_back(delta_loc(model, t.x, t.x_steered, t.y, LocalVariant::kActivationSubstitution));
  }
  StrengthProfile pa = aggregate_profile(acc);
  StrengthProfile pe = aggregate_profile(loc_excl);
  StrengthProfile pssub = aggregate_profile(loc_subst);
  std::vector<double> cov;
  for (int l = 1; l <= model.config().n_layers; ++l) cov.push_back(norm_variation(acc, l));

  write_heat_csv(art(dir, "heat_acc.csv"), strength_profile(acc.front()).heat);
  write_heat_csv(art(dir, "heat_loc_exclusion.csv"), strength_profile(loc_excl.front()).heat);
  write_heat_csv(art(dir, "heat_loc_substitution.csv"), strength_profile(loc_subst.front()).heat);
  nlohmann::json report{{"accumulated", to_json(pa)},
                        {"local_attention_exclusion", to_json(pe)},
                        {"local_activation_substitution", to_json(pssub)},
                        {"norm_variation", cov},
                        {"n_triplets", trips.size()}};
  write_json_file(art(dir, "analyze_report.json"), report);
  std::printf("analyze: %zu traces, norm variation", trips.size());
  for (double c : cov) std::printf(" %.3f", c);
  std::printf(" -> %s\n", art(dir, "analyze_report.json").c_str());
  return 0;
}

// ----------------------------- dispatch -----------------------------

template <int (*FD)(const RunConfig&), int (*FF)(const RunConfig&)>
int dispatch(const RunConfig& cfg) {
  return cfg.precision == "fast" ? FF(cfg) : FD(cfg);
}

void add_common(CLI::App* cmd, Overrides& ov) {
  cmd->add_option("--config", ov.config_path, "experiment configuration file")->required();
  cmd->add_option("--seed", ov.seed, "override the root seed");
  cmd->add_option("--out", ov.out_dir, "override the output directory");
  cmd->add_option("--precision", ov.precision, "fast (32-bit) or verify (64-bit)");
  cmd->add_option("--alpha", ov.alpha,
                  "override the global coefficient (eval: score this single point, no search)");
  cmd->add_option("--target-coherence", ov.target_coherence, "override the coherence target");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale laboratory for replacing prompt steering with trained activation steering"};
  app.require_subcommand(1);
  Overrides ov;
  CLI::App* world = app.add_subcommand("world", "train a base model on the synthetic world, emit dataset");
  CLI::App* train = app.add_subcommand("train", "fit a steering module");
  CLI::App* eval = app.add_subcommand("eval", "coefficient search, trait alignment, faithfulness");
  CLI::App* analyze = app.add_subcommand("analyze", "intervention-strength profiles and heat data");
  for (CLI::App* c : {world, train, eval, analyze}) add_common(c, ov);

  CLI11_PARSE(app, argc, argv);

  try {
    if (world->parsed()) return dispatch<run_world<double>, run_world<float>>(resolve(ov, false));
    if (train->parsed()) return dispatch<run_train<double>, run_train<float>>(resolve(ov, false));
    if (eval->parsed()) return dispatch<run_eval<double>, run_eval<float>>(resolve(ov, true));
    if (analyze->parsed()) return dispatch<run_analyze<double>, run_analyze<float>>(resolve(ov, false));
    std::fprintf(stderr, "error: no subcommand\n");
    return 2;
  } catch (const UnderTrainedError& e) {
    std::fprintf(stderr, "error (under-trained world): %s\n", e.what());
    return 3;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error (numeric): %s\n", e.what());
    return 4;
  } catch (const ValidationError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
