#include "psr/config.hpp"

#include <cstdlib>
#include <fstream>

namespace psr {

namespace {

void check_keys(const nlohmann::json& j, const std::string& section,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ValidationError("config: " + section + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known) throw ValidationError("config: unknown key '" + it.key() + "' in " + section);
  }
}

template <class T>
void get_if(const nlohmann::json& j, const char* key, T& dst, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("config: bad value for '" + std::string(key) + "' in " + section + ": " + e.what());
  }
}

}  // namespace

void ModuleSpec::validate(const ModelConfig& mc) const {
  if (kind != "psr" && kind != "const")
    throw ValidationError("config: module.kind must be 'psr' or 'const', got '" + kind + "'");
  if (scope != "single" && scope != "all")
    throw ValidationError("config: module.scope must be 'single' or 'all', got '" + scope + "'");
  if (positions != "response" && positions != "question_response")
    throw ValidationError("config: module.positions must be 'response' or 'question_response', got '" +
                          positions + "'");
  if (init != "random" && init != "dim")
    throw ValidationError("config: module.init must be 'random' or 'dim', got '" + init + "'");
  if (init == "dim" && kind != "const")
    throw ValidationError("config: difference-in-means init builds constant modules only");
  if (scope == "single" && (layer < 1 || layer > mc.n_layers))
    throw ValidationError("config: module.layer " + std::to_string(layer) + " out of range 1.." +
                          std::to_string(mc.n_layers));
  if (!std::isfinite(alpha)) throw ValidationError("config: module.alpha must be finite");
}

PositionPolicy ModuleSpec::position_policy() const {
  return positions == "response" ? PositionPolicy::kResponse : PositionPolicy::kQuestionResponse;
}

void RunConfig::validate() const {
  if (precision != "fast" && precision != "verify")
    throw ValidationError("config: precision must be 'fast' or 'verify', got '" + precision + "'");
  model.validate();
  world.validate(model);
  module.validate(model);
  train.validate();
  eval.validate();
  if (!(target_coherence > 0.0 && target_coherence < 100.0))
    throw ValidationError("config: target_coherence must lie in (0, 100)");
  if (fixed_alpha && !(*fixed_alpha >= 0))
    throw ValidationError("config: fixed_alpha must be >= 0");
}

std::string default_out_root() {
  const char* env = std::getenv("PSR_OUT_ROOT");
  return env && *env ? std::string(env) : std::string("runs");
}

std::string resolve_out_dir(const RunConfig& cfg) {
  std::string dir = cfg.out_dir.empty() ? "run" : cfg.out_dir;
  if (!dir.empty() && dir.front() == '/') return dir;
  return default_out_root() + "/" + dir;
}

RunConfig parse_run_config(const nlohmann::json& j) {
  check_keys(j, "the top level",
             {"seed", "out_dir", "precision", "model", "world", "module", "train", "eval",
              "target_coherence", "fixed_alpha"});
  RunConfig c;
  get_if(j, "seed", c.seed, "the top level");
  get_if(j, "out_dir", c.out_dir, "the top level");
  get_if(j, "precision", c.precision, "the top level");
  get_if(j, "target_coherence", c.target_coherence, "the top level");
  if (j.contains("fixed_alpha") && !j.at("fixed_alpha").is_null()) {
    double a = 0;
    get_if(j, "fixed_alpha", a, "the top level");
    c.fixed_alpha = a;
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, "model",
               {"vocab_size", "n_layers", "d_model", "n_heads", "ffn_mult", "max_context", "ln_eps"});
    get_if(m, "vocab_size", c.model.vocab_size, "model");
    get_if(m, "n_layers", c.model.n_layers, "model");
    get_if(m, "d_model", c.model.d_model, "model");
    get_if(m, "n_heads", c.model.n_heads, "model");
    get_if(m, "ffn_mult", c.model.ffn_mult, "model");
    get_if(m, "max_context", c.model.max_context, "model");
    get_if(m, "ln_eps", c.model.ln_eps, "model");
  }

  if (j.contains("world")) {
    const auto& w = j.at("world");
    check_keys(w, "world",
               {"n_attr_tokens", "n_prefix_pool", "prefix_len", "n_alt_prefixes", "grammar_successors",
                "rho", "prompt_min", "prompt_max", "response_min", "response_max", "train_steps",
                "train_batch", "train_lr", "gate_samples", "gate_steered_min", "gate_unsteered_max",
                "n_prompts", "samples_per_prompt", "filter_coherence", "filter_attr", "gen_temperature",
                "gen_top_p"});
    get_if(w, "n_attr_tokens", c.world.n_attr_tokens, "world");
    get_if(w, "n_prefix_pool", c.world.n_prefix_pool, "world");
    get_if(w, "prefix_len", c.world.prefix_len, "world");
    get_if(w, "n_alt_prefixes", c.world.n_alt_prefixes, "world");
    get_if(w, "grammar_successors", c.world.grammar_successors, "world");
    get_if(w, "rho", c.world.rho, "world");
    get_if(w, "prompt_min", c.world.prompt_min, "world");
    get_if(w, "prompt_max", c.world.prompt_max, "world");
    get_if(w, "response_min", c.world.response_min, "world");
    get_if(w, "response_max", c.world.response_max, "world");
    get_if(w, "train_steps", c.world.train_steps, "world");
    get_if(w, "train_batch", c.world.train_batch, "world");
    get_if(w, "train_lr", c.world.train_lr, "world");
    get_if(w, "gate_samples", c.world.gate_samples, "world");
    get_if(w, "gate_steered_min", c.world.gate_steered_min, "world");
    get_if(w, "gate_unsteered_max", c.world.gate_unsteered_max, "world");
    get_if(w, "n_prompts", c.world.n_prompts, "world");
    get_if(w, "samples_per_prompt", c.world.samples_per_prompt, "world");
    get_if(w, "filter_coherence", c.world.filter_coherence, "world");
    get_if(w, "filter_attr", c.world.filter_attr, "world");
    get_if(w, "gen_temperature", c.world.gen_temperature, "world");
    get_if(w, "gen_top_p", c.world.gen_top_p, "world");
  }

  if (j.contains("module")) {
    const auto& m = j.at("module");
    check_keys(m, "module", {"kind", "scope", "layer", "positions", "alpha", "init"});
    get_if(m, "kind", c.module.kind, "module");
    get_if(m, "scope", c.module.scope, "module");
    get_if(m, "layer", c.module.layer, "module");
    get_if(m, "positions", c.module.positions, "module");
    get_if(m, "alpha", c.module.alpha, "module");
    get_if(m, "init", c.module.init, "module");
  }

  if (j.contains("train")) {
    const auto& t = j.at("train");
    check_keys(t, "train",
               {"objective", "steps", "batch", "lr", "beta1", "beta2", "regularizer", "reg_weight",
                "use_negatives", "judge_bias", "judge_bias_init"});
    if (t.contains("objective")) {
      std::string obj;
      get_if(t, "objective", obj, "train");
      c.train.objective = objective_from_string(obj);
    }
    get_if(t, "steps", c.train.steps, "train");
    get_if(t, "batch", c.train.batch, "train");
    get_if(t, "lr", c.train.lr, "train");
    get_if(t, "beta1", c.train.beta1, "train");
    get_if(t, "beta2", c.train.beta2, "train");
    get_if(t, "regularizer", c.train.regularizer, "train");
    get_if(t, "reg_weight", c.train.reg_weight, "train");
    get_if(t, "use_negatives", c.train.use_negatives, "train");
    get_if(t, "judge_bias", c.train.judge_bias, "train");
    get_if(t, "judge_bias_init", c.train.judge_bias_init, "train");
  }

  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, "eval",
               {"n_prompts", "samples_per_prompt", "temperature", "top_p", "max_new", "alpha_min",
                "alpha_max", "interval_eps", "search_steps"});
    get_if(e, "n_prompts", c.eval.n_prompts, "eval");
    get_if(e, "samples_per_prompt", c.eval.samples_per_prompt, "eval");
    get_if(e, "temperature", c.eval.temperature, "eval");
    get_if(e, "top_p", c.eval.top_p, "eval");
    get_if(e, "max_new", c.eval.max_new, "eval");
    get_if(e, "alpha_min", c.eval.alpha_min, "eval");
    get_if(e, "alpha_max", c.eval.alpha_max, "eval");
    get_if(e, "interval_eps", c.eval.interval_eps, "eval");
    get_if(e, "search_steps", c.eval.search_steps, "eval");
  }

  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("config: cannot open " + path);
  nlohmann::json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw ValidationError("config: malformed json in " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace psr
