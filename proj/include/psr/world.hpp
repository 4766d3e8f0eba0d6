#pragma once

// Synthetic steering world.
//
// The vocabulary splits into reserved tokens (end-of-sequence, the
// prompt/response separator), a pool of instruction tokens that steering
// prefixes are built from, a set of attribute tokens T_A, and neutral tokens
// T_N. A seed-fixed bigram grammar gives every token eight allowed successors,
// half attribute and half neutral, so walks can be biased toward either class
// while staying grammatical. Corpus sequences look like
//
//   [steering prefix]  prompt body  SEP  response  EOS
//
// where prefixed responses draw attribute successors at rate rho and
// unprefixed ones at rate 1 - rho. Six interchangeable prefixes (one primary,
// five alternates) all elicit the attribute, which later gives the evaluator an
// "equivalent prompt" reference. Two programmatic judges score responses:
// attribute rate in [0, 1] and bigram coherence in [0, 100].

#include <algorithm>
#include <cmath>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "psr/common.hpp"
#include "psr/model.hpp"
#include "psr/optim.hpp"
#include "psr/steering.hpp"
#include "psr/tensor.hpp"

namespace psr {

struct WorldConfig {
  int n_attr_tokens = 15;
  int n_prefix_pool = 12;
  int prefix_len = 2;
  int n_alt_prefixes = 5;
  int grammar_successors = 8;       // per token; half drawn from T_A, half from T_N
  double rho = 0.8;                 // attribute rate of steered responses
  int prompt_min = 4, prompt_max = 12;
  int response_min = 8, response_max = 24;
  int train_steps = 1500, train_batch = 16;
  double train_lr = 3e-3;
  int gate_samples = 200;           // generations for the behavioral gate, split between arms
  double gate_steered_min = 0.7, gate_unsteered_max = 0.3;
  int n_prompts = 60, samples_per_prompt = 4;
  double filter_coherence = 50.0, filter_attr = 0.5;
  double gen_temperature = 1.0, gen_top_p = 1.0;

  void validate(const ModelConfig& mc) const {
    if (rho <= 0.5 || rho > 1.0) throw ValidationError("world config: rho must lie in (0.5, 1]");
    if (prefix_len < 1 || prefix_len > 4) throw ValidationError("world config: prefix length must be 1..4");
    if (grammar_successors < 2 || grammar_successors % 2 != 0)
      throw ValidationError("world config: grammar_successors must be even and at least 2");
    if (prompt_min < 1 || prompt_min > prompt_max) throw ValidationError("world config: bad prompt length range");
    if (response_min < 1 || response_min > response_max)
      throw ValidationError("world config: bad response length range");
    int needed = 2 + n_prefix_pool + n_attr_tokens + grammar_successors / 2;
    if (mc.vocab_size < needed)
      throw ValidationError("world config: vocab of " + std::to_string(mc.vocab_size) + " too small; needs " +
                            std::to_string(needed));
    if (n_attr_tokens < grammar_successors / 2)
      throw ValidationError("world config: fewer attribute tokens than grammar successors per class");
    if (size_t(prefix_len) * size_t(1 + n_alt_prefixes) > size_t(n_prefix_pool))
      throw ValidationError("world config: prefix pool too small for " + std::to_string(1 + n_alt_prefixes) +
                            " disjoint prefixes of length " + std::to_string(prefix_len));
  }
};

struct AttributeSpec {
  int vocab_size = 0;
  std::vector<int> t_attr, t_neutral;
  std::vector<int> x_attr;
  std::vector<std::vector<int>> alt_prefixes;
  double rho = 0.8;
  std::vector<std::vector<int>> successors;  // per token id

  bool is_attr(int t) const { return std::binary_search(t_attr.begin(), t_attr.end(), t); }
  bool is_neutral(int t) const { return std::binary_search(t_neutral.begin(), t_neutral.end(), t); }
  bool bigram_ok(int a, int b) const {
    if (a < 0 || a >= vocab_size) return false;
    const auto& s = successors[size_t(a)];
    return std::find(s.begin(), s.end(), b) != s.end();
  }

  void validate() const {
    if (vocab_size < 4) throw ValidationError("attribute spec: vocab too small");
    if (t_attr.empty() || t_neutral.empty()) throw ValidationError("attribute spec: empty token class");
    for (int t : t_attr)
      if (is_neutral(t)) throw ValidationError("attribute spec: token " + std::to_string(t) + " in both classes");
    if (x_attr.empty() || x_attr.size() > 4)
      throw ValidationError("attribute spec: steering prefix must have 1..4 tokens");
    auto check_prefix = [&](const std::vector<int>& p) {
      for (int t : p)
        if (is_attr(t) || is_neutral(t) || t == kEosToken || t == kSepToken)
          throw ValidationError("attribute spec: prefix token " + std::to_string(t) +
                                " collides with a token class");
    };
    check_prefix(x_attr);
    for (const auto& p : alt_prefixes) check_prefix(p);
    if (int(successors.size()) != vocab_size)
      throw ValidationError("attribute spec: grammar covers " + std::to_string(successors.size()) +
                            " tokens, vocab is " + std::to_string(vocab_size));
  }

  const std::vector<int>& prefix(int variant) const {
    if (variant == 0) return x_attr;
    if (variant < 0 || variant > int(alt_prefixes.size()))
      throw ValidationError("attribute spec: prefix variant " + std::to_string(variant) + " out of range");
    return alt_prefixes[size_t(variant - 1)];
  }
  int n_prefixes() const { return 1 + int(alt_prefixes.size()); }

  void save(const std::string& path) const {
    nlohmann::json j;
    j["format"] = "psr-attribute-spec";
    j["version"] = 1;
    j["vocab_size"] = vocab_size;
    j["t_attr"] = t_attr;
    j["t_neutral"] = t_neutral;
    j["x_attr"] = x_attr;
    j["alt_prefixes"] = alt_prefixes;
    j["rho"] = rho;
    j["successors"] = successors;
    std::ofstream f(path);
    if (!f) throw IoError("attribute spec: cannot open " + path + " for writing");
    f << j.dump();
  }
  static AttributeSpec load_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("attribute spec: cannot open " + path);
    nlohmann::json j;
    try {
      f >> j;
    } catch (const std::exception& e) {
      throw ValidationError("attribute spec: malformed json in " + path + ": " + e.what());
    }
    if (!j.contains("format") || j["format"] != "psr-attribute-spec" || j.value("version", 0) != 1)
      throw ValidationError("attribute spec: " + path + " is not a version-1 attribute spec");
    AttributeSpec s;
    s.vocab_size = j.at("vocab_size").get<int>();
    s.t_attr = j.at("t_attr").get<std::vector<int>>();
    s.t_neutral = j.at("t_neutral").get<std::vector<int>>();
    s.x_attr = j.at("x_attr").get<std::vector<int>>();
    s.alt_prefixes = j.at("alt_prefixes").get<std::vector<std::vector<int>>>();
    s.rho = j.at("rho").get<double>();
    s.successors = j.at("successors").get<std::vector<std::vector<int>>>();
    s.validate();
    return s;
  }
};

// Deterministic world layout for a given seed: token-class carving and random
// (but class-balanced) grammar.
inline AttributeSpec build_attribute_spec(const ModelConfig& mc, const WorldConfig& wc, uint64_t seed) {
  wc.validate(mc);
  AttributeSpec s;
  s.vocab_size = mc.vocab_size;
  s.rho = wc.rho;
  int next = 2;  // after reserved eos/sep
  std::vector<int> pool;
  for (int i = 0; i < wc.n_prefix_pool; ++i) pool.push_back(next++);
  for (int i = 0; i < wc.n_attr_tokens; ++i) s.t_attr.push_back(next++);
  while (next < mc.vocab_size) s.t_neutral.push_back(next++);

  Rng rng(derive_seed(seed, {seed_tag("attribute-spec")}));
  std::shuffle(pool.begin(), pool.end(), rng);
  size_t cursor = 0;
  for (int v = 0; v < 1 + wc.n_alt_prefixes; ++v) {
    std::vector<int> p(pool.begin() + long(cursor), pool.begin() + long(cursor + size_t(wc.prefix_len)));
    cursor += size_t(wc.prefix_len);
    if (v == 0)
      s.x_attr = std::move(p);
    else
      s.alt_prefixes.push_back(std::move(p));
  }

  int per_class = wc.grammar_successors / 2;
  s.successors.resize(size_t(mc.vocab_size));
  for (int t = 0; t < mc.vocab_size; ++t) {
    std::vector<int> attr_pick = s.t_attr, neutral_pick = s.t_neutral;
    std::shuffle(attr_pick.begin(), attr_pick.end(), rng);
    std::shuffle(neutral_pick.begin(), neutral_pick.end(), rng);
    auto& succ = s.successors[size_t(t)];
    succ.assign(attr_pick.begin(), attr_pick.begin() + per_class);
    succ.insert(succ.end(), neutral_pick.begin(), neutral_pick.begin() + per_class);
    std::sort(succ.begin(), succ.end());
  }
  s.validate();
  return s;
}

// ----------------------------- judges -----------------------------

inline double judge_attr(const std::vector<int>& y, const AttributeSpec& spec) {
  if (y.empty()) throw ValidationError("judge_attr: empty response");
  int hits = 0;
  for (int t : y) hits += spec.is_attr(t) ? 1 : 0;
  return double(hits) / double(y.size());
}

// 100 * fraction of adjacent bigrams allowed by the grammar; too short to have
// a bigram counts as fully coherent.
inline double judge_coherence(const std::vector<int>& y, const AttributeSpec& spec) {
  if (y.size() < 2) return 100.0;
  int ok = 0;
  for (size_t i = 0; i + 1 < y.size(); ++i) ok += spec.bigram_ok(y[i], y[i + 1]) ? 1 : 0;
  return 100.0 * double(ok) / double(y.size() - 1);
}

// ----------------------------- corpus sampling -----------------------------

namespace detail {

inline int pick(const std::vector<int>& pool, Rng& rng) {
  std::uniform_int_distribution<size_t> d(0, pool.size() - 1);
  return pool[d(rng)];
}

inline int walk_step(const AttributeSpec& spec, int cur, double attr_rate, Rng& rng) {
  const auto& succ = spec.successors[size_t(cur)];
  std::vector<int> attr, neutral;
  for (int t : succ) (spec.is_attr(t) ? attr : neutral).push_back(t);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  bool want_attr = u(rng) < attr_rate;
  const auto& pool = want_attr ? (attr.empty() ? neutral : attr) : (neutral.empty() ? attr : neutral);
  return pick(pool, rng);
}

}  // namespace detail

inline std::vector<int> sample_prompt_body(const AttributeSpec& spec, const WorldConfig& wc, Rng& rng) {
  std::uniform_int_distribution<int> len_d(wc.prompt_min, wc.prompt_max);
  int len = len_d(rng);
  std::vector<int> out;
  out.push_back(detail::pick(spec.t_neutral, rng));
  while (int(out.size()) < len) out.push_back(detail::walk_step(spec, out.back(), 0.0, rng));
  return out;
}

inline std::vector<int> sample_response(const AttributeSpec& spec, const WorldConfig& wc, double attr_rate,
                                        Rng& rng) {
  std::uniform_int_distribution<int> len_d(wc.response_min, wc.response_max);
  int len = len_d(rng);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<int> out;
  out.push_back(detail::pick(u(rng) < attr_rate ? spec.t_attr : spec.t_neutral, rng));
  while (int(out.size()) < len) out.push_back(detail::walk_step(spec, out.back(), attr_rate, rng));
  return out;
}

// One training sequence; steered examples draw one of the equivalent prefixes.
inline std::vector<int> sample_corpus_sequence(const AttributeSpec& spec, const WorldConfig& wc, bool steered,
                                               Rng& rng) {
  std::vector<int> seq;
  if (steered) {
    std::uniform_int_distribution<int> v(0, spec.n_prefixes() - 1);
    const auto& p = spec.prefix(v(rng));
    seq.insert(seq.end(), p.begin(), p.end());
  }
  std::vector<int> body = sample_prompt_body(spec, wc, rng);
  seq.insert(seq.end(), body.begin(), body.end());
  seq.push_back(kSepToken);
  std::vector<int> resp = sample_response(spec, wc, steered ? wc.rho : 1.0 - wc.rho, rng);
  seq.insert(seq.end(), resp.begin(), resp.end());
  seq.push_back(kEosToken);
  return seq;
}

// ----------------------------- dataset -----------------------------

struct Triplet {
  std::vector<int> x;          // question, separator included
  std::vector<int> x_steered;  // prefixed question (equal to x in injected worlds)
  std::vector<int> y;          // response
  double j_attr = 0.0;
  double j_coher = 0.0;
};

struct SteeringDataset {
  std::vector<Triplet> positives;
  std::vector<Triplet> negatives;  // unprefixed prompt, neutral response
};

inline void save_dataset(const SteeringDataset& ds, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("dataset: cannot open " + path + " for writing");
  auto write = [&](const Triplet& t, const char* role) {
    nlohmann::json j{{"role", role},   {"x", t.x},           {"x_steered", t.x_steered},
                     {"y", t.y},       {"j_attr", t.j_attr}, {"j_coher", t.j_coher}};
    f << j.dump() << "\n";
  };
  for (const auto& t : ds.positives) write(t, "positive");
  for (const auto& t : ds.negatives) write(t, "negative");
  if (!f) throw IoError("dataset: write failed for " + path);
}

inline SteeringDataset load_dataset(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("dataset: cannot open " + path);
  SteeringDataset ds;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw ValidationError("dataset: malformed json at " + path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    Triplet t;
    t.x = j.at("x").get<std::vector<int>>();
    t.x_steered = j.at("x_steered").get<std::vector<int>>();
    t.y = j.at("y").get<std::vector<int>>();
    t.j_attr = j.at("j_attr").get<double>();
    t.j_coher = j.at("j_coher").get<double>();
    std::string role = j.at("role").get<std::string>();
    if (role == "positive")
      ds.positives.push_back(std::move(t));
    else if (role == "negative")
      ds.negatives.push_back(std::move(t));
    else
      throw ValidationError("dataset: unknown role '" + role + "' at line " + std::to_string(lineno));
  }
  return ds;
}

// ----------------------------- base model training -----------------------------

struct WorldGateStats {
  double steered_attr = 0.0;
  double unsteered_attr = 0.0;
  double steered_coherence = 0.0;
  double unsteered_coherence = 0.0;
  int empty_generations = 0;
};

template <class S>
WorldGateStats measure_gates(const Model<S>& model, const AttributeSpec& spec, const WorldConfig& wc,
                             uint64_t seed) {
  WorldGateStats st;
  int per_arm = std::max(1, wc.gate_samples / 2);
  int counted_s = 0, counted_u = 0;
  for (int i = 0; i < per_arm; ++i) {
    Rng prng(derive_seed(seed, {seed_tag("gate-prompt"), uint64_t(i)}));
    std::vector<int> body = sample_prompt_body(spec, wc, prng);
    std::vector<int> x = body;
    x.push_back(kSepToken);
    std::vector<int> xs = spec.x_attr;
    xs.insert(xs.end(), x.begin(), x.end());
    Rng g1(derive_seed(seed, {seed_tag("gate-gen"), uint64_t(i), 0}));
    Rng g2(derive_seed(seed, {seed_tag("gate-gen"), uint64_t(i), 1}));
    GenResult<S> ys = model.generate(xs, wc.response_max, wc.gen_temperature, wc.gen_top_p, g1);
    GenResult<S> yu = model.generate(x, wc.response_max, wc.gen_temperature, wc.gen_top_p, g2);
    if (!ys.tokens.empty()) {
      st.steered_attr += judge_attr(ys.tokens, spec);
      st.steered_coherence += judge_coherence(ys.tokens, spec);
      ++counted_s;
    } else {
      ++st.empty_generations;
    }
    if (!yu.tokens.empty()) {
      st.unsteered_attr += judge_attr(yu.tokens, spec);
      st.unsteered_coherence += judge_coherence(yu.tokens, spec);
      ++counted_u;
    } else {
      ++st.empty_generations;
    }
  }
  if (counted_s == 0 || counted_u == 0)
    throw UnderTrainedError("world gate: model generated only empty responses");
  st.steered_attr /= counted_s;
  st.steered_coherence /= counted_s;
  st.unsteered_attr /= counted_u;
  st.unsteered_coherence /= counted_u;
  return st;
}

template <class S>
struct World {
  Model<S> model;
  AttributeSpec spec;
  WorldGateStats gates;
};

// Trains a fresh model on corpus sequences until it reproduces the world's
// conditional behavior, then verifies the behavioral gates.
template <class S>
World<S> train_base_model(const ModelConfig& mc, const WorldConfig& wc, uint64_t seed) {
  mc.validate();
  AttributeSpec spec = build_attribute_spec(mc, wc, seed);
  Model<S> model = Model<S>::init(mc, derive_seed(seed, {seed_tag("base-model")}));
  model.set_trainable(true);
  auto params = model.parameters();
  Adam<S> opt(params, wc.train_lr);
  Rng data_rng(derive_seed(seed, {seed_tag("base-corpus")}));
  std::uniform_int_distribution<int> coin(0, 1);

  for (int step = 0; step < wc.train_steps; ++step) {
    opt.zero_grad();
    Tape<S> tape;
    Tensor<S> loss;
    for (int b = 0; b < wc.train_batch; ++b) {
      std::vector<int> seq = sample_corpus_sequence(spec, wc, coin(data_rng) == 1, data_rng);
      ForwardRecord<S> rec = model.forward(seq);
      Tensor<S> rows = slice(rec.logits, 0, 0, int(seq.size()) - 1);
      std::vector<int> targets(seq.begin() + 1, seq.end());
      Tensor<S> ce = cross_entropy_mean(rows, targets);
      loss = loss.defined() ? add(loss, ce) : ce;
    }
    loss = scale(loss, S(1.0 / wc.train_batch));
    tape.backward(loss);
    opt.step();
  }
  model.set_trainable(false);
  for (auto* p : params) p->drop_grad();

  WorldGateStats gates = measure_gates(model, spec, wc, derive_seed(seed, {seed_tag("gate")}));
  if (gates.steered_attr < wc.gate_steered_min || gates.unsteered_attr > wc.gate_unsteered_max) {
    std::ostringstream os;
    os << "world gate: model is under-trained (steered attribute " << gates.steered_attr << " vs required >= "
       << wc.gate_steered_min << ", unsteered " << gates.unsteered_attr << " vs required <= "
       << wc.gate_unsteered_max << ")";
    throw UnderTrainedError(os.str());
  }
  return World<S>{std::move(model), std::move(spec), gates};
}

// Samples prompts, generates steered and neutral responses, filters by the
// judges, and returns the kept triplets. Steered generation here is literal
// prompt steering: the primary prefix is prepended, no hooks involved.
template <class S>
SteeringDataset build_dataset(const Model<S>& model, const AttributeSpec& spec, const WorldConfig& wc,
                              uint64_t seed) {
  SteeringDataset ds;
  for (int p = 0; p < wc.n_prompts; ++p) {
    Rng prng(derive_seed(seed, {seed_tag("dataset-prompt"), uint64_t(p)}));
    std::vector<int> body = sample_prompt_body(spec, wc, prng);
    std::vector<int> x = body;
    x.push_back(kSepToken);
    std::vector<int> xs = spec.x_attr;
    xs.insert(xs.end(), x.begin(), x.end());
    for (int s = 0; s < wc.samples_per_prompt; ++s) {
      Rng grng(derive_seed(seed, {seed_tag("dataset-gen"), uint64_t(p), uint64_t(s)}));
      GenResult<S> g = model.generate(xs, wc.response_max, wc.gen_temperature, wc.gen_top_p, grng);
      if (int(g.tokens.size()) < wc.response_min) continue;
      double ja = judge_attr(g.tokens, spec);
      double jc = judge_coherence(g.tokens, spec);
      if (jc < wc.filter_coherence || ja < wc.filter_attr) continue;
      ds.positives.push_back(Triplet{x, xs, g.tokens, ja, jc});
    }
    Rng nrng(derive_seed(seed, {seed_tag("dataset-neutral"), uint64_t(p)}));
    GenResult<S> n = model.generate(x, wc.response_max, wc.gen_temperature, wc.gen_top_p, nrng);
    if (int(n.tokens.size()) >= wc.response_min) {
      double ja = judge_attr(n.tokens, spec);
      double jc = judge_coherence(n.tokens, spec);
      if (jc >= wc.filter_coherence && ja < wc.filter_attr)
        ds.negatives.push_back(Triplet{x, x, n.tokens, ja, jc});
    }
  }
  if (ds.positives.empty())
    throw ValidationError("dataset: no steered generations survived the judge filters; "
                          "the model does not express the attribute coherently");
  return ds;
}

// ----------------------------- planted world -----------------------------

// A world where "prompt steering" is redefined as a known injection
// c*(A) * z* at one layer, applied through the same hook machinery modules
// use. Ground truth for every probe and trainer test.
template <class S>
struct Planted {
  Model<S> model;
  AttributeSpec spec;
  SteeringModule<S> module;  // the planted mechanism, alpha = 1

  HookSet<S> hooks(int question_len, AttachMode mode, std::shared_ptr<HookCapture<S>> cap = nullptr) const {
    return attach(module, model.config(), question_len, mode, cap);
  }

  ForwardRecord<S> steered_forward(const std::vector<int>& tokens, int question_len,
                                   std::shared_ptr<HookCapture<S>> cap = nullptr) const {
    HookSet<S> h = hooks(question_len, AttachMode::kForward, cap);
    return model.forward(tokens, &h);
  }
};

// rule_constant: c*(A) = coeff; otherwise c*(A) = relu(A . w* + b*).
template <class S>
Planted<S> make_planted_world(const ModelConfig& mc, const WorldConfig& wc, int layer, bool rule_constant,
                              double const_coeff, double z_norm, uint64_t seed) {
  mc.validate();
  AttributeSpec spec = build_attribute_spec(mc, wc, seed);
  Model<S> model = Model<S>::init(mc, derive_seed(seed, {seed_tag("planted-model")}));
  Rng rng(derive_seed(seed, {seed_tag("planted-rule")}));
  Tensor<S> z = SteeringModule<S>::random_direction(mc.d_model, derive_seed(seed, {seed_tag("planted-z")}));
  for (size_t i = 0; i < z.numel(); ++i) z.data()[i] = S(double(z.data()[i]) * z_norm);
  SteeringModule<S> module;
  if (rule_constant) {
    module = SteeringModule<S>::make_const(mc, layer, PositionPolicy::kResponse, z);
    module.alpha = const_coeff;
  } else {
    module = SteeringModule<S>::make_psr(mc, layer, PositionPolicy::kResponse, z,
                                         derive_seed(seed, {seed_tag("planted-probe")}));
    // Replace the generic probe init with a planted rule of meaningful spread:
    // pre-activations of order one, mostly alive.
    auto& u = module.units[0];
    std::normal_distribution<double> nd(0.0, 1.0);
    double scale_w = 0.15 / std::sqrt(double(mc.d_model));
    for (size_t i = 0; i < u.w.numel(); ++i) u.w.data()[i] = S(nd(rng) * scale_w);
    u.b = Tensor<S>::scalar(S(0.4));
    module.alpha = 1.0;
  }
  return Planted<S>{std::move(model), std::move(spec), std::move(module)};
}

// Generations under the planted injection; no judge filtering — the point is
// mechanism recovery, not behavioral quality.
template <class S>
SteeringDataset build_planted_dataset(const Planted<S>& world, const WorldConfig& wc, int n_prompts,
                                      int samples_per_prompt, uint64_t seed) {
  SteeringDataset ds;
  for (int p = 0; p < n_prompts; ++p) {
    Rng prng(derive_seed(seed, {seed_tag("planted-prompt"), uint64_t(p)}));
    std::vector<int> body = sample_prompt_body(world.spec, wc, prng);
    std::vector<int> x = body;
    x.push_back(kSepToken);
    HookSet<S> hooks = world.hooks(int(x.size()), AttachMode::kGenerate);
    for (int s = 0; s < samples_per_prompt; ++s) {
      Rng grng(derive_seed(seed, {seed_tag("planted-gen"), uint64_t(p), uint64_t(s)}));
      GenResult<S> g = world.model.generate(x, wc.response_max, wc.gen_temperature, wc.gen_top_p, grng, &hooks);
      if (g.tokens.empty()) continue;
      ds.positives.push_back(
          Triplet{x, x, g.tokens, judge_attr(g.tokens, world.spec), judge_coherence(g.tokens, world.spec)});
    }
  }
  if (ds.positives.empty()) throw ValidationError("planted dataset: no non-empty generations produced");
  return ds;
}

}  // namespace psr
