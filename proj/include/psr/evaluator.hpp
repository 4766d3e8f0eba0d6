#pragma once

// Measurement protocols.
//
// Steered generation scoring: sample responses from unprefixed prompts under a
// module at a given global coefficient and average the judges. Trait alignment
// at a coherence level: binary-search the coefficient until generation
// coherence meets a target, then linearly interpolate attribute scores between
// the probes bracketing the target. Faithfulness: per-layer relative RMSE
// between the prompt-steering deviation and a method's deviation from the
// unsteered pass. Similarity: pairwise cosines between methods' steering
// directions, per layer.

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "psr/common.hpp"
#include "psr/delta.hpp"
#include "psr/model.hpp"
#include "psr/steering.hpp"
#include "psr/tensor.hpp"
#include "psr/world.hpp"

namespace psr {

struct EvalConfig {
  int n_prompts = 20;
  int samples_per_prompt = 10;
  double temperature = 1.0, top_p = 1.0;
  int max_new = 24;
  double alpha_min = 0.0, alpha_max = 10.0;
  double interval_eps = 0.01;
  int search_steps = 15;

  void validate() const {
    if (n_prompts < 1 || samples_per_prompt < 1)
      throw ValidationError("eval config: prompt and sample counts must be at least 1");
    if (max_new < 1) throw ValidationError("eval config: max_new must be at least 1");
    if (!(alpha_min >= 0) || !(alpha_max > alpha_min))
      throw ValidationError("eval config: coefficient range must satisfy 0 <= alpha_min < alpha_max");
    if (interval_eps <= 0) throw ValidationError("eval config: interval threshold must be positive");
    if (search_steps < 1) throw ValidationError("eval config: search must allow at least 1 probe");
  }
};

struct EvalPoint {
  double alpha = 0;
  double mean_attr = 0;
  double mean_coher = 0;
  int n_samples = 0;
};

// ----------------------------- generation scoring -----------------------------

inline std::vector<std::vector<int>> make_eval_prompts(const AttributeSpec& spec, const WorldConfig& wc, int n,
                                                       uint64_t seed) {
  std::vector<std::vector<int>> out;
  for (int i = 0; i < n; ++i) {
    Rng rng(derive_seed(seed, {seed_tag("eval-prompt"), uint64_t(i)}));
    std::vector<int> x = sample_prompt_body(spec, wc, rng);
    x.push_back(kSepToken);
    out.push_back(std::move(x));
  }
  return out;
}

namespace detail {

// An immediate end-of-sequence counts as attribute-free and vacuously
// coherent, mirroring the too-short-for-a-bigram rule.
inline void score_generation(const std::vector<int>& y, const AttributeSpec& spec, double& attr, double& coher) {
  if (y.empty()) {
    attr = 0.0;
    coher = 100.0;
    return;
  }
  attr = judge_attr(y, spec);
  coher = judge_coherence(y, spec);
}

}  // namespace detail

// Scores a module at one global coefficient. Sampling seeds derive from
// (seed, prompt, sample) only, so probes at different coefficients are paired.
template <class S>
EvalPoint eval_at_alpha(const Model<S>& model, const AttributeSpec& spec, const SteeringModule<S>& module,
                        const std::vector<std::vector<int>>& prompts, double alpha, const EvalConfig& ec,
                        uint64_t seed) {
  ec.validate();
  if (!(alpha >= 0)) throw ValidationError("eval: global coefficient must be >= 0");
  if (prompts.empty()) throw ValidationError("eval: no prompts");
  SteeringModule<S> m = module;
  m.alpha = alpha;
  EvalPoint pt;
  pt.alpha = alpha;
  double attr_acc = 0, coher_acc = 0;
  for (size_t p = 0; p < prompts.size(); ++p) {
    HookSet<S> hooks = attach(m, model.config(), int(prompts[p].size()), AttachMode::kGenerate);
    for (int s = 0; s < ec.samples_per_prompt; ++s) {
      Rng rng(derive_seed(seed, {seed_tag("eval-gen"), uint64_t(p), uint64_t(s)}));
      GenResult<S> g = model.generate(prompts[p], ec.max_new, ec.temperature, ec.top_p, rng, &hooks);
      double a, c;
      detail::score_generation(g.tokens, spec, a, c);
      attr_acc += a;
      coher_acc += c;
      ++pt.n_samples;
    }
  }
  pt.mean_attr = attr_acc / pt.n_samples;
  pt.mean_coher = coher_acc / pt.n_samples;
  return pt;
}

// The behavior being imitated: generation from the prefixed prompt, no hooks.
template <class S>
EvalPoint eval_prompt_steering(const Model<S>& model, const AttributeSpec& spec,
                               const std::vector<std::vector<int>>& prompts, const EvalConfig& ec,
                               uint64_t seed) {
  ec.validate();
  if (prompts.empty()) throw ValidationError("eval: no prompts");
  EvalPoint pt;
  double attr_acc = 0, coher_acc = 0;
  for (size_t p = 0; p < prompts.size(); ++p) {
    std::vector<int> xs = spec.x_attr;
    xs.insert(xs.end(), prompts[p].begin(), prompts[p].end());
    for (int s = 0; s < ec.samples_per_prompt; ++s) {
      Rng rng(derive_seed(seed, {seed_tag("eval-gen"), uint64_t(p), uint64_t(s)}));
      GenResult<S> g = model.generate(xs, ec.max_new, ec.temperature, ec.top_p, rng);
      double a, c;
      detail::score_generation(g.tokens, spec, a, c);
      attr_acc += a;
      coher_acc += c;
      ++pt.n_samples;
    }
  }
  pt.mean_attr = attr_acc / pt.n_samples;
  pt.mean_coher = coher_acc / pt.n_samples;
  return pt;
}

// ----------------------------- coefficient search -----------------------------

struct SearchTrace {
  std::vector<EvalPoint> points;
  double alpha_lo = 0, alpha_hi = 0;  // bracket when the search stopped
  bool converged = false;

  double final_alpha() const {
    if (points.empty()) throw ValidationError("search trace: no probes recorded");
    return points.back().alpha;
  }
};

// Bisection on the global coefficient: probe the midpoint, stop once the
// bracket is tighter than interval_eps, otherwise raise the lower end when
// coherence still exceeds the target and lower the upper end when it fell
// below. Coherence decreases with coefficient strength once oversteering sets
// in, which is what makes bisection meaningful.
inline SearchTrace binary_search_alpha(const std::function<EvalPoint(double)>& eval_fn, double target_coherence,
                                       int n_steps, double lo = 0.0, double hi = 10.0, double eps = 0.01) {
  if (!(target_coherence > 0.0 && target_coherence < 100.0))
    throw ValidationError("coefficient search: target coherence must lie in (0, 100)");
  if (n_steps < 1) throw ValidationError("coefficient search: need at least 1 probe");
  if (!(hi > lo)) throw ValidationError("coefficient search: empty coefficient range");
  SearchTrace tr;
  double amin = lo, amax = hi;
  for (int i = 0; i < n_steps; ++i) {
    double mid = 0.5 * (amin + amax);
    EvalPoint p = eval_fn(mid);
    p.alpha = mid;
    tr.points.push_back(p);
    if (std::abs(amax - amin) < eps) {
      tr.converged = true;
      break;
    }
    if (p.mean_coher > target_coherence)
      amin = mid;
    else
      amax = mid;
  }
  tr.alpha_lo = amin;
  tr.alpha_hi = amax;
  if (!tr.converged && std::abs(amax - amin) < eps) tr.converged = true;
  return tr;
}

template <class S>
SearchTrace search_module_alpha(const Model<S>& model, const AttributeSpec& spec, const SteeringModule<S>& module,
                                const std::vector<std::vector<int>>& prompts, double target_coherence,
                                const EvalConfig& ec, uint64_t seed) {
  return binary_search_alpha(
      [&](double a) { return eval_at_alpha(model, spec, module, prompts, a, ec, seed); }, target_coherence,
      ec.search_steps, ec.alpha_min, ec.alpha_max, ec.interval_eps);
}

// ----------------------------- trait alignment -----------------------------

struct TraitAlignment {
  double value = 0;
  bool interpolated = false;  // false → nearest-point fallback (target outside probed range)
  double coher_below = 0, coher_above = 0;
};

inline TraitAlignment trait_alignment_at_coherence(const std::vector<EvalPoint>& points, double target) {
  if (points.empty()) throw ValidationError("trait alignment: empty evaluation trace");
  const EvalPoint* below = nullptr;  // largest coherence under the target
  const EvalPoint* above = nullptr;  // smallest coherence over the target
  for (const auto& p : points) {
    if (p.mean_coher == target) return TraitAlignment{p.mean_attr, true, target, target};
    if (p.mean_coher < target) {
      if (!below || p.mean_coher > below->mean_coher) below = &p;
    } else {
      if (!above || p.mean_coher < above->mean_coher) above = &p;
    }
  }
  if (below && above) {
    double t = (target - below->mean_coher) / (above->mean_coher - below->mean_coher);
    return TraitAlignment{below->mean_attr + t * (above->mean_attr - below->mean_attr), true, below->mean_coher,
                          above->mean_coher};
  }
  const EvalPoint* best = nullptr;
  for (const auto& p : points)
    if (!best || std::abs(p.mean_coher - target) < std::abs(best->mean_coher - target)) best = &p;
  return TraitAlignment{best->mean_attr, false, best->mean_coher, best->mean_coher};
}

// ----------------------------- faithfulness -----------------------------

struct FaithfulnessProfile {
  std::string method;
  std::vector<double> layer_rrmse;  // index l-1 → layer l
  std::vector<int> layer_skipped;   // zero-norm reference positions, per layer
  int n_triplets = 0;
};

// A method's accumulated deviation from the unsteered pass, aligned with the
// rows of x + y. Null function → the zero intervention.
template <class S>
using DeltaMethod = std::function<DeltaTrace<S>(const Triplet&)>;

template <class S>
DeltaMethod<S> method_module(const Model<S>& model, SteeringModule<S> module) {
  return [&model, module](const Triplet& t) {
    std::vector<int> toks = t.x;
    toks.insert(toks.end(), t.y.begin(), t.y.end());
    ForwardRecord<S> base = model.forward(toks);
    HookSet<S> hooks = attach(module, model.config(), int(t.x.size()), AttachMode::kForward);
    ForwardRecord<S> steered = model.forward(toks, &hooks);
    return delta_between(base, steered, 0, int(t.x.size()));
  };
}

template <class S>
DeltaMethod<S> method_equivalent_prefix(const Model<S>& model, std::vector<int> prefix) {
  return [&model, prefix](const Triplet& t) {
    std::vector<int> alt = prefix;
    alt.insert(alt.end(), t.x.begin(), t.x.end());
    return delta_acc(model, t.x, alt, t.y);
  };
}

// Per layer, the mean over triplets and shared positions of
// |d_ps - d_method| / |d_ps|; reference positions with zero norm are skipped
// and counted. A method that does nothing scores exactly 1; the prompt
// steering it is measured against scores exactly 0.
template <class S>
FaithfulnessProfile faithfulness_profile(const Model<S>& model, const std::vector<Triplet>& triplets,
                                         const DeltaMethod<S>& method, const std::string& name) {
  if (triplets.empty()) throw ValidationError("faithfulness: no evaluation triplets");
  int n_layers = model.config().n_layers;
  FaithfulnessProfile prof;
  prof.method = name;
  prof.layer_rrmse.assign(size_t(n_layers), 0.0);
  prof.layer_skipped.assign(size_t(n_layers), 0);
  std::vector<long> counts(size_t(n_layers), 0);
  for (const auto& t : triplets) {
    DeltaTrace<S> ps = delta_acc(model, t.x, t.x_steered, t.y);
    DeltaTrace<S> mx;
    if (method) {
      mx = method(t);
      if (mx.n_shared != ps.n_shared || mx.n_layers != ps.n_layers)
        throw ValidationError("faithfulness: method trace misaligned with the prompt-steering trace");
    }
    int d = model.config().d_model;
    for (int l = 1; l <= n_layers; ++l) {
      const Tensor<S>& dps = ps.layer(l);
      const Tensor<S>* dmx = method ? &mx.layer(l) : nullptr;
      for (int i = 0; i < ps.n_shared; ++i) {
        double ref = 0, err = 0;
        for (int j = 0; j < d; ++j) {
          double r = double(dps.at(i, j));
          double e = r - (dmx ? double(dmx->at(i, j)) : 0.0);
          ref += r * r;
          err += e * e;
        }
        if (ref == 0.0) {
          ++prof.layer_skipped[size_t(l - 1)];
          continue;
        }
        prof.layer_rrmse[size_t(l - 1)] += std::sqrt(err) / std::sqrt(ref);
        ++counts[size_t(l - 1)];
      }
    }
  }
  for (int l = 0; l < n_layers; ++l) {
    if (counts[size_t(l)] == 0)
      throw ValidationError("faithfulness: every reference position at layer " + std::to_string(l + 1) +
                            " had zero norm");
    prof.layer_rrmse[size_t(l)] /= double(counts[size_t(l)]);
  }
  prof.n_triplets = int(triplets.size());
  return prof;
}

// Mean profile over the alternate steering prefixes: how faithful an
// equally-steering rephrase is, the reference any module is compared against.
template <class S>
FaithfulnessProfile equivalent_prompts_profile(const Model<S>& model, const AttributeSpec& spec,
                                               const std::vector<Triplet>& triplets) {
  if (spec.alt_prefixes.empty())
    throw ValidationError("faithfulness: attribute spec has no alternate prefixes");
  FaithfulnessProfile mean;
  for (size_t v = 0; v < spec.alt_prefixes.size(); ++v) {
    FaithfulnessProfile p = faithfulness_profile(
        model, triplets, method_equivalent_prefix(model, spec.alt_prefixes[v]),
        "equivalent-prompt-" + std::to_string(v + 1));
    if (v == 0) {
      mean = p;
    } else {
      for (size_t i = 0; i < mean.layer_rrmse.size(); ++i) {
        mean.layer_rrmse[i] += p.layer_rrmse[i];
        mean.layer_skipped[i] += p.layer_skipped[i];
      }
    }
  }
  for (auto& v : mean.layer_rrmse) v /= double(spec.alt_prefixes.size());
  mean.method = "equivalent-prompts";
  return mean;
}

// ----------------------------- steering-vector similarity -----------------------------

struct SimilarityMatrix {
  int layer = 0;
  std::vector<std::string> names;
  std::vector<std::vector<double>> cos;  // NaN → undefined (a zero vector was involved)
};

template <class S>
std::vector<SimilarityMatrix> steering_vector_similarity(
    const std::vector<std::pair<std::string, SteeringModule<S>>>& modules, int n_layers) {
  if (modules.empty()) throw ValidationError("similarity: no modules");
  int d = modules.front().second.d_model;
  for (const auto& [name, m] : modules)
    if (m.d_model != d)
      throw ShapeError("similarity: module '" + name + "' has width " + std::to_string(m.d_model) +
                       ", expected " + std::to_string(d));
  std::vector<SimilarityMatrix> out;
  for (int l = 1; l <= n_layers; ++l) {
    SimilarityMatrix sm;
    sm.layer = l;
    std::vector<const Tensor<S>*> zs;
    for (const auto& [name, m] : modules)
      for (const auto& u : m.units)
        if (u.layer == l) {
          sm.names.push_back(name);
          zs.push_back(&u.z);
        }
    if (zs.empty()) continue;
    size_t k = zs.size();
    sm.cos.assign(k, std::vector<double>(k, 0.0));
    for (size_t a = 0; a < k; ++a)
      for (size_t b = 0; b < k; ++b) {
        double na = 0, nb = 0, ab = 0;
        for (int j = 0; j < d; ++j) {
          double x = double(zs[a]->data()[j]), y = double(zs[b]->data()[j]);
          na += x * x;
          nb += y * y;
          ab += x * y;
        }
        sm.cos[a][b] = (na == 0.0 || nb == 0.0) ? std::numeric_limits<double>::quiet_NaN()
                                                : ab / (std::sqrt(na) * std::sqrt(nb));
      }
    out.push_back(std::move(sm));
  }
  return out;
}

}  // namespace psr
