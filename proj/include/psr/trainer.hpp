#pragma once

// Fits steering modules to imitate prompt steering.
//
// Two objectives. The MSE objective drives the hooked residual stream toward
// the activations a prompt-steered pass produces at the shared-suffix
// positions: for a single-layer module the loss sums the per-layer MSEs from
// the intervention layer through the final layer (the intervention propagates
// through the hooked forward, so later layers carry gradient); for an
// all-layers module it sums every layer. The loglikelihood objective instead
// maximizes the likelihood of the steered response under the hooked model.
// Both can add a liveness regularizer max(0, 1 - sum lambda) per steered
// layer, which pulls probes out of the all-dead region.
//
// During training the global coefficient is tied to each example's attribute
// judge score, optionally shifted by a trainable per-layer bias (negative
// examples then push the module to stay quiet on neutral prompts). The base
// model is frozen throughout; a fingerprint check enforces it.

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "psr/common.hpp"
#include "psr/model.hpp"
#include "psr/optim.hpp"
#include "psr/steering.hpp"
#include "psr/tensor.hpp"
#include "psr/world.hpp"

namespace psr {

enum class Objective { kMse, kLogLikelihood };

inline const char* to_string(Objective o) { return o == Objective::kMse ? "mse" : "ll"; }
inline Objective objective_from_string(const std::string& s) {
  if (s == "mse") return Objective::kMse;
  if (s == "ll") return Objective::kLogLikelihood;
  throw ValidationError("objective must be 'mse' or 'll', got '" + s + "'");
}

struct TrainConfig {
  Objective objective = Objective::kMse;
  int steps = 2000;
  int batch = 16;
  double lr = 1e-2;
  double beta1 = 0.9, beta2 = 0.999;
  bool regularizer = true;
  double reg_weight = 1.0;
  bool use_negatives = false;
  bool judge_bias = false;          // trainable per-layer shift of the judge coefficient
  double judge_bias_init = -0.5;
  uint64_t seed = 0;

  void validate() const {
    if (lr <= 0) throw ValidationError("train config: step size must be positive");
    if (steps < 1) throw ValidationError("train config: steps must be at least 1");
    if (batch < 1) throw ValidationError("train config: batch size must be at least 1");
    if (reg_weight < 0) throw ValidationError("train config: regularizer weight must be non-negative");
    if (judge_bias && !use_negatives)
      throw ValidationError("train config: judge bias requires negative-examples mode");
  }
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0, objective = 0, reg = 0, grad_norm = 0;
};

// ----------------------------- targets -----------------------------

// For the MSE objective: per requested layer, an [n x d] activation matrix
// aligned with the student tokens x + y.
template <class S>
using MseTargetFn = std::function<std::map<int, Tensor<S>>(const Triplet&, const std::vector<int>& layers)>;

namespace detail {

template <class S>
Tensor<S> constant_rows(const Tensor<S>& m, int row_start, int n_rows) {
  int c = m.dim(1);
  Tensor<S> out = Tensor<S>::zeros({n_rows, c});
  std::copy(m.data() + size_t(row_start) * size_t(c), m.data() + size_t(row_start + n_rows) * size_t(c),
            out.data());
  return out;
}

inline std::vector<int> cat(const std::vector<int>& a, const std::vector<int>& b) {
  std::vector<int> out = a;
  out.insert(out.end(), b.begin(), b.end());
  return out;
}

}  // namespace detail

// Teacher = the prompt-steered pass: run x_steered + y unhooked and keep the
// rows aligned with x + y.
template <class S>
MseTargetFn<S> prompt_steering_targets(const Model<S>& model) {
  return [&model](const Triplet& t, const std::vector<int>& layers) {
    std::vector<int> steered = detail::cat(t.x_steered, t.y);
    int n = int(t.x.size() + t.y.size());
    int offset = int(steered.size()) - n;
    if (offset < 0) throw ValidationError("mse targets: steered prompt shorter than plain prompt");
    ForwardRecord<S> rec = model.forward(steered);
    std::map<int, Tensor<S>> out;
    for (int l : layers) out[l] = detail::constant_rows(rec.layer(l), offset, n);
    return out;
  };
}

// Teacher = a known injection applied through the hook machinery (planted
// worlds); x_steered is ignored, the module IS the steering.
template <class S>
MseTargetFn<S> module_injection_targets(const Model<S>& model, SteeringModule<S> planted) {
  return [&model, planted](const Triplet& t, const std::vector<int>& layers) {
    HookSet<S> hooks = attach(planted, model.config(), int(t.x.size()), AttachMode::kForward);
    ForwardRecord<S> rec = model.forward(detail::cat(t.x, t.y), &hooks);
    std::map<int, Tensor<S>> out;
    for (int l : layers) out[l] = detail::constant_rows(rec.layer(l), 0, rec.layer(l).dim(0));
    return out;
  };
}

// Layers whose MSE terms enter the objective.
template <class S>
std::vector<int> mse_layer_set(const SteeringModule<S>& m, int n_layers) {
  if (m.units.empty()) throw ValidationError("mse layer set: module has no units");
  int from = m.all_layers ? 1 : m.units.front().layer;
  std::vector<int> out;
  for (int l = from; l <= n_layers; ++l) out.push_back(l);
  return out;
}

// ----------------------------- objectives -----------------------------

template <class S>
Tensor<S> mse_objective(const Model<S>& model, const SteeringModule<S>& module, const Triplet& trip,
                        const std::map<int, Tensor<S>>& targets, const AlphaMap<S>* alphas = nullptr,
                        std::shared_ptr<HookCapture<S>> capture = nullptr) {
  HookSet<S> hooks = attach(module, model.config(), int(trip.x.size()), AttachMode::kForward, capture, alphas);
  ForwardRecord<S> rec = model.forward(detail::cat(trip.x, trip.y), &hooks);
  Tensor<S> loss;
  for (const auto& [l, tgt] : targets) {
    const Tensor<S>& got = rec.layer(l);
    if (got.dim(0) != tgt.dim(0) || got.dim(1) != tgt.dim(1))
      throw ShapeError("mse objective: layer " + std::to_string(l) + " target " + join_ints(tgt.shape()) +
                       " vs activations " + join_ints(got.shape()));
    Tensor<S> d = sub(got, tgt);
    Tensor<S> term = mean(mul(d, d));
    loss = loss.defined() ? add(loss, term) : term;
  }
  if (!loss.defined()) throw ValidationError("mse objective: empty target layer set");
  return loss;
}

template <class S>
Tensor<S> ll_objective(const Model<S>& model, const SteeringModule<S>& module, const Triplet& trip,
                       const AlphaMap<S>* alphas = nullptr, std::shared_ptr<HookCapture<S>> capture = nullptr) {
  if (trip.y.empty()) throw ValidationError("ll objective: empty response");
  HookSet<S> hooks = attach(module, model.config(), int(trip.x.size()), AttachMode::kForward, capture, alphas);
  Tensor<S> ll = model.loglikelihood(trip.x, trip.y, &hooks);
  return scale(ll, S(-1.0 / double(trip.y.size())));
}

// Liveness penalty summed over the module's probed layers; undefined tensor
// when the module has no probes (constant modules contribute nothing).
template <class S>
Tensor<S> reg_from_capture(const HookCapture<S>& cap) {
  Tensor<S> total;
  for (const auto& [l, pre] : cap.pre) {
    auto mit = cap.mask.find(l);
    if (mit == cap.mask.end())
      throw ValidationError("regularizer: captured pre-activations without a mask at layer " + std::to_string(l));
    Tensor<S> pen = liveness_penalty(pre, mit->second);
    total = total.defined() ? add(total, pen) : pen;
  }
  return total;
}

// Standalone hinge value for one triplet (diagnostics and tests).
template <class S>
double reg_term(const Model<S>& model, const SteeringModule<S>& module, const Triplet& trip) {
  auto cap = std::make_shared<HookCapture<S>>();
  HookSet<S> hooks = attach(module, model.config(), int(trip.x.size()), AttachMode::kForward, cap);
  model.forward(detail::cat(trip.x, trip.y), &hooks);
  Tensor<S> r = reg_from_capture(*cap);
  return r.defined() ? double(r.item()) : 0.0;
}

// Per-example global coefficient: the attribute judge score, plus the
// trainable per-layer bias when provided.
template <class S>
AlphaMap<S> effective_alphas(const SteeringModule<S>& module, double j_attr,
                             const std::map<int, Tensor<S>>* judge_bias = nullptr) {
  AlphaMap<S> out;
  for (const auto& u : module.units) {
    if (judge_bias) {
      auto it = judge_bias->find(u.layer);
      if (it == judge_bias->end())
        throw ValidationError("effective alpha: no judge bias for layer " + std::to_string(u.layer));
      out.emplace(u.layer, add_scalar(it->second, S(j_attr)));
    } else {
      out.emplace(u.layer, Tensor<S>::scalar(S(j_attr)));
    }
  }
  return out;
}

// ----------------------------- difference in means -----------------------------

// z = mean(positive) - mean(negative) over per-position activation vectors.
template <class S>
Tensor<S> diff_in_means(const std::vector<Tensor<S>>& pos, const std::vector<Tensor<S>>& neg) {
  if (pos.empty() || neg.empty()) throw ValidationError("diff_in_means: empty activation set");
  int d = pos.front().dim(0);
  Tensor<S> z = Tensor<S>::zeros({d});
  auto fold = [&](const std::vector<Tensor<S>>& set, double sign) {
    for (const auto& a : set) {
      if (a.rank() != 1 || a.dim(0) != d)
        throw ShapeError("diff_in_means: activation shape " + join_ints(a.shape()) + " vs expected {" +
                         std::to_string(d) + "}");
      for (int i = 0; i < d; ++i) z.data()[i] += S(sign * double(a.data()[i]) / double(set.size()));
    }
  };
  fold(pos, 1.0);
  fold(neg, -1.0);
  return z;
}

// Response-position activation vectors at one layer, one entry per response
// token per triplet. use_steered_prompt feeds x_steered + y (the prompt that
// elicited the behavior); otherwise x + y.
template <class S>
std::vector<Tensor<S>> collect_response_activations(const Model<S>& model, const std::vector<Triplet>& triplets,
                                                    int layer, bool use_steered_prompt) {
  std::vector<Tensor<S>> out;
  for (const auto& t : triplets) {
    const std::vector<int>& q = use_steered_prompt ? t.x_steered : t.x;
    ForwardRecord<S> rec = model.forward(detail::cat(q, t.y));
    const Tensor<S>& acts = rec.layer(layer);
    int d = acts.dim(1);
    for (int i = int(q.size()); i < acts.dim(0); ++i) {
      Tensor<S> row = Tensor<S>::zeros({d});
      std::copy(acts.data() + size_t(i) * size_t(d), acts.data() + size_t(i + 1) * size_t(d), row.data());
      out.push_back(std::move(row));
    }
  }
  return out;
}

// Constant-steering baseline: difference-in-means direction at one layer.
template <class S>
SteeringModule<S> dim_const_module(const Model<S>& model, const SteeringDataset& ds, int layer,
                                   PositionPolicy positions) {
  Tensor<S> z = diff_in_means(collect_response_activations(model, ds.positives, layer, true),
                              collect_response_activations(model, ds.negatives, layer, false));
  return SteeringModule<S>::make_const(model.config(), layer, positions, z);
}

// ----------------------------- fit -----------------------------

template <class S>
struct FitResult {
  std::vector<TrainLogEntry> log;
  std::map<int, double> judge_bias;  // final values; empty unless enabled
  double initial_loss = 0, final_loss = 0;
};

namespace detail {

template <class S>
double params_grad_norm(const std::vector<Tensor<S>*>& params) {
  double acc = 0;
  for (auto* p : params) {
    if (!p->has_grad()) continue;
    const auto& g = p->grad();
    for (double v : g) acc += v * v;
  }
  return std::sqrt(acc);
}

}  // namespace detail

// Optimizes the module's parameters (plus judge biases when enabled) against
// the configured objective on the dataset. The model stays frozen.
template <class S>
FitResult<S> fit(const Model<S>& model, SteeringModule<S>& module, const SteeringDataset& ds,
                 const TrainConfig& tc, MseTargetFn<S> targets = nullptr) {
  tc.validate();
  module.validate();
  if (ds.positives.empty()) throw ValidationError("fit: dataset has no positive examples");
  if (tc.use_negatives && ds.negatives.empty())
    throw ValidationError("fit: negative-examples mode requires negative examples");
  const uint64_t fp_before = model.weights_fingerprint();
  if (tc.objective == Objective::kMse && !targets) targets = prompt_steering_targets(model);

  module.set_trainable(true);
  std::vector<Tensor<S>*> params = module.parameters();
  std::map<int, Tensor<S>> bias;
  if (tc.judge_bias) {
    for (const auto& u : module.units) {
      Tensor<S> b = Tensor<S>::scalar(S(tc.judge_bias_init));
      b.set_requires_grad(true);
      bias.emplace(u.layer, b);
    }
    for (auto& [l, b] : bias) params.push_back(&b);
  }
  Adam<S> opt(params, tc.lr, tc.beta1, tc.beta2);

  std::vector<const Triplet*> pool;
  for (const auto& t : ds.positives) pool.push_back(&t);
  if (tc.use_negatives)
    for (const auto& t : ds.negatives) pool.push_back(&t);

  const std::vector<int> layers = mse_layer_set(module, model.config().n_layers);
  std::map<const Triplet*, std::map<int, Tensor<S>>> target_cache;

  Rng rng(derive_seed(tc.seed, {seed_tag("fit")}));
  std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);

  FitResult<S> res;
  for (int step = 0; step < tc.steps; ++step) {
    std::vector<const Triplet*> items;
    for (int b = 0; b < tc.batch; ++b) items.push_back(pool[pick(rng)]);
    if (tc.objective == Objective::kMse)
      for (const Triplet* t : items)
        if (!target_cache.count(t)) target_cache.emplace(t, targets(*t, layers));

    try {
      opt.zero_grad();
      Tape<S> tape;
      Tensor<S> total;
      double obj_v = 0, reg_v = 0;
      for (const Triplet* t : items) {
        AlphaMap<S> alphas = effective_alphas(module, t->j_attr, tc.judge_bias ? &bias : nullptr);
        auto cap = std::make_shared<HookCapture<S>>();
        Tensor<S> obj = tc.objective == Objective::kMse
                            ? mse_objective(model, module, *t, target_cache.at(t), &alphas, cap)
                            : ll_objective(model, module, *t, &alphas, cap);
        obj_v += double(obj.item());
        Tensor<S> item = obj;
        if (tc.regularizer) {
          Tensor<S> r = reg_from_capture(*cap);
          if (r.defined()) {
            reg_v += double(r.item());
            item = add(item, scale(r, S(tc.reg_weight)));
          }
        }
        total = total.defined() ? add(total, item) : item;
      }
      total = scale(total, S(1.0 / double(tc.batch)));
      tape.backward(total);
      double gn = detail::params_grad_norm(params);
      opt.step();
      res.log.push_back(TrainLogEntry{step, double(total.item()), obj_v / tc.batch, reg_v / tc.batch, gn});
    } catch (const NumericError& e) {
      module.set_trainable(false);
      throw NumericError("training step " + std::to_string(step) + ": " + e.what());
    }
  }

  module.set_trainable(false);
  for (auto* p : params) p->drop_grad();
  if (model.weights_fingerprint() != fp_before)
    throw std::logic_error("fit: base model weights changed during module training");
  for (const auto& [l, b] : bias) res.judge_bias[l] = double(b.item());
  res.initial_loss = res.log.front().loss;
  res.final_loss = res.log.back().loss;
  return res;
}

}  // namespace psr
