#pragma once

// Activation steering modules.
//
// A module owns, per steered layer, a direction z (rank-1 by construction) and
// — for the token-adaptive kind — a linear probe (w, b) producing a per-token
// coefficient lambda = relu(A . w + b) from the activation the intervention is
// about to modify. Applying a module turns it into residual-stream hooks:
//
//   constant:       A_i  <-  A_i + alpha * z                (steered positions)
//   token-adaptive: A_i  <-  A_i + alpha * lambda(A_i) * z
//
// Position policy "response" steers indices >= question_len in teacher-forced
// passes; at generation time it starts one position earlier so the state that
// predicts the first response token is steered too. "question+response" steers
// everything. With an all-layer module, each layer's probe reads the stream as
// already modified by the layers below it.

#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "json.hpp"
#include "psr/common.hpp"
#include "psr/model.hpp"
#include "psr/tensor.hpp"

namespace psr {

enum class ModuleKind { kConst, kPsr };
enum class PositionPolicy { kResponse, kQuestionResponse };
enum class AttachMode { kForward, kGenerate };

inline const char* to_string(ModuleKind k) { return k == ModuleKind::kConst ? "const" : "psr"; }
inline const char* to_string(PositionPolicy p) {
  return p == PositionPolicy::kResponse ? "response" : "question_response";
}

template <class S>
struct LayerUnit {
  int layer = 0;   // 1-based
  Tensor<S> z;     // (d_model)
  Tensor<S> w;     // (d_model), token-adaptive only
  Tensor<S> b;     // (1), token-adaptive only
};

// Side channel the hooks fill on a full teacher-forced pass: pre-ReLU probe
// values, masked coefficients, the applied delta, and the position mask, all
// keyed by layer. Tensors stay tape-connected, so training objectives can read
// them (the liveness regularizer does).
template <class S>
struct HookCapture {
  std::map<int, Tensor<S>> pre;
  std::map<int, Tensor<S>> lambda;
  std::map<int, Tensor<S>> delta;
  std::map<int, std::vector<uint8_t>> mask;
  void clear() {
    pre.clear();
    lambda.clear();
    delta.clear();
    mask.clear();
  }
};

template <class S>
class SteeringModule {
 public:
  ModuleKind kind = ModuleKind::kConst;
  bool all_layers = false;
  PositionPolicy positions = PositionPolicy::kResponse;
  double alpha = 1.0;
  int d_model = 0;
  int n_layers = 0;
  std::vector<LayerUnit<S>> units;

  static SteeringModule make_const(const ModelConfig& cfg, int layer, PositionPolicy pos,
                                   const Tensor<S>& z) {
    SteeringModule m = base(cfg, ModuleKind::kConst, false, pos);
    m.units.push_back(LayerUnit<S>{layer, z.clone(), {}, {}});
    m.validate();
    return m;
  }
  static SteeringModule make_const_all(const ModelConfig& cfg, PositionPolicy pos,
                                       const std::vector<Tensor<S>>& zs) {
    require_layer_count(cfg, zs);
    SteeringModule m = base(cfg, ModuleKind::kConst, true, pos);
    for (int l = 1; l <= cfg.n_layers; ++l) m.units.push_back(LayerUnit<S>{l, zs[size_t(l - 1)].clone(), {}, {}});
    m.validate();
    return m;
  }
  static SteeringModule make_psr(const ModelConfig& cfg, int layer, PositionPolicy pos, const Tensor<S>& z,
                                 uint64_t probe_seed) {
    SteeringModule m = base(cfg, ModuleKind::kPsr, false, pos);
    m.units.push_back(make_unit(cfg, layer, z, probe_seed));
    m.validate();
    return m;
  }
  static SteeringModule make_psr_all(const ModelConfig& cfg, PositionPolicy pos,
                                     const std::vector<Tensor<S>>& zs, uint64_t probe_seed) {
    require_layer_count(cfg, zs);
    SteeringModule m = base(cfg, ModuleKind::kPsr, true, pos);
    for (int l = 1; l <= cfg.n_layers; ++l)
      m.units.push_back(make_unit(cfg, l, zs[size_t(l - 1)], derive_seed(probe_seed, {uint64_t(l)})));
    m.validate();
    return m;
  }

  // Random unit-norm direction, the fallback when no difference-in-means
  // initializer is available.
  static Tensor<S> random_direction(int d, uint64_t seed) {
    Rng rng(derive_seed(seed, {seed_tag("z-init")}));
    Tensor<S> z = Tensor<S>::randn({d}, rng, 1.0);
    double n = 0;
    for (size_t i = 0; i < z.numel(); ++i) n += double(z.data()[i]) * double(z.data()[i]);
    n = std::sqrt(n);
    for (size_t i = 0; i < z.numel(); ++i) z.data()[i] = S(double(z.data()[i]) / n);
    return z;
  }

  void validate() const {
    if (d_model < 1 || n_layers < 1) throw ValidationError("steering module: uninitialized dimensions");
    if (!std::isfinite(alpha)) throw NumericError("steering module: non-finite alpha");
    if (units.empty()) throw ValidationError("steering module: no steered layers");
    if (!all_layers && units.size() != 1)
      throw ValidationError("steering module: single-layer module with " + std::to_string(units.size()) + " units");
    if (all_layers && int(units.size()) != n_layers)
      throw ValidationError("steering module: all-layer module must cover layers 1.." + std::to_string(n_layers));
    std::vector<char> seen(size_t(n_layers) + 1, 0);
    for (const auto& u : units) {
      if (u.layer < 1 || u.layer > n_layers)
        throw ValidationError("steering module: layer " + std::to_string(u.layer) + " out of range 1.." +
                              std::to_string(n_layers));
      if (seen[size_t(u.layer)]) throw ValidationError("steering module: duplicate layer " + std::to_string(u.layer));
      seen[size_t(u.layer)] = 1;
      if (!u.z.defined() || u.z.rank() != 1 || u.z.dim(0) != d_model)
        throw ShapeError("steering module: direction at layer " + std::to_string(u.layer) + " must have length " +
                         std::to_string(d_model));
      if (kind == ModuleKind::kPsr) {
        if (!u.w.defined() || u.w.rank() != 1 || u.w.dim(0) != d_model || !u.b.defined() || u.b.numel() != 1)
          throw ShapeError("steering module: probe at layer " + std::to_string(u.layer) + " malformed");
      }
    }
  }

  std::vector<Tensor<S>*> parameters() {
    std::vector<Tensor<S>*> ps;
    for (auto& u : units) {
      ps.push_back(&u.z);
      if (kind == ModuleKind::kPsr) {
        ps.push_back(&u.w);
        ps.push_back(&u.b);
      }
    }
    return ps;
  }
  void set_trainable(bool b) {
    for (auto* p : parameters()) p->set_requires_grad(b);
  }

  const LayerUnit<S>& unit_for(int layer) const {
    for (const auto& u : units)
      if (u.layer == layer) return u;
    throw ValidationError("steering module: no unit at layer " + std::to_string(layer));
  }

  // ---- persistence ----

  void save(const std::string& path) const {
    validate();
    nlohmann::json j;
    j["format"] = "psr-steering-module";
    j["version"] = 1;
    j["kind"] = to_string(kind);
    j["scope"] = all_layers ? "all" : "single";
    j["positions"] = to_string(positions);
    j["alpha"] = alpha;
    j["d_model"] = d_model;
    j["n_layers"] = n_layers;
    nlohmann::json us = nlohmann::json::array();
    for (const auto& u : units) {
      nlohmann::json e;
      e["layer"] = u.layer;
      nlohmann::json z = nlohmann::json::array();
      for (size_t i = 0; i < u.z.numel(); ++i) z.push_back(double(u.z.data()[i]));
      e["z"] = std::move(z);
      if (kind == ModuleKind::kPsr) {
        nlohmann::json w = nlohmann::json::array();
        for (size_t i = 0; i < u.w.numel(); ++i) w.push_back(double(u.w.data()[i]));
        e["w"] = std::move(w);
        e["b"] = double(u.b.data()[0]);
      }
      us.push_back(std::move(e));
    }
    j["units"] = std::move(us);
    std::ofstream f(path);
    if (!f) throw IoError("steering module: cannot open " + path + " for writing");
    f << j.dump();
    if (!f) throw IoError("steering module: write failed for " + path);
  }

  static SteeringModule load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("steering module: cannot open " + path);
    nlohmann::json j;
    try {
      f >> j;
    } catch (const std::exception& e) {
      throw ValidationError("steering module: malformed json in " + path + ": " + e.what());
    }
    if (!j.contains("format") || j["format"] != "psr-steering-module")
      throw ValidationError("steering module: " + path + " is not a steering module file");
    if (!j.contains("version") || !j["version"].is_number_integer() || j["version"].get<int>() != 1)
      throw ValidationError("steering module: unsupported version in " + path);
    SteeringModule m;
    std::string kind = j.at("kind").get<std::string>();
    if (kind == "const")
      m.kind = ModuleKind::kConst;
    else if (kind == "psr")
      m.kind = ModuleKind::kPsr;
    else
      throw ValidationError("steering module: unknown kind '" + kind + "'");
    std::string scope = j.at("scope").get<std::string>();
    if (scope != "all" && scope != "single")
      throw ValidationError("steering module: unknown scope '" + scope + "'");
    m.all_layers = scope == "all";
    std::string pos = j.at("positions").get<std::string>();
    if (pos == "response")
      m.positions = PositionPolicy::kResponse;
    else if (pos == "question_response")
      m.positions = PositionPolicy::kQuestionResponse;
    else
      throw ValidationError("steering module: unknown position policy '" + pos + "'");
    m.alpha = j.at("alpha").get<double>();
    m.d_model = j.at("d_model").get<int>();
    m.n_layers = j.at("n_layers").get<int>();
    for (const auto& e : j.at("units")) {
      LayerUnit<S> u;
      u.layer = e.at("layer").get<int>();
      const auto& z = e.at("z");
      if (!z.is_array() || int(z.size()) != m.d_model)
        throw ValidationError("steering module: direction at layer " + std::to_string(u.layer) + " has " +
                              std::to_string(z.size()) + " values, expected " + std::to_string(m.d_model));
      std::vector<S> zv(z.size());
      for (size_t i = 0; i < z.size(); ++i) zv[i] = S(z[i].get<double>());
      u.z = Tensor<S>::from({m.d_model}, std::move(zv));
      if (m.kind == ModuleKind::kPsr) {
        const auto& w = e.at("w");
        if (!w.is_array() || int(w.size()) != m.d_model)
          throw ValidationError("steering module: probe at layer " + std::to_string(u.layer) + " has " +
                                std::to_string(w.size()) + " weights, expected " + std::to_string(m.d_model));
        std::vector<S> wv(w.size());
        for (size_t i = 0; i < w.size(); ++i) wv[i] = S(w[i].get<double>());
        u.w = Tensor<S>::from({m.d_model}, std::move(wv));
        u.b = Tensor<S>::scalar(S(e.at("b").get<double>()));
      }
      m.units.push_back(std::move(u));
    }
    m.validate();
    return m;
  }

 private:
  static void require_layer_count(const ModelConfig& cfg, const std::vector<Tensor<S>>& zs) {
    if (int(zs.size()) != cfg.n_layers)
      throw ValidationError("steering module: got " + std::to_string(zs.size()) + " directions for " +
                            std::to_string(cfg.n_layers) + " layers");
  }
  static SteeringModule base(const ModelConfig& cfg, ModuleKind kind, bool all, PositionPolicy pos) {
    SteeringModule m;
    m.kind = kind;
    m.all_layers = all;
    m.positions = pos;
    m.d_model = cfg.d_model;
    m.n_layers = cfg.n_layers;
    return m;
  }
  static LayerUnit<S> make_unit(const ModelConfig& cfg, int layer, const Tensor<S>& z, uint64_t probe_seed) {
    Rng rng(derive_seed(probe_seed, {seed_tag("probe-init")}));
    LayerUnit<S> u;
    u.layer = layer;
    u.z = z.clone();
    u.w = Tensor<S>::randn({cfg.d_model}, rng, 0.02);
    // Positive bias starts the probe alive so coefficients carry gradient from
    // the first step.
    u.b = Tensor<S>::scalar(S(0.5));
    return u;
  }
};

// Per-layer steering strength as tape scalars. Training substitutes
// judge-weighted (and optionally bias-shifted) values here; plain application
// uses the module's alpha knob for every layer.
template <class S>
using AlphaMap = std::map<int, Tensor<S>>;

// Build the hook set realizing `module` on a model with the given question
// length. In kForward mode the response-only policy steers indices
// >= question_len; in kGenerate mode it starts at question_len - 1 so the
// predicting state of the first response token is covered.
template <class S>
HookSet<S> attach(const SteeringModule<S>& module, const ModelConfig& cfg, int question_len, AttachMode mode,
                  std::shared_ptr<HookCapture<S>> capture = nullptr, const AlphaMap<S>* alphas = nullptr) {
  module.validate();
  if (module.d_model != cfg.d_model || module.n_layers != cfg.n_layers)
    throw ValidationError("attach: module built for d_model=" + std::to_string(module.d_model) +
                          ", n_layers=" + std::to_string(module.n_layers) + " does not fit model d_model=" +
                          std::to_string(cfg.d_model) + ", n_layers=" + std::to_string(cfg.n_layers));
  int start = 0;
  if (module.positions == PositionPolicy::kResponse) {
    if (question_len < 1) throw ValidationError("attach: question_len must be >= 1 under response-only policy");
    start = mode == AttachMode::kGenerate ? question_len - 1 : question_len;
  }

  HookSet<S> hooks;
  for (const auto& u : module.units) {
    Tensor<S> alpha_t;
    if (alphas) {
      auto it = alphas->find(u.layer);
      if (it == alphas->end())
        throw ValidationError("attach: no alpha provided for layer " + std::to_string(u.layer));
      alpha_t = it->second;
    } else {
      alpha_t = Tensor<S>::scalar(S(module.alpha));
    }
    LayerUnit<S> unit = u;  // shallow tensor shares; keeps trained leaves live
    ModuleKind kind = module.kind;
    int layer = u.layer;
    hooks.push_back(Hook<S>{
        layer, [unit, alpha_t, kind, start, layer, capture](const Tensor<S>& acts, int row0) -> Tensor<S> {
          int t = acts.dim(0);
          std::vector<S> mcol(static_cast<size_t>(t));
          std::vector<uint8_t> m8(static_cast<size_t>(t));
          bool any = false;
          for (int i = 0; i < t; ++i) {
            bool on = row0 + i >= start;
            mcol[size_t(i)] = on ? S(1) : S(0);
            m8[size_t(i)] = on ? 1 : 0;
            any = any || on;
          }
          Tensor<S> mask_col = Tensor<S>::from({t, 1}, std::move(mcol));
          Tensor<S> z_row = reshape(unit.z, {1, unit.z.dim(0)});
          Tensor<S> out, pre, lam;
          if (kind == ModuleKind::kConst) {
            lam = mask_col;
            out = any ? add(acts, scale_by(matmul(mask_col, z_row), alpha_t)) : acts;
          } else {
            pre = add_rowwise(matmul(acts, reshape(unit.w, {unit.w.dim(0), 1})), unit.b);
            lam = mul(relu(pre), mask_col);
            out = any ? add(acts, scale_by(matmul(lam, z_row), alpha_t)) : acts;
          }
          if (capture && row0 == 0) {
            if (pre.defined()) capture->pre[layer] = reshape(pre, {t});
            capture->lambda[layer] = reshape(lam, {t});
            capture->delta[layer] = sub(out, acts);
            capture->mask[layer] = m8;
          }
          return out;
        }});
  }
  return hooks;
}

}  // namespace psr
