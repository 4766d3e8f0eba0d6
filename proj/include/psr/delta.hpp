#pragma once

// Activation-difference probes.
//
// Accumulated deltas compare two unhooked forward passes — the steered text
// x_steered . y against the plain text x . y — at aligned shared-suffix
// positions, per layer. The local variant asks how much of the accumulated
// difference layer l produces itself: it reruns block l on the steered pass's
// layer l-1 stream and measures what the recorded layer l output has that the
// rerun lacks. Two realizations of "rerun without the steering prefix" exist:
//
//   attention exclusion (default): block l runs on the steered stream but the
//     shared positions may not attend to steering-prefix keys;
//   activation substitution: shared positions' layer l-1 activations are
//     replaced with their unsteered-pass counterparts, attention untouched.
//
// Both are reported by the analysis tooling; neither is canonical.

#include <cmath>
#include <string>
#include <vector>

#include "psr/common.hpp"
#include "psr/model.hpp"
#include "psr/tensor.hpp"

namespace psr {

enum class LocalVariant { kAttentionExclusion, kActivationSubstitution };

template <class S>
struct DeltaTrace {
  int n_layers = 0;
  int d_model = 0;
  int n_shared = 0;       // length of x . y
  int offset = 0;         // alignment shift: shared position i sits at i + offset in the steered text
  int question_len = 0;   // length of x (separator included)
  std::vector<int> shared_tokens;
  std::vector<Tensor<S>> delta;            // per layer (index l-1), each (n_shared x d_model)
  std::vector<std::vector<double>> act_norm;  // steered-pass activation norms, [layer][position]

  const Tensor<S>& layer(int l) const {
    if (l < 1 || l > n_layers)
      throw ValidationError("delta trace: layer " + std::to_string(l) + " out of range 1.." +
                            std::to_string(n_layers));
    return delta[size_t(l - 1)];
  }

  std::vector<double> norms(int l) const {
    const Tensor<S>& d = layer(l);
    std::vector<double> out(static_cast<size_t>(n_shared));
    for (int i = 0; i < n_shared; ++i) {
      double acc = 0;
      for (int j = 0; j < d_model; ++j) {
        double v = double(d.at(i, j));
        acc += v * v;
      }
      out[size_t(i)] = std::sqrt(acc);
    }
    return out;
  }
};

namespace detail {

inline void require_suffix(const std::vector<int>& x, const std::vector<int>& x_steered) {
  if (x.empty()) throw ValidationError("delta probe: empty question");
  if (x_steered.size() < x.size())
    throw ValidationError("delta probe: steered question shorter than plain question");
  size_t off = x_steered.size() - x.size();
  for (size_t i = 0; i < x.size(); ++i)
    if (x_steered[off + i] != x[i])
      throw ValidationError("delta probe: plain question is not a suffix of the steered question; "
                            "alignment by prefix construction does not apply");
}

template <class S>
std::vector<double> row_norms(const Tensor<S>& m, int row_start, int n_rows) {
  int c = m.dim(1);
  std::vector<double> out(static_cast<size_t>(n_rows));
  for (int i = 0; i < n_rows; ++i) {
    double acc = 0;
    for (int j = 0; j < c; ++j) {
      double v = double(m.at(row_start + i, j));
      acc += v * v;
    }
    out[size_t(i)] = std::sqrt(acc);
  }
  return out;
}

}  // namespace detail

// Aligned per-layer difference of two already-computed passes: steered rows
// [offset, offset + n_shared) minus base rows [0, n_shared).
template <class S>
DeltaTrace<S> delta_between(const ForwardRecord<S>& base, const ForwardRecord<S>& steered, int offset,
                            int question_len) {
  int n_layers = int(base.acts.size()) - 1;
  if (int(steered.acts.size()) - 1 != n_layers)
    throw ValidationError("delta probe: passes have different layer counts");
  int n_shared = int(base.tokens.size());
  if (int(steered.tokens.size()) != n_shared + offset)
    throw ValidationError("delta probe: steered pass length " + std::to_string(steered.tokens.size()) +
                          " does not equal base length plus offset " + std::to_string(n_shared + offset));
  DeltaTrace<S> tr;
  tr.n_layers = n_layers;
  tr.d_model = base.acts[0].dim(1);
  tr.n_shared = n_shared;
  tr.offset = offset;
  tr.question_len = question_len;
  tr.shared_tokens = base.tokens;
  for (int l = 1; l <= n_layers; ++l) {
    const Tensor<S>& as = steered.layer(l);
    const Tensor<S>& ab = base.layer(l);
    Tensor<S> d = Tensor<S>::zeros({n_shared, tr.d_model});
    for (int i = 0; i < n_shared; ++i)
      for (int j = 0; j < tr.d_model; ++j)
        d.data()[size_t(i) * tr.d_model + j] = as.at(offset + i, j) - ab.at(i, j);
    tr.delta.push_back(std::move(d));
    tr.act_norm.push_back(detail::row_norms(as, offset, n_shared));
  }
  return tr;
}

// Accumulated prompt-steering deltas for one (x, x_steered, y) triplet.
template <class S>
DeltaTrace<S> delta_acc(const Model<S>& model, const std::vector<int>& x, const std::vector<int>& x_steered,
                        const std::vector<int>& y) {
  detail::require_suffix(x, x_steered);
  std::vector<int> base_seq = x, steered_seq = x_steered;
  base_seq.insert(base_seq.end(), y.begin(), y.end());
  steered_seq.insert(steered_seq.end(), y.begin(), y.end());
  ForwardRecord<S> rb = model.forward(base_seq);
  ForwardRecord<S> rs = model.forward(steered_seq);
  return delta_between(rb, rs, int(x_steered.size() - x.size()), int(x.size()));
}

// Layer-local contribution to the steering delta, per layer, for one triplet.
template <class S>
DeltaTrace<S> delta_loc(const Model<S>& model, const std::vector<int>& x, const std::vector<int>& x_steered,
                        const std::vector<int>& y, LocalVariant variant = LocalVariant::kAttentionExclusion) {
  detail::require_suffix(x, x_steered);
  std::vector<int> base_seq = x, steered_seq = x_steered;
  base_seq.insert(base_seq.end(), y.begin(), y.end());
  steered_seq.insert(steered_seq.end(), y.begin(), y.end());
  int offset = int(x_steered.size() - x.size());
  int n_shared = int(base_seq.size());
  int t_steered = int(steered_seq.size());

  ForwardRecord<S> rs = model.forward(steered_seq);
  ForwardRecord<S> rb = model.forward(base_seq);
  int d = model.config().d_model;

  DeltaTrace<S> tr;
  tr.n_layers = model.config().n_layers;
  tr.d_model = d;
  tr.n_shared = n_shared;
  tr.offset = offset;
  tr.question_len = int(x.size());
  tr.shared_tokens = base_seq;

  std::vector<uint8_t> allowed(size_t(t_steered), 1);
  for (int j = 0; j < offset; ++j) allowed[size_t(j)] = 0;

  for (int l = 1; l <= tr.n_layers; ++l) {
    const Tensor<S>& h_prev = rs.acts[size_t(l - 1)];
    Tensor<S> rerun;
    if (variant == LocalVariant::kAttentionExclusion) {
      rerun = model.block_forward(l, h_prev, &allowed);
    } else {
      Tensor<S> mixed = h_prev.clone();
      const Tensor<S>& u_prev = rb.acts[size_t(l - 1)];
      for (int i = 0; i < n_shared; ++i)
        for (int j = 0; j < d; ++j) mixed.data()[size_t(offset + i) * d + j] = u_prev.at(i, j);
      rerun = model.block_forward(l, mixed);
    }
    const Tensor<S>& as = rs.layer(l);
    Tensor<S> dl = Tensor<S>::zeros({n_shared, d});
    for (int i = 0; i < n_shared; ++i)
      for (int j = 0; j < d; ++j)
        dl.data()[size_t(i) * d + j] = as.at(offset + i, j) - rerun.at(offset + i, j);
    tr.delta.push_back(std::move(dl));
    tr.act_norm.push_back(detail::row_norms(as, offset, n_shared));
  }
  return tr;
}

// ----------------------------- strength profiles -----------------------------

struct StrengthProfile {
  std::vector<double> mean_abs;             // per layer, mean per-token delta norm
  std::vector<double> mean_rel;             // per layer, mean norm / activation norm
  std::vector<std::vector<double>> heat;    // [layer][position] raw norms (single trace)
  std::vector<std::vector<double>> heat_normalized;  // each layer divided by its total
};

template <class S>
StrengthProfile strength_profile(const DeltaTrace<S>& tr) {
  StrengthProfile p;
  for (int l = 1; l <= tr.n_layers; ++l) {
    std::vector<double> ns = tr.norms(l);
    double total = 0, mabs = 0, mrel = 0;
    for (int i = 0; i < tr.n_shared; ++i) {
      total += ns[size_t(i)];
      mabs += ns[size_t(i)];
      double an = tr.act_norm[size_t(l - 1)][size_t(i)];
      mrel += an > 0 ? ns[size_t(i)] / an : 0.0;
    }
    p.mean_abs.push_back(mabs / tr.n_shared);
    p.mean_rel.push_back(mrel / tr.n_shared);
    p.heat.push_back(ns);
    std::vector<double> nn(ns);
    for (auto& v : nn) v = total > 0 ? v / total : 0.0;
    p.heat_normalized.push_back(std::move(nn));
  }
  return p;
}

// Layer means pooled over several traces (triplets may differ in length).
template <class S>
StrengthProfile aggregate_profile(const std::vector<DeltaTrace<S>>& traces) {
  if (traces.empty()) throw ValidationError("strength profile: no traces");
  StrengthProfile p;
  int n_layers = traces[0].n_layers;
  p.mean_abs.assign(size_t(n_layers), 0.0);
  p.mean_rel.assign(size_t(n_layers), 0.0);
  for (const auto& tr : traces) {
    if (tr.n_layers != n_layers) throw ValidationError("strength profile: traces disagree on layer count");
    StrengthProfile one = strength_profile(tr);
    for (int l = 0; l < n_layers; ++l) {
      p.mean_abs[size_t(l)] += one.mean_abs[size_t(l)];
      p.mean_rel[size_t(l)] += one.mean_rel[size_t(l)];
    }
  }
  for (int l = 0; l < n_layers; ++l) {
    p.mean_abs[size_t(l)] /= double(traces.size());
    p.mean_rel[size_t(l)] /= double(traces.size());
  }
  return p;
}

// Coefficient of variation of per-token delta norms at one layer, restricted to
// response positions; pooled across traces. Constant steering has exactly zero
// spread, prompt steering does not — this quantifies the contrast.
template <class S>
double norm_variation(const std::vector<DeltaTrace<S>>& traces, int l) {
  std::vector<double> ns;
  for (const auto& tr : traces) {
    std::vector<double> n = tr.norms(l);
    for (int i = tr.question_len; i < tr.n_shared; ++i) ns.push_back(n[size_t(i)]);
  }
  if (ns.size() < 2) throw ValidationError("norm variation: need at least two response positions");
  double mean = 0;
  for (double v : ns) mean += v;
  mean /= double(ns.size());
  double var = 0;
  for (double v : ns) var += (v - mean) * (v - mean);
  var /= double(ns.size());
  if (mean <= 0) throw NumericError("norm variation: zero mean norm");
  return std::sqrt(var) / mean;
}

}  // namespace psr
