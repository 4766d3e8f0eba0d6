#pragma once

// Dense row-major tensors with tape-based reverse-mode autodiff.
//
// Usage pattern: leaves (parameters) are Tensors with requires_grad set; a Tape
// activates itself for the current thread while in scope; ops executed under an
// active tape record nodes; Tape::backward(loss) fills the .grad buffer of every
// contributing leaf. The tape is rebuilt on every forward pass — nothing is
// retained between passes except leaf values and grads.
//
// Scalar type S is double in verification mode and float in fast mode. There is
// no implicit broadcasting: binary ops demand identical shapes, with dedicated
// scalar-with-tensor and row-wise variants where the model needs them. Every op
// checks its output for non-finite values and throws NumericError instead of
// letting NaNs propagate.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

#include "psr/common.hpp"

namespace psr {

template <class S>
struct TensorData {
  std::vector<int> shape;
  std::vector<S> v;
  bool requires_grad = false;
  std::vector<S> grad;  // allocated on first backward; accumulates until zero_grad
};

template <class S>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape) {
    return Tensor(std::move(shape), {});
  }
  static Tensor full(std::vector<int> shape, S value) {
    Tensor t(std::move(shape), {});
    std::fill(t.d_->v.begin(), t.d_->v.end(), value);
    return t;
  }
  static Tensor from(std::vector<int> shape, std::vector<S> values) {
    Tensor t(std::move(shape), std::move(values));
    return t;
  }
  static Tensor scalar(S value) { return from({1}, {value}); }
  static Tensor randn(std::vector<int> shape, Rng& rng, double stddev) {
    Tensor t(std::move(shape), {});
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : t.d_->v) x = S(dist(rng));
    return t;
  }

  bool defined() const { return d_ != nullptr; }
  const std::vector<int>& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape[size_t(i)]; }
  int rank() const { return int(d_->shape.size()); }
  size_t numel() const { return d_->v.size(); }

  S* data() { return d_->v.data(); }
  const S* data() const { return d_->v.data(); }
  const std::vector<S>& values() const { return d_->v; }

  S item() const {
    if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements, expected 1");
    return d_->v[0];
  }
  S at(int i) const { return d_->v[size_t(i)]; }
  S at(int i, int j) const { return d_->v[size_t(i) * size_t(dim(1)) + size_t(j)]; }

  Tensor& set_requires_grad(bool b) {
    d_->requires_grad = b;
    return *this;
  }
  bool requires_grad() const { return d_->requires_grad; }

  bool has_grad() const { return !d_->grad.empty(); }
  const std::vector<S>& grad() const {
    if (d_->grad.empty()) throw ValidationError("grad: no gradient has been accumulated for this tensor");
    return d_->grad;
  }
  void zero_grad() { d_->grad.assign(d_->v.size(), S(0)); }
  void drop_grad() { d_->grad.clear(); }

  Tensor clone() const {
    Tensor t(d_->shape, d_->v);
    return t;
  }

  // Identity of the underlying buffer; the tape keys its node map on this.
  const void* id() const { return d_.get(); }
  TensorData<S>* raw() const { return d_.get(); }

 private:
  Tensor(std::vector<int> shape, std::vector<S> values) : d_(std::make_shared<TensorData<S>>()) {
    size_t n = 1;
    for (int s : shape) {
      if (s <= 0) throw ShapeError("tensor: non-positive dimension in shape " + join_ints(shape));
      n *= size_t(s);
    }
    d_->shape = std::move(shape);
    if (values.empty()) {
      d_->v.assign(n, S(0));
    } else {
      if (values.size() != n)
        throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " + join_ints(d_->shape));
      d_->v = std::move(values);
    }
  }

  std::shared_ptr<TensorData<S>> d_;
};

// ----------------------------- tape -----------------------------

template <class S>
class Tape {
 public:
  Tape() : prev_(current_) { current_ = this; }
  ~Tape() { current_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_; }

  int size() const { return int(nodes_.size()); }

  bool tracks(const Tensor<S>& t) const {
    return t.requires_grad() || node_map_.count(t.id()) != 0;
  }

  // Node id for an input tensor: registers a leaf for parameters on first use,
  // returns -1 for constants (which backward then ignores).
  int input_node(const Tensor<S>& t) {
    auto it = node_map_.find(t.id());
    if (it != node_map_.end()) return it->second;
    if (!t.requires_grad()) return -1;
    int id = int(nodes_.size());
    nodes_.push_back(Node{t, {}, nullptr, true});
    node_map_.emplace(t.id(), id);
    return id;
  }

  int record(const char* op, const Tensor<S>& out, std::vector<int> parents,
             std::function<void(Tape&, int)> backward) {
    (void)op;
    int id = int(nodes_.size());
    nodes_.push_back(Node{out, std::move(parents), std::move(backward), false});
    node_map_.emplace(out.id(), id);
    return id;
  }

  // d(loss)/d(node output); allocated zeroed on first touch during backward.
  std::vector<S>& gradv(int id) {
    auto& g = grads_[size_t(id)];
    if (g.empty()) g.assign(nodes_[size_t(id)].out.numel(), S(0));
    return g;
  }

  void backward(const Tensor<S>& loss) {
    if (loss.numel() != 1) throw ShapeError("backward: loss must be a scalar, got shape " + join_ints(loss.shape()));
    auto it = node_map_.find(loss.id());
    if (it == node_map_.end())
      throw ValidationError("backward: loss is not connected to this tape");
    int root = it->second;

    // Mark the subgraph the loss actually depends on; each node runs once.
    std::vector<char> reach(nodes_.size(), 0);
    std::vector<int> stack{root};
    reach[size_t(root)] = 1;
    while (!stack.empty()) {
      int id = stack.back();
      stack.pop_back();
      for (int p : nodes_[size_t(id)].parents)
        if (p >= 0 && !reach[size_t(p)]) {
          reach[size_t(p)] = 1;
          stack.push_back(p);
        }
    }

    grads_.assign(nodes_.size(), {});
    gradv(root)[0] = S(1);
    for (int id = root; id >= 0; --id) {
      if (!reach[size_t(id)]) continue;
      Node& n = nodes_[size_t(id)];
      if (n.backward && !grads_[size_t(id)].empty()) n.backward(*this, id);
    }

    // Fold node grads into leaf tensors; accumulation across backward calls is
    // intentional (gradients are linear) and cleared only by zero_grad.
    for (size_t id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (!n.leaf || !reach[id] || grads_[id].empty()) continue;
      auto* td = n.out.raw();
      if (td->grad.empty()) td->grad.assign(td->v.size(), S(0));
      const auto& g = grads_[id];
      for (size_t i = 0; i < g.size(); ++i) td->grad[i] += g[i];
    }
    grads_.clear();
  }

 private:
  struct Node {
    Tensor<S> out;
    std::vector<int> parents;
    std::function<void(Tape&, int)> backward;
    bool leaf;
  };

  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> node_map_;
  std::vector<std::vector<S>> grads_;
  Tape* prev_;
  static thread_local Tape* current_;
};

template <class S>
thread_local Tape<S>* Tape<S>::current_ = nullptr;

// ----------------------------- op helpers -----------------------------

namespace detail {

template <class S>
void check_finite(const char* op, const Tensor<S>& t) {
  for (size_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(double(t.data()[i])))
      throw NumericError(std::string(op) + ": non-finite value produced");
}

template <class S>
void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + join_ints(a.shape()) + " vs " + join_ints(b.shape()));
}

// Record an op whose backward only needs the parent ids and captured tensors.
template <class S, class MakeBackward>
void maybe_record(const char* op, const Tensor<S>& out, std::initializer_list<Tensor<S>> inputs,
                  MakeBackward&& make) {
  Tape<S>* tp = Tape<S>::current();
  if (!tp) return;
  bool tracked = false;
  for (const auto& t : inputs) tracked = tracked || tp->tracks(t);
  if (!tracked) return;
  std::vector<int> pids;
  pids.reserve(inputs.size());
  for (const auto& t : inputs) pids.push_back(tp->input_node(t));
  tp->record(op, out, pids, make(pids));
}

template <class S>
void axpy(std::vector<S>& dst, const std::vector<S>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ----------------------------- elementwise ops -----------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
  detail::check_finite("add", out);
  detail::maybe_record("add", out, {a, b}, [&](const std::vector<int>& p) {
    return [p](Tape<S>& tp, int self) {
      const auto& g = tp.gradv(self);
      if (p[0] >= 0) detail::axpy(tp.gradv(p[0]), g);
      if (p[1] >= 0) detail::axpy(tp.gradv(p[1]), g);
    };
  });
  return out;
}

template <class S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("sub", a, b);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
  detail::check_finite("sub", out);
  detail::maybe_record("sub", out, {a, b}, [&](const std::vector<int>& p) {
    return [p](Tape<S>& tp, int self) {
      const auto& g = tp.gradv(self);
      if (p[0] >= 0) detail::axpy(tp.gradv(p[0]), g);
      if (p[1] >= 0) {
        auto& gb = tp.gradv(p[1]);
        for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
      }
    };
  });
  return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
  detail::check_finite("mul", out);
  detail::maybe_record("mul", out, {a, b}, [&](const std::vector<int>& p) {
    return [p, a, b](Tape<S>& tp, int self) {
      const auto& g = tp.gradv(self);
      if (p[0] >= 0) {
        auto& ga = tp.gradv(p[0]);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * b.data()[i];
      }
      if (p[1] >= 0) {
        auto& gb = tp.gradv(p[1]);
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * a.data()[i];
      }
    };
  });
  return out;
}

// Scalar-with-tensor broadcasts, the only broadcasting in the suite.

template <class S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + c;
  detail::check_finite("add_scalar", out);
  detail::maybe_record("add_scalar", out, {a}, [&](const std::vector<int>& p) {
    return [p](Tape<S>& tp, int self) {
      if (p[0] >= 0) detail::axpy(tp.gradv(p[0]), tp.gradv(self));
    };
  });
  return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * c;
  detail::check_finite("scale", out);
  detail::maybe_record("scale", out, {a}, [&](const std::vector<int>& p) {
    return [p, c](Tape<S>& tp, int self) {
      if (p[0] >= 0) {
        const auto& g = tp.gradv(self);
        auto& ga = tp.gradv(p[0]);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
      }
    };
  });
  return out;
}

// Multiply by a dynamically computed scalar tensor (shape {1}); gradient flows
// into both factors. Used for judge-weighted steering strength.
template <class S>
Tensor<S> scale_by(const Tensor<S>& a, const Tensor<S>& c) {
  if (c.numel() != 1) throw ShapeError("scale_by: scale must be a scalar, got shape " + join_ints(c.shape()));
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  S cv = c.data()[0];
  for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * cv;
  detail::check_finite("scale_by", out);
  detail::maybe_record("scale_by", out, {a, c}, [&](const std::vector<int>& p) {
    return [p, a, cv](Tape<S>& tp, int self) {
      const auto& g = tp.gradv(self);
      if (p[0] >= 0) {
        auto& ga = tp.gradv(p[0]);
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * cv;
      }
      if (p[1] >= 0) {
        S acc = 0;
        for (size_t i = 0; i < g.size(); ++i) acc += g[i] * a.data()[i];
        tp.gradv(p[1])[0] += acc;
      }
    };
  });
  return out;
}

template <class S>
Tensor<S> relu(const Tensor<S>& a) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] > S(0) ? a.data()[i] : S(0);
  detail::check_finite("relu", out);
  detail::maybe_record("relu", out, {a}, [&](const std::vector<int>& p) {
    return [p, a](Tape<S>& tp, int self) {
      if (p[0] >= 0) {
        const auto& g = tp.gradv(self);
        auto& ga = tp.gradv(p[0]);
        for (size_t i = 0; i < g.size(); ++i)
          if (a.data()[i] > S(0)) ga[i] += g[i];
      }
    };
  });
  return out;
}

// ----------------------------- reductions -----------------------------

template <class S>
Tensor<S> sum(const Tensor<S>& a) {
  S acc = 0;
  for (size_t i = 0; i < a.numel(); ++i) acc += a.data()[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  detail::check_finite("sum", out);
  detail::maybe_record("sum", out, {a}, [&](const std::vector<int>& p) {
    return [p](Tape<S>& tp, int self) {
      if (p[0] >= 0) {
        S g = tp.gradv(self)[0];
        auto& ga = tp.gradv(p[0]);
        for (auto& x : ga) x += g;
      }
    };
  });
  return out;
}

template <class S>
Tensor<S> mean(const Tensor<S>& a) {
  return scale(sum(a), S(1) / S(a.numel()));
}

template <class S>
Tensor<S> dot(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 1 || b.rank() != 1 || a.numel() != b.numel())
    throw ShapeError("dot: expects equal-length vectors, got " + join_ints(a.shape()) + " and " + join_ints(b.shape()));
  S acc = 0;
  for (size_t i = 0; i < a.numel(); ++i) acc += a.data()[i] * b.data()[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  detail::check_finite("dot", out);
  detail::maybe_record("dot", out, {a, b}, [&](const std::vector<int>& p) {
    return [p, a, b](Tape<S>& tp, int self) {
      S g = tp.gradv(self)[0];
      if (p[0] >= 0) {
        auto& ga = tp.gradv(p[0]);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += g * b.data()[i];
      }
      if (p[1] >= 0) {
        auto& gb = tp.gradv(p[1]);
        for (size_t i = 0; i < gb.size(); ++i) gb[i] += g * a.data()[i];
      }
    };
  });
  return out;
}

template <class S>
Tensor<S> l2_norm(const Tensor<S>& a) {
  S acc = 0;
  for (size_t i = 0; i < a.numel(); ++i) acc += a.data()[i] * a.data()[i];
  S n = std::sqrt(double(acc));
  Tensor<S> out = Tensor<S>::scalar(n);
  detail::check_finite("l2_norm", out);
  detail::maybe_record("l2_norm", out, {a}, [&](const std::vector<int>& p) {
    return [p, a, n](Tape<S>& tp, int self) {
      if (p[0] >= 0) {
        S g = tp.gradv(self)[0];
        S inv = n > S(0) ? g / n : S(0);  // zero vector: pick the zero subgradient
        auto& ga = tp.gradv(p[0]);
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += inv * a.data()[i];
      }
    };
  });
  return out;
}

// ----------------------------- shape ops -----------------------------

template <class S>
Tensor<S> reshape(const Tensor<S>& a, std::vector<int> shape) {
  size_t n = 1;
  for (int s : shape) n *= size_t(std::max(s, 0));
  if (n != a.numel())
    throw ShapeError("reshape: cannot view " + join_ints(a.shape()) + " as " + join_ints(shape));
  Tensor<S> out = Tensor<S>::from(std::move(shape), a.values());
  detail::maybe_record("reshape", out, {a}, [&](const std::vector<int>& p) {
    return [p](Tape<S>& tp, int self) {
      if (p[0] >= 0) detail::axpy(tp.gradv(p[0]), tp.gradv(self));
    };
  });
  return out;
}

template <class S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expects a matrix, got shape " + join_ints(a.shape()));
  int r = a.dim(0), c = a.dim(1);
  Tensor<S> out = Tensor<S>::zeros({c, r});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.data()[size_t(j) * r + i] = a.at(i, j);
  detail::maybe_record("transpose", out, {a}, [&](const std::vector<int>& p) {
    return [p, r, c](Tape<S>& tp, int self) {
      if (p[0] >= 0) {
        const auto& g = tp.gradv(self);
        auto& ga = tp.gradv(p[0]);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) ga[size_t(i) * c + j] += g[size_t(j) * r + i];
      }
    };
  });
  return out;
}

template <class S>
Tensor<S> slice(const Tensor<S>& a, int axis, int start, int len) {
  if (a.rank() == 1) {
    if (axis != 0 || start < 0 || len <= 0 || start + len > a.dim(0))
      throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                       ") on axis " + std::to_string(axis) + " of shape " + join_ints(a.shape()));
    Tensor<S> out = Tensor<S>::zeros({len});
    std::copy(a.data() + start, a.data() + start + len, out.data());
    detail::maybe_record("slice", out, {a}, [&](const std::vector<int>& p) {
      return [p, start, len](Tape<S>& tp, int self) {
        if (p[0] >= 0) {
          const auto& g = tp.gradv(self);
          auto& ga = tp.gradv(p[0]);
          for (int i = 0; i < len; ++i) ga[size_t(start + i)] += g[size_t(i)];
        }
      };
    });
    return out;
  }
  if (a.rank() != 2 || axis < 0 || axis > 1)
    throw ShapeError("slice: unsupported axis " + std::to_string(axis) + " for shape " + join_ints(a.shape()));
  int r = a.dim(0), c = a.dim(1);
  int extent = axis == 0 ? r : c;
  if (start < 0 || len <= 0 || start + len > extent)
    throw ShapeError("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                     ") on axis " + std::to_string(axis) + " of shape " + join_ints(a.shape()));
  Tensor<S> out = axis == 0 ? Tensor<S>::zeros({len, c}) : Tensor<S>::zeros({r, len});
  if (axis == 0) {
    std::copy(a.data() + size_t(start) * c, a.data() + size_t(start + len) * c, out.data());
  } else {
    for (int i = 0; i < r; ++i)
      std::copy(a.data() + size_t(i) * c + start, a.data() + size_t(i) * c + start + len,
                out.data() + size_t(i) * len);
  }
  detail::maybe_record("slice", out, {a}, [&](const std::vector<int>& p) {
    return [p, axis, start, len, r, c](Tape<S>& tp, int self) {
      if (p[0] >= 0) {
        const auto& g = tp.gradv(self);
        auto& ga = tp.gradv(p[0]);
        if (axis == 0) {
          for (size_t i = 0; i < g.size(); ++i) ga[size_t(start) * c + i] += g[i];
        } else {
          for (int i = 0; i < r; ++i)
            for (int j = 0; j < len; ++j) ga[size_t(i) * c + start + j] += g[size_t(i) * len + j];
        }
      }
    };
  });
  return out;
}

template <class S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  int rank = parts[0].rank();
  if (rank == 1) {
    if (axis != 0) throw ShapeError("concat: axis " + std::to_string(axis) + " for vectors");
    int total = 0;
    for (const auto& t : parts) {
      if (t.rank() != 1) throw ShapeError("concat: mixed ranks");
      total += t.dim(0);
    }
    Tensor<S> out = Tensor<S>::zeros({total});
    int off = 0;
    for (const auto& t : parts) {
      std::copy(t.data(), t.data() + t.numel(), out.data() + off);
      off += t.dim(0);
    }
    Tape<S>* tp = Tape<S>::current();
    bool tracked = false;
    if (tp)
      for (const auto& t : parts) tracked = tracked || tp->tracks(t);
    if (tracked) {
      std::vector<int> pids, lens;
      for (const auto& t : parts) {
        pids.push_back(tp->input_node(t));
        lens.push_back(t.dim(0));
      }
      tp->record("concat", out, pids, [pids, lens](Tape<S>& t2, int self) {
        const auto& g = t2.gradv(self);
        int off2 = 0;
        for (size_t k = 0; k < pids.size(); ++k) {
          if (pids[k] >= 0) {
            auto& gp = t2.gradv(pids[k]);
            for (int i = 0; i < lens[k]; ++i) gp[size_t(i)] += g[size_t(off2 + i)];
          }
          off2 += lens[k];
        }
      });
    }
    return out;
  }
  if (rank != 2 || axis < 0 || axis > 1)
    throw ShapeError("concat: unsupported axis " + std::to_string(axis) + " for rank " + std::to_string(rank));
  int r = parts[0].dim(0), c = parts[0].dim(1);
  int total = 0;
  for (const auto& t : parts) {
    if (t.rank() != 2 || (axis == 0 ? t.dim(1) != c : t.dim(0) != r))
      throw ShapeError("concat: incompatible part shape " + join_ints(t.shape()));
    total += axis == 0 ? t.dim(0) : t.dim(1);
  }
  Tensor<S> out = axis == 0 ? Tensor<S>::zeros({total, c}) : Tensor<S>::zeros({r, total});
  int off = 0;
  for (const auto& t : parts) {
    if (axis == 0) {
      std::copy(t.data(), t.data() + t.numel(), out.data() + size_t(off) * c);
      off += t.dim(0);
    } else {
      int w = t.dim(1);
      for (int i = 0; i < r; ++i)
        std::copy(t.data() + size_t(i) * w, t.data() + size_t(i + 1) * w, out.data() + size_t(i) * total + off);
      off += w;
    }
  }
  Tape<S>* tp = Tape<S>::current();
  bool tracked = false;
  if (tp)
    for (const auto& t : parts) tracked = tracked || tp->tracks(t);
  if (tracked) {
    std::vector<int> pids, widths;
    for (const auto& t : parts) {
      pids.push_back(tp->input_node(t));
      widths.push_back(axis == 0 ? t.dim(0) : t.dim(1));
    }
    tp->record("concat", out, pids, [pids, widths, axis, r, c, total](Tape<S>& t2, int self) {
      const auto& g = t2.gradv(self);
      int off2 = 0;
      for (size_t k = 0; k < pids.size(); ++k) {
        int w = widths[k];
        if (pids[k] >= 0) {
          auto& gp = t2.gradv(pids[k]);
          if (axis == 0) {
            for (size_t i = 0; i < size_t(w) * c; ++i) gp[i] += g[size_t(off2) * c + i];
          } else {
            for (int i = 0; i < r; ++i)
              for (int j = 0; j < w; ++j) gp[size_t(i) * w + j] += g[size_t(i) * total + off2 + j];
          }
        }
        off2 += w;
      }
    });
  }
  return out;
}

// ----------------------------- matmul -----------------------------

namespace detail {

// C += A(M x K) * B(K x N); i-k-j order so the inner loop runs contiguously.
template <class S>
void gemm_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* ai = a + size_t(i) * k;
    S* ci = c + size_t(i) * n;
    for (int q = 0; q < k; ++q) {
      S av = ai[q];
      if (av == S(0)) continue;
      const S* bq = b + size_t(q) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bq[j];
    }
  }
}

// C += A(M x K) * B(N x K)^T
template <class S>
void gemm_nt_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const S* ai = a + size_t(i) * k;
    S* ci = c + size_t(i) * n;
    for (int j = 0; j < n; ++j) {
      const S* bj = b + size_t(j) * k;
      S acc = 0;
      for (int q = 0; q < k; ++q) acc += ai[q] * bj[q];
      ci[j] += acc;
    }
  }
}

// C += A(K x M)^T * B(K x N)
template <class S>
void gemm_tn_acc(const S* a, const S* b, S* c, int m, int k, int n) {
  for (int q = 0; q < k; ++q) {
    const S* aq = a + size_t(q) * m;
    const S* bq = b + size_t(q) * n;
    for (int i = 0; i < m; ++i) {
      S av = aq[i];
      if (av == S(0)) continue;
      S* ci = c + size_t(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bq[j];
    }
  }
}

}  // namespace detail

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + join_ints(a.shape()) + " and " + join_ints(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out = Tensor<S>::zeros({m, n});
  detail::gemm_acc(a.data(), b.data(), out.data(), m, k, n);
  detail::check_finite("matmul", out);
  detail::maybe_record("matmul", out, {a, b}, [&](const std::vector<int>& p) {
    return [p, a, b, m, k, n](Tape<S>& tp, int self) {
      const auto& g = tp.gradv(self);
      if (p[0] >= 0) detail::gemm_nt_acc(g.data(), b.data(), tp.gradv(p[0]).data(), m, n, k);
      if (p[1] >= 0) detail::gemm_tn_acc(a.data(), g.data(), tp.gradv(p[1]).data(), k, m, n);
    };
  });
  return out;
}

// M(N x D) + v(D) added to every row; the model's bias-add.
template <class S>
Tensor<S> add_rowwise(const Tensor<S>& m, const Tensor<S>& v) {
  if (m.rank() != 2 || v.rank() != 1 || m.dim(1) != v.dim(0))
    throw ShapeError("add_rowwise: shapes " + join_ints(m.shape()) + " and " + join_ints(v.shape()));
  int r = m.dim(0), c = m.dim(1);
  Tensor<S> out = Tensor<S>::zeros({r, c});
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) out.data()[size_t(i) * c + j] = m.at(i, j) + v.at(j);
  detail::check_finite("add_rowwise", out);
  detail::maybe_record("add_rowwise", out, {m, v}, [&](const std::vector<int>& p) {
    return [p, r, c](Tape<S>& tp, int self) {
      const auto& g = tp.gradv(self);
      if (p[0] >= 0) detail::axpy(tp.gradv(p[0]), g);
      if (p[1] >= 0) {
        auto& gv = tp.gradv(p[1]);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gv[size_t(j)] += g[size_t(i) * c + j];
      }
    };
  });
  return out;
}

// ----------------------------- normalization & softmax -----------------------------

template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, double eps) {
  if (x.rank() != 2 || gamma.rank() != 1 || beta.rank() != 1 || gamma.dim(0) != x.dim(1) ||
      beta.dim(0) != x.dim(1))
    throw ShapeError("layer_norm: shapes " + join_ints(x.shape()) + ", " + join_ints(gamma.shape()) + ", " +
                     join_ints(beta.shape()));
  int r = x.dim(0), c = x.dim(1);
  Tensor<S> out = Tensor<S>::zeros({r, c});
  std::vector<S> inv_std(static_cast<size_t>(r));
  std::vector<S> xhat(static_cast<size_t>(r) * size_t(c));
  for (int i = 0; i < r; ++i) {
    const S* xi = x.data() + size_t(i) * c;
    double mu = 0;
    for (int j = 0; j < c; ++j) mu += xi[j];
    mu /= c;
    double var = 0;
    for (int j = 0; j < c; ++j) {
      double d = xi[j] - mu;
      var += d * d;
    }
    var /= c;
    double is = 1.0 / std::sqrt(var + eps);
    inv_std[size_t(i)] = S(is);
    for (int j = 0; j < c; ++j) {
      S h = S((xi[j] - mu) * is);
      xhat[size_t(i) * c + j] = h;
      out.data()[size_t(i) * c + j] = h * gamma.at(j) + beta.at(j);
    }
  }
  detail::check_finite("layer_norm", out);
  detail::maybe_record("layer_norm", out, {x, gamma, beta}, [&](const std::vector<int>& p) {
    return [p, gamma, inv_std, xhat, r, c](Tape<S>& tp, int self) {
      const auto& g = tp.gradv(self);
      if (p[1] >= 0) {
        auto& gg = tp.gradv(p[1]);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gg[size_t(j)] += g[size_t(i) * c + j] * xhat[size_t(i) * c + j];
      }
      if (p[2] >= 0) {
        auto& gb = tp.gradv(p[2]);
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < c; ++j) gb[size_t(j)] += g[size_t(i) * c + j];
      }
      if (p[0] >= 0) {
        auto& gx = tp.gradv(p[0]);
        for (int i = 0; i < r; ++i) {
          double sum_gy = 0, sum_gyx = 0;
          for (int j = 0; j < c; ++j) {
            double gy = double(g[size_t(i) * c + j]) * gamma.at(j);
            sum_gy += gy;
            sum_gyx += gy * xhat[size_t(i) * c + j];
          }
          for (int j = 0; j < c; ++j) {
            double gy = double(g[size_t(i) * c + j]) * gamma.at(j);
            double h = xhat[size_t(i) * c + j];
            gx[size_t(i) * c + j] += S(inv_std[size_t(i)] * (gy - sum_gy / c - h * sum_gyx / c));
          }
        }
      }
    };
  });
  return out;
}

// Row-wise softmax over the last axis (max-shifted). Accepts vectors and matrices.
template <class S>
Tensor<S> softmax(const Tensor<S>& x) {
  if (x.rank() < 1 || x.rank() > 2) throw ShapeError("softmax: rank " + std::to_string(x.rank()) + " unsupported");
  int r = x.rank() == 2 ? x.dim(0) : 1;
  int c = x.rank() == 2 ? x.dim(1) : x.dim(0);
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  for (int i = 0; i < r; ++i) {
    const S* xi = x.data() + size_t(i) * c;
    S* oi = out.data() + size_t(i) * c;
    S mx = xi[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xi[j]);
    double z = 0;
    for (int j = 0; j < c; ++j) {
      double e = std::exp(double(xi[j] - mx));
      oi[j] = S(e);
      z += e;
    }
    for (int j = 0; j < c; ++j) oi[j] = S(double(oi[j]) / z);
  }
  detail::check_finite("softmax", out);
  detail::maybe_record("softmax", out, {x}, [&](const std::vector<int>& p) {
    return [p, out, r, c](Tape<S>& tp, int self) {
      if (p[0] >= 0) {
        const auto& g = tp.gradv(self);
        auto& gx = tp.gradv(p[0]);
        for (int i = 0; i < r; ++i) {
          const S* pi = out.data() + size_t(i) * c;
          double inner = 0;
          for (int j = 0; j < c; ++j) inner += double(g[size_t(i) * c + j]) * pi[j];
          for (int j = 0; j < c; ++j)
            gx[size_t(i) * c + j] += S(pi[j] * (double(g[size_t(i) * c + j]) - inner));
        }
      }
    };
  });
  return out;
}

// ----------------------------- lookup & likelihood -----------------------------

template <class S>
Tensor<S> embedding(const Tensor<S>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be a matrix, got " + join_ints(table.shape()));
  int v = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw ShapeError("embedding: empty index list");
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ShapeError("embedding: index " + std::to_string(id) + " out of range for table " + join_ints(table.shape()));
  Tensor<S> out = Tensor<S>::zeros({int(ids.size()), d});
  for (size_t i = 0; i < ids.size(); ++i)
    std::copy(table.data() + size_t(ids[i]) * d, table.data() + size_t(ids[i] + 1) * d, out.data() + i * d);
  detail::maybe_record("embedding", out, {table}, [&](const std::vector<int>& p) {
    return [p, ids, d](Tape<S>& tp, int self) {
      if (p[0] >= 0) {
        const auto& g = tp.gradv(self);
        auto& gt = tp.gradv(p[0]);
        for (size_t i = 0; i < ids.size(); ++i)
          for (int j = 0; j < d; ++j) gt[size_t(ids[i]) * d + j] += g[i * size_t(d) + j];
      }
    };
  });
  return out;
}

// Mean cross-entropy of logits (N x V) against target ids (length N).
template <class S>
Tensor<S> cross_entropy_mean(const Tensor<S>& logits, const std::vector<int>& ids) {
  if (logits.rank() != 2 || ids.size() != size_t(logits.dim(0)))
    throw ShapeError("cross_entropy_mean: logits " + join_ints(logits.shape()) + " vs " +
                     std::to_string(ids.size()) + " targets");
  int n = logits.dim(0), v = logits.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v) throw ShapeError("cross_entropy_mean: target " + std::to_string(id) + " out of range");
  std::vector<S> probs(static_cast<size_t>(n) * size_t(v));
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    const S* xi = logits.data() + size_t(i) * v;
    S mx = xi[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, xi[j]);
    double z = 0;
    for (int j = 0; j < v; ++j) z += std::exp(double(xi[j] - mx));
    double logz = std::log(z) + double(mx);
    for (int j = 0; j < v; ++j) probs[size_t(i) * v + j] = S(std::exp(double(xi[j]) - logz));
    loss -= double(xi[ids[size_t(i)]]) - logz;
  }
  Tensor<S> out = Tensor<S>::scalar(S(loss / n));
  detail::check_finite("cross_entropy_mean", out);
  detail::maybe_record("cross_entropy_mean", out, {logits}, [&](const std::vector<int>& p) {
    return [p, probs, ids, n, v](Tape<S>& tp, int self) {
      if (p[0] >= 0) {
        S g = tp.gradv(self)[0];
        auto& gl = tp.gradv(p[0]);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < v; ++j) {
            S d = probs[size_t(i) * v + j] - S(j == ids[size_t(i)] ? 1 : 0);
            gl[size_t(i) * v + j] += g * d / S(n);
          }
      }
    };
  });
  return out;
}

// Per-row log softmax probability of the chosen id: logits (N x V) -> (N).
template <class S>
Tensor<S> log_prob_of(const Tensor<S>& logits, const std::vector<int>& ids) {
  if (logits.rank() != 2 || ids.size() != size_t(logits.dim(0)))
    throw ShapeError("log_prob_of: logits " + join_ints(logits.shape()) + " vs " + std::to_string(ids.size()) +
                     " targets");
  int n = logits.dim(0), v = logits.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v) throw ShapeError("log_prob_of: target " + std::to_string(id) + " out of range");
  std::vector<S> probs(static_cast<size_t>(n) * size_t(v));
  Tensor<S> out = Tensor<S>::zeros({n});
  for (int i = 0; i < n; ++i) {
    const S* xi = logits.data() + size_t(i) * v;
    S mx = xi[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, xi[j]);
    double z = 0;
    for (int j = 0; j < v; ++j) z += std::exp(double(xi[j] - mx));
    double logz = std::log(z) + double(mx);
    for (int j = 0; j < v; ++j) probs[size_t(i) * v + j] = S(std::exp(double(xi[j]) - logz));
    out.data()[size_t(i)] = S(double(xi[ids[size_t(i)]]) - logz);
  }
  detail::check_finite("log_prob_of", out);
  detail::maybe_record("log_prob_of", out, {logits}, [&](const std::vector<int>& p) {
    return [p, probs, ids, n, v](Tape<S>& tp, int self) {
      if (p[0] >= 0) {
        const auto& g = tp.gradv(self);
        auto& gl = tp.gradv(p[0]);
        for (int i = 0; i < n; ++i) {
          S gi = g[size_t(i)];
          if (gi == S(0)) continue;
          for (int j = 0; j < v; ++j) {
            S d = S(j == ids[size_t(i)] ? 1 : 0) - probs[size_t(i) * v + j];
            gl[size_t(i) * v + j] += gi * d;
          }
        }
      }
    };
  });
  return out;
}

// Hinge penalty keeping probe coefficients alive: max(0, 1 - sum_i mask_i * relu(pre_i)).
// The forward value clamps at the ReLU like everything else; the backward is
// deliberately straight-through (d/d pre_i = -mask_i whenever the hinge is
// active, regardless of the sign of pre_i). A probe whose pre-activations sit
// strictly below zero produces no gradient through any ReLU path, so a penalty
// that respected the clamp in its backward could never pull such a probe back —
// the exact failure this term exists to prevent.
template <class S>
Tensor<S> liveness_penalty(const Tensor<S>& pre, const std::vector<uint8_t>& mask) {
  if (pre.rank() != 1 || mask.size() != pre.numel())
    throw ShapeError("liveness_penalty: pre shape " + join_ints(pre.shape()) + " vs mask length " +
                     std::to_string(mask.size()));
  double s = 0;
  for (size_t i = 0; i < pre.numel(); ++i)
    if (mask[i]) s += std::max(double(pre.data()[i]), 0.0);
  double val = std::max(0.0, 1.0 - s);
  Tensor<S> out = Tensor<S>::scalar(S(val));
  detail::maybe_record("liveness_penalty", out, {pre}, [&](const std::vector<int>& p) {
    return [p, mask, val](Tape<S>& tp, int self) {
      if (p[0] >= 0 && val > 0.0) {
        S g = tp.gradv(self)[0];
        auto& gp = tp.gradv(p[0]);
        for (size_t i = 0; i < gp.size(); ++i)
          if (mask[i]) gp[i] -= g;
      }
    };
  });
  return out;
}

// ----------------------------- gradient oracle -----------------------------

struct FdReport {
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  int n_coords = 0;
};

// Central-difference check of d(loss)/d(params). `loss_fn` must rebuild the loss
// from the current parameter values on every call; it is invoked once under a
// fresh tape for the analytic pass and twice per coordinate without one.
template <class S, class LossFn>
FdReport finite_difference_check(LossFn&& loss_fn, const std::vector<Tensor<S>*>& params, double eps) {
  for (auto* p : params) p->zero_grad();
  double base;
  {
    Tape<S> tape;
    Tensor<S> loss = loss_fn();
    base = double(loss.item());
    tape.backward(loss);
  }
  if (!std::isfinite(base)) throw NumericError("finite_difference_check: loss is not finite");

  FdReport rep;
  for (auto* p : params) {
    std::vector<double> analytic(p->numel(), 0.0);
    if (p->has_grad())
      for (size_t i = 0; i < p->numel(); ++i) analytic[i] = double(p->grad()[i]);
    for (size_t i = 0; i < p->numel(); ++i) {
      S saved = p->data()[i];
      p->data()[i] = S(double(saved) + eps);
      double up = double(loss_fn().item());
      p->data()[i] = S(double(saved) - eps);
      double dn = double(loss_fn().item());
      p->data()[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(dn))
        throw NumericError("finite_difference_check: perturbed loss is not finite");
      double numeric = (up - dn) / (2.0 * eps);
      double abs_err = std::fabs(analytic[i] - numeric);
      double rel = abs_err / std::max(std::fabs(analytic[i]), 1e-8);
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.n_coords;
    }
  }
  return rep;
}

}  // namespace psr
