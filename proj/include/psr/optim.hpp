#pragma once

// Adam with bias correction. Moment accumulators are kept in double regardless
// of the working scalar type; the update itself is written back in S.

#include <cmath>
#include <vector>

#include "psr/common.hpp"
#include "psr/tensor.hpp"

namespace psr {

template <class S>
class Adam {
 public:
  Adam(std::vector<Tensor<S>*> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    if (lr_ <= 0) throw ValidationError("adam: non-positive learning rate");
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i]->numel(), 0.0);
      v_[i].assign(params_[i]->numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto* p : params_) p->zero_grad();
  }

  void step() {
    ++t_;
    double bc1 = 1.0 - std::pow(b1_, t_);
    double bc2 = 1.0 - std::pow(b2_, t_);
    for (size_t i = 0; i < params_.size(); ++i) {
      Tensor<S>* p = params_[i];
      if (!p->has_grad()) continue;
      const auto& g = p->grad();
      for (size_t k = 0; k < p->numel(); ++k) {
        double gk = double(g[k]);
        m_[i][k] = b1_ * m_[i][k] + (1.0 - b1_) * gk;
        v_[i][k] = b2_ * v_[i][k] + (1.0 - b2_) * gk * gk;
        double upd = lr_ * (m_[i][k] / bc1) / (std::sqrt(v_[i][k] / bc2) + eps_);
        double nv = double(p->data()[k]) - upd;
        if (!std::isfinite(nv)) throw NumericError("adam: non-finite parameter update");
        p->data()[k] = S(nv);
      }
    }
  }

  int steps_taken() const { return t_; }

 private:
  std::vector<Tensor<S>*> params_;
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

}  // namespace psr
