#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "qds/checkpoint.hpp"
#include "qds/tensor.hpp"

namespace qds {

/// Adam over a fixed list of named leaf tensors.
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor>> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
       double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& [name, t] : params_) {
      m_.emplace_back(t.numel(), 0.0);
      v_.emplace_back(t.numel(), 0.0);
    }
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  void step() {
    ++steps_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(steps_));
    for (std::size_t p = 0; p < params_.size(); ++p) {
      Tensor& t = params_[p].second;
      if (!t.has_grad()) continue;
      auto val = t.mutable_data();
      auto g = t.grad();
      for (std::size_t i = 0; i < val.size(); ++i) {
        m_[p][i] = b1_ * m_[p][i] + (1 - b1_) * g[i];
        v_[p][i] = b2_ * v_[p][i] + (1 - b2_) * g[i] * g[i];
        val[i] -= lr_ * (m_[p][i] / c1) / (std::sqrt(v_[p][i] / c2) + eps_);
      }
    }
  }

  std::size_t steps() const { return steps_; }

  void append_state(Checkpoint& ck) const {
    for (std::size_t p = 0; p < params_.size(); ++p) {
      ck.tensors.emplace_back("adam.m." + params_[p].first, Tensor::from({m_[p].size()}, m_[p]));
      ck.tensors.emplace_back("adam.v." + params_[p].first, Tensor::from({v_[p].size()}, v_[p]));
    }
    ck.meta["adam_steps"] = steps_;
  }

  void load_state(const Checkpoint& ck) {
    for (std::size_t p = 0; p < params_.size(); ++p) {
      const Tensor* m = ck.find("adam.m." + params_[p].first);
      const Tensor* v = ck.find("adam.v." + params_[p].first);
      if (!m || !v || m->numel() != m_[p].size() || v->numel() != v_[p].size())
        throw FormatError("checkpoint lacks optimizer state for '" + params_[p].first + "'");
      m_[p].assign(m->data().begin(), m->data().end());
      v_[p].assign(v->data().begin(), v->data().end());
    }
    steps_ = ck.meta.value("adam_steps", std::size_t{0});
  }

 private:
  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, b1_, b2_, eps_;
  std::size_t steps_ = 0;
};

}  // namespace qds
