#pragma once

#include <cmath>
#include <vector>

#include "fedshade/tensor.hpp"

namespace fedshade::ad {

// Plain SGD over leaf parameter tensors; gradients are applied in place.
class Sgd {
  public:
    explicit Sgd(double lr) : lr_(lr) {}
    void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].raw();
            const auto& g = grads[i].data();
            for (size_t j = 0; j < p.size(); ++j) p[j] -= lr_ * g[j];
        }
    }
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

  private:
    double lr_;
};

class Adam {
  public:
    Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

    void step(std::vector<Tensor>& params, const std::vector<Tensor>& grads) {
        if (m_.empty()) {
            for (auto& p : params) {
                m_.emplace_back(p.size(), 0.0);
                v_.emplace_back(p.size(), 0.0);
            }
        }
        ++t_;
        double bc1 = 1.0 - std::pow(b1_, t_);
        double bc2 = 1.0 - std::pow(b2_, t_);
        for (size_t i = 0; i < params.size(); ++i) {
            auto& p = params[i].raw();
            const auto& g = grads[i].data();
            for (size_t j = 0; j < p.size(); ++j) {
                m_[i][j] = b1_ * m_[i][j] + (1 - b1_) * g[j];
                v_[i][j] = b2_ * v_[i][j] + (1 - b2_) * g[j] * g[j];
                p[j] -= lr_ * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_);
            }
        }
    }
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

  private:
    double lr_, b1_, b2_, eps_;
    int t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace fedshade::ad
