#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "sdist/tensor.hpp"

namespace sdist {

/// SGD with heavy-ball momentum and L2 weight decay:
///   buf = m * buf + (grad + wd * w);  w -= lr * buf
/// Weight decay is skipped at coordinates whose mask bit is 0. Momentum
/// buffers are dense so inactive coordinates keep accumulating gradient
/// signal for regrowth.
template <typename T>
class SgdMomentum {
 public:
  SgdMomentum(std::vector<Tensor<T>> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_coef_(momentum), weight_decay_(weight_decay) {
    buffers_.reserve(params_.size());
    for (const auto& p : params_) buffers_.emplace_back(p.numel(), T{0});
  }

  std::size_t size() const { return params_.size(); }
  std::span<T> momentum(std::size_t i) { return buffers_.at(i); }
  std::span<const T> momentum(std::size_t i) const { return buffers_.at(i); }
  double momentum_coefficient() const { return momentum_coef_; }

  /// `masks[i]` is either null (dense) or points at params[i].numel() bits.
  void step(double lr, std::span<const std::uint8_t* const> masks = {}) {
    const T m = static_cast<T>(momentum_coef_), wd = static_cast<T>(weight_decay_), rate = static_cast<T>(lr);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto w = p.mutable_data();
      auto g = p.grad();
      auto& buf = buffers_[i];
      const std::uint8_t* mask = i < masks.size() ? masks[i] : nullptr;
      for (std::size_t j = 0; j < w.size(); ++j) {
        T d = g.empty() ? T{0} : g[j];
        if (!mask || mask[j]) d += wd * w[j];
        buf[j] = m * buf[j] + d;
        w[j] -= rate * buf[j];
      }
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> buffers_;
  double momentum_coef_;
  double weight_decay_;
};

}  // namespace sdist
