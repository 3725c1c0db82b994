#pragma once

// Distillation objective: cross-entropy on labels, temperature-softened KL
// from teacher to student logits, and attention transfer between l2-normalised
// channel-pooled activation maps.
//
//   total = alpha * CE + (1 - alpha) * KL + (beta / 2) * sum_m || s_m/|s_m| - t_m/|t_m| ||_2
//
// Teacher-side inputs are detached, so no gradient ever reaches the teacher.

#include <nlohmann/json.hpp>

#include <cmath>
#include <vector>

#include "sdist/model.hpp"
#include "sdist/ops.hpp"

namespace sdist {

/// distance: sum_m ||s_m/|s_m| - t_m/|t_m|||_2 as written in the objective.
/// squared_mean: squared distance averaged over map positions, the form the
/// usual beta = 1000 setting was tuned against.
enum class AtForm { distance, squared_mean };

NLOHMANN_JSON_SERIALIZE_ENUM(AtForm, {{AtForm::distance, "distance"}, {AtForm::squared_mean, "squared_mean"}})

struct DistillConfig {
  double alpha = 0.1;
  double beta = 1000.0;
  double temperature = 4.0;
  double map_power = 2.0;
  /// Multiply the KL term by temperature^2 to keep its gradient scale fixed.
  bool temperature_squared = true;
  AtForm at_form = AtForm::distance;

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("distill: alpha must lie in [0, 1]");
    if (!(beta >= 0.0)) throw ConfigError("distill: beta must be non-negative");
    if (!(temperature > 0.0)) throw ConfigError("distill: temperature must be positive");
    if (!(map_power >= 1.0)) throw ConfigError("distill: map exponent must be >= 1");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(DistillConfig, alpha, beta, temperature, map_power, temperature_squared, at_form)

inline constexpr double kZeroNormGuard = 1e-12;

/// Channel-pooled spatial map sum_c |A_c|^p, flattened to [B x (H*W)].
template <typename T>
Tensor<T> attention_map(const Tensor<T>& activation, double p) {
  if (!(p >= 1.0)) throw ContractError("attention_map: exponent must be >= 1");
  detail::require_rank(activation, 4, "attention_map");
  const std::size_t B = activation.size(0), P = activation.size(2) * activation.size(3);
  auto powered = p == 1.0 ? abs_pow(activation, T{1}) : abs_pow(activation, static_cast<T>(p));
  return reshape(sum_axis(powered, 1), Shape{B, P});
}

/// Sum over tap pairs of the batch-mean l2 distance between normalised maps.
/// The beta/2 factor is applied by total_loss.
template <typename T>
Tensor<T> at_loss(const std::vector<Tensor<T>>& student_maps, const std::vector<Tensor<T>>& teacher_maps,
                  AtForm form = AtForm::distance) {
  if (student_maps.size() != teacher_maps.size())
    throw ContractError("at_loss: " + std::to_string(student_maps.size()) + " student maps vs " +
                        std::to_string(teacher_maps.size()) + " teacher maps");
  if (student_maps.empty()) throw ContractError("at_loss: no map pairs");
  Tensor<T> total;
  for (std::size_t m = 0; m < student_maps.size(); ++m) {
    const auto& s = student_maps[m];
    const auto t = teacher_maps[m].detach();
    if (s.shape() != t.shape())
      throw ContractError("at_loss: pair " + std::to_string(m) + " has shapes " + shape_str(s.shape()) + " and " +
                          shape_str(t.shape()));
    auto diff = sub(row_normalize(s, static_cast<T>(kZeroNormGuard)), row_normalize(t, static_cast<T>(kZeroNormGuard)));
    auto term = form == AtForm::distance ? mean(row_l2_norm(diff)) : mean(mul(diff, diff));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

template <typename T>
Tensor<T> at_loss(const TapSet<T>& student, const TapSet<T>& teacher, double p, AtForm form = AtForm::distance) {
  std::vector<Tensor<T>> s, t;
  for (auto [si, ti] : pair_taps(student, teacher)) {
    s.push_back(attention_map(student.taps[si].activation, p));
    NoGradGuard no_grad;
    t.push_back(attention_map(teacher.taps[ti].activation, p));
  }
  return at_loss(s, t, form);
}

/// KL(softmax(z_T / rho) || softmax(z_S / rho)), batch-mean, optionally
/// scaled by rho^2. Teacher logits are treated as constants.
template <typename T>
Tensor<T> kd_loss(const Tensor<T>& teacher_logits, const Tensor<T>& student_logits, double temperature,
                  bool temperature_squared = true) {
  if (!(temperature > 0.0)) throw ContractError("kd_loss: temperature must be positive");
  if (teacher_logits.shape() != student_logits.shape())
    throw ContractError("kd_loss: logits shapes " + shape_str(teacher_logits.shape()) + " and " +
                        shape_str(student_logits.shape()) + " differ");
  detail::require_rank(student_logits, 2, "kd_loss");
  const std::size_t B = student_logits.size(0);
  const T inv_t = static_cast<T>(1.0 / temperature);
  Tensor<T> log_p_teacher;
  {
    NoGradGuard no_grad;
    log_p_teacher = log_softmax(scale(teacher_logits.detach(), inv_t), 1);
  }
  std::vector<T> p_teacher(log_p_teacher.numel());
  T entropy_term{0};  // sum p_T log p_T
  for (std::size_t i = 0; i < p_teacher.size(); ++i) {
    p_teacher[i] = std::exp(log_p_teacher.at(i));
    if (p_teacher[i] > T{0}) entropy_term += p_teacher[i] * log_p_teacher.at(i);
  }
  auto log_p_student = log_softmax(scale(student_logits, inv_t), 1);
  auto cross = sum(mul(log_p_student, Tensor<T>(student_logits.shape(), std::move(p_teacher))));
  // (sum p_T log p_T - sum p_T log p_S) / B
  auto kl = scale(add_scalar(scale(cross, T{-1}), entropy_term), T{1} / static_cast<T>(B));
  return temperature_squared ? scale(kl, static_cast<T>(temperature * temperature)) : kl;
}

template <typename T>
struct LossBreakdown {
  Tensor<T> total;
  Tensor<T> ce;
  Tensor<T> kd;  // undefined when alpha == 1
  Tensor<T> at;  // undefined when beta == 0
};

template <typename T>
LossBreakdown<T> total_loss(const std::vector<int>& labels, const Tensor<T>& student_logits,
                            const Tensor<T>& teacher_logits, const TapSet<T>& student_taps,
                            const TapSet<T>& teacher_taps, const DistillConfig& cfg) {
  cfg.validate();
  LossBreakdown<T> out;
  out.ce = cross_entropy(student_logits, labels);
  out.total = scale(out.ce, static_cast<T>(cfg.alpha));
  if (cfg.alpha < 1.0) {
    out.kd = kd_loss(teacher_logits, student_logits, cfg.temperature, cfg.temperature_squared);
    out.total = add(out.total, scale(out.kd, static_cast<T>(1.0 - cfg.alpha)));
  }
  if (cfg.beta > 0.0) {
    out.at = at_loss(student_taps, teacher_taps, cfg.map_power, cfg.at_form);
    out.total = add(out.total, scale(out.at, static_cast<T>(cfg.beta / 2.0)));
  }
  return out;
}

}  // namespace sdist
