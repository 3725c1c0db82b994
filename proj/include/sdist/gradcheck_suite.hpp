#pragma once

// Named gradient checks over every recorded primitive, the attention layer
// and the distillation losses. Each case draws its inputs from `seed`,
// reduces the op output to a scalar through a fixed random weighting, and
// reports the worst relative error over all differentiable inputs.

#include <functional>
#include <string>
#include <vector>

#include "sdist/attention.hpp"
#include "sdist/distill.hpp"
#include "sdist/gradcheck.hpp"
#include "sdist/ops.hpp"
#include "sdist/random.hpp"

namespace sdist {

struct GradCase {
  std::string name;
  std::function<double(std::uint64_t seed, const GradCheckOptions& opt)> run;
};

namespace detail {

template <typename T>
Tensor<T> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  const auto n = shape_numel(shape);
  return Tensor<T>(std::move(shape), uniform_values<T>(rng, n, lo, hi), true);
}

/// Values bounded away from zero, for ops with a kink at the origin.
template <typename T>
Tensor<T> off_zero_tensor(Rng& rng, Shape shape) {
  auto t = random_tensor<T>(rng, std::move(shape), 0.1, 1.0);
  std::bernoulli_distribution sign(0.5);
  for (auto& v : t.mutable_data())
    if (sign(rng)) v = -v;
  return t;
}

/// sum(y * w) for a fixed random w shaped like y.
template <typename T>
Tensor<T> probe(const Tensor<T>& y, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x9B0BE}));
  Tensor<T> w(y.shape(), uniform_values<T>(rng, y.numel(), -1.0, 1.0));
  return sum(mul(y, w));
}

template <typename T, typename F>
double check_all(F&& f, std::vector<Tensor<T>*> inputs, const GradCheckOptions& opt) {
  double worst = 0.0;
  for (auto* t : inputs) worst = std::max(worst, grad_check<T>(f, *t, opt));
  return worst;
}

}  // namespace detail

template <typename T>
std::vector<GradCase> gradient_cases() {
  using detail::check_all;
  using detail::probe;
  using detail::random_tensor;
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, auto body) {
    cases.push_back({std::move(name), [body](std::uint64_t seed, const GradCheckOptions& opt) {
                       Rng rng(derive_seed(seed, {0xCA5E}));
                       return body(rng, seed, opt);
                     }});
  };

  add_case("add", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {3, 4}), b = random_tensor<T>(rng, {3, 4});
    return check_all<T>([&] { return probe(add(a, b), s); }, {&a, &b}, o);
  });
  add_case("sub", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {3, 4}), b = random_tensor<T>(rng, {3, 4});
    return check_all<T>([&] { return probe(sub(a, b), s); }, {&a, &b}, o);
  });
  add_case("mul", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {3, 4}), b = random_tensor<T>(rng, {3, 4});
    return check_all<T>([&] { return probe(mul(a, b), s); }, {&a, &b}, o);
  });
  add_case("scale", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {5, 3});
    return check_all<T>([&] { return probe(scale(a, T(-2.5)), s); }, {&a}, o);
  });
  add_case("add_scalar", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {5, 3});
    return check_all<T>([&] { return probe(add_scalar(a, T(0.75)), s); }, {&a}, o);
  });
  add_case("relu", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = detail::off_zero_tensor<T>(rng, {4, 6});
    return check_all<T>([&] { return probe(relu(a), s); }, {&a}, o);
  });
  add_case("abs_pow", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = detail::off_zero_tensor<T>(rng, {4, 6});
    double worst = 0.0;
    for (T p : {T(1), T(1.5), T(2), T(3)})
      worst = std::max(worst, check_all<T>([&] { return probe(abs_pow(a, p), s); }, {&a}, o));
    return worst;
  });
  add_case("sum", [](Rng& rng, std::uint64_t, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {2, 3, 4});
    return check_all<T>([&] { return sum(mul(a, a)); }, {&a}, o);
  });
  add_case("mean", [](Rng& rng, std::uint64_t, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {2, 3, 4});
    return check_all<T>([&] { return mean(mul(a, a)); }, {&a}, o);
  });
  add_case("sum_axis", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {2, 3, 4});
    double worst = 0.0;
    for (std::size_t axis = 0; axis < 3; ++axis)
      worst = std::max(worst, check_all<T>([&] { return probe(sum_axis(a, axis), s); }, {&a}, o));
    return worst;
  });
  add_case("row_l2_norm", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {3, 5});
    return check_all<T>([&] { return probe(row_l2_norm(a), s); }, {&a}, o);
  });
  add_case("row_normalize", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {3, 5});
    return check_all<T>([&] { return probe(row_normalize(a, T(1e-12)), s); }, {&a}, o);
  });
  add_case("reshape", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {2, 6});
    return check_all<T>([&] { return probe(mul(reshape(a, Shape{3, 4}), reshape(a, Shape{3, 4})), s); }, {&a}, o);
  });
  add_case("transpose", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {3, 5});
    return check_all<T>([&] { return probe(transpose(a), s); }, {&a}, o);
  });
  add_case("gather", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {2, 3});
    std::vector<std::int64_t> index{0, 5, -1, 2, 2, 4, -1, 1};
    return check_all<T>([&] { return probe(gather(a, index, Shape{2, 4}), s); }, {&a}, o);
  });
  add_case("pick", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {4, 5});
    return check_all<T>([&] { return probe(pick(a, {1, 0, 4, 4}), s); }, {&a}, o);
  });
  add_case("concat_channels", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {2, 2, 2, 3}), b = random_tensor<T>(rng, {2, 3, 2, 3});
    return check_all<T>([&] { return probe(concat_channels<T>({a, b}), s); }, {&a, &b}, o);
  });
  add_case("matmul", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {3, 4}), b = random_tensor<T>(rng, {4, 5});
    return check_all<T>([&] { return probe(matmul(a, b), s); }, {&a, &b}, o);
  });
  add_case("add_bias", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = random_tensor<T>(rng, {3, 4}), b = random_tensor<T>(rng, {4});
    return check_all<T>([&] { return probe(add_bias(a, b), s); }, {&a, &b}, o);
  });
  add_case("channel_project", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {2, 3, 3, 2}), w = random_tensor<T>(rng, {3, 4});
    return check_all<T>([&] { return probe(channel_project(x, w), s); }, {&x, &w}, o);
  });
  struct ConvCase {
    const char* name;
    std::size_t k, stride, pad, size;
  };
  for (auto cc : {ConvCase{"conv2d_3x3", 3, 1, 1, 5}, ConvCase{"conv2d_3x3_stride2", 3, 2, 1, 6},
                  ConvCase{"conv2d_1x1", 1, 1, 0, 4}, ConvCase{"conv2d_1x1_stride2", 1, 2, 0, 4}}) {
    add_case(cc.name, [cc](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
      auto x = random_tensor<T>(rng, {2, 3, cc.size, cc.size});
      auto w = random_tensor<T>(rng, {4, 3, cc.k, cc.k});
      return check_all<T>([&] { return probe(conv2d(x, w, cc.stride, cc.pad), s); }, {&x, &w}, o);
    });
  }
  add_case("avg_pool2d", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {2, 3, 4, 4});
    return check_all<T>([&] { return probe(avg_pool2d(x, 2), s); }, {&x}, o);
  });
  add_case("global_avg_pool", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {2, 3, 3, 3});
    return check_all<T>([&] { return probe(global_avg_pool(x), s); }, {&x}, o);
  });
  add_case("batch_norm", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {3, 2, 2, 2});
    auto gamma = random_tensor<T>(rng, {2}, 0.5, 1.5), beta = random_tensor<T>(rng, {2});
    BatchNormStats<T> stats(2);
    return check_all<T>([&] { return probe(batch_norm(x, gamma, beta, stats, true), s); }, {&x, &gamma, &beta}, o);
  });
  add_case("batch_norm_eval", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {3, 2, 2, 2});
    auto gamma = random_tensor<T>(rng, {2}, 0.5, 1.5), beta = random_tensor<T>(rng, {2});
    BatchNormStats<T> stats(2);
    stats.running_mean = {T(0.3), T(-0.2)};
    stats.running_var = {T(0.8), T(1.7)};
    return check_all<T>([&] { return probe(batch_norm(x, gamma, beta, stats, false), s); }, {&x, &gamma, &beta}, o);
  });
  add_case("softmax", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {3, 4}, -2.0, 2.0);
    return std::max(check_all<T>([&] { return probe(softmax(x, 1), s); }, {&x}, o),
                    check_all<T>([&] { return probe(softmax(x, 0), s); }, {&x}, o));
  });
  add_case("log_softmax", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {3, 4}, -2.0, 2.0);
    return std::max(check_all<T>([&] { return probe(log_softmax(x, 1), s); }, {&x}, o),
                    check_all<T>([&] { return probe(log_softmax(x, 0), s); }, {&x}, o));
  });
  add_case("cross_entropy", [](Rng& rng, std::uint64_t, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {4, 3}, -2.0, 2.0);
    return check_all<T>([&] { return cross_entropy(x, {0, 2, 1, 2}); }, {&x}, o);
  });
  add_case("neighborhood_extract", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto x = random_tensor<T>(rng, {1, 2, 3, 3});
    return check_all<T>([&] { return probe(neighborhood_extract(x, 3).patches, s); }, {&x}, o);
  });
  struct AttnCase {
    const char* name;
    std::size_t c_in, c_out, heads, extent, stride, size;
    bool sqrt_position;
  };
  for (auto ac : {AttnCase{"local_self_attention", 3, 4, 2, 3, 1, 4, false},
                  AttnCase{"local_self_attention_stride2", 3, 4, 2, 3, 2, 4, false},
                  AttnCase{"local_self_attention_k1", 2, 4, 1, 1, 1, 3, false},
                  AttnCase{"local_self_attention_k5", 2, 2, 1, 5, 1, 3, false},
                  AttnCase{"local_self_attention_sqrt_scale", 3, 4, 2, 3, 1, 3, true}}) {
    add_case(ac.name, [ac](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
      AttentionConfig cfg{ac.c_in, ac.c_out, ac.heads, ac.extent, ac.stride, ac.sqrt_position};
      auto params = init_attention<T>(cfg, rng);
      for (auto& v : params.rel_pos.mutable_data()) v = static_cast<T>(std::uniform_real_distribution<double>(-1, 1)(rng));
      auto x = random_tensor<T>(rng, {2, ac.c_in, ac.size, ac.size});
      return check_all<T>([&] { return probe(local_self_attention(x, params), s); },
                          {&x, &params.w_q, &params.w_k, &params.w_v, &params.rel_pos}, o);
    });
  }
  add_case("attention_map", [](Rng& rng, std::uint64_t s, const GradCheckOptions& o) {
    auto a = detail::off_zero_tensor<T>(rng, {2, 3, 2, 2});
    double worst = 0.0;
    for (double p : {1.0, 2.0, 3.0})
      worst = std::max(worst, check_all<T>([&] { return probe(attention_map(a, p), s); }, {&a}, o));
    return worst;
  });
  add_case("at_loss", [](Rng& rng, std::uint64_t, const GradCheckOptions& o) {
    auto s1 = random_tensor<T>(rng, {3, 4}, 0.1, 1.0), s2 = random_tensor<T>(rng, {3, 6}, 0.1, 1.0);
    auto t1 = random_tensor<T>(rng, {3, 4}, 0.1, 1.0), t2 = random_tensor<T>(rng, {3, 6}, 0.1, 1.0);
    return check_all<T>([&] { return at_loss<T>({s1, s2}, {t1, t2}); }, {&s1, &s2}, o);
  });
  add_case("kd_loss", [](Rng& rng, std::uint64_t, const GradCheckOptions& o) {
    auto zs = random_tensor<T>(rng, {3, 4}, -2.0, 2.0);
    auto zt = random_tensor<T>(rng, {3, 4}, -2.0, 2.0);
    return std::max(check_all<T>([&] { return kd_loss(zt, zs, 4.0); }, {&zs}, o),
                    check_all<T>([&] { return kd_loss(zt, zs, 1.0, false); }, {&zs}, o));
  });
  add_case("total_loss", [](Rng& rng, std::uint64_t, const GradCheckOptions& o) {
    auto zs = random_tensor<T>(rng, {2, 3}, -2.0, 2.0), zt = random_tensor<T>(rng, {2, 3}, -2.0, 2.0);
    auto a1 = random_tensor<T>(rng, {2, 2, 4, 4}), a2 = random_tensor<T>(rng, {2, 3, 2, 2});
    auto b1 = random_tensor<T>(rng, {2, 2, 4, 4}), b2 = random_tensor<T>(rng, {2, 3, 2, 2});
    TapSet<T> ts{{{"s0", 0, 0, a1}, {"s1", 1, 0, a2}}};
    TapSet<T> tt{{{"t0", 0, 0, b1}, {"t1", 1, 0, b2}}};
    DistillConfig cfg;
    cfg.beta = 2.0;
    return check_all<T>([&] { return total_loss<T>({0, 2}, zs, zt, ts, tt, cfg).total; }, {&zs, &a1, &a2}, o);
  });
  return cases;
}

/// Runs every case over `seeds` seeds; returns (name, worst error) pairs.
template <typename T>
std::vector<std::pair<std::string, double>> run_gradient_suite(std::size_t seeds, GradCheckOptions opt) {
  std::vector<std::pair<std::string, double>> out;
  for (const auto& c : gradient_cases<T>()) {
    double worst = 0.0;
    for (std::size_t s = 0; s < seeds; ++s) {
      opt.seed = s;
      worst = std::max(worst, c.run(s, opt));
    }
    out.emplace_back(c.name, worst);
  }
  return out;
}

}  // namespace sdist
