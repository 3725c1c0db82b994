#pragma once

#include <cmath>
#include <vector>

#include "sdist/attention.hpp"

namespace sdist::oracle {

/// Standalone per-pixel evaluation of the local attention layer.
inline std::vector<double> brute_force_attention(const Tensor<double>& x, const AttentionLayerParams<double>& p) {
  const auto& cfg = p.config;
  const std::size_t B = x.size(0), Ci = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t Co = cfg.c_out, N = cfg.heads, D = Co / N, k = cfg.extent, side = 2 * k - 1;
  const long r = static_cast<long>(k / 2);
  auto proj = [&](const Tensor<double>& w, std::size_t b, long i, long j, std::size_t o) {
    long double acc = 0;
    for (std::size_t c = 0; c < Ci; ++c) acc += x.at(((b * Ci + c) * H + i) * W + j) * w.at(c * Co + o);
    return acc;
  };
  std::vector<double> y(B * Co * H * W, 0.0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < N; ++h)
      for (long i = 0; i < static_cast<long>(H); ++i)
        for (long j = 0; j < static_cast<long>(W); ++j) {
          std::vector<long double> q(D);
          for (std::size_t d = 0; d < D; ++d) q[d] = proj(p.w_q, b, i, j, h * D + d);
          std::vector<std::pair<long, long>> nb;
          std::vector<long double> logits;
          for (long a = i - r; a <= i + r; ++a)
            for (long c = j - r; c <= j + r; ++c) {
              if (a < 0 || c < 0 || a >= static_cast<long>(H) || c >= static_cast<long>(W)) continue;
              long double content = 0, position = 0;
              for (std::size_t d = 0; d < D; ++d) {
                content += q[d] * proj(p.w_k, b, a, c, h * D + d);
                const std::size_t ra = static_cast<std::size_t>(a - i + static_cast<long>(k) - 1);
                const std::size_t rc = static_cast<std::size_t>(c - j + static_cast<long>(k) - 1);
                position += q[d] * p.rel_pos.at(((h * side + ra) * side + rc) * D + d);
              }
              logits.push_back(content / std::sqrt(static_cast<long double>(Co)) +
                               position / std::pow(static_cast<long double>(Co), 0.25L));
              nb.emplace_back(a, c);
            }
          long double mx = logits[0];
          for (auto l : logits) mx = std::max(mx, l);
          long double z = 0;
          for (auto& l : logits) z += (l = std::exp(l - mx));
          for (std::size_t d = 0; d < D; ++d) {
            long double acc = 0;
            for (std::size_t n = 0; n < nb.size(); ++n)
              acc += logits[n] / z * proj(p.w_v, b, nb[n].first, nb[n].second, h * D + d);
            y[((b * Co + h * D + d) * H + i) * W + j] = static_cast<double>(acc);
          }
        }
  if (cfg.stride == 1) return y;
  std::vector<double> pooled(B * Co * (H / 2) * (W / 2), 0.0);
  for (std::size_t bc = 0; bc < B * Co; ++bc)
    for (std::size_t i = 0; i < H / 2; ++i)
      for (std::size_t j = 0; j < W / 2; ++j) {
        double s = 0;
        for (std::size_t u = 0; u < 2; ++u)
          for (std::size_t v = 0; v < 2; ++v) s += y[(bc * H + 2 * i + u) * W + 2 * j + v];
        pooled[(bc * (H / 2) + i) * (W / 2) + j] = s / 4;
      }
  return pooled;
}

/// Random small layer: H, W <= 4, channels <= 8, k in {1, 3}, heads in {1, 2}.
struct OracleCase {
  AttentionConfig config;
  std::size_t height, width;
};

inline OracleCase random_oracle_case(Rng& rng) {
  std::uniform_int_distribution<std::size_t> size(1, 4), chan(1, 8), pick(0, 1);
  while (true) {
    const std::size_t heads = pick(rng) ? 2 : 1;
    const std::size_t extent = pick(rng) ? 3 : 1;
    const std::size_t c_out = chan(rng);
    if (c_out % heads) continue;
    const std::size_t H = size(rng), W = size(rng);
    const std::size_t stride = (H % 2 == 0 && W % 2 == 0 && pick(rng)) ? 2 : 1;
    return {{chan(rng), c_out, heads, extent, stride}, H, W};
  }
}

inline AttentionLayerParams<double> random_attention_params(const AttentionConfig& cfg, Rng& rng) {
  auto p = init_attention<double>(cfg, rng);
  for (auto& v : p.rel_pos.mutable_data()) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  return p;
}

}  // namespace sdist::oracle
