#pragma once

// Local multi-head self-attention over a k x k neighbourhood, used as a
// drop-in replacement for a k x k convolution.
//
// For head h and pixel (i,j) the logit of neighbour (a,b) is
//
//   q_ij . k_ab / sqrt(C_out)  +  q_ij . r_(a-i, b-j) / C_out^(1/4)
//
// where q, k, v are per-pixel projections W^T x and r is a per-head table of
// relative-position vectors. Out-of-image neighbours are excluded from the
// softmax. Heads split the C_out channels evenly and are concatenated.

#include <cmath>
#include <cstdint>
#include <vector>

#include "sdist/ops.hpp"
#include "sdist/random.hpp"

namespace sdist {

struct AttentionConfig {
  std::size_t c_in = 0;
  std::size_t c_out = 0;
  std::size_t heads = 1;
  std::size_t extent = 3;
  std::size_t stride = 1;
  /// Ablation switch: scale the positional term by sqrt(C_out) instead of
  /// the fourth root.
  bool sqrt_position_scale = false;

  std::size_t head_dim() const { return c_out / heads; }
  std::size_t table_side() const { return 2 * extent - 1; }
  double content_scale() const { return 1.0 / std::sqrt(static_cast<double>(c_out)); }
  double position_scale() const {
    const auto c = static_cast<double>(c_out);
    return sqrt_position_scale ? 1.0 / std::sqrt(c) : 1.0 / std::pow(c, 0.25);
  }

  void validate() const {
    if (c_in == 0 || c_out == 0) throw ConfigError("attention: channel counts must be positive");
    if (heads == 0 || c_out % heads != 0) {
      throw ConfigError("attention: " + std::to_string(heads) + " heads do not divide " +
                        std::to_string(c_out) + " output channels");
    }
    if (extent == 0 || extent % 2 == 0) throw ConfigError("attention: extent must be odd");
    if (stride != 1 && stride != 2) throw ConfigError("attention: stride must be 1 or 2");
  }
};

template <typename T>
struct AttentionLayerParams {
  AttentionConfig config;
  Tensor<T> w_q;      // [c_in x c_out]
  Tensor<T> w_k;      // [c_in x c_out]
  Tensor<T> w_v;      // [c_in x c_out]
  Tensor<T> rel_pos;  // [heads x (2k-1) x (2k-1) x c_out/heads]
};

/// 3 c_in c_out projection weights plus (2k-1)^2 c_out positional entries.
inline std::size_t attention_param_count(const AttentionConfig& cfg) {
  return 3 * cfg.c_in * cfg.c_out + cfg.table_side() * cfg.table_side() * cfg.c_out;
}

inline std::size_t attention_projection_count(const AttentionConfig& cfg) {
  return 3 * cfg.c_in * cfg.c_out;
}

template <typename T>
AttentionLayerParams<T> init_attention(const AttentionConfig& cfg, Rng& rng) {
  cfg.validate();
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.c_in));
  const Shape proj{cfg.c_in, cfg.c_out};
  auto make_proj = [&] {
    return Tensor<T>(proj, uniform_values<T>(rng, cfg.c_in * cfg.c_out, -bound, bound), true);
  };
  AttentionLayerParams<T> p{cfg, make_proj(), make_proj(), make_proj(), {}};
  const Shape table{cfg.heads, cfg.table_side(), cfg.table_side(), cfg.head_dim()};
  p.rel_pos = Tensor<T>(table,
                        normal_values<T>(rng, shape_numel(table), 0.0,
                                         1.0 / std::sqrt(static_cast<double>(cfg.head_dim()))),
                        true);
  return p;
}

// ------------------------------------------------------------- neighbourhoods

template <typename T>
struct NeighborhoodPatches {
  Tensor<T> patches;                // [B x H x W x k^2 x C]
  std::vector<std::uint8_t> valid;  // [H x W x k^2], 1 where the source pixel is inside the image
  std::size_t extent = 0;
};

/// Gathers the zero-padded k x k window around every pixel. Slot
/// (da, db) of pixel (i, j) holds x at (i + da - k/2, j + db - k/2).
template <typename T>
NeighborhoodPatches<T> neighborhood_extract(const Tensor<T>& x, std::size_t k) {
  if (k == 0 || k % 2 == 0) throw ContractError("neighborhood_extract: extent must be odd");
  detail::require_rank(x, 4, "neighborhood_extract");
  const std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t k2 = k * k;
  const auto r = static_cast<std::ptrdiff_t>(k / 2);
  std::vector<std::uint8_t> valid(H * W * k2, 0);
  std::vector<std::int64_t> index(B * H * W * k2 * C, -1);
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t n = 0; n < k2; ++n) {
        const auto a = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(n / k) - r;
        const auto b = static_cast<std::ptrdiff_t>(j) + static_cast<std::ptrdiff_t>(n % k) - r;
        if (a < 0 || b < 0 || a >= static_cast<std::ptrdiff_t>(H) || b >= static_cast<std::ptrdiff_t>(W)) continue;
        valid[(i * W + j) * k2 + n] = 1;
        for (std::size_t bi = 0; bi < B; ++bi)
          for (std::size_t c = 0; c < C; ++c)
            index[(((bi * H + i) * W + j) * k2 + n) * C + c] = static_cast<std::int64_t>(
                ((bi * C + c) * H + static_cast<std::size_t>(a)) * W + static_cast<std::size_t>(b));
      }
  return {gather(x, std::move(index), Shape{B, H, W, k2, C}), std::move(valid), k};
}

// ------------------------------------------------------------------ attention

namespace detail {

template <typename T>
std::vector<T> to_channels_last(std::span<const T> x, std::size_t B, std::size_t C, std::size_t P) {
  std::vector<T> out(x.size());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) out[(b * P + p) * C + c] = x[(b * C + c) * P + p];
  return out;
}

template <typename T>
void add_channels_first(const std::vector<T>& src, std::span<T> dst, std::size_t B, std::size_t C,
                        std::size_t P) {
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) dst[(b * C + c) * P + p] += src[(b * P + p) * C + c];
}

}  // namespace detail

/// Fused attention core on precomputed projections q, k, v [B x C x H x W]
/// and position table rel [heads x (2k-1) x (2k-1) x C/heads]. Returns
/// [B x C x H x W] at stride 1.
template <typename T>
Tensor<T> local_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                          const Tensor<T>& rel, const AttentionConfig& cfg) {
  detail::require_rank(q, 4, "local_attention");
  detail::require_same_shape(q, k, "local_attention");
  detail::require_same_shape(q, v, "local_attention");
  const std::size_t B = q.size(0), C = q.size(1), H = q.size(2), W = q.size(3), P = H * W;
  if (C != cfg.c_out) throw ShapeError("local_attention: projection width does not match c_out");
  const std::size_t N = cfg.heads, D = cfg.head_dim(), ext = cfg.extent, k2 = ext * ext;
  const std::size_t side = cfg.table_side();
  if (rel.shape() != Shape{N, side, side, D}) {
    throw ShapeError("local_attention: position table shape " + shape_str(rel.shape()));
  }
  const T cs = static_cast<T>(cfg.content_scale());
  const T ps = static_cast<T>(cfg.position_scale());
  const auto r = static_cast<std::ptrdiff_t>(ext / 2);

  // Neighbour pixel index per (pixel, slot); -1 when outside the image.
  std::vector<std::int64_t> nbr(P * k2, -1);
  std::vector<std::size_t> slot_rel(k2);
  for (std::size_t n = 0; n < k2; ++n) {
    const std::size_t da = n / ext, db = n % ext;  // offset + r
    slot_rel[n] = (da + ext - 1 - static_cast<std::size_t>(r)) * side + (db + ext - 1 - static_cast<std::size_t>(r));
  }
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t n = 0; n < k2; ++n) {
        const auto a = static_cast<std::ptrdiff_t>(i) + static_cast<std::ptrdiff_t>(n / ext) - r;
        const auto b = static_cast<std::ptrdiff_t>(j) + static_cast<std::ptrdiff_t>(n % ext) - r;
        if (a >= 0 && b >= 0 && a < static_cast<std::ptrdiff_t>(H) && b < static_cast<std::ptrdiff_t>(W))
          nbr[(i * W + j) * k2 + n] = a * static_cast<std::ptrdiff_t>(W) + b;
      }

  auto qs = detail::to_channels_last(q.data(), B, C, P);
  auto ks = detail::to_channels_last(k.data(), B, C, P);
  auto vs = detail::to_channels_last(v.data(), B, C, P);
  auto rv = rel.data();
  std::vector<T> weights(B * P * N * k2, T{0});
  std::vector<T> ys(B * P * C, T{0});
  std::vector<T> logits(k2);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t h = 0; h < N; ++h) {
        const T* qv = qs.data() + (b * P + p) * C + h * D;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t n = 0; n < k2; ++n) {
          const auto src = nbr[p * k2 + n];
          if (src < 0) continue;
          const T* kv = ks.data() + (b * P + static_cast<std::size_t>(src)) * C + h * D;
          const T* rp = rv.data() + (h * side * side + slot_rel[n]) * D;
          T content{0}, position{0};
          for (std::size_t d = 0; d < D; ++d) {
            content += qv[d] * kv[d];
            position += qv[d] * rp[d];
          }
          logits[n] = cs * content + ps * position;
          mx = std::max(mx, logits[n]);
        }
        T* w = weights.data() + ((b * P + p) * N + h) * k2;
        T total{0};
        for (std::size_t n = 0; n < k2; ++n) {
          if (nbr[p * k2 + n] < 0) continue;
          w[n] = std::exp(logits[n] - mx);
          total += w[n];
        }
        T* y = ys.data() + (b * P + p) * C + h * D;
        for (std::size_t n = 0; n < k2; ++n) {
          const auto src = nbr[p * k2 + n];
          if (src < 0) continue;
          w[n] /= total;
          const T* vv = vs.data() + (b * P + static_cast<std::size_t>(src)) * C + h * D;
          for (std::size_t d = 0; d < D; ++d) y[d] += w[n] * vv[d];
        }
      }
  std::vector<T> out(B * C * P);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t p = 0; p < P; ++p)
      for (std::size_t c = 0; c < C; ++c) out[(b * C + c) * P + p] = ys[(b * P + p) * C + c];

  return make_op<T>(
      "local_attention", q.shape(), std::move(out), {q, k, v, rel},
      [q, k, v, rel, B, C, P, N, D, k2, side, cs, ps, nbr = std::move(nbr), slot_rel = std::move(slot_rel),
       qs = std::move(qs), ks = std::move(ks), vs = std::move(vs), weights = std::move(weights)](const auto& node) {
        auto dys = detail::to_channels_last(std::span<const T>(node.grad), B, C, P);
        std::vector<T> dq(qs.size(), T{0}), dk(ks.size(), T{0}), dv(vs.size(), T{0});
        auto grel = rel.grad_sink();
        auto rv = rel.data();
        std::vector<T> dw(k2), dlogit(k2);
        for (std::size_t b = 0; b < B; ++b)
          for (std::size_t p = 0; p < P; ++p)
            for (std::size_t h = 0; h < N; ++h) {
              const T* w = weights.data() + ((b * P + p) * N + h) * k2;
              const T* dy = dys.data() + (b * P + p) * C + h * D;
              T expected{0};
              for (std::size_t n = 0; n < k2; ++n) {
                const auto src = nbr[p * k2 + n];
                dw[n] = T{0};
                if (src < 0) continue;
                const std::size_t off = (b * P + static_cast<std::size_t>(src)) * C + h * D;
                for (std::size_t d = 0; d < D; ++d) {
                  dw[n] += dy[d] * vs[off + d];
                  dv[off + d] += w[n] * dy[d];
                }
                expected += w[n] * dw[n];
              }
              const std::size_t qoff = (b * P + p) * C + h * D;
              for (std::size_t n = 0; n < k2; ++n) {
                const auto src = nbr[p * k2 + n];
                if (src < 0) continue;
                const T dl = w[n] * (dw[n] - expected);
                const std::size_t off = (b * P + static_cast<std::size_t>(src)) * C + h * D;
                const std::size_t roff = (h * side * side + slot_rel[n]) * D;
                for (std::size_t d = 0; d < D; ++d) {
                  dq[qoff + d] += dl * (cs * ks[off + d] + ps * rv[roff + d]);
                  dk[off + d] += dl * cs * qs[qoff + d];
                }
                if (!grel.empty())
                  for (std::size_t d = 0; d < D; ++d) grel[roff + d] += dl * ps * qs[qoff + d];
              }
            }
        if (auto g = q.grad_sink(); !g.empty()) detail::add_channels_first(dq, g, B, C, P);
        if (auto g = k.grad_sink(); !g.empty()) detail::add_channels_first(dk, g, B, C, P);
        if (auto g = v.grad_sink(); !g.empty()) detail::add_channels_first(dv, g, B, C, P);
      });
}

/// Full layer: projections, attention at stride 1, then 2x2 average pooling
/// when the layer downsamples.
template <typename T>
Tensor<T> local_self_attention(const Tensor<T>& x, const AttentionLayerParams<T>& params) {
  const auto& cfg = params.config;
  cfg.validate();
  detail::require_rank(x, 4, "local_self_attention");
  if (x.size(1) != cfg.c_in) {
    throw ShapeError("local_self_attention: input has " + std::to_string(x.size(1)) +
                     " channels, layer expects " + std::to_string(cfg.c_in));
  }
  auto q = channel_project(x, params.w_q);
  auto k = channel_project(x, params.w_k);
  auto v = channel_project(x, params.w_v);
  auto y = local_attention(q, k, v, params.rel_pos, cfg);
  return cfg.stride == 2 ? avg_pool2d(y, 2) : y;
}

}  // namespace sdist
