#pragma once

// Recorded primitives. Each op computes its forward value eagerly and
// registers a backward closure through make_op.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <type_traits>
#include <vector>

#include <cblas.h>

#include "sdist/tensor.hpp"

namespace sdist {

namespace detail {

inline blasint blas_int(std::size_t n) { return static_cast<blasint>(n); }

// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(M), blas_int(N), blas_int(K), 1.0f, A,
                blas_int(K), B, blas_int(N), 1.0f, C, blas_int(N));
  } else if constexpr (std::is_same_v<T, double>) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, blas_int(M), blas_int(N), blas_int(K), 1.0, A,
                blas_int(K), B, blas_int(N), 1.0, C, blas_int(N));
  } else {
    for (std::size_t i = 0; i < M; ++i) {
      T* c = C + i * N;
      for (std::size_t p = 0; p < K; ++p) {
        const T a = A[i * K + p];
        const T* b = B + p * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
      }
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(M), blas_int(N), blas_int(K), 1.0f, A,
                blas_int(M), B, blas_int(N), 1.0f, C, blas_int(N));
  } else if constexpr (std::is_same_v<T, double>) {
    cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, blas_int(M), blas_int(N), blas_int(K), 1.0, A,
                blas_int(M), B, blas_int(N), 1.0, C, blas_int(N));
  } else {
    for (std::size_t p = 0; p < K; ++p) {
      const T* b = B + p * N;
      for (std::size_t i = 0; i < M; ++i) {
        const T a = A[p * M + i];
        T* c = C + i * N;
        for (std::size_t j = 0; j < N; ++j) c[j] += a * b[j];
      }
    }
  }
}

template <typename T>
void transpose_into(std::size_t rows, std::size_t cols, const T* src, T* dst) {
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) dst[c * rows + r] = src[r * cols + c];
}

// C[M,N] += A[M,K] * B[N,K]^T
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C) {
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(M), blas_int(N), blas_int(K), 1.0f, A,
                blas_int(K), B, blas_int(K), 1.0f, C, blas_int(N));
  } else if constexpr (std::is_same_v<T, double>) {
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, blas_int(M), blas_int(N), blas_int(K), 1.0, A,
                blas_int(K), B, blas_int(K), 1.0, C, blas_int(N));
  } else {
    std::vector<T> bt(K * N);
    transpose_into(N, K, B, bt.data());
    gemm_nn(M, N, K, A, bt.data(), C);
  }
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ContractError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

template <typename T>
void require_rank(const Tensor<T>& a, std::size_t rank, const char* op) {
  if (a.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return make_op<T>("add", a.shape(), std::move(out), {a, b}, [a, b](const auto& node) {
    for (const auto* t : {&a, &b}) {
      if (auto g = t->grad_sink(); !g.empty())
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] - y[i];
  return make_op<T>("sub", a.shape(), std::move(out), {a, b}, [a, b](const auto& node) {
    if (auto g = a.grad_sink(); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    if (auto g = b.grad_sink(); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= node.grad[i];
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
  return make_op<T>("mul", a.shape(), std::move(out), {a, b}, [a, b](const auto& node) {
    auto x = a.data(), y = b.data();
    if (auto g = a.grad_sink(); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * y[i];
    if (auto g = b.grad_sink(); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * x[i];
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return make_op<T>("scale", a.shape(), std::move(out), {a}, [a, factor](const auto& node) {
    if (auto g = a.grad_sink(); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * node.grad[i];
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += value;
  return make_op<T>("add_scalar", a.shape(), std::move(out), {a}, [a](const auto& node) {
    if (auto g = a.grad_sink(); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
  return make_op<T>("relu", a.shape(), std::move(out), {a}, [a](const auto& node) {
    auto x = a.data();
    if (auto g = a.grad_sink(); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > T{0}) g[i] += node.grad[i];
  });
}

/// |a|^p elementwise, p >= 1.
template <typename T>
Tensor<T> abs_pow(const Tensor<T>& a, T p) {
  if (!(p >= T{1})) throw ContractError("abs_pow: exponent must be >= 1");
  std::vector<T> out(a.numel());
  auto x = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(std::abs(x[i]), p);
  return make_op<T>("abs_pow", a.shape(), std::move(out), {a}, [a, p](const auto& node) {
    auto x = a.data();
    if (auto g = a.grad_sink(); !g.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (x[i] == T{0}) continue;
        const T sign = x[i] > T{0} ? T{1} : T{-1};
        g[i] += node.grad[i] * p * std::pow(std::abs(x[i]), p - T{1}) * sign;
      }
    }
  });
}

// ----------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total{0};
  for (auto v : a.data()) total += v;
  return make_op<T>("sum", Shape{1}, {total}, {a}, [a](const auto& node) {
    if (auto g = a.grad_sink(); !g.empty())
      for (auto& v : g) v += node.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T{1} / static_cast<T>(a.numel()));
}

/// Sums out one axis; the result drops that axis (rank-1 input gives [1]).
template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis) {
  const auto s = detail::split_axis(a.shape(), axis);
  Shape shape = a.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (shape.empty()) shape = {1};
  std::vector<T> out(s.outer * s.inner, T{0});
  auto x = a.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i)
        out[o * s.inner + i] += x[(o * s.extent + e) * s.inner + i];
  return make_op<T>("sum_axis", std::move(shape), std::move(out), {a}, [a, s](const auto& node) {
    if (auto g = a.grad_sink(); !g.empty())
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t e = 0; e < s.extent; ++e)
          for (std::size_t i = 0; i < s.inner; ++i)
            g[(o * s.extent + e) * s.inner + i] += node.grad[o * s.inner + i];
  });
}

/// Euclidean norm of each row of a [rows x n] tensor -> [rows]. The
/// subgradient at a zero row is taken as zero.
template <typename T>
Tensor<T> row_l2_norm(const Tensor<T>& a) {
  detail::require_rank(a, 2, "row_l2_norm");
  const std::size_t rows = a.size(0), n = a.size(1);
  std::vector<T> out(rows);
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T acc{0};
    for (std::size_t j = 0; j < n; ++j) acc += x[r * n + j] * x[r * n + j];
    out[r] = std::sqrt(acc);
  }
  return make_op<T>("row_l2_norm", Shape{rows}, std::move(out), {a}, [a, rows, n](const auto& node) {
    auto x = a.data();
    if (auto g = a.grad_sink(); !g.empty()) {
      for (std::size_t r = 0; r < rows; ++r) {
        const T norm = node.data[r];
        if (norm == T{0}) continue;
        const T f = node.grad[r] / norm;
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += f * x[r * n + j];
      }
    }
  });
}

/// Divides each row of a [rows x n] tensor by (its l2 norm + eps).
template <typename T>
Tensor<T> row_normalize(const Tensor<T>& a, T eps) {
  detail::require_rank(a, 2, "row_normalize");
  const std::size_t rows = a.size(0), n = a.size(1);
  std::vector<T> norms(rows), out(a.numel());
  auto x = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    T acc{0};
    for (std::size_t j = 0; j < n; ++j) acc += x[r * n + j] * x[r * n + j];
    norms[r] = std::sqrt(acc);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] / (norms[r] + eps);
  }
  return make_op<T>("row_normalize", a.shape(), std::move(out), {a},
                    [a, rows, n, eps, norms](const auto& node) {
                      auto x = a.data();
                      auto g = a.grad_sink();
                      if (g.empty()) return;
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T norm = norms[r];
                        const T denom = norm + eps;
                        T dot{0};
                        for (std::size_t j = 0; j < n; ++j) dot += node.grad[r * n + j] * x[r * n + j];
                        // d(x/(|x|+eps)) = dy/(|x|+eps) - x (dy.x) / (|x| (|x|+eps)^2)
                        const T coef = norm > T{0} ? dot / (norm * denom * denom) : T{0};
                        for (std::size_t j = 0; j < n; ++j)
                          g[r * n + j] += node.grad[r * n + j] / denom - coef * x[r * n + j];
                      }
                    });
}

// --------------------------------------------------------------------- shape

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_op<T>("reshape", std::move(shape), std::move(out), {a}, [a](const auto& node) {
    if (auto g = a.grad_sink(); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  detail::require_rank(a, 2, "transpose");
  const std::size_t r = a.size(0), c = a.size(1);
  std::vector<T> out(a.numel());
  detail::transpose_into(r, c, a.data().data(), out.data());
  return make_op<T>("transpose", Shape{c, r}, std::move(out), {a}, [a, r, c](const auto& node) {
    if (auto g = a.grad_sink(); !g.empty())
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += node.grad[j * r + i];
  });
}

/// out.flat[i] = a.flat[index[i]], or 0 where index[i] < 0.
template <typename T>
Tensor<T> gather(const Tensor<T>& a, std::vector<std::int64_t> index, Shape shape) {
  if (shape_numel(shape) != index.size()) {
    throw ShapeError("gather: index count does not match output shape " + shape_str(shape));
  }
  const auto n = static_cast<std::int64_t>(a.numel());
  std::vector<T> out(index.size(), T{0});
  auto x = a.data();
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= n) throw ContractError("gather: index out of range");
    if (index[i] >= 0) out[i] = x[static_cast<std::size_t>(index[i])];
  }
  return make_op<T>("gather", std::move(shape), std::move(out), {a},
                    [a, index = std::move(index)](const auto& node) {
                      if (auto g = a.grad_sink(); !g.empty())
                        for (std::size_t i = 0; i < index.size(); ++i)
                          if (index[i] >= 0) g[static_cast<std::size_t>(index[i])] += node.grad[i];
                    });
}

/// Picks logits[b, labels[b]] for a [B x C] tensor -> [B].
template <typename T>
Tensor<T> pick(const Tensor<T>& a, const std::vector<int>& labels) {
  detail::require_rank(a, 2, "pick");
  if (labels.size() != a.size(0)) throw ShapeError("pick: label count != batch size");
  std::vector<std::int64_t> index(labels.size());
  for (std::size_t b = 0; b < labels.size(); ++b) {
    if (labels[b] < 0 || static_cast<std::size_t>(labels[b]) >= a.size(1))
      throw ContractError("pick: label out of range");
    index[b] = static_cast<std::int64_t>(b * a.size(1) + static_cast<std::size_t>(labels[b]));
  }
  return gather(a, std::move(index), Shape{labels.size()});
}

/// Concatenates tensors of shape [B x C_i x ...] along axis 1.
template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ContractError("concat_channels: no inputs");
  const auto& ref = parts.front().shape();
  if (ref.size() < 2) throw ShapeError("concat_channels: rank must be >= 2");
  std::size_t channels = 0;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != ref.size() || s[0] != ref[0] ||
        !std::equal(s.begin() + 2, s.end(), ref.begin() + 2)) {
      throw ShapeError("concat_channels: incompatible shape " + shape_str(s));
    }
    channels += s[1];
  }
  const std::size_t batch = ref[0];
  const std::size_t inner = shape_numel(ref) / (ref[0] * ref[1]);
  Shape shape = ref;
  shape[1] = channels;
  std::vector<T> out(batch * channels * inner);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.size(1);
    auto x = p.data();
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>(b * c * inner), c * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((b * channels + offset) * inner));
    offset += c;
  }
  return make_op<T>("concat_channels", std::move(shape), std::move(out), parts,
                    [parts, batch, channels, inner](const auto& node) {
                      std::size_t offset = 0;
                      for (const auto& p : parts) {
                        const std::size_t c = p.size(1);
                        if (auto g = p.grad_sink(); !g.empty())
                          for (std::size_t b = 0; b < batch; ++b)
                            for (std::size_t i = 0; i < c * inner; ++i)
                              g[b * c * inner + i] += node.grad[(b * channels + offset) * inner + i];
                        offset += c;
                      }
                    });
}

// ------------------------------------------------------------- linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
  if (b.size(0) != k) {
    throw ShapeError("matmul: inner dimensions disagree " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T{0});
  detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  return make_op<T>("matmul", Shape{m, n}, std::move(out), {a, b}, [a, b, m, k, n](const auto& node) {
    if (auto g = a.grad_sink(); !g.empty())
      detail::gemm_nt(m, k, n, node.grad.data(), b.data().data(), g.data());
    if (auto g = b.grad_sink(); !g.empty())
      detail::gemm_tn(k, n, m, a.data().data(), node.grad.data(), g.data());
  });
}

/// Adds a per-column bias to a [rows x n] tensor.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  detail::require_rank(a, 2, "add_bias");
  const std::size_t rows = a.size(0), n = a.size(1);
  if (bias.numel() != n) throw ShapeError("add_bias: bias length mismatch");
  std::vector<T> out(a.data().begin(), a.data().end());
  auto bv = bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] += bv[j];
  return make_op<T>("add_bias", a.shape(), std::move(out), {a, bias}, [a, bias, rows, n](const auto& node) {
    if (auto g = a.grad_sink(); !g.empty())
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    if (auto g = bias.grad_sink(); !g.empty())
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < n; ++j) g[j] += node.grad[r * n + j];
  });
}

/// Per-pixel channel projection: y[b,o,p] = sum_i weight[i,o] * x[b,i,p],
/// with x of shape [B x C_in x H x W] and weight of shape [C_in x C_out].
template <typename T>
Tensor<T> channel_project(const Tensor<T>& x, const Tensor<T>& weight) {
  detail::require_rank(x, 4, "channel_project");
  detail::require_rank(weight, 2, "channel_project");
  const std::size_t batch = x.size(0), cin = x.size(1), pixels = x.size(2) * x.size(3);
  const std::size_t cout = weight.size(1);
  if (weight.size(0) != cin) {
    throw ShapeError("channel_project: input has " + std::to_string(cin) +
                     " channels, weight expects " + std::to_string(weight.size(0)));
  }
  std::vector<T> out(batch * cout * pixels, T{0});
  for (std::size_t b = 0; b < batch; ++b)
    detail::gemm_tn(cout, pixels, cin, weight.data().data(), x.data().data() + b * cin * pixels,
                    out.data() + b * cout * pixels);
  return make_op<T>("channel_project", Shape{batch, cout, x.size(2), x.size(3)}, std::move(out),
                    {x, weight}, [x, weight, batch, cin, cout, pixels](const auto& node) {
                      if (auto g = x.grad_sink(); !g.empty())
                        for (std::size_t b = 0; b < batch; ++b)
                          detail::gemm_nn(cin, pixels, cout, weight.data().data(),
                                          node.grad.data() + b * cout * pixels,
                                          g.data() + b * cin * pixels);
                      if (auto g = weight.grad_sink(); !g.empty())
                        for (std::size_t b = 0; b < batch; ++b)
                          detail::gemm_nt(cin, cout, pixels, x.data().data() + b * cin * pixels,
                                          node.grad.data() + b * cout * pixels, g.data());
                    });
}

// ------------------------------------------------------------ convolution

struct Conv2dGeometry {
  std::size_t batch, cin, height, width, cout, kernel, stride, pad, out_h, out_w;

  std::size_t patch() const { return cin * kernel * kernel; }
  std::size_t out_pixels() const { return out_h * out_w; }
  bool pointwise() const { return kernel == 1 && stride == 1 && pad == 0; }
};

namespace detail {

template <typename T>
void im2col(const Conv2dGeometry& g, const T* x, T* cols) {
  const std::size_t n = g.out_pixels();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t kh = 0; kh < g.kernel; ++kh)
      for (std::size_t kw = 0; kw < g.kernel; ++kw) {
        T* row = cols + ((c * g.kernel + kh) * g.kernel + kw) * n;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = ih >= 0 && iw >= 0 && ih < static_cast<std::ptrdiff_t>(g.height) &&
                                iw < static_cast<std::ptrdiff_t>(g.width);
            row[oh * g.out_w + ow] =
                inside ? x[(c * g.height + static_cast<std::size_t>(ih)) * g.width + static_cast<std::size_t>(iw)]
                       : T{0};
          }
        }
      }
}

template <typename T>
void col2im(const Conv2dGeometry& g, const T* cols, T* x) {
  const std::size_t n = g.out_pixels();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t kh = 0; kh < g.kernel; ++kh)
      for (std::size_t kw = 0; kw < g.kernel; ++kw) {
        const T* row = cols + ((c * g.kernel + kh) * g.kernel + kw) * n;
        for (std::size_t oh = 0; oh < g.out_h; ++oh) {
          const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride + kh) - static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ow = 0; ow < g.out_w; ++ow) {
            const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride + kw) - static_cast<std::ptrdiff_t>(g.pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
            x[(c * g.height + static_cast<std::size_t>(ih)) * g.width + static_cast<std::size_t>(iw)] +=
                row[oh * g.out_w + ow];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation (no kernel flip) with zero padding.
/// input [B x C_in x H x W], weight [C_out x C_in x k x k].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, std::size_t stride, std::size_t pad) {
  detail::require_rank(input, 4, "conv2d");
  detail::require_rank(weight, 4, "conv2d");
  if (weight.size(2) != weight.size(3)) throw ShapeError("conv2d: kernel must be square");
  if (input.size(1) != weight.size(1)) {
    throw ShapeError("conv2d: input has " + std::to_string(input.size(1)) +
                     " channels, kernel expects " + std::to_string(weight.size(1)));
  }
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  Conv2dGeometry g{input.size(0), input.size(1), input.size(2), input.size(3), weight.size(0),
                   weight.size(2), stride, pad, 0, 0};
  if (g.height + 2 * pad < g.kernel || g.width + 2 * pad < g.kernel)
    throw ShapeError("conv2d: kernel larger than padded input");
  g.out_h = (g.height + 2 * pad - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kernel) / stride + 1;

  const std::size_t in_plane = g.cin * g.height * g.width;
  const std::size_t out_plane = g.cout * g.out_pixels();
  std::vector<T> out(g.batch * out_plane, T{0});
  std::vector<T> cols(g.pointwise() ? 0 : g.patch() * g.out_pixels());
  for (std::size_t b = 0; b < g.batch; ++b) {
    const T* src = input.data().data() + b * in_plane;
    if (!g.pointwise()) {
      detail::im2col(g, src, cols.data());
      src = cols.data();
    }
    detail::gemm_nn(g.cout, g.out_pixels(), g.patch(), weight.data().data(), src,
                    out.data() + b * out_plane);
  }
  return make_op<T>(
      "conv2d", Shape{g.batch, g.cout, g.out_h, g.out_w}, std::move(out), {input, weight},
      [input, weight, g, in_plane, out_plane](const auto& node) {
        auto gx = input.grad_sink();
        auto gw = weight.grad_sink();
        std::vector<T> cols(g.pointwise() ? 0 : g.patch() * g.out_pixels());
        std::vector<T> dcols(gx.empty() || g.pointwise() ? 0 : g.patch() * g.out_pixels());
        for (std::size_t b = 0; b < g.batch; ++b) {
          const T* dy = node.grad.data() + b * out_plane;
          if (!gw.empty()) {
            const T* src = input.data().data() + b * in_plane;
            if (!g.pointwise()) {
              detail::im2col(g, src, cols.data());
              src = cols.data();
            }
            detail::gemm_nt(g.cout, g.patch(), g.out_pixels(), dy, src, gw.data());
          }
          if (!gx.empty()) {
            if (g.pointwise()) {
              detail::gemm_tn(g.patch(), g.out_pixels(), g.cout, weight.data().data(), dy,
                              gx.data() + b * in_plane);
            } else {
              std::fill(dcols.begin(), dcols.end(), T{0});
              detail::gemm_tn(g.patch(), g.out_pixels(), g.cout, weight.data().data(), dy, dcols.data());
              detail::col2im(g, dcols.data(), gx.data() + b * in_plane);
            }
          }
        }
      });
}

/// Non-overlapping average pooling with a square window (kernel == stride).
template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t window) {
  detail::require_rank(x, 4, "avg_pool2d");
  const std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (window == 0 || H % window != 0 || W % window != 0) {
    throw ShapeError("avg_pool2d: spatial size " + shape_str(x.shape()) +
                     " not divisible by window " + std::to_string(window));
  }
  const std::size_t oh = H / window, ow = W / window;
  const T inv = T{1} / static_cast<T>(window * window);
  std::vector<T> out(B * C * oh * ow, T{0});
  auto v = x.data();
  for (std::size_t bc = 0; bc < B * C; ++bc)
    for (std::size_t i = 0; i < H; ++i)
      for (std::size_t j = 0; j < W; ++j)
        out[(bc * oh + i / window) * ow + j / window] += v[(bc * H + i) * W + j] * inv;
  return make_op<T>("avg_pool2d", Shape{B, C, oh, ow}, std::move(out), {x},
                    [x, B, C, H, W, oh, ow, window, inv](const auto& node) {
                      if (auto g = x.grad_sink(); !g.empty())
                        for (std::size_t bc = 0; bc < B * C; ++bc)
                          for (std::size_t i = 0; i < H; ++i)
                            for (std::size_t j = 0; j < W; ++j)
                              g[(bc * H + i) * W + j] += node.grad[(bc * oh + i / window) * ow + j / window] * inv;
                    });
}

/// [B x C x H x W] -> [B x C]
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  detail::require_rank(x, 4, "global_avg_pool");
  const std::size_t B = x.size(0), C = x.size(1), P = x.size(2) * x.size(3);
  const T inv = T{1} / static_cast<T>(P);
  std::vector<T> out(B * C, T{0});
  auto v = x.data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    T acc{0};
    for (std::size_t p = 0; p < P; ++p) acc += v[bc * P + p];
    out[bc] = acc * inv;
  }
  return make_op<T>("global_avg_pool", Shape{B, C}, std::move(out), {x}, [x, B, C, P, inv](const auto& node) {
    if (auto g = x.grad_sink(); !g.empty())
      for (std::size_t bc = 0; bc < B * C; ++bc)
        for (std::size_t p = 0; p < P; ++p) g[bc * P + p] += node.grad[bc] * inv;
  });
}

// --------------------------------------------------------------- batch norm

/// Running statistics of a batch-norm layer (not trainable).
template <typename T>
struct BatchNormStats {
  std::vector<T> running_mean;
  std::vector<T> running_var;

  BatchNormStats() = default;
  explicit BatchNormStats(std::size_t channels)
      : running_mean(channels, T{0}), running_var(channels, T{1}) {}
};

struct BatchNormOptions {
  double momentum = 0.1;
  double eps = 1e-5;
};

/// Batch normalization over (B, H, W) per channel of a [B x C x H x W]
/// tensor. Training mode normalizes with batch statistics and updates the
/// running estimates; evaluation mode uses the running estimates.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormStats<T>& stats, bool training, BatchNormOptions opt = {}) {
  detail::require_rank(x, 4, "batch_norm");
  const std::size_t B = x.size(0), C = x.size(1), P = x.size(2) * x.size(3);
  if (gamma.numel() != C || beta.numel() != C || stats.running_mean.size() != C) {
    throw ShapeError("batch_norm: parameter length does not match " + std::to_string(C) + " channels");
  }
  const std::size_t count = B * P;
  if (training && count < 2) throw ContractError("batch_norm: training needs more than one value per channel");
  auto v = x.data();
  std::vector<T> mean_c(C), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    T mu, var;
    if (training) {
      double acc = 0, acc2 = 0;
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < P; ++p) acc += v[(b * C + c) * P + p];
      const double m = acc / static_cast<double>(count);
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t p = 0; p < P; ++p) {
          const double d = v[(b * C + c) * P + p] - m;
          acc2 += d * d;
        }
      mu = static_cast<T>(m);
      var = static_cast<T>(acc2 / static_cast<double>(count));
      const T unbiased = static_cast<T>(acc2 / static_cast<double>(count - 1));
      const T mom = static_cast<T>(opt.momentum);
      stats.running_mean[c] = (T{1} - mom) * stats.running_mean[c] + mom * mu;
      stats.running_var[c] = (T{1} - mom) * stats.running_var[c] + mom * unbiased;
    } else {
      mu = stats.running_mean[c];
      var = stats.running_var[c];
    }
    mean_c[c] = mu;
    inv_std[c] = T{1} / std::sqrt(var + static_cast<T>(opt.eps));
  }
  std::vector<T> xhat(x.numel()), out(x.numel());
  auto gv = gamma.data(), bv = beta.data();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < P; ++p) {
        const std::size_t i = (b * C + c) * P + p;
        xhat[i] = (v[i] - mean_c[c]) * inv_std[c];
        out[i] = gv[c] * xhat[i] + bv[c];
      }
  return make_op<T>(
      "batch_norm", x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, training, B, C, P, count, inv_std, xhat = std::move(xhat)](const auto& node) {
        const auto& dy = node.grad;
        auto gg = gamma.grad_sink(), gb = beta.grad_sink(), gx = x.grad_sink();
        auto gv = gamma.data();
        for (std::size_t c = 0; c < C; ++c) {
          T sum_dy{0}, sum_dy_xhat{0};
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t p = 0; p < P; ++p) {
              const std::size_t i = (b * C + c) * P + p;
              sum_dy += dy[i];
              sum_dy_xhat += dy[i] * xhat[i];
            }
          if (!gg.empty()) gg[c] += sum_dy_xhat;
          if (!gb.empty()) gb[c] += sum_dy;
          if (gx.empty()) continue;
          const T scale_c = gv[c] * inv_std[c];
          if (training) {
            const T n = static_cast<T>(count);
            const T mdy = sum_dy / n, mdyx = sum_dy_xhat / n;
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t p = 0; p < P; ++p) {
                const std::size_t i = (b * C + c) * P + p;
                gx[i] += scale_c * (dy[i] - mdy - xhat[i] * mdyx);
              }
          } else {
            for (std::size_t b = 0; b < B; ++b)
              for (std::size_t p = 0; p < P; ++p) {
                const std::size_t i = (b * C + c) * P + p;
                gx[i] += scale_c * dy[i];
              }
          }
        }
      });
}

// ------------------------------------------------------------------ softmax

namespace detail {

template <typename T>
void check_finite(std::span<const T> values, const char* op) {
  for (auto v : values)
    if (!std::isfinite(v)) throw NumericError(std::string(op) + ": non-finite input");
}

}  // namespace detail

/// Numerically stable softmax along `axis` (max-subtracted).
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  detail::check_finite(x.data(), "softmax");
  auto v = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t e) { return (o * s.extent + e) * s.inner + i; };
      T mx = v[at(0)];
      for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, v[at(e)]);
      T total{0};
      for (std::size_t e = 0; e < s.extent; ++e) total += (out[at(e)] = std::exp(v[at(e)] - mx));
      for (std::size_t e = 0; e < s.extent; ++e) out[at(e)] /= total;
    }
  return make_op<T>("softmax", x.shape(), std::move(out), {x}, [x, s](const auto& node) {
    auto g = x.grad_sink();
    if (g.empty()) return;
    const auto& y = node.data;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t e) { return (o * s.extent + e) * s.inner + i; };
        T dot{0};
        for (std::size_t e = 0; e < s.extent; ++e) dot += node.grad[at(e)] * y[at(e)];
        for (std::size_t e = 0; e < s.extent; ++e) g[at(e)] += y[at(e)] * (node.grad[at(e)] - dot);
      }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  detail::check_finite(x.data(), "log_softmax");
  auto v = x.data();
  std::vector<T> out(x.numel());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      auto at = [&](std::size_t e) { return (o * s.extent + e) * s.inner + i; };
      T mx = v[at(0)];
      for (std::size_t e = 1; e < s.extent; ++e) mx = std::max(mx, v[at(e)]);
      T total{0};
      for (std::size_t e = 0; e < s.extent; ++e) total += std::exp(v[at(e)] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t e = 0; e < s.extent; ++e) out[at(e)] = v[at(e)] - lse;
    }
  return make_op<T>("log_softmax", x.shape(), std::move(out), {x}, [x, s](const auto& node) {
    auto g = x.grad_sink();
    if (g.empty()) return;
    const auto& y = node.data;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        auto at = [&](std::size_t e) { return (o * s.extent + e) * s.inner + i; };
        T total{0};
        for (std::size_t e = 0; e < s.extent; ++e) total += node.grad[at(e)];
        for (std::size_t e = 0; e < s.extent; ++e) g[at(e)] += node.grad[at(e)] - std::exp(y[at(e)]) * total;
      }
  });
}

/// Mean negative log-likelihood of integer labels under row-wise softmax.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  return scale(mean(pick(log_softmax(logits, 1), labels)), T{-1});
}

}  // namespace sdist
