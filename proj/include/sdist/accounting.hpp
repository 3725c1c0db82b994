#pragma once

// Parameter and FLOP accounting.
//
// FLOPs count two operations per multiply-accumulate of one forward pass:
//   k x k conv:      2 k^2 C_in C_out H_out W_out
//   self-attention:  2 * 3 C_in C_out H W              (q, k, v projections)
//                  + 3 * 2 k^2 C_out H W               (content logits, position logits, value aggregation)
//   classifier:      2 C_in C_out
// Normalisation, activations, pooling and residual additions are not
// counted. Attention that downsamples is evaluated at its input resolution.

#include <cstdint>

#include "sdist/model.hpp"
#include "sdist/sparse.hpp"

namespace sdist {

struct ParamCount {
  std::size_t total = 0;
  std::size_t nonzero = 0;
};

/// total = every trainable scalar; nonzero = total minus masked-off scalars.
template <typename T>
ParamCount count_params(const Model<T>& model, const SparseState* masks = nullptr) {
  ParamCount out;
  out.total = model.total_params();
  out.nonzero = out.total;
  if (masks) {
    check_mask_coverage(model, *masks);
    for (const auto& l : masks->layers) out.nonzero -= l.size() - l.active();
  }
  return out;
}

inline std::uint64_t layer_flops(const LayerInfo& layer) {
  const std::uint64_t cin = layer.c_in, cout = layer.c_out, k = layer.kernel;
  switch (layer.kind) {
    case LayerKind::conv_spatial:
    case LayerKind::conv_pointwise:
      return 2 * k * k * cin * cout * layer.out_size * layer.out_size;
    case LayerKind::attention: {
      const std::uint64_t pixels = std::uint64_t{layer.in_size} * layer.in_size;
      return 2 * 3 * cin * cout * pixels + 3 * (2 * k * k * cout * pixels);
    }
    case LayerKind::classifier:
      return 2 * cin * cout;
  }
  return 0;
}

template <typename T>
std::uint64_t count_flops(const Model<T>& model) {
  std::uint64_t total = 0;
  for (const auto& layer : model.layers()) total += layer_flops(layer);
  return total;
}

}  // namespace sdist
