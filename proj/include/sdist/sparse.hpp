#pragma once

// Mask engine for single-pass sparse training.
//
// A random mask at the target density is drawn once. During each epoch the
// optimizer's momentum magnitude over active weights is averaged per layer.
// At the epoch boundary every layer drops a fixed fraction p_e of its
// smallest active weights (or lowest-norm columns), and the freed budget is
// handed back to layers in proportion to their normalised momentum
// contribution, reactivating the coordinates (or columns) with the largest
// momentum. The global non-zero budget is fixed for the whole run.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "sdist/model.hpp"
#include "sdist/optim.hpp"
#include "sdist/random.hpp"

namespace sdist {

enum class PruneMode { irregular, column };

NLOHMANN_JSON_SERIALIZE_ENUM(PruneMode, {{PruneMode::irregular, "irregular"}, {PruneMode::column, "column"}})

struct SparseConfig {
  double density = 0.1;
  double initial_prune_rate = 0.5;
  PruneMode mode = PruneMode::irregular;
  bool prune_stem = true;

  void validate() const {
    if (!(density > 0.0 && density <= 1.0)) throw ConfigError("sparse: density must lie in (0, 1]");
    if (!(initial_prune_rate >= 0.0 && initial_prune_rate < 1.0))
      throw ConfigError("sparse: initial prune rate must lie in [0, 1)");
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(SparseConfig, density, initial_prune_rate, mode, prune_stem)

struct LayerMask {
  std::string name;
  std::size_t param = 0;  // index into the model's parameter list
  ColumnLayout columns;
  std::vector<std::uint8_t> bits;
  double momentum_sum = 0.0;
  std::size_t momentum_batches = 0;
  double contribution = 0.0;  // normalised momentum share from the last boundary

  std::size_t size() const { return bits.size(); }
  std::size_t active() const { return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), 1)); }
  bool column_active(std::size_t col) const { return bits[columns.flat(0, col)] != 0; }
};

struct SparseState {
  SparseConfig config;
  std::vector<LayerMask> layers;
  std::size_t budget = 0;  // global non-zero target fixed at initialisation
  double prune_rate = 0.0;  // p_e used at the most recent boundary

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.size();
    return n;
  }
  std::size_t nonzero() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.active();
    return n;
  }
  double density() const { return total() ? static_cast<double>(nonzero()) / static_cast<double>(total()) : 1.0; }
};

/// Mutable view of one prunable tensor and its momentum buffer.
template <typename T>
struct PrunableTensor {
  std::string name;
  std::span<T> weights;
  std::span<T> momentum;  // may be empty when no optimizer is attached
  ColumnLayout columns;
};

struct LayerUpdate {
  std::vector<std::size_t> pruned;   // flat indices (irregular) or column ids (column mode)
  std::vector<std::size_t> regrown;
};

struct MaskUpdate {
  std::vector<LayerUpdate> layers;
};

template <typename T>
bool is_prunable(const Parameter<T>& p, const SparseConfig& cfg) {
  return p.weight_matrix() && (cfg.prune_stem || !p.stem);
}

/// Builds views over the model's prunable tensors in mask order.
template <typename T>
std::vector<PrunableTensor<T>> prunable_view(Model<T>& model, const SparseState& state,
                                             SgdMomentum<T>* optimizer = nullptr) {
  std::vector<PrunableTensor<T>> views;
  for (const auto& layer : state.layers) {
    if (layer.param >= model.params().size()) throw ContractError("mask '" + layer.name + "' has no parameter");
    auto& p = model.params()[layer.param];
    if (p.name != layer.name || p.value.numel() != layer.size())
      throw ContractError("mask '" + layer.name + "' does not match parameter '" + p.name + "'");
    views.push_back({p.name, p.value.mutable_data(),
                     optimizer ? optimizer->momentum(layer.param) : std::span<T>{}, p.columns});
  }
  return views;
}

// ------------------------------------------------------------ initialisation

struct MaskTarget {
  std::string name;
  std::size_t param;
  std::size_t size;
  ColumnLayout columns;
};

/// Independent uniform-random mask per layer at density d. Irregular mode
/// keeps round(d * size) coordinates; column mode keeps round(d * columns)
/// whole columns.
inline SparseState init_mask(const std::vector<MaskTarget>& targets, const SparseConfig& cfg, Rng& rng) {
  cfg.validate();
  SparseState state;
  state.config = cfg;
  for (const auto& t : targets) {
    LayerMask layer;
    layer.name = t.name;
    layer.param = t.param;
    layer.columns = t.columns;
    layer.bits.assign(t.size, 0);
    if (cfg.mode == PruneMode::irregular) {
      const auto keep = static_cast<std::size_t>(std::llround(cfg.density * static_cast<double>(t.size)));
      std::vector<std::size_t> order(t.size);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t i = 0; i < keep; ++i) layer.bits[order[i]] = 1;
    } else {
      if (t.columns.rows * t.columns.cols != t.size)
        throw ContractError("column layout of '" + t.name + "' does not cover the tensor");
      const auto keep = static_cast<std::size_t>(std::llround(cfg.density * static_cast<double>(t.columns.cols)));
      std::vector<std::size_t> order(t.columns.cols);
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t i = 0; i < keep; ++i)
        for (std::size_t r = 0; r < t.columns.rows; ++r) layer.bits[t.columns.flat(r, order[i])] = 1;
    }
    state.layers.push_back(std::move(layer));
  }
  state.budget = state.nonzero();
  state.prune_rate = cfg.initial_prune_rate;
  return state;
}

template <typename T>
std::vector<MaskTarget> mask_targets(const Model<T>& model, const SparseConfig& cfg) {
  std::vector<MaskTarget> targets;
  for (std::size_t i = 0; i < model.params().size(); ++i) {
    const auto& p = model.params()[i];
    if (is_prunable(p, cfg)) targets.push_back({p.name, i, p.value.numel(), p.columns});
  }
  return targets;
}

template <typename T>
SparseState init_mask(const Model<T>& model, const SparseConfig& cfg, Rng& rng) {
  return init_mask(mask_targets(model, cfg), cfg, rng);
}

/// Every prunable tensor appears in exactly one mask and no exempt tensor in any.
template <typename T>
void check_mask_coverage(const Model<T>& model, const SparseState& state) {
  auto targets = mask_targets(model, state.config);
  if (targets.size() != state.layers.size())
    throw ContractError("mask set covers " + std::to_string(state.layers.size()) + " tensors, expected " +
                        std::to_string(targets.size()));
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const auto& l = state.layers[i];
    if (l.name != targets[i].name || l.param != targets[i].param || l.size() != targets[i].size)
      throw ContractError("mask '" + l.name + "' does not match prunable tensor '" + targets[i].name + "'");
  }
}

// ------------------------------------------------------------------ masking

template <typename T>
void apply_mask(const SparseState& state, std::span<PrunableTensor<T>> views) {
  if (views.size() != state.layers.size()) throw ContractError("apply_mask: view count != mask count");
  for (std::size_t l = 0; l < views.size(); ++l) {
    const auto& bits = state.layers[l].bits;
    auto w = views[l].weights;
    if (w.size() != bits.size()) throw ContractError("apply_mask: shape mismatch for '" + views[l].name + "'");
    for (std::size_t i = 0; i < w.size(); ++i)
      if (!bits[i]) w[i] = T{0};
  }
}

template <typename T>
void apply_mask(const SparseState& state, Model<T>& model) {
  auto views = prunable_view(model, state);
  apply_mask<T>(state, views);
}

/// Per-parameter mask pointers for the optimizer (null for exempt tensors).
template <typename T>
std::vector<const std::uint8_t*> mask_table(const SparseState& state, const Model<T>& model) {
  std::vector<const std::uint8_t*> table(model.params().size(), nullptr);
  for (const auto& l : state.layers) table.at(l.param) = l.bits.data();
  return table;
}

// --------------------------------------------------------- momentum statistic

/// Adds this batch's mean |momentum| over each layer's active weights.
template <typename T>
void accumulate_momentum(SparseState& state, std::span<const PrunableTensor<T>> views) {
  if (views.size() != state.layers.size()) throw ContractError("accumulate_momentum: view count != mask count");
  for (std::size_t l = 0; l < views.size(); ++l) {
    auto& layer = state.layers[l];
    const auto m = views[l].momentum;
    if (m.size() != layer.size()) throw ContractError("accumulate_momentum: missing momentum for '" + layer.name + "'");
    double acc = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < m.size(); ++i)
      if (layer.bits[i]) {
        acc += std::abs(static_cast<double>(m[i]));
        ++n;
      }
    layer.momentum_sum += n ? acc / static_cast<double>(n) : 0.0;
    layer.momentum_batches += 1;
  }
}

/// Turns the epoch's running means into contributions summing to 1 and
/// resets the accumulators. An all-zero epoch yields a uniform split.
inline void finalize_momentum(SparseState& state) {
  double total = 0.0;
  for (auto& l : state.layers) {
    l.contribution = l.momentum_batches ? l.momentum_sum / static_cast<double>(l.momentum_batches) : 0.0;
    total += l.contribution;
  }
  for (auto& l : state.layers) {
    l.contribution = total > 0.0 ? l.contribution / total : 1.0 / static_cast<double>(state.layers.size());
    l.momentum_sum = 0.0;
    l.momentum_batches = 0;
  }
}

/// p_e = p_0 (1 - e / E)
inline double decay_prune_rate(double initial, std::size_t epoch, std::size_t total_epochs) {
  if (total_epochs == 0 || epoch >= total_epochs) throw ContractError("decay_prune_rate: need 0 <= e < E");
  return initial * (1.0 - static_cast<double>(epoch) / static_cast<double>(total_epochs));
}

// ------------------------------------------------------------ budget sharing

namespace detail {

/// Splits `amount` units across layers in proportion to `share`, capped by
/// `capacity`. Largest-remainder rounding; overflow from capped layers goes
/// to the remaining layers in descending share order. Ties break by index.
inline std::vector<std::size_t> allocate_by_share(std::size_t amount, std::vector<double> share,
                                                  const std::vector<std::size_t>& capacity) {
  const std::size_t L = share.size();
  std::vector<std::size_t> out(L, 0);
  if (L == 0 || amount == 0) return out;
  double total = std::accumulate(share.begin(), share.end(), 0.0);
  if (!(total > 0.0)) {
    std::fill(share.begin(), share.end(), 1.0);
    total = static_cast<double>(L);
  }
  std::vector<double> frac(L);
  std::size_t given = 0;
  for (std::size_t l = 0; l < L; ++l) {
    const double quota = share[l] / total * static_cast<double>(amount);
    out[l] = static_cast<std::size_t>(std::floor(quota));
    frac[l] = quota - std::floor(quota);
    given += out[l];
  }
  std::vector<std::size_t> order(L);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; given < amount && i < L; ++i, ++given) out[order[i]] += 1;
  // Cap and redistribute.
  std::size_t overflow = 0;
  for (std::size_t l = 0; l < L; ++l)
    if (out[l] > capacity[l]) {
      overflow += out[l] - capacity[l];
      out[l] = capacity[l];
    }
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return share[a] > share[b]; });
  for (auto l : order) {
    if (overflow == 0) break;
    const std::size_t take = std::min(overflow, capacity[l] - out[l]);
    out[l] += take;
    overflow -= take;
  }
  return out;
}

/// Indices of `candidates` ordered by key (ascending or descending); ties by index.
inline std::vector<std::size_t> rank(std::vector<std::size_t> candidates, const std::vector<double>& key,
                                     bool descending) {
  std::stable_sort(candidates.begin(), candidates.end(), [&](auto a, auto b) {
    return descending ? key[a] > key[b] : key[a] < key[b];
  });
  return candidates;
}

inline std::vector<double> contributions(const SparseState& state) {
  std::vector<double> mu;
  for (const auto& l : state.layers) mu.push_back(l.contribution);
  return mu;
}

}  // namespace detail

// ------------------------------------------------------------- irregular mode

/// Prunes round(p_e * active) smallest-magnitude weights per layer, then
/// regrows the freed budget at the inactive coordinates with the largest
/// momentum magnitude. Regrown weights and their momentum start at zero.
template <typename T>
MaskUpdate prune_regrow_epoch(SparseState& state, std::span<PrunableTensor<T>> views, double prune_rate) {
  if (views.size() != state.layers.size()) throw ContractError("prune_regrow_epoch: view count != mask count");
  state.prune_rate = prune_rate;
  MaskUpdate update;
  update.layers.resize(views.size());
  if (prune_rate <= 0.0) return update;

  for (std::size_t l = 0; l < views.size(); ++l) {
    auto& layer = state.layers[l];
    auto w = views[l].weights;
    if (w.size() != layer.size()) throw ContractError("prune_regrow_epoch: shape mismatch for '" + layer.name + "'");
    std::vector<std::size_t> active;
    std::vector<double> magnitude(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      magnitude[i] = std::abs(static_cast<double>(w[i]));
      if (layer.bits[i]) active.push_back(i);
    }
    const auto count = static_cast<std::size_t>(std::llround(prune_rate * static_cast<double>(active.size())));
    auto ranked = detail::rank(std::move(active), magnitude, false);
    ranked.resize(count);
    for (auto i : ranked) {
      layer.bits[i] = 0;
      w[i] = T{0};
    }
    update.layers[l].pruned = std::move(ranked);
  }

  const std::size_t nonzero = state.nonzero();
  const std::size_t regrow = state.budget > nonzero ? state.budget - nonzero : 0;
  std::vector<std::size_t> capacity;
  for (const auto& l : state.layers) capacity.push_back(l.size() - l.active());
  const auto quota = detail::allocate_by_share(regrow, detail::contributions(state), capacity);

  for (std::size_t l = 0; l < views.size(); ++l) {
    auto& layer = state.layers[l];
    auto m = views[l].momentum;
    std::vector<std::size_t> inactive;
    std::vector<double> magnitude(layer.size(), 0.0);
    for (std::size_t i = 0; i < layer.size(); ++i) {
      if (!m.empty()) magnitude[i] = std::abs(static_cast<double>(m[i]));
      if (!layer.bits[i]) inactive.push_back(i);
    }
    auto ranked = detail::rank(std::move(inactive), magnitude, true);
    ranked.resize(std::min(quota[l], ranked.size()));
    for (auto i : ranked) {
      layer.bits[i] = 1;
      views[l].weights[i] = T{0};
      if (!m.empty()) m[i] = T{0};
    }
    update.layers[l].regrown = std::move(ranked);
  }
  return update;
}

// --------------------------------------------------------------- column mode

/// Squared Frobenius norm of every column of the (rows x cols) matrix view.
template <typename T>
std::vector<double> column_scores(std::span<const T> weights, const ColumnLayout& layout) {
  std::vector<double> scores(layout.cols, 0.0);
  for (std::size_t c = 0; c < layout.cols; ++c)
    for (std::size_t r = 0; r < layout.rows; ++r) {
      const auto v = static_cast<double>(weights[layout.flat(r, c)]);
      scores[c] += v * v;
    }
  return scores;
}

/// Column scores of a [C_out x C_in x k x k] kernel, shaped [C_in x k x k].
template <typename T>
Tensor<T> column_scores(const Tensor<T>& weight) {
  detail::require_rank(weight, 4, "column_scores");
  const ColumnLayout layout{weight.size(0), weight.numel() / weight.size(0), true};
  auto s = column_scores<T>(weight.data(), layout);
  return Tensor<T>(Shape{weight.size(1), weight.size(2), weight.size(3)}, std::vector<T>(s.begin(), s.end()));
}

/// Column-granular prune and regrow. Each layer drops round(p_e * active
/// columns) lowest-score columns; the freed scalar budget is shared by
/// momentum contribution and regrown as whole inactive columns ranked by the
/// squared norm of their momentum.
template <typename T>
MaskUpdate column_prune_regrow_epoch(SparseState& state, std::span<PrunableTensor<T>> views, double prune_rate) {
  if (views.size() != state.layers.size())
    throw ContractError("column_prune_regrow_epoch: view count != mask count");
  state.prune_rate = prune_rate;
  MaskUpdate update;
  update.layers.resize(views.size());
  if (prune_rate <= 0.0) return update;
  const std::size_t L = views.size();

  auto set_column = [](LayerMask& layer, std::span<T> w, std::size_t col, std::uint8_t on) {
    for (std::size_t r = 0; r < layer.columns.rows; ++r) {
      const auto i = layer.columns.flat(r, col);
      layer.bits[i] = on;
      w[i] = T{0};
    }
  };

  for (std::size_t l = 0; l < L; ++l) {
    auto& layer = state.layers[l];
    auto w = views[l].weights;
    if (w.size() != layer.size()) throw ContractError("column_prune_regrow_epoch: shape mismatch for '" + layer.name + "'");
    const auto scores = column_scores<T>(std::span<const T>(w.data(), w.size()), layer.columns);
    std::vector<std::size_t> active;
    for (std::size_t c = 0; c < layer.columns.cols; ++c)
      if (layer.column_active(c)) active.push_back(c);
    const auto count = static_cast<std::size_t>(std::llround(prune_rate * static_cast<double>(active.size())));
    auto ranked = detail::rank(std::move(active), scores, false);
    ranked.resize(count);
    for (auto c : ranked) set_column(layer, w, c, 0);
    update.layers[l].pruned = std::move(ranked);
  }

  // Share the scalar budget in whole columns.
  const std::size_t nonzero = state.nonzero();
  long long remaining = static_cast<long long>(state.budget) - static_cast<long long>(nonzero);
  std::vector<std::size_t> capacity(L), quota(L, 0);
  for (std::size_t l = 0; l < L; ++l) {
    const auto& layer = state.layers[l];
    capacity[l] = layer.columns.cols - layer.active() / layer.columns.rows;
  }
  auto mu = detail::contributions(state);
  double mu_total = std::accumulate(mu.begin(), mu.end(), 0.0);
  if (!(mu_total > 0.0)) {
    std::fill(mu.begin(), mu.end(), 1.0);
    mu_total = static_cast<double>(L);
  }
  if (remaining > 0) {
    const auto pool = static_cast<double>(remaining);
    for (std::size_t l = 0; l < L; ++l) {
      const auto rows = static_cast<double>(state.layers[l].columns.rows);
      quota[l] = std::min(capacity[l], static_cast<std::size_t>(std::floor(mu[l] / mu_total * pool / rows)));
      remaining -= static_cast<long long>(quota[l] * state.layers[l].columns.rows);
    }
    std::vector<std::size_t> order(L);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return mu[a] > mu[b]; });
    // Whole columns that still fit, then at most one column that overshoots
    // by less than half its height.
    for (auto l : order) {
      const auto rows = static_cast<long long>(state.layers[l].columns.rows);
      while (quota[l] < capacity[l] && rows <= remaining) {
        ++quota[l];
        remaining -= rows;
      }
    }
    for (auto l : order) {
      const auto rows = static_cast<long long>(state.layers[l].columns.rows);
      if (remaining > 0 && quota[l] < capacity[l] && 2 * remaining >= rows) {
        ++quota[l];
        remaining -= rows;
        break;
      }
    }
  }

  for (std::size_t l = 0; l < L; ++l) {
    auto& layer = state.layers[l];
    auto m = views[l].momentum;
    std::vector<double> mscore(layer.columns.cols, 0.0);
    if (!m.empty()) mscore = column_scores<T>(std::span<const T>(m.data(), m.size()), layer.columns);
    std::vector<std::size_t> inactive;
    for (std::size_t c = 0; c < layer.columns.cols; ++c)
      if (!layer.column_active(c)) inactive.push_back(c);
    auto ranked = detail::rank(std::move(inactive), mscore, true);
    ranked.resize(std::min(quota[l], ranked.size()));
    for (auto c : ranked) {
      set_column(layer, views[l].weights, c, 1);
      if (!m.empty())
        for (std::size_t r = 0; r < layer.columns.rows; ++r) m[layer.columns.flat(r, c)] = T{0};
    }
    update.layers[l].regrown = std::move(ranked);
  }
  return update;
}

/// Epoch boundary: normalise momentum contributions, decay the prune rate and
/// run the mode's prune/regrow step.
template <typename T>
MaskUpdate sparse_epoch_end(SparseState& state, std::span<PrunableTensor<T>> views, std::size_t epoch,
                            std::size_t total_epochs) {
  finalize_momentum(state);
  const double rate = decay_prune_rate(state.config.initial_prune_rate, epoch, total_epochs);
  return state.config.mode == PruneMode::irregular ? prune_regrow_epoch<T>(state, views, rate)
                                                   : column_prune_regrow_epoch<T>(state, views, rate);
}

/// Maximum allowed |nonzero - round(d * total)| after initialisation or any
/// boundary: one scalar per layer in irregular mode, one column per layer in
/// column mode.
inline std::size_t budget_slack(const SparseState& state) {
  if (state.config.mode == PruneMode::irregular) return state.layers.size();
  std::size_t slack = 0;
  for (const auto& l : state.layers) slack += l.columns.rows;
  return slack;
}

inline nlohmann::json sparse_state_summary(const SparseState& state) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : state.layers)
    layers.push_back({{"name", l.name}, {"param", l.param}, {"contribution", l.contribution}});
  return {{"config", state.config}, {"budget", state.budget}, {"prune_rate", state.prune_rate}, {"layers", layers}};
}

}  // namespace sdist
