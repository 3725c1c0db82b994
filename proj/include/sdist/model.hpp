#pragma once

// Bottleneck ResNets for 32x32 inputs: the convolutional teacher and the
// self-attention students.
//
// Every block is 1x1 reduce -> spatial -> 1x1 expand with batch norm and a
// projection shortcut on the first block of each stage. The spatial layer is
// a k x k convolution (conv variant) or local self-attention (hybrid and
// homogeneous variants). Hybrid keeps a convolutional stem; homogeneous uses
// attention in the stem too. Activations are tapped after every block's
// final ReLU.

#include <nlohmann/json.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "sdist/attention.hpp"
#include "sdist/ops.hpp"
#include "sdist/random.hpp"

namespace sdist {

enum class Role { teacher, student };
enum class Variant { conv, hybrid, homogeneous };
enum class DepthClass { toy, student26, student38, teacher50 };

NLOHMANN_JSON_SERIALIZE_ENUM(Role, {{Role::teacher, "teacher"}, {Role::student, "student"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Variant, {{Variant::conv, "conv"},
                                       {Variant::hybrid, "hybrid"},
                                       {Variant::homogeneous, "homogeneous"}})
NLOHMANN_JSON_SERIALIZE_ENUM(DepthClass, {{DepthClass::toy, "toy"},
                                          {DepthClass::student26, "student-26"},
                                          {DepthClass::student38, "student-38"},
                                          {DepthClass::teacher50, "teacher-50"}})

struct ModelSpec {
  Role role = Role::student;
  Variant variant = Variant::hybrid;
  DepthClass depth = DepthClass::toy;
  std::size_t stem_width = 16;
  std::vector<std::size_t> widths{16, 32, 64};  // bottleneck width per stage
  std::vector<std::size_t> blocks{1, 1, 1};
  std::size_t expansion = 2;
  std::size_t extent = 3;
  std::size_t heads = 8;
  std::size_t classes = 10;
  std::size_t input_size = 32;
  bool sqrt_position_scale = false;

  /// Architecture presets. `toy` is small enough to train on one CPU core;
  /// the others follow the published ResNet-26/38/50 bottleneck layouts
  /// adapted to 32x32 inputs (3x3 stride-1 stem, no max-pool).
  static ModelSpec preset(Role role, Variant variant, DepthClass depth, std::size_t classes = 10) {
    ModelSpec s;
    s.role = role;
    s.variant = variant;
    s.depth = depth;
    s.classes = classes;
    switch (depth) {
      case DepthClass::toy:
        break;
      case DepthClass::student26:
      case DepthClass::student38:
      case DepthClass::teacher50:
        s.stem_width = 64;
        s.widths = {64, 128, 256, 512};
        s.expansion = 4;
        s.blocks = depth == DepthClass::student26   ? std::vector<std::size_t>{1, 2, 4, 1}
                   : depth == DepthClass::student38 ? std::vector<std::size_t>{2, 3, 5, 2}
                                                    : std::vector<std::size_t>{3, 4, 6, 3};
        break;
    }
    return s;
  }

  bool stem_is_attention() const { return variant == Variant::homogeneous; }
  bool blocks_use_attention() const { return variant != Variant::conv; }
  std::size_t block_count() const {
    std::size_t n = 0;
    for (auto b : blocks) n += b;
    return n;
  }

  void validate() const {
    if (role == Role::teacher && variant != Variant::conv)
      throw ConfigError("model: the teacher must be the convolutional variant");
    if (widths.empty() || widths.size() != blocks.size())
      throw ConfigError("model: widths and blocks must list the same non-zero number of stages");
    for (auto b : blocks)
      if (b == 0) throw ConfigError("model: every stage needs at least one block");
    for (auto w : widths)
      if (w == 0) throw ConfigError("model: stage widths must be positive");
    if (stem_width == 0 || expansion == 0) throw ConfigError("model: stem width and expansion must be positive");
    if (classes < 2) throw ConfigError("model: need at least two classes");
    if (extent == 0 || extent % 2 == 0) throw ConfigError("model: extent must be odd");
    if (heads == 0) throw ConfigError("model: heads must be positive");
    if (input_size % (std::size_t{1} << (widths.size() - 1)) != 0)
      throw ConfigError("model: input size not divisible by the downsampling factor");
    if (blocks_use_attention()) {
      for (auto w : widths)
        if (w % heads != 0)
          throw ConfigError("model: " + std::to_string(heads) + " heads do not divide stage width " +
                            std::to_string(w));
    }
    if (stem_is_attention() && stem_width % heads != 0)
      throw ConfigError("model: " + std::to_string(heads) + " heads do not divide stem width " +
                        std::to_string(stem_width));
  }
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"role", s.role},          {"variant", s.variant},
                     {"depth", s.depth},        {"stem_width", s.stem_width},
                     {"widths", s.widths},      {"blocks", s.blocks},
                     {"expansion", s.expansion}, {"extent", s.extent},
                     {"heads", s.heads},        {"classes", s.classes},
                     {"input_size", s.input_size}, {"sqrt_position_scale", s.sqrt_position_scale}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  j.at("role").get_to(s.role);
  j.at("variant").get_to(s.variant);
  j.at("depth").get_to(s.depth);
  j.at("stem_width").get_to(s.stem_width);
  j.at("widths").get_to(s.widths);
  j.at("blocks").get_to(s.blocks);
  j.at("expansion").get_to(s.expansion);
  j.at("extent").get_to(s.extent);
  j.at("heads").get_to(s.heads);
  j.at("classes").get_to(s.classes);
  j.at("input_size").get_to(s.input_size);
  j.at("sqrt_position_scale").get_to(s.sqrt_position_scale);
}

// --------------------------------------------------------------- parameters

enum class ParamKind {
  conv_kernel,
  attention_projection,
  position_table,
  norm_scale,
  norm_shift,
  classifier_weight,
  classifier_bias,
};

/// Maps a weight tensor onto its 2-D (C_out rows) x (C_in*k*k columns)
/// matrix view used by column pruning.
struct ColumnLayout {
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool row_major = true;  // conv kernels: flat = row*cols + col; [C_in x C_out] projections: col*rows + row

  std::size_t flat(std::size_t row, std::size_t col) const {
    return row_major ? row * cols + col : col * rows + row;
  }
};

template <typename T>
struct Parameter {
  std::string name;
  ParamKind kind;
  Tensor<T> value;
  ColumnLayout columns;
  bool stem = false;

  bool weight_matrix() const {
    return kind == ParamKind::conv_kernel || kind == ParamKind::attention_projection;
  }
};

enum class LayerKind { conv_spatial, conv_pointwise, attention, classifier };

/// Static description of one compute layer, used for structural checks and
/// FLOP accounting.
struct LayerInfo {
  std::string name;
  LayerKind kind;
  std::size_t c_in, c_out, kernel, stride;
  std::size_t in_size;   // input height (== width)
  std::size_t out_size;  // output height
};

template <typename T>
struct Tap {
  std::string layer;
  std::size_t stage;
  std::size_t block;
  Tensor<T> activation;  // [B x C x H x W]
};

template <typename T>
struct TapSet {
  std::vector<Tap<T>> taps;
  std::size_t size() const { return taps.size(); }
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // [B x classes]
  TapSet<T> taps;
};

enum class Mode { train, eval };

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

template <typename T>
class Model {
 public:
  Model(const ModelSpec& spec, Rng& rng) : spec_(spec) {
    spec_.validate();
    build(rng);
  }

  const ModelSpec& spec() const { return spec_; }
  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }
  const std::vector<LayerInfo>& layers() const { return layers_; }

  std::optional<std::size_t> find_param(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i)
      if (params_[i].name == name) return i;
    return std::nullopt;
  }

  std::size_t total_params() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.numel();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.value.clear_grad();
  }

  /// Deep copy; copying a Model directly shares the parameter tensors.
  Model clone() const {
    Rng rng(0);
    Model copy(spec_, rng);
    copy.load_state(state());
    return copy;
  }

  ForwardResult<T> forward(const Tensor<T>& input, Mode mode) {
    detail::require_rank(input, 4, "model forward");
    if (input.size(1) != 3 || input.size(2) != spec_.input_size || input.size(3) != spec_.input_size) {
      throw ShapeError("model forward: expected [B x 3 x " + std::to_string(spec_.input_size) + " x " +
                       std::to_string(spec_.input_size) + "], got " + shape_str(input.shape()));
    }
    const bool training = mode == Mode::train;
    ForwardResult<T> out;
    auto x = relu(norm(stem_norm_, apply(stem_, input), training));
    for (auto& block : blocks_) {
      auto h = relu(norm(block.n1, apply(block.reduce, x), training));
      h = relu(norm(block.n2, apply(block.spatial, h), training));
      h = norm(block.n3, apply(block.expand, h), training);
      auto shortcut = block.proj ? norm(*block.nproj, apply(*block.proj, x), training) : x;
      x = relu(add(h, shortcut));
      out.taps.taps.push_back({block.name, block.stage, block.index, x});
    }
    auto pooled = global_avg_pool(x);
    out.logits = add_bias(matmul(pooled, params_[fc_weight_].value), params_[fc_bias_].value);
    return out;
  }

  /// Parameters and batch-norm running statistics as float arrays.
  std::vector<NamedArray> state() const {
    std::vector<NamedArray> out;
    for (const auto& p : params_) {
      out.push_back({p.name, p.value.shape(), {p.value.data().begin(), p.value.data().end()}});
    }
    for (const auto* n : norms()) {
      out.push_back({n->name + ".running_mean", {n->stats.running_mean.size()},
                     {n->stats.running_mean.begin(), n->stats.running_mean.end()}});
      out.push_back({n->name + ".running_var", {n->stats.running_var.size()},
                     {n->stats.running_var.begin(), n->stats.running_var.end()}});
    }
    return out;
  }

  /// Loads values written by state(); names and shapes must match exactly.
  void load_state(const std::vector<NamedArray>& arrays) {
    auto find = [&](const std::string& name) -> const NamedArray& {
      for (const auto& a : arrays)
        if (a.name == name) return a;
      throw FormatError("checkpoint is missing array '" + name + "'");
    };
    for (auto& p : params_) {
      const auto& a = find(p.name);
      if (a.shape != p.value.shape())
        throw FormatError("array '" + p.name + "' has shape " + shape_str(a.shape) + ", expected " +
                          shape_str(p.value.shape()));
      auto dst = p.value.mutable_data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(a.values[i]);
    }
    for (auto* n : norms()) {
      for (auto [suffix, buf] : {std::pair{".running_mean", &n->stats.running_mean},
                                 std::pair{".running_var", &n->stats.running_var}}) {
        const auto& a = find(n->name + suffix);
        if (a.values.size() != buf->size()) throw FormatError("array '" + a.name + "' has wrong length");
        for (std::size_t i = 0; i < buf->size(); ++i) (*buf)[i] = static_cast<T>(a.values[i]);
      }
    }
  }

 private:
  struct ConvRef {
    std::size_t param;
    std::size_t kernel, stride;
  };
  struct AttnRef {
    std::size_t q, k, v, rel;
    AttentionConfig config;
  };
  using Spatial = std::variant<ConvRef, AttnRef>;
  struct NormRef {
    std::string name;
    std::size_t gamma, beta;
    BatchNormStats<T> stats;
  };
  struct Block {
    std::string name;
    std::size_t stage, index;
    ConvRef reduce;
    NormRef n1;
    Spatial spatial;
    NormRef n2;
    ConvRef expand;
    NormRef n3;
    std::optional<ConvRef> proj;
    std::optional<NormRef> nproj;
  };

  Tensor<T> apply(const Spatial& layer, const Tensor<T>& x) const {
    if (const auto* c = std::get_if<ConvRef>(&layer)) return apply(*c, x);
    const auto& a = std::get<AttnRef>(layer);
    AttentionLayerParams<T> p{a.config, params_[a.q].value, params_[a.k].value, params_[a.v].value,
                              params_[a.rel].value};
    return local_self_attention(x, p);
  }

  Tensor<T> apply(const ConvRef& c, const Tensor<T>& x) const {
    return conv2d(x, params_[c.param].value, c.stride, c.kernel / 2);
  }

  Tensor<T> norm(NormRef& n, const Tensor<T>& x, bool training) {
    return batch_norm(x, params_[n.gamma].value, params_[n.beta].value, n.stats, training);
  }

  std::vector<NormRef*> norms() {
    std::vector<NormRef*> out{&stem_norm_};
    for (auto& b : blocks_) {
      out.insert(out.end(), {&b.n1, &b.n2, &b.n3});
      if (b.nproj) out.push_back(&*b.nproj);
    }
    return out;
  }
  std::vector<const NormRef*> norms() const {
    std::vector<const NormRef*> out;
    for (auto* n : const_cast<Model*>(this)->norms()) out.push_back(n);
    return out;
  }

  std::size_t add_param(std::string name, ParamKind kind, Tensor<T> value, ColumnLayout layout = {}) {
    value.set_requires_grad(true);
    params_.push_back({std::move(name), kind, std::move(value), layout, building_stem_});
    return params_.size() - 1;
  }

  ConvRef make_conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
                    std::size_t stride, std::size_t in_size, Rng& rng) {
    const std::size_t fan_in = cin * k * k;
    auto w = Tensor<T>(Shape{cout, cin, k, k},
                       normal_values<T>(rng, cout * fan_in, 0.0, std::sqrt(2.0 / static_cast<double>(fan_in))));
    auto idx = add_param(name + ".weight", ParamKind::conv_kernel, std::move(w), ColumnLayout{cout, fan_in, true});
    const std::size_t out_size = (in_size + 2 * (k / 2) - k) / stride + 1;
    layers_.push_back({name, k > 1 ? LayerKind::conv_spatial : LayerKind::conv_pointwise, cin, cout, k, stride,
                       in_size, out_size});
    return {idx, k, stride};
  }

  AttnRef make_attention(const std::string& name, std::size_t cin, std::size_t cout, std::size_t stride,
                         std::size_t in_size, Rng& rng) {
    AttentionConfig cfg{cin, cout, spec_.heads, spec_.extent, stride, spec_.sqrt_position_scale};
    auto p = init_attention<T>(cfg, rng);
    const ColumnLayout proj_layout{cout, cin, false};
    AttnRef ref{add_param(name + ".w_q", ParamKind::attention_projection, p.w_q, proj_layout),
                add_param(name + ".w_k", ParamKind::attention_projection, p.w_k, proj_layout),
                add_param(name + ".w_v", ParamKind::attention_projection, p.w_v, proj_layout),
                add_param(name + ".rel_pos", ParamKind::position_table, p.rel_pos), cfg};
    layers_.push_back({name, LayerKind::attention, cin, cout, spec_.extent, stride, in_size, in_size / stride});
    return ref;
  }

  NormRef make_norm(const std::string& name, std::size_t channels) {
    NormRef n{name, 0, 0, BatchNormStats<T>(channels)};
    n.gamma = add_param(name + ".gamma", ParamKind::norm_scale, Tensor<T>::full({channels}, T{1}));
    n.beta = add_param(name + ".beta", ParamKind::norm_shift, Tensor<T>(Shape{channels}));
    return n;
  }

  void build(Rng& rng) {
    std::size_t size = spec_.input_size;
    building_stem_ = true;
    if (spec_.stem_is_attention())
      stem_ = make_attention("stem.attn", 3, spec_.stem_width, 1, size, rng);
    else
      stem_ = make_conv("stem.conv", 3, spec_.stem_width, 3, 1, size, rng);
    stem_norm_ = make_norm("stem.bn", spec_.stem_width);
    building_stem_ = false;

    std::size_t cin = spec_.stem_width;
    for (std::size_t s = 0; s < spec_.widths.size(); ++s) {
      const std::size_t mid = spec_.widths[s], cout = mid * spec_.expansion;
      for (std::size_t b = 0; b < spec_.blocks[s]; ++b) {
        const std::size_t stride = (s > 0 && b == 0) ? 2 : 1;
        const std::string name = "stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
        Block blk{name, s, b, {}, {}, {}, {}, {}, {}, std::nullopt, std::nullopt};
        blk.reduce = make_conv(name + ".reduce", cin, mid, 1, 1, size, rng);
        blk.n1 = make_norm(name + ".bn1", mid);
        if (spec_.blocks_use_attention())
          blk.spatial = make_attention(name + ".attn", mid, mid, stride, size, rng);
        else
          blk.spatial = make_conv(name + ".conv", mid, mid, 3, stride, size, rng);
        blk.n2 = make_norm(name + ".bn2", mid);
        const std::size_t out_size = size / stride;
        blk.expand = make_conv(name + ".expand", mid, cout, 1, 1, out_size, rng);
        blk.n3 = make_norm(name + ".bn3", cout);
        if (b == 0 && (stride != 1 || cin != cout)) {
          blk.proj = make_conv(name + ".shortcut", cin, cout, 1, stride, size, rng);
          blk.nproj = make_norm(name + ".bn_shortcut", cout);
        }
        blocks_.push_back(std::move(blk));
        cin = cout;
        size = out_size;
      }
    }
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin));
    fc_weight_ = add_param("fc.weight", ParamKind::classifier_weight,
                           Tensor<T>(Shape{cin, spec_.classes},
                                     uniform_values<T>(rng, cin * spec_.classes, -bound, bound)));
    fc_bias_ = add_param("fc.bias", ParamKind::classifier_bias, Tensor<T>(Shape{spec_.classes}));
    layers_.push_back({"fc", LayerKind::classifier, cin, spec_.classes, 1, 1, 1, 1});
  }

  ModelSpec spec_;
  std::vector<Parameter<T>> params_;
  std::vector<LayerInfo> layers_;
  Spatial stem_;
  NormRef stem_norm_;
  std::vector<Block> blocks_;
  std::size_t fc_weight_ = 0, fc_bias_ = 0;
  bool building_stem_ = false;
};

template <typename T>
Model<T> build_model(const ModelSpec& spec, Rng& rng) {
  return Model<T>(spec, rng);
}

/// Runs the model and returns logits with one tap per residual block.
template <typename T>
ForwardResult<T> forward_with_taps(Model<T>& model, const Tensor<T>& batch, Mode mode) {
  return model.forward(batch, mode);
}

/// Pairs student and teacher taps. With identical per-stage block counts
/// every block is paired; otherwise the last block of each stage is.
template <typename T>
std::vector<std::pair<std::size_t, std::size_t>> pair_taps(const TapSet<T>& student, const TapSet<T>& teacher) {
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  auto stage_ends = [](const TapSet<T>& set) {
    std::vector<std::size_t> ends;
    for (std::size_t i = 0; i < set.taps.size(); ++i)
      if (i + 1 == set.taps.size() || set.taps[i + 1].stage != set.taps[i].stage) ends.push_back(i);
    return ends;
  };
  auto s_ends = stage_ends(student), t_ends = stage_ends(teacher);
  if (s_ends.size() != t_ends.size())
    throw ConfigError("tap pairing: student has " + std::to_string(s_ends.size()) + " stages, teacher has " +
                      std::to_string(t_ends.size()));
  bool same_layout = student.taps.size() == teacher.taps.size();
  for (std::size_t i = 0; same_layout && i < student.taps.size(); ++i)
    same_layout = student.taps[i].stage == teacher.taps[i].stage;
  if (same_layout) {
    for (std::size_t i = 0; i < student.taps.size(); ++i) pairs.emplace_back(i, i);
  } else {
    for (std::size_t i = 0; i < s_ends.size(); ++i) pairs.emplace_back(s_ends[i], t_ends[i]);
  }
  for (auto [s, t] : pairs) {
    const auto& a = student.taps[s].activation.shape();
    const auto& b = teacher.taps[t].activation.shape();
    if (a.size() != 4 || b.size() != 4 || a[0] != b[0] || a[2] != b[2] || a[3] != b[3])
      throw ConfigError("tap pairing: incompatible activations " + shape_str(a) + " and " + shape_str(b));
  }
  return pairs;
}

}  // namespace sdist
