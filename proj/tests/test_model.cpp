#include <gtest/gtest.h>

#include "sdist/accounting.hpp"
#include "sdist/model.hpp"
#include "sdist/sparse.hpp"

using namespace sdist;

namespace {

Tensor<float> random_batch(Rng& rng, std::size_t b) {
  return Tensor<float>(Shape{b, 3, 32, 32}, uniform_values<float>(rng, b * 3 * 32 * 32, -1, 1));
}

std::size_t count_kind(const Model<float>& m, LayerKind kind) {
  std::size_t n = 0;
  for (const auto& l : m.layers()) n += l.kind == kind;
  return n;
}

}  // namespace

TEST(ModelZoo, ToyStudentLogitsAndTaps) {
  Rng rng(1);
  auto model = build_model<float>(ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy, 10), rng);
  auto out = forward_with_taps(model, random_batch(rng, 2), Mode::eval);
  EXPECT_EQ(out.logits.shape(), (Shape{2, 10}));
  EXPECT_EQ(out.taps.size(), model.spec().block_count());
}

TEST(ModelZoo, TapCountEqualsBlockCount) {
  Rng rng(2);
  ModelSpec spec = ModelSpec::preset(Role::student, Variant::homogeneous, DepthClass::toy, 3);
  spec.blocks = {2, 1, 3};
  auto model = build_model<float>(spec, rng);
  auto out = forward_with_taps(model, random_batch(rng, 1), Mode::eval);
  EXPECT_EQ(out.taps.size(), 6u);
  for (std::size_t i = 0; i < out.taps.size(); ++i) EXPECT_EQ(out.taps.taps[i].activation.rank(), 4u);
}

TEST(ModelZoo, TeacherAndStudentTapsMatchLayerForLayer) {
  Rng rng(3);
  auto teacher = build_model<float>(ModelSpec::preset(Role::teacher, Variant::conv, DepthClass::toy, 10), rng);
  auto student = build_model<float>(ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy, 10), rng);
  auto x = random_batch(rng, 2);
  auto t = forward_with_taps(teacher, x, Mode::eval);
  auto s = forward_with_taps(student, x, Mode::eval);
  ASSERT_EQ(t.taps.size(), s.taps.size());
  for (std::size_t i = 0; i < t.taps.size(); ++i)
    EXPECT_EQ(t.taps.taps[i].activation.shape(), s.taps.taps[i].activation.shape());
  auto pairs = pair_taps(s.taps, t.taps);
  EXPECT_EQ(pairs.size(), t.taps.size());
}

TEST(ModelZoo, StageEndPairingWhenBlockCountsDiffer) {
  Rng rng(4);
  ModelSpec ts = ModelSpec::preset(Role::teacher, Variant::conv, DepthClass::toy, 10);
  ts.blocks = {2, 2, 2};
  auto teacher = build_model<float>(ts, rng);
  auto student = build_model<float>(ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy, 10), rng);
  auto x = random_batch(rng, 1);
  auto t = forward_with_taps(teacher, x, Mode::eval);
  auto s = forward_with_taps(student, x, Mode::eval);
  auto pairs = pair_taps(s.taps, t.taps);
  ASSERT_EQ(pairs.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(pairs[i].first, i);
    EXPECT_EQ(pairs[i].second, 2 * i + 1);
    const auto& a = s.taps.taps[pairs[i].first].activation.shape();
    const auto& b = t.taps.taps[pairs[i].second].activation.shape();
    EXPECT_EQ(a[2] * a[3], b[2] * b[3]);
  }
}

TEST(ModelZoo, HybridHasOnlyStemConvolution) {
  Rng rng(5);
  auto model = build_model<float>(ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy), rng);
  EXPECT_EQ(count_kind(model, LayerKind::conv_spatial), 1u);
  EXPECT_EQ(model.layers().front().kind, LayerKind::conv_spatial);
  EXPECT_EQ(count_kind(model, LayerKind::attention), model.spec().block_count());
}

TEST(ModelZoo, HomogeneousHasNoSpatialConvolution) {
  Rng rng(6);
  auto model = build_model<float>(ModelSpec::preset(Role::student, Variant::homogeneous, DepthClass::toy), rng);
  EXPECT_EQ(count_kind(model, LayerKind::conv_spatial), 0u);
  EXPECT_EQ(count_kind(model, LayerKind::attention), model.spec().block_count() + 1);
}

TEST(ModelZoo, TeacherIsConvolutionOnly) {
  Rng rng(7);
  auto model = build_model<float>(ModelSpec::preset(Role::teacher, Variant::conv, DepthClass::toy), rng);
  EXPECT_EQ(count_kind(model, LayerKind::attention), 0u);
  EXPECT_EQ(count_kind(model, LayerKind::conv_spatial), model.spec().block_count() + 1);
}

TEST(ModelZoo, ConfigErrors) {
  Rng rng(8);
  auto s = ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy);
  s.heads = 5;
  EXPECT_THROW(build_model<float>(s, rng), ConfigError);
  auto t = ModelSpec::preset(Role::teacher, Variant::hybrid, DepthClass::toy);
  EXPECT_THROW(build_model<float>(t, rng), ConfigError);
  auto e = ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy);
  e.extent = 4;
  EXPECT_THROW(build_model<float>(e, rng), ConfigError);
}

TEST(ModelZoo, InputShapeMismatchIsShapeError) {
  Rng rng(9);
  auto model = build_model<float>(ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy), rng);
  EXPECT_THROW(forward_with_taps(model, Tensor<float>(Shape{1, 3, 16, 16}), Mode::eval), ShapeError);
  EXPECT_THROW(forward_with_taps(model, Tensor<float>(Shape{1, 1, 32, 32}), Mode::eval), ShapeError);
}

TEST(ModelZoo, ForwardIsDeterministic) {
  Rng rng(10);
  auto model = build_model<float>(ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy), rng);
  auto x = random_batch(rng, 2);
  auto a = forward_with_taps(model, x, Mode::eval);
  auto b = forward_with_taps(model, x, Mode::eval);
  for (std::size_t i = 0; i < a.taps.size(); ++i) {
    auto da = a.taps.taps[i].activation.data(), db = b.taps.taps[i].activation.data();
    EXPECT_TRUE(std::equal(da.begin(), da.end(), db.begin()));
  }
}

TEST(ModelZoo, CloneIsDeepAndStateRoundTrips) {
  Rng rng(11);
  auto model = build_model<float>(ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy), rng);
  auto copy = model.clone();
  copy.params()[0].value.mutable_data()[0] += 1.0f;
  EXPECT_NE(copy.params()[0].value.at(0), model.params()[0].value.at(0));
  auto reloaded = model.clone();
  auto x = random_batch(rng, 1);
  auto a = forward_with_taps(model, x, Mode::eval).logits;
  auto b = forward_with_taps(reloaded, x, Mode::eval).logits;
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_EQ(a.at(i), b.at(i));
}

TEST(Accounting, NoMasksMeansDense) {
  Rng rng(12);
  auto model = build_model<float>(ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy), rng);
  auto c = count_params(model);
  EXPECT_EQ(c.total, c.nonzero);
  EXPECT_EQ(c.total, model.total_params());
}

TEST(Accounting, AllZeroMasksLeaveExemptParameters) {
  Rng rng(13);
  auto model = build_model<float>(ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy), rng);
  SparseConfig cfg;
  auto masks = init_mask(model, cfg, rng);
  for (auto& l : masks.layers) std::fill(l.bits.begin(), l.bits.end(), 0);
  std::size_t exempt = 0;
  for (const auto& p : model.params())
    if (!is_prunable(p, cfg)) exempt += p.value.numel();
  EXPECT_EQ(count_params(model, &masks).nonzero, exempt);
}

TEST(Accounting, MaskCoverageAudit) {
  Rng rng(14);
  auto model = build_model<float>(ModelSpec::preset(Role::student, Variant::homogeneous, DepthClass::toy), rng);
  SparseConfig cfg;
  auto masks = init_mask(model, cfg, rng);
  EXPECT_NO_THROW(check_mask_coverage(model, masks));
  // Each prunable tensor in exactly one mask, each exempt tensor in none.
  std::vector<int> seen(model.params().size(), 0);
  for (const auto& l : masks.layers) ++seen[l.param];
  for (std::size_t i = 0; i < seen.size(); ++i)
    EXPECT_EQ(seen[i], is_prunable(model.params()[i], cfg) ? 1 : 0) << model.params()[i].name;
  auto broken = masks;
  broken.layers.pop_back();
  EXPECT_THROW(count_params(model, &broken), ContractError);
  auto resized = masks;
  resized.layers[0].bits.push_back(1);
  EXPECT_THROW(count_params(model, &resized), ContractError);
}

TEST(Accounting, CountInvariantUnderTraining) {
  Rng rng(15);
  auto model = build_model<float>(ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy, 2), rng);
  const auto before = count_params(model).total;
  auto out = forward_with_taps(model, random_batch(rng, 2), Mode::train);
  backward(sum(out.logits));
  EXPECT_EQ(count_params(model).total, before);
}

TEST(Accounting, ConvFlopsHandExample) {
  LayerInfo conv{"c", LayerKind::conv_spatial, 64, 64, 3, 1, 8, 8};
  EXPECT_EQ(layer_flops(conv), 4718592u);
}

TEST(Accounting, AttentionFlopsHandExample) {
  LayerInfo sa{"a", LayerKind::attention, 64, 64, 3, 1, 8, 8};
  EXPECT_EQ(layer_flops(sa), 1794048u);
  LayerInfo sa5 = sa, sa7 = sa;
  sa5.kernel = 5;
  sa7.kernel = 7;
  const std::uint64_t projection = 2 * 3 * 64 * 64 * 64;
  // Only the logit and aggregation terms grow, linearly in k^2.
  EXPECT_EQ(layer_flops(sa5) - projection, (layer_flops(sa) - projection) * 25 / 9);
  EXPECT_EQ(layer_flops(sa7) - projection, (layer_flops(sa) - projection) * 49 / 9);
}

TEST(Accounting, ProjectionCountConstantInExtent) {
  Rng rng(16);
  std::vector<std::size_t> proj, conv;
  for (std::size_t k : {3u, 5u, 7u}) {
    auto spec = ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::toy);
    spec.extent = k;
    auto model = build_model<float>(spec, rng);
    std::size_t n = 0;
    for (const auto& p : model.params()) n += p.kind == ParamKind::attention_projection ? p.value.numel() : 0;
    proj.push_back(n);
    conv.push_back(64 * 64 * k * k);
  }
  EXPECT_EQ(proj[0], proj[1]);
  EXPECT_EQ(proj[1], proj[2]);
  EXPECT_EQ(conv[1] * 9, conv[0] * 25);
  EXPECT_EQ(conv[2] * 9, conv[0] * 49);
}

TEST(Accounting, FullScaleLayersExist) {
  Rng rng(17);
  auto teacher = build_model<float>(ModelSpec::preset(Role::teacher, Variant::conv, DepthClass::teacher50), rng);
  auto student = build_model<float>(ModelSpec::preset(Role::student, Variant::hybrid, DepthClass::student26), rng);
  EXPECT_EQ(teacher.spec().block_count(), 16u);
  EXPECT_EQ(student.spec().block_count(), 8u);
  EXPECT_GT(count_flops(teacher), count_flops(student));
  EXPECT_GT(count_params(teacher).total, count_params(student).total);
}
