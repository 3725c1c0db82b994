#pragma once

// CIFAR binary loading, training augmentation, batching, and a synthetic
// class-separable fixture.
//
// Binary layout: consecutive records of <label bytes><1024 R><1024 G><1024 B>.
// CIFAR-10 uses one label byte (3073-byte records); CIFAR-100 stores
// <coarse><fine> (3074 bytes) and the fine label is used.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "sdist/random.hpp"
#include "sdist/tensor.hpp"

namespace sdist {

inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageValues = kImageChannels * kImageSide * kImageSide;  // 3072
inline constexpr std::size_t kCropPadding = 4;

/// Per-channel mean/std applied after scaling bytes to [0, 1].
struct Normalization {
  std::array<double, 3> mean{0.4914, 0.4822, 0.4465};
  std::array<double, 3> stddev{0.2470, 0.2435, 0.2616};

  static Normalization cifar10() { return {}; }
  static Normalization cifar100() { return {{0.5071, 0.4865, 0.4409}, {0.2673, 0.2564, 0.2762}}; }

  float apply(std::uint8_t byte, std::size_t channel) const {
    return static_cast<float>((byte / 255.0 - mean[channel]) / stddev[channel]);
  }
  std::uint8_t invert(float value, std::size_t channel) const {
    const double v = (value * stddev[channel] + mean[channel]) * 255.0;
    return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Normalization, mean, stddev)

struct LabeledImage {
  std::vector<float> pixels;  // [3 x 32 x 32], normalised
  int label = 0;
};

struct Dataset {
  std::vector<LabeledImage> images;
  std::size_t classes = 10;
  Normalization normalization;

  std::size_t size() const { return images.size(); }
};

inline std::size_t label_bytes_for(std::size_t classes) { return classes == 100 ? 2 : 1; }

inline Dataset decode_cifar_binary(const std::vector<std::uint8_t>& bytes, std::size_t classes,
                                   const Normalization& norm = {}) {
  const std::size_t label_bytes = label_bytes_for(classes);
  const std::size_t record = label_bytes + kImageValues;
  if (bytes.size() % record != 0) {
    const std::size_t offset = bytes.size() - bytes.size() % record;
    throw FormatError("truncated CIFAR record at byte offset " + std::to_string(offset) + " (" +
                      std::to_string(bytes.size() % record) + " of " + std::to_string(record) + " bytes)");
  }
  Dataset ds;
  ds.classes = classes;
  ds.normalization = norm;
  ds.images.reserve(bytes.size() / record);
  for (std::size_t off = 0; off < bytes.size(); off += record) {
    LabeledImage img;
    img.label = bytes[off + label_bytes - 1];
    if (static_cast<std::size_t>(img.label) >= classes)
      throw FormatError("label " + std::to_string(img.label) + " at byte offset " + std::to_string(off) +
                        " exceeds class count " + std::to_string(classes));
    img.pixels.resize(kImageValues);
    for (std::size_t i = 0; i < kImageValues; ++i)
      img.pixels[i] = norm.apply(bytes[off + label_bytes + i], i / (kImageSide * kImageSide));
    ds.images.push_back(std::move(img));
  }
  return ds;
}

/// Inverse of decode_cifar_binary (coarse label bytes are written as 0).
inline std::vector<std::uint8_t> encode_cifar_binary(const Dataset& ds) {
  const std::size_t label_bytes = label_bytes_for(ds.classes);
  std::vector<std::uint8_t> out;
  out.reserve(ds.size() * (label_bytes + kImageValues));
  for (const auto& img : ds.images) {
    for (std::size_t i = 0; i + 1 < label_bytes; ++i) out.push_back(0);
    out.push_back(static_cast<std::uint8_t>(img.label));
    for (std::size_t i = 0; i < kImageValues; ++i)
      out.push_back(ds.normalization.invert(img.pixels[i], i / (kImageSide * kImageSide)));
  }
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Dataset load_cifar_binary(const std::filesystem::path& path, std::size_t classes,
                                 const Normalization& norm = {}) {
  try {
    return decode_cifar_binary(read_file_bytes(path), classes, norm);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_cifar_binary(const std::filesystem::path& path, const Dataset& ds) {
  auto bytes = encode_cifar_binary(ds);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

/// Standard file names inside an extracted CIFAR binary directory.
inline std::vector<std::string> cifar_files(std::size_t classes, bool train) {
  if (classes == 100) return {train ? "train.bin" : "test.bin"};
  if (!train) return {"test_batch.bin"};
  return {"data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"};
}

inline Dataset load_cifar_dir(const std::filesystem::path& dir, std::size_t classes, bool train,
                              const Normalization& norm = {}) {
  Dataset all;
  all.classes = classes;
  all.normalization = norm;
  for (const auto& name : cifar_files(classes, train)) {
    auto part = load_cifar_binary(dir / name, classes, norm);
    std::move(part.images.begin(), part.images.end(), std::back_inserter(all.images));
  }
  return all;
}

// -------------------------------------------------------------- augmentation

/// Mirror index into [0, n) without repeating the edge pixel: -1 -> 1, n -> n-2.
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto m = static_cast<std::ptrdiff_t>(n);
  if (m == 1) return 0;
  const std::ptrdiff_t period = 2 * (m - 1);
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < m ? i : period - i);
}

inline LabeledImage flip_horizontal(const LabeledImage& img) {
  LabeledImage out = img;
  for (std::size_t c = 0; c < kImageChannels; ++c)
    for (std::size_t y = 0; y < kImageSide; ++y)
      for (std::size_t x = 0; x < kImageSide; ++x)
        out.pixels[(c * kImageSide + y) * kImageSide + x] =
            img.pixels[(c * kImageSide + y) * kImageSide + (kImageSide - 1 - x)];
  return out;
}

/// Optional flip, then a 32x32 crop at (top, left) of the image
/// reflect-padded by 4 pixels. top/left lie in [0, 8].
inline LabeledImage augment_with(const LabeledImage& img, bool flip, std::size_t top, std::size_t left) {
  if (top > 2 * kCropPadding || left > 2 * kCropPadding) throw ContractError("augment: crop offset out of range");
  const LabeledImage src = flip ? flip_horizontal(img) : img;
  LabeledImage out;
  out.label = img.label;
  out.pixels.resize(kImageValues);
  const auto pad = static_cast<std::ptrdiff_t>(kCropPadding);
  for (std::size_t c = 0; c < kImageChannels; ++c)
    for (std::size_t y = 0; y < kImageSide; ++y) {
      const auto sy = reflect_index(static_cast<std::ptrdiff_t>(y + top) - pad, kImageSide);
      for (std::size_t x = 0; x < kImageSide; ++x) {
        const auto sx = reflect_index(static_cast<std::ptrdiff_t>(x + left) - pad, kImageSide);
        out.pixels[(c * kImageSide + y) * kImageSide + x] = src.pixels[(c * kImageSide + sy) * kImageSide + sx];
      }
    }
  return out;
}

inline LabeledImage augment(const LabeledImage& img, Rng& rng) {
  std::bernoulli_distribution coin(0.5);
  std::uniform_int_distribution<std::size_t> offset(0, 2 * kCropPadding);
  const bool flip = coin(rng);
  const std::size_t top = offset(rng);
  const std::size_t left = offset(rng);
  return augment_with(img, flip, top, left);
}

// ------------------------------------------------------------------ batching

template <typename T>
struct Batch {
  Tensor<T> images;  // [B x 3 x 32 x 32]
  std::vector<int> labels;
};

template <typename T>
Batch<T> make_batch(const Dataset& ds, std::span<const std::size_t> indices, Rng* augment_rng = nullptr) {
  std::vector<T> values;
  values.reserve(indices.size() * kImageValues);
  std::vector<int> labels;
  for (auto i : indices) {
    const auto& src = ds.images.at(i);
    if (augment_rng) {
      auto img = augment(src, *augment_rng);
      values.insert(values.end(), img.pixels.begin(), img.pixels.end());
    } else {
      values.insert(values.end(), src.pixels.begin(), src.pixels.end());
    }
    labels.push_back(src.label);
  }
  return {Tensor<T>(Shape{indices.size(), kImageChannels, kImageSide, kImageSide}, std::move(values)),
          std::move(labels)};
}

/// Epoch-seeded shuffled (or sequential) mini-batches; the last partial batch is kept.
template <typename T>
class BatchIterator {
 public:
  BatchIterator(const Dataset& ds, std::size_t batch_size, std::uint64_t seed, std::size_t epoch, bool train)
      : ds_(&ds), batch_size_(batch_size), order_(ds.size()), rng_(derive_seed(seed, {epoch, 0xA11})), train_(train) {
    if (ds.size() == 0) throw ConfigError("batches: empty dataset");
    if (batch_size == 0) throw ConfigError("batches: batch size must be >= 1");
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (train) {
      Rng shuffle_rng(derive_seed(seed, {epoch, 0x5F1}));
      std::shuffle(order_.begin(), order_.end(), shuffle_rng);
    }
  }

  std::size_t batch_count() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

  std::optional<Batch<T>> next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const std::size_t n = std::min(batch_size_, order_.size() - cursor_);
    std::span<const std::size_t> idx(order_.data() + cursor_, n);
    cursor_ += n;
    return make_batch<T>(*ds_, idx, train_ ? &rng_ : nullptr);
  }

  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const Dataset* ds_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  Rng rng_;
  bool train_;
};

// ---------------------------------------------------------------- synthetic

/// Gaussian-blob images: each class has its own blob colour and position
/// (jittered per sample) over a heavily noisy grey background. A class-mean
/// linear classifier separates two classes at roughly 97%.
inline Dataset synthetic_dataset(std::size_t n, std::size_t classes, std::uint64_t seed,
                                 const Normalization& norm = {}) {
  if (classes < 2) throw ConfigError("synthetic: need at least two classes");
  if (n < classes) throw ConfigError("synthetic: need at least one image per class");
  Rng rng(derive_seed(seed, {0x5E7}));
  std::normal_distribution<double> noise(0.0, 0.4);
  std::uniform_real_distribution<double> jitter(-8.0, 8.0);
  constexpr double kPi = 3.14159265358979323846;
  Dataset ds;
  ds.classes = classes;
  ds.normalization = norm;
  ds.images.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<int>(i % classes);
    const double angle = 2.0 * kPi * static_cast<double>(label) / static_cast<double>(classes);
    const double cx = 15.5 + 8.0 * std::cos(angle) + jitter(rng);
    const double cy = 15.5 + 8.0 * std::sin(angle) + jitter(rng);
    std::array<double, 3> colour{};
    for (std::size_t c = 0; c < 3; ++c)
      colour[c] = 0.5 + 0.45 * std::cos(angle + 2.0 * kPi * static_cast<double>(c) / 3.0);
    LabeledImage img;
    img.label = label;
    img.pixels.resize(kImageValues);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < kImageSide; ++y)
        for (std::size_t x = 0; x < kImageSide; ++x) {
          const double d2 = (static_cast<double>(x) - cx) * (static_cast<double>(x) - cx) +
                            (static_cast<double>(y) - cy) * (static_cast<double>(y) - cy);
          const double blob = std::exp(-d2 / (2.0 * 3.0 * 3.0));
          const double v = 0.5 + (colour[c] - 0.5) * blob + noise(rng);
          const auto byte = static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L));
          img.pixels[(c * kImageSide + y) * kImageSide + x] = norm.apply(byte, c);
        }
    ds.images.push_back(std::move(img));
  }
  return ds;
}

}  // namespace sdist
