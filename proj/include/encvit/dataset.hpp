#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "encvit/tensor.hpp"
#include "encvit/vit.hpp"

namespace encvit {

struct Dataset {
  Tensor<float> images;  // {N,C,H,W}, values in [0,1]
  std::vector<Label> labels;
  std::uint32_t num_classes = 10;
  std::string split = "train";
  std::string provenance;

  std::size_t size() const { return labels.size(); }
  ImageGeometry geometry() const;
  LabeledImages view() const { return {images, labels}; }
  /// Copy of samples [begin, begin+count).
  Dataset subset(std::size_t begin, std::size_t count) const;
  std::vector<std::size_t> class_histogram() const;
  /// Throws InvalidInput unless non-empty, labels in range and pixels in [0,1].
  void validate() const;
};

struct DatasetSplits {
  Dataset train;
  Dataset test;
};

/// Procedural 32x32x3 shapes. Class c draws shape c % 5 (disk, bar,
/// triangle, ring, cross) in hue family c / 5 (warm or cool) over a random
/// background, with position/size/color jitter and additive noise. Pixels
/// are quantized to multiples of 1/255. Classes are exactly balanced when
/// the split size is a multiple of 10.
DatasetSplits gen_synthetic_dataset(std::uint64_t seed, std::size_t n_train,
                                    std::size_t n_test);

inline constexpr std::uint32_t kSyntheticClasses = 10;

/// DSET container: "DSET", u16 version, u32 N, u32 C, u32 H, u32 W,
/// u16 num_classes, u8 split, u16 + provenance bytes, N*C*H*W u8 pixels
/// (value * 255), N u16 labels.
std::vector<std::uint8_t> encode_dataset(const Dataset& ds);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);

void save_dataset(const Dataset& ds, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

/// Accuracy of a nearest-centroid classifier on hue histograms of saturated
/// pixels, fit on `train`. A reference for how much hue alone explains.
double hue_centroid_baseline(const Dataset& train, const Dataset& test);

}  // namespace encvit
