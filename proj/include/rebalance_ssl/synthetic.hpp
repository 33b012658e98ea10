#pragma once

#include <cstdint>
#include <filesystem>

#include "rebalance_ssl/imgdata.hpp"

namespace rssl {

/// Colored stripe patterns. Each class owns a mean hue and stripe angle; each
/// image draws its hue and angle from a Gaussian around the class mean whose
/// spread shrinks as `separability` grows, so class overlap is controllable.
struct SyntheticSpec {
  int num_classes = 3;
  int total_images = 500;  // spread as evenly as possible over classes
  int image_size = 32;
  double separability = 2.0;
  double pixel_noise = 8.0;  // intensity units
  std::uint64_t seed = 0;
};

Image render_synthetic(const SyntheticSpec& spec, int class_id, std::uint64_t index);

Dataset make_synthetic_dataset(const SyntheticSpec& spec);

/// Writes `<root>/class_<kk>/img_<nnnn>.png` and returns the root.
std::filesystem::path write_synthetic_dataset(const SyntheticSpec& spec, const std::filesystem::path& root);

}  // namespace rssl
