#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rebalance_ssl/image.hpp"
#include "rebalance_ssl/rng.hpp"

namespace rssl {

enum class TransformKind {
  AutoContrast,
  Brightness,
  Color,
  Hue,
  Equalize,
  Identity,
  Posterize,
  Shift,
  Rotate,
  Sharpness,
  ShearX,
  ShearY,
  Solarize,
  TranslateX,
  TranslateY,
};

inline constexpr int kTransformCount = 15;

struct MagnitudeRange {
  double lo = 0.0;
  double hi = 0.0;

  bool contains(double m) const { return m >= lo && m <= hi; }
  friend bool operator==(const MagnitudeRange&, const MagnitudeRange&) = default;
};

struct Transform {
  TransformKind kind = TransformKind::Identity;
  std::optional<MagnitudeRange> range;  // empty for parameterless transforms

  friend bool operator==(const Transform&, const Transform&) = default;
};

std::string transform_name(TransformKind kind);
/// Throws ConfigError for unknown names and for "Contrast", which is not in the pool.
TransformKind parse_transform_name(const std::string& name);
bool is_parameterless(TransformKind kind);
bool is_integer_valued(TransformKind kind);  // Posterize bits, Solarize threshold

/// The tweaked satellite pool with its default ranges.
std::vector<Transform> default_strong_pool();
Transform default_transform(TransformKind kind);

/// Applies one transform. `magnitude` must lie in the transform's default
/// range (ignored when parameterless). Geometric transforms sample from a
/// reflected image; random sign/direction choices come from `rng`.
Image apply_transform(TransformKind kind, double magnitude, const Image& img, RngStream& rng);

/// Same, checking the magnitude against an explicit range.
Image apply_transform(const Transform& t, double magnitude, const Image& img, RngStream& rng);

struct StrongPolicy {
  int num_ops = 2;
  std::vector<Transform> pool = default_strong_pool();
};

struct WeakPolicy {
  double flip_probability = 0.5;
  double max_shift_fraction = 0.125;
  bool crop = true;  // reflect-pad by the shift amount and crop a random window
};

struct SampledOp {
  std::size_t pool_index = 0;
  double magnitude = 0.0;
};

/// Draws num_ops (transform, magnitude) pairs uniformly with replacement.
std::vector<SampledOp> sample_ops(const StrongPolicy& policy, RngStream& rng);

Image strong_augment(const Image& img, const StrongPolicy& policy, RngStream& rng);
Image weak_augment(const Image& img, const WeakPolicy& policy, RngStream& rng);

/// Validates pool membership/uniqueness and ranges; throws ConfigError.
void validate(const StrongPolicy& policy);
void validate(const WeakPolicy& policy);

// Individual kernels, exposed for tests.
Image flip_horizontal(const Image& img);
Image translate_reflect(const Image& img, int dx, int dy);
int reflect_index(int i, int n);

}  // namespace rssl
