#include "rebalance_ssl/augment.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <set>

#include "rebalance_ssl/errors.hpp"

namespace rssl {
namespace {

constexpr std::array<const char*, kTransformCount> kNames = {
    "AutoContrast", "Brightness", "Color",     "Hue",    "Equalize",
    "Identity",     "Posterize",  "Shift",     "Rotate", "Sharpness",
    "ShearX",       "ShearY",     "Solarize",  "TranslateX", "TranslateY",
};

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0)); }

/// out = (1 - m) * v + m * enhanced(v), per channel value.
template <typename Enhance>
Image blend_with(const Image& img, double m, Enhance&& enhanced) {
  Image out = img;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = img.at(x, y, c);
        const double e = std::clamp(enhanced(x, y, c), 0.0, 255.0);
        out.at(x, y, c) = to_u8((1.0 - m) * v + m * e);
      }
  return out;
}

double luma(const Image& img, int x, int y) {
  return 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
}

Image brightness(const Image& img, double m) {
  return blend_with(img, m, [&](int x, int y, int c) { return 2.0 * img.at(x, y, c); });
}

Image color(const Image& img, double m) {
  return blend_with(img, m, [&](int x, int y, int c) { return 2.0 * img.at(x, y, c) - luma(img, x, y); });
}

Image sharpness(const Image& img, double m) {
  // Smoothing kernel [1 1 1; 1 5 1; 1 1 1] / 13; border pixels are left as is.
  auto smooth = [&](int x, int y, int c) -> double {
    if (x == 0 || y == 0 || x == img.width - 1 || y == img.height - 1) return img.at(x, y, c);
    double acc = 4.0 * img.at(x, y, c);
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) acc += img.at(x + dx, y + dy, c);
    return acc / 13.0;
  };
  return blend_with(img, m, [&](int x, int y, int c) { return 2.0 * img.at(x, y, c) - smooth(x, y, c); });
}

Image hue_shift(const Image& img, double delta) {
  Image out = img;
  for (std::size_t p = 0; p < img.pixel_count(); ++p) {
    const double r = img.pixels[3 * p] / 255.0, g = img.pixels[3 * p + 1] / 255.0,
                 b = img.pixels[3 * p + 2] / 255.0;
    const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
    const double v = mx, d = mx - mn;
    const double s = mx > 0 ? d / mx : 0.0;
    double h = 0.0;
    if (d > 0) {
      if (mx == r) h = (g - b) / d;
      else if (mx == g) h = 2.0 + (b - r) / d;
      else h = 4.0 + (r - g) / d;
      h /= 6.0;
    }
    h += delta;
    h -= std::floor(h);
    const double hh = h * 6.0;
    const int sector = static_cast<int>(hh) % 6;
    const double f = hh - std::floor(hh);
    const double pp = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
    double rr, gg, bb;
    switch (sector) {
      case 0: rr = v; gg = t; bb = pp; break;
      case 1: rr = q; gg = v; bb = pp; break;
      case 2: rr = pp; gg = v; bb = t; break;
      case 3: rr = pp; gg = q; bb = v; break;
      case 4: rr = t; gg = pp; bb = v; break;
      default: rr = v; gg = pp; bb = q; break;
    }
    out.pixels[3 * p] = to_u8(rr * 255.0);
    out.pixels[3 * p + 1] = to_u8(gg * 255.0);
    out.pixels[3 * p + 2] = to_u8(bb * 255.0);
  }
  return out;
}

Image auto_contrast(const Image& img) {
  Image out = img;
  for (int c = 0; c < 3; ++c) {
    int lo = 255, hi = 0;
    for (std::size_t p = 0; p < img.pixel_count(); ++p) {
      lo = std::min<int>(lo, img.pixels[3 * p + c]);
      hi = std::max<int>(hi, img.pixels[3 * p + c]);
    }
    if (hi <= lo) continue;
    const double scale = 255.0 / (hi - lo);
    for (std::size_t p = 0; p < img.pixel_count(); ++p)
      out.pixels[3 * p + c] = to_u8((img.pixels[3 * p + c] - lo) * scale);
  }
  return out;
}

Image equalize(const Image& img) {
  Image out = img;
  for (int c = 0; c < 3; ++c) {
    std::array<long, 256> hist{};
    for (std::size_t p = 0; p < img.pixel_count(); ++p) ++hist[img.pixels[3 * p + c]];
    long last_nonzero = 0;
    for (int v = 255; v >= 0; --v)
      if (hist[v]) {
        last_nonzero = hist[v];
        break;
      }
    long total = 0;
    for (long h : hist) total += h;
    const long step = (total - last_nonzero) / 255;
    if (step == 0) continue;
    std::array<std::uint8_t, 256> lut{};
    long n = step / 2;
    for (int v = 0; v < 256; ++v) {
      lut[v] = static_cast<std::uint8_t>(std::min<long>(255, n / step));
      n += hist[v];
    }
    for (std::size_t p = 0; p < img.pixel_count(); ++p) out.pixels[3 * p + c] = lut[img.pixels[3 * p + c]];
  }
  return out;
}

Image posterize(const Image& img, int bits) {
  const std::uint8_t mask = static_cast<std::uint8_t>(0xFF << (8 - bits));
  Image out = img;
  for (auto& v : out.pixels) v &= mask;
  return out;
}

Image solarize(const Image& img, int threshold) {
  Image out = img;
  for (auto& v : out.pixels)
    if (v >= threshold) v = static_cast<std::uint8_t>(255 - v);
  return out;
}

/// Inverse-mapped affine warp with bilinear sampling on the reflected image.
/// `src(x, y)` returns the source coordinate for output pixel (x, y).
template <typename SourceOf>
Image warp(const Image& img, SourceOf&& src) {
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const auto [sx, sy] = src(static_cast<double>(x), static_cast<double>(y));
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double ax = sx - fx0, ay = sy - fy0;
      const int x0 = static_cast<int>(fx0), y0 = static_cast<int>(fy0);
      const int xa = reflect_index(x0, img.width), xb = reflect_index(x0 + 1, img.width);
      const int ya = reflect_index(y0, img.height), yb = reflect_index(y0 + 1, img.height);
      for (int c = 0; c < 3; ++c) {
        const double top = (1.0 - ax) * img.at(xa, ya, c) + ax * img.at(xb, ya, c);
        const double bot = (1.0 - ax) * img.at(xa, yb, c) + ax * img.at(xb, yb, c);
        out.at(x, y, c) = to_u8((1.0 - ay) * top + ay * bot);
      }
    }
  return out;
}

Image rotate(const Image& img, double degrees) {
  const double rad = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  const double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
  return warp(img, [&](double x, double y) {
    const double dx = x - cx, dy = y - cy;
    return std::pair{cs * dx + sn * dy + cx, -sn * dx + cs * dy + cy};
  });
}

Image shear(const Image& img, double factor, bool horizontal) {
  const double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
  return warp(img, [&](double x, double y) {
    return horizontal ? std::pair{x + factor * (y - cy), y} : std::pair{x, y + factor * (x - cx)};
  });
}

double random_sign(RngStream& rng) { return rng.bernoulli(0.5) ? -1.0 : 1.0; }

int scaled_pixels(double fraction, int dim) { return static_cast<int>(std::floor(fraction * dim + 0.5)); }

}  // namespace

int reflect_index(int i, int n) {
  if (n <= 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

Image flip_horizontal(const Image& img) {
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(img.width - 1 - x, y, c);
  return out;
}

Image translate_reflect(const Image& img, int dx, int dy) {
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    const int sy = reflect_index(y - dy, img.height);
    for (int x = 0; x < img.width; ++x) {
      const int sx = reflect_index(x - dx, img.width);
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(sx, sy, c);
    }
  }
  return out;
}

std::string transform_name(TransformKind kind) { return kNames[static_cast<int>(kind)]; }

TransformKind parse_transform_name(const std::string& name) {
  for (int i = 0; i < kTransformCount; ++i)
    if (name == kNames[i]) return static_cast<TransformKind>(i);
  if (name == "Contrast")
    throw ConfigError("Contrast is not part of the satellite augmentation pool (use Hue)");
  throw ConfigError("unknown transform: " + name);
}

bool is_parameterless(TransformKind kind) {
  return kind == TransformKind::AutoContrast || kind == TransformKind::Equalize ||
         kind == TransformKind::Identity;
}

bool is_integer_valued(TransformKind kind) {
  return kind == TransformKind::Posterize || kind == TransformKind::Solarize;
}

Transform default_transform(TransformKind kind) {
  using K = TransformKind;
  switch (kind) {
    case K::Brightness: return {kind, MagnitudeRange{0.1, 0.2}};
    case K::Color: return {kind, MagnitudeRange{0.05, 0.95}};
    case K::Hue: return {kind, MagnitudeRange{0.1, 0.1}};
    case K::Posterize: return {kind, MagnitudeRange{4, 8}};
    case K::Shift: return {kind, MagnitudeRange{0.1, 0.2}};
    case K::Rotate: return {kind, MagnitudeRange{-30, 30}};
    case K::Sharpness: return {kind, MagnitudeRange{0.5, 1.0}};
    case K::ShearX:
    case K::ShearY: return {kind, MagnitudeRange{0.1, 0.2}};
    case K::Solarize: return {kind, MagnitudeRange{128, 255}};
    case K::TranslateX:
    case K::TranslateY: return {kind, MagnitudeRange{0.0, 1.0}};
    default: return {kind, std::nullopt};
  }
}

std::vector<Transform> default_strong_pool() {
  std::vector<Transform> pool;
  for (int i = 0; i < kTransformCount; ++i) pool.push_back(default_transform(static_cast<TransformKind>(i)));
  return pool;
}

Image apply_transform(TransformKind kind, double magnitude, const Image& img, RngStream& rng) {
  return apply_transform(default_transform(kind), magnitude, img, rng);
}

Image apply_transform(const Transform& t, double magnitude, const Image& img, RngStream& rng) {
  using K = TransformKind;
  if (!img.valid()) throw ContractError("apply_transform: invalid image");
  if (t.range && !t.range->contains(magnitude))
    throw ContractError(transform_name(t.kind) + ": magnitude " + std::to_string(magnitude) +
                        " outside [" + std::to_string(t.range->lo) + ", " + std::to_string(t.range->hi) + "]");
  const double m = magnitude;
  switch (t.kind) {
    case K::Identity: return img;
    case K::AutoContrast: return auto_contrast(img);
    case K::Equalize: return equalize(img);
    case K::Brightness: return brightness(img, m);
    case K::Color: return color(img, m);
    case K::Sharpness: return sharpness(img, m);
    case K::Hue: return hue_shift(img, rng.uniform(-m, m));
    case K::Posterize: return posterize(img, std::clamp(static_cast<int>(std::lround(m)), 1, 8));
    case K::Solarize: return solarize(img, static_cast<int>(std::lround(m)));
    case K::Rotate: return rotate(img, m);
    case K::ShearX: return shear(img, random_sign(rng) * m, true);
    case K::ShearY: return shear(img, random_sign(rng) * m, false);
    case K::TranslateX: return translate_reflect(img, static_cast<int>(random_sign(rng)) * scaled_pixels(m, img.width), 0);
    case K::TranslateY: return translate_reflect(img, 0, static_cast<int>(random_sign(rng)) * scaled_pixels(m, img.height));
    case K::Shift: {
      switch (rng.uniform_int(0, 3)) {
        case 0: return translate_reflect(img, scaled_pixels(m, img.width), 0);
        case 1: return translate_reflect(img, -scaled_pixels(m, img.width), 0);
        case 2: return translate_reflect(img, 0, scaled_pixels(m, img.height));
        default: return translate_reflect(img, 0, -scaled_pixels(m, img.height));
      }
    }
  }
  return img;
}

std::vector<SampledOp> sample_ops(const StrongPolicy& policy, RngStream& rng) {
  if (policy.pool.empty()) throw ContractError("strong policy pool is empty");
  std::vector<SampledOp> ops;
  ops.reserve(policy.num_ops);
  for (int i = 0; i < policy.num_ops; ++i) {
    SampledOp op;
    op.pool_index = static_cast<std::size_t>(rng.uniform_index(policy.pool.size()));
    const Transform& t = policy.pool[op.pool_index];
    if (t.range) {
      op.magnitude = is_integer_valued(t.kind)
                         ? rng.uniform_int(static_cast<int>(std::ceil(t.range->lo)),
                                           static_cast<int>(std::floor(t.range->hi)))
                         : rng.uniform(t.range->lo, t.range->hi);
    }
    ops.push_back(op);
  }
  return ops;
}

Image strong_augment(const Image& img, const StrongPolicy& policy, RngStream& rng) {
  Image out = img;
  for (const SampledOp& op : sample_ops(policy, rng))
    out = apply_transform(policy.pool[op.pool_index], op.magnitude, out, rng);
  return out;
}

Image weak_augment(const Image& img, const WeakPolicy& policy, RngStream& rng) {
  Image out = rng.bernoulli(policy.flip_probability) ? flip_horizontal(img) : img;
  if (policy.crop) {
    const int pad_x = scaled_pixels(policy.max_shift_fraction, img.width);
    const int pad_y = scaled_pixels(policy.max_shift_fraction, img.height);
    const int dx = rng.uniform_int(-pad_x, pad_x);
    const int dy = rng.uniform_int(-pad_y, pad_y);
    if (dx != 0 || dy != 0) out = translate_reflect(out, dx, dy);
  }
  return out;
}

void validate(const StrongPolicy& policy) {
  if (policy.num_ops < 1) throw ConfigError("augment.strong.num_ops must be >= 1");
  if (policy.pool.empty()) throw ConfigError("augment.strong.pool must not be empty");
  std::set<TransformKind> seen;
  for (const auto& t : policy.pool) {
    const std::string name = transform_name(t.kind);
    if (!seen.insert(t.kind).second) throw ConfigError("augment.strong.pool: duplicate " + name);
    if (is_parameterless(t.kind) != !t.range)
      throw ConfigError("augment.strong.pool: " + name +
                        (t.range ? " takes no parameter range" : " requires a parameter range"));
    if (t.range && t.range->lo > t.range->hi)
      throw ConfigError("augment.strong.pool: " + name + " range is empty");
    if (t.kind == TransformKind::Posterize && t.range && (t.range->lo < 1 || t.range->hi > 8))
      throw ConfigError("augment.strong.pool: Posterize bits must lie in [1,8]");
    if (t.kind == TransformKind::Solarize && t.range && (t.range->lo < 0 || t.range->hi > 256))
      throw ConfigError("augment.strong.pool: Solarize threshold must lie in [0,256]");
  }
}

void validate(const WeakPolicy& policy) {
  if (!(policy.flip_probability >= 0.0 && policy.flip_probability <= 1.0))
    throw ConfigError("augment.weak.flip_probability must be in [0,1]");
  if (!(policy.max_shift_fraction >= 0.0 && policy.max_shift_fraction <= 1.0))
    throw ConfigError("augment.weak.max_shift_fraction must be in [0,1]");
}

}  // namespace rssl
