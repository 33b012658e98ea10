#include "rebalance_ssl/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "rebalance_ssl/errors.hpp"
#include "rebalance_ssl/rng.hpp"

namespace fs = std::filesystem;

namespace rssl {
namespace {

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

std::string class_folder(int c) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "class_%02d", c);
  return buf;
}

int images_for_class(const SyntheticSpec& spec, int c) {
  return spec.total_images / spec.num_classes + (c < spec.total_images % spec.num_classes ? 1 : 0);
}

void validate(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic.num_classes must be >= 2");
  if (spec.total_images < 2 * spec.num_classes) throw ConfigError("synthetic.total_images too small");
  if (spec.image_size < 8) throw ConfigError("synthetic.image_size must be >= 8");
  if (!(spec.separability > 0)) throw ConfigError("synthetic.separability must be > 0");
}

}  // namespace

Image render_synthetic(const SyntheticSpec& spec, int class_id, std::uint64_t index) {
  auto rng = RngStream::derive({spec.seed, tag_hash("synthetic"), static_cast<std::uint64_t>(class_id), index});
  const double L = spec.num_classes;
  const double spread = 1.0 / spec.separability;

  const double hue = class_id / L + rng.normal() * spread * 0.5 / L;
  // Class angles stay in [0, pi/2) so a horizontal flip (theta -> pi - theta) never maps one class onto another.
  const double angle = (class_id + rng.normal() * spread * 0.5) * std::numbers::pi / (2.0 * L);
  const double freq = 3.0 + rng.uniform(0.0, 1.5);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const auto rgb = hsv_to_rgb(hue, 0.65, 0.85);

  const int n = spec.image_size;
  Image img(n, n);
  const double ca = std::cos(angle), sa = std::sin(angle);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const double u = (x * ca + y * sa) / n;
      const double shade = 0.6 + 0.4 * std::sin(2.0 * std::numbers::pi * freq * u + phase);
      for (int c = 0; c < 3; ++c) {
        const double v = 255.0 * rgb[c] * shade + spec.pixel_noise * rng.normal();
        img.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::floor(v + 0.5), 0.0, 255.0));
      }
    }
  return img;
}

Dataset make_synthetic_dataset(const SyntheticSpec& spec) {
  validate(spec);
  Dataset data;
  for (int c = 0; c < spec.num_classes; ++c) data.class_names.push_back(class_folder(c));
  for (int c = 0; c < spec.num_classes; ++c)
    for (int i = 0; i < images_for_class(spec, c); ++i) {
      LabeledExample ex;
      ex.id = data.examples.size();
      char file[64];
      std::snprintf(file, sizeof file, "/img_%04d.png", i);
      ex.path = data.class_names[c] + file;
      ex.class_id = c;
      ex.image = render_synthetic(spec, c, static_cast<std::uint64_t>(i));
      data.examples.push_back(std::move(ex));
    }
  return data;
}

fs::path write_synthetic_dataset(const SyntheticSpec& spec, const fs::path& root) {
  const Dataset data = make_synthetic_dataset(spec);
  for (const auto& name : data.class_names) fs::create_directories(root / name);
  for (const auto& ex : data.examples) write_png(root / ex.path, ex.image);
  return root;
}

}  // namespace rssl
