#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rebalance_ssl/image.hpp"
#include "rebalance_ssl/imgdata.hpp"
#include "rebalance_ssl/model.hpp"
#include "rebalance_ssl/rng.hpp"

namespace rssl::testing {

inline Image random_image(RngStream& rng, int w, int h) {
  Image img(w, h);
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(rng.uniform_index(256));
  return img;
}

inline Image constant_image(int w, int h, std::uint8_t v) {
  Image img(w, h);
  std::fill(img.pixels.begin(), img.pixels.end(), v);
  return img;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("rssl_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline std::string slurp(const std::filesystem::path& file) {
  std::ifstream is(file, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Predictor that returns fixed probabilities per image, keyed by the first pixel byte.
class TablePredictor final : public Predictor {
 public:
  TablePredictor(int num_classes, std::vector<Eigen::VectorXd> by_key)
      : num_classes_(num_classes), by_key_(std::move(by_key)) {}
  int num_classes() const override { return num_classes_; }
  ProbMatrix predict(std::span<const Image* const> images) const override {
    ProbMatrix p(num_classes_, static_cast<Eigen::Index>(images.size()));
    for (std::size_t i = 0; i < images.size(); ++i) p.col(static_cast<Eigen::Index>(i)) = by_key_.at(images[i]->pixels[0]);
    return p;
  }

 private:
  int num_classes_;
  std::vector<Eigen::VectorXd> by_key_;
};

/// Image whose first byte encodes `key`, so TablePredictor can look it up.
inline Image keyed_image(std::uint8_t key, int size = 8) {
  Image img = constant_image(size, size, 0);
  img.pixels[0] = key;
  return img;
}

inline Eigen::VectorXd one_hot(int num_classes, int c, double confidence = 1.0) {
  Eigen::VectorXd v = Eigen::VectorXd::Constant(num_classes, (1.0 - confidence) / (num_classes - 1));
  v(c) = confidence;
  return v;
}

}  // namespace rssl::testing
