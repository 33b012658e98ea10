#include "rebalance_ssl/image.hpp"

#include <cstring>
#include <string>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace rssl {
namespace {

cv::Mat to_mat_bgr(const Image& img) {
  cv::Mat rgb(img.height, img.width, CV_8UC3, const_cast<std::uint8_t*>(img.pixels.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

Image from_mat_rgb(const cv::Mat& rgb) {
  Image out(rgb.cols, rgb.rows);
  for (int y = 0; y < rgb.rows; ++y)
    std::memcpy(&out.pixels[out.index(0, y, 0)], rgb.ptr<std::uint8_t>(y),
                static_cast<std::size_t>(rgb.cols) * Image::kChannels);
  return out;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  cv::Mat raw = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (raw.empty()) throw std::runtime_error("cannot decode image: " + path.string());
  cv::Mat rgb;
  cv::cvtColor(raw, rgb, cv::COLOR_BGR2RGB);
  return from_mat_rgb(rgb);
}

void write_png(const std::filesystem::path& path, const Image& img) {
  if (!img.valid()) throw std::invalid_argument("write_png: invalid image");
  if (!cv::imwrite(path.string(), to_mat_bgr(img)))
    throw std::runtime_error("cannot write image: " + path.string());
}

Image resize_image(const Image& img, int width, int height) {
  if (img.width == width && img.height == height) return img;
  cv::Mat rgb(img.height, img.width, CV_8UC3, const_cast<std::uint8_t*>(img.pixels.data()));
  cv::Mat out;
  const int interp = (width < img.width) ? cv::INTER_AREA : cv::INTER_LINEAR;
  cv::resize(rgb, out, cv::Size(width, height), 0, 0, interp);
  return from_mat_rgb(out);
}

}  // namespace rssl
