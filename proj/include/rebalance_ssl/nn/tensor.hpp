#pragma once

#include <string>

#include <Eigen/Dense>

namespace rssl::nn {

template <typename Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// A batch of feature maps stored channel-major: row c holds channel c of
/// every example, laid out as [batch][height][width]. Logits use the same
/// type with height = width = 1, so each column is one example.
template <typename Scalar>
struct Activation {
  Mat<Scalar> data;
  int batch = 0;
  int height = 1;
  int width = 1;

  Activation() = default;
  Activation(int channels, int batch_, int height_, int width_)
      : data(Mat<Scalar>::Zero(channels, static_cast<Eigen::Index>(batch_) * height_ * width_)),
        batch(batch_),
        height(height_),
        width(width_) {}

  int channels() const { return static_cast<int>(data.rows()); }
  Eigen::Index plane() const { return static_cast<Eigen::Index>(height) * width; }
};

/// A trainable tensor with its gradient accumulator.
template <typename Scalar>
struct Parameter {
  std::string name;
  Mat<Scalar> value;
  Mat<Scalar> grad;
  bool decay = true;  // subject to weight decay

  Parameter() = default;
  Parameter(std::string n, Eigen::Index rows, Eigen::Index cols, bool decay_)
      : name(std::move(n)),
        value(Mat<Scalar>::Zero(rows, cols)),
        grad(Mat<Scalar>::Zero(rows, cols)),
        decay(decay_) {}
};

/// Non-trainable state saved with the model (batch-norm running statistics).
template <typename Scalar>
struct Buffer {
  std::string name;
  Mat<Scalar>* value = nullptr;
};

}  // namespace rssl::nn
