#pragma once

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "rebalance_ssl/nn/tensor.hpp"
#include "rebalance_ssl/rng.hpp"

namespace rssl::nn {

/// A differentiable layer. `forward` is the training path and caches what
/// `backward` needs; `infer` is the evaluation path and leaves state untouched.
template <typename Scalar>
class Layer {
 public:
  virtual ~Layer() = default;

  virtual Activation<Scalar> forward(const Activation<Scalar>& x) = 0;
  virtual Activation<Scalar> infer(const Activation<Scalar>& x) const = 0;
  /// Accumulates parameter gradients; returns the gradient w.r.t. the input.
  virtual Activation<Scalar> backward(const Activation<Scalar>& grad_out) = 0;

  virtual void collect_parameters(std::vector<Parameter<Scalar>*>&) {}
  virtual void collect_buffers(std::vector<Buffer<Scalar>>&) {}
  virtual std::unique_ptr<Layer> clone() const = 0;
};

// ---------------------------------------------------------------------------

template <typename Scalar>
Mat<Scalar> im2col(const Activation<Scalar>& x, int k, int stride, int pad, int out_h, int out_w) {
  const int C = x.channels();
  const Eigen::Index out_plane = static_cast<Eigen::Index>(out_h) * out_w;
  Mat<Scalar> cols(static_cast<Eigen::Index>(C) * k * k, out_plane * x.batch);
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        Scalar* row = cols.row((static_cast<Eigen::Index>(c) * k + ki) * k + kj).data();
        const Scalar* src = x.data.row(c).data();
        for (int n = 0; n < x.batch; ++n) {
          const Scalar* img = src + n * x.plane();
          Scalar* dst = row + n * out_plane;
          for (int oh = 0; oh < out_h; ++oh) {
            const int ih = oh * stride - pad + ki;
            Scalar* drow = dst + static_cast<Eigen::Index>(oh) * out_w;
            if (ih < 0 || ih >= x.height) {
              std::fill(drow, drow + out_w, Scalar(0));
              continue;
            }
            const Scalar* irow = img + static_cast<Eigen::Index>(ih) * x.width;
            for (int ow = 0; ow < out_w; ++ow) {
              const int iw = ow * stride - pad + kj;
              drow[ow] = (iw >= 0 && iw < x.width) ? irow[iw] : Scalar(0);
            }
          }
        }
      }
  return cols;
}

template <typename Scalar>
void col2im_add(const Mat<Scalar>& cols, int k, int stride, int pad, int out_h, int out_w,
                Activation<Scalar>& dx) {
  const int C = dx.channels();
  const Eigen::Index out_plane = static_cast<Eigen::Index>(out_h) * out_w;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        const Scalar* row = cols.row((static_cast<Eigen::Index>(c) * k + ki) * k + kj).data();
        Scalar* dst = dx.data.row(c).data();
        for (int n = 0; n < dx.batch; ++n) {
          Scalar* img = dst + n * dx.plane();
          const Scalar* src = row + n * out_plane;
          for (int oh = 0; oh < out_h; ++oh) {
            const int ih = oh * stride - pad + ki;
            if (ih < 0 || ih >= dx.height) continue;
            Scalar* irow = img + static_cast<Eigen::Index>(ih) * dx.width;
            const Scalar* srow = src + static_cast<Eigen::Index>(oh) * out_w;
            for (int ow = 0; ow < out_w; ++ow) {
              const int iw = ow * stride - pad + kj;
              if (iw >= 0 && iw < dx.width) irow[iw] += srow[ow];
            }
          }
        }
      }
}

/// Square-kernel 2-D convolution lowered to a single GEMM per batch.
template <typename Scalar>
class Conv2d final : public Layer<Scalar> {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int pad, bool bias, RngStream& rng)
      : in_(in_channels),
        out_(out_channels),
        k_(kernel),
        stride_(stride),
        pad_(pad),
        weight_("conv.weight", out_channels, static_cast<Eigen::Index>(in_channels) * kernel * kernel, true),
        has_bias_(bias) {
    // He initialisation on fan-out.
    const double std = std::sqrt(2.0 / (static_cast<double>(out_channels) * kernel * kernel));
    for (Eigen::Index i = 0; i < weight_.value.size(); ++i)
      weight_.value.data()[i] = static_cast<Scalar>(std * rng.normal());
    if (has_bias_) bias_ = Parameter<Scalar>("conv.bias", out_channels, 1, false);
  }

  Activation<Scalar> forward(const Activation<Scalar>& x) override {
    in_shape_ = {x.batch, x.height, x.width};
    if (pointwise()) input_ = x.data;
    return run(x, &cols_);
  }

  Activation<Scalar> infer(const Activation<Scalar>& x) const override { return run(x, nullptr); }

  Activation<Scalar> backward(const Activation<Scalar>& g) override {
    const Mat<Scalar>& cols = pointwise() ? input_ : cols_;
    weight_.grad.noalias() += g.data * cols.transpose();
    if (has_bias_) bias_.grad += g.data.rowwise().sum();
    Activation<Scalar> dx(in_, in_shape_[0], in_shape_[1], in_shape_[2]);
    if (pointwise()) {
      dx.data.noalias() = weight_.value.transpose() * g.data;
    } else {
      Mat<Scalar> dcols = weight_.value.transpose() * g.data;
      col2im_add(dcols, k_, stride_, pad_, g.height, g.width, dx);
    }
    return dx;
  }

  void collect_parameters(std::vector<Parameter<Scalar>*>& out) override {
    out.push_back(&weight_);
    if (has_bias_) out.push_back(&bias_);
  }

  std::unique_ptr<Layer<Scalar>> clone() const override { return std::make_unique<Conv2d>(*this); }

 private:
  bool pointwise() const { return k_ == 1 && stride_ == 1 && pad_ == 0; }

  Activation<Scalar> run(const Activation<Scalar>& x, Mat<Scalar>* cache) const {
    if (x.channels() != in_) throw std::invalid_argument("Conv2d: channel mismatch");
    const int oh = (x.height + 2 * pad_ - k_) / stride_ + 1;
    const int ow = (x.width + 2 * pad_ - k_) / stride_ + 1;
    if (oh <= 0 || ow <= 0) throw std::invalid_argument("Conv2d: input smaller than kernel");
    Activation<Scalar> y;
    y.batch = x.batch;
    y.height = oh;
    y.width = ow;
    if (pointwise()) {
      y.data.noalias() = weight_.value * x.data;
    } else {
      Mat<Scalar> cols = im2col(x, k_, stride_, pad_, oh, ow);
      y.data.noalias() = weight_.value * cols;
      if (cache) *cache = std::move(cols);
    }
    if (has_bias_) y.data.colwise() += Vec<Scalar>(bias_.value.col(0));
    return y;
  }

  int in_, out_, k_, stride_, pad_;
  Parameter<Scalar> weight_;
  Parameter<Scalar> bias_;
  bool has_bias_;
  Mat<Scalar> cols_;
  Mat<Scalar> input_;
  std::array<int, 3> in_shape_{0, 0, 0};
};

/// Per-channel batch normalisation with running statistics for inference.
template <typename Scalar>
class BatchNorm2d final : public Layer<Scalar> {
 public:
  explicit BatchNorm2d(int channels, double momentum = 0.1, double eps = 1e-5)
      : gamma_("bn.weight", channels, 1, false),
        beta_("bn.bias", channels, 1, false),
        running_mean_(Mat<Scalar>::Zero(channels, 1)),
        running_var_(Mat<Scalar>::Ones(channels, 1)),
        momentum_(momentum),
        eps_(eps) {
    gamma_.value.setOnes();
  }

  Activation<Scalar> forward(const Activation<Scalar>& x) override {
    const Eigen::Index m = x.data.cols();
    if (m < 2) throw std::invalid_argument("BatchNorm2d: need more than one value per channel");
    Vec<Scalar> mean = x.data.rowwise().mean();
    Mat<Scalar> centered = x.data.colwise() - mean;
    Vec<Scalar> var = centered.array().square().rowwise().mean();
    inv_std_ = (var.array() + Scalar(eps_)).rsqrt();
    xhat_ = centered.array().colwise() * inv_std_.array();
    const Scalar mom(momentum_);
    running_mean_.col(0) = (Scalar(1) - mom) * running_mean_.col(0) + mom * mean;
    running_var_.col(0) =
        (Scalar(1) - mom) * running_var_.col(0) + mom * var * (Scalar(m) / Scalar(m - 1));
    Activation<Scalar> y = x;
    y.data = (xhat_.array().colwise() * gamma_.value.col(0).array()).colwise() + beta_.value.col(0).array();
    return y;
  }

  Activation<Scalar> infer(const Activation<Scalar>& x) const override {
    Vec<Scalar> scale = gamma_.value.col(0).array() * (running_var_.col(0).array() + Scalar(eps_)).rsqrt();
    Vec<Scalar> shift = beta_.value.col(0) - (scale.array() * running_mean_.col(0).array()).matrix();
    Activation<Scalar> y = x;
    y.data = (x.data.array().colwise() * scale.array()).colwise() + shift.array();
    return y;
  }

  Activation<Scalar> backward(const Activation<Scalar>& g) override {
    const Scalar m(static_cast<Scalar>(g.data.cols()));
    Vec<Scalar> dbeta = g.data.rowwise().sum();
    Vec<Scalar> dgamma = (g.data.array() * xhat_.array()).rowwise().sum();
    beta_.grad.col(0) += dbeta;
    gamma_.grad.col(0) += dgamma;
    Activation<Scalar> dx = g;
    Vec<Scalar> scale = gamma_.value.col(0).array() * inv_std_.array() / m;
    dx.data = ((g.data.array() * m).colwise() - dbeta.array() - xhat_.array().colwise() * dgamma.array())
                  .colwise() *
              scale.array();
    return dx;
  }

  void collect_parameters(std::vector<Parameter<Scalar>*>& out) override {
    out.push_back(&gamma_);
    out.push_back(&beta_);
  }
  void collect_buffers(std::vector<Buffer<Scalar>>& out) override {
    out.push_back({"bn.running_mean", &running_mean_});
    out.push_back({"bn.running_var", &running_var_});
  }
  std::unique_ptr<Layer<Scalar>> clone() const override { return std::make_unique<BatchNorm2d>(*this); }

 private:
  Parameter<Scalar> gamma_, beta_;
  Mat<Scalar> running_mean_, running_var_;
  double momentum_, eps_;
  Mat<Scalar> xhat_;
  Vec<Scalar> inv_std_;
};

/// max(x, slope * x); slope 0 is a plain ReLU.
template <typename Scalar>
class LeakyReLU final : public Layer<Scalar> {
 public:
  explicit LeakyReLU(double slope = 0.0) : slope_(slope) {}

  Activation<Scalar> forward(const Activation<Scalar>& x) override {
    positive_ = (x.data.array() > Scalar(0)).template cast<Scalar>();
    return infer(x);
  }
  Activation<Scalar> infer(const Activation<Scalar>& x) const override {
    Activation<Scalar> y = x;
    if (slope_ == 0.0)
      y.data = x.data.array().max(Scalar(0));
    else
      y.data = x.data.array().max(x.data.array() * Scalar(slope_));
    return y;
  }
  Activation<Scalar> backward(const Activation<Scalar>& g) override {
    Activation<Scalar> dx = g;
    const Scalar s(slope_);
    dx.data = g.data.array() * (positive_.array() + (Scalar(1) - positive_.array()) * s);
    return dx;
  }
  std::unique_ptr<Layer<Scalar>> clone() const override { return std::make_unique<LeakyReLU>(*this); }

 private:
  double slope_;
  Mat<Scalar> positive_;
};

/// x * sigmoid(x). Smooth everywhere, so finite differences at coarse steps stay valid.
template <typename Scalar>
class SiLU final : public Layer<Scalar> {
 public:
  Activation<Scalar> forward(const Activation<Scalar>& x) override {
    input_ = x.data;
    return infer(x);
  }
  Activation<Scalar> infer(const Activation<Scalar>& x) const override {
    Activation<Scalar> y = x;
    y.data = x.data.array() / (Scalar(1) + (-x.data.array()).exp());
    return y;
  }
  Activation<Scalar> backward(const Activation<Scalar>& g) override {
    Activation<Scalar> dx = g;
    const auto s = (Scalar(1) / (Scalar(1) + (-input_.array()).exp())).eval();
    dx.data = g.data.array() * s * (Scalar(1) + input_.array() * (Scalar(1) - s));
    return dx;
  }
  std::unique_ptr<Layer<Scalar>> clone() const override { return std::make_unique<SiLU>(*this); }

 private:
  Mat<Scalar> input_;
};

/// 2x2 max pooling, stride 2 (odd trailing rows/columns are dropped).
template <typename Scalar>
class MaxPool2 final : public Layer<Scalar> {
 public:
  Activation<Scalar> forward(const Activation<Scalar>& x) override {
    in_shape_ = {x.batch, x.height, x.width};
    return run(x, &argmax_);
  }
  Activation<Scalar> infer(const Activation<Scalar>& x) const override { return run(x, nullptr); }

  Activation<Scalar> backward(const Activation<Scalar>& g) override {
    Activation<Scalar> dx(g.channels(), in_shape_[0], in_shape_[1], in_shape_[2]);
    for (Eigen::Index c = 0; c < g.data.rows(); ++c)
      for (Eigen::Index j = 0; j < g.data.cols(); ++j) dx.data(c, argmax_(c, j)) += g.data(c, j);
    return dx;
  }
  std::unique_ptr<Layer<Scalar>> clone() const override { return std::make_unique<MaxPool2>(*this); }

 private:
  Activation<Scalar> run(const Activation<Scalar>& x, Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>* idx) const {
    const int oh = x.height / 2, ow = x.width / 2;
    if (oh == 0 || ow == 0) throw std::invalid_argument("MaxPool2: input too small");
    Activation<Scalar> y(x.channels(), x.batch, oh, ow);
    if (idx) idx->resize(y.data.rows(), y.data.cols());
    for (int c = 0; c < x.channels(); ++c) {
      const Scalar* src = x.data.row(c).data();
      Scalar* dst = y.data.row(c).data();
      for (int n = 0; n < x.batch; ++n)
        for (int i = 0; i < oh; ++i)
          for (int j = 0; j < ow; ++j) {
            const Eigen::Index base = n * x.plane() + static_cast<Eigen::Index>(2 * i) * x.width + 2 * j;
            Eigen::Index best = base;
            for (Eigen::Index cand : {base + 1, base + x.width, base + x.width + 1})
              if (src[cand] > src[best]) best = cand;
            const Eigen::Index o = n * y.plane() + static_cast<Eigen::Index>(i) * ow + j;
            dst[o] = src[best];
            if (idx) (*idx)(c, o) = best;
          }
    }
    return y;
  }

  Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> argmax_;
  std::array<int, 3> in_shape_{0, 0, 0};
};

/// Averages each feature map to one value: output height = width = 1.
template <typename Scalar>
class GlobalAvgPool final : public Layer<Scalar> {
 public:
  Activation<Scalar> forward(const Activation<Scalar>& x) override {
    in_shape_ = {x.batch, x.height, x.width};
    return infer(x);
  }
  Activation<Scalar> infer(const Activation<Scalar>& x) const override {
    Activation<Scalar> y(x.channels(), x.batch, 1, 1);
    for (int n = 0; n < x.batch; ++n)
      y.data.col(n) = x.data.middleCols(n * x.plane(), x.plane()).rowwise().mean();
    return y;
  }
  Activation<Scalar> backward(const Activation<Scalar>& g) override {
    Activation<Scalar> dx(g.channels(), in_shape_[0], in_shape_[1], in_shape_[2]);
    const Scalar inv = Scalar(1) / static_cast<Scalar>(dx.plane());
    for (int n = 0; n < dx.batch; ++n)
      dx.data.middleCols(n * dx.plane(), dx.plane()).colwise() = Vec<Scalar>(g.data.col(n) * inv);
    return dx;
  }
  std::unique_ptr<Layer<Scalar>> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }

 private:
  std::array<int, 3> in_shape_{0, 0, 0};
};

/// Fully connected layer on per-example feature vectors (height = width = 1).
template <typename Scalar>
class Linear final : public Layer<Scalar> {
 public:
  Linear(int in_features, int out_features, RngStream& rng)
      : weight_("fc.weight", out_features, in_features, true), bias_("fc.bias", out_features, 1, false) {
    const double std = std::sqrt(2.0 / (in_features + out_features));  // Glorot normal
    for (Eigen::Index i = 0; i < weight_.value.size(); ++i)
      weight_.value.data()[i] = static_cast<Scalar>(std * rng.normal());
  }

  Activation<Scalar> forward(const Activation<Scalar>& x) override {
    input_ = x.data;
    return infer(x);
  }
  Activation<Scalar> infer(const Activation<Scalar>& x) const override {
    if (x.height != 1 || x.width != 1 || x.channels() != weight_.value.cols())
      throw std::invalid_argument("Linear: expects flat features of matching width");
    Activation<Scalar> y;
    y.batch = x.batch;
    y.data.noalias() = weight_.value * x.data;
    y.data.colwise() += Vec<Scalar>(bias_.value.col(0));
    return y;
  }
  Activation<Scalar> backward(const Activation<Scalar>& g) override {
    weight_.grad.noalias() += g.data * input_.transpose();
    bias_.grad += g.data.rowwise().sum();
    Activation<Scalar> dx;
    dx.batch = g.batch;
    dx.data.noalias() = weight_.value.transpose() * g.data;
    return dx;
  }
  void collect_parameters(std::vector<Parameter<Scalar>*>& out) override {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }
  std::unique_ptr<Layer<Scalar>> clone() const override { return std::make_unique<Linear>(*this); }

 private:
  Parameter<Scalar> weight_, bias_;
  Mat<Scalar> input_;
};

/// Pre-activation wide residual block: BN-ReLU-conv3x3-BN-ReLU-conv3x3, with a
/// 1x1 projection on the activated input when the shape changes.
template <typename Scalar>
class WideBasicBlock final : public Layer<Scalar> {
 public:
  WideBasicBlock(int in_channels, int out_channels, int stride, double relu_slope, RngStream& rng)
      : bn1_(in_channels, 0.001),
        relu1_(relu_slope),
        conv1_(in_channels, out_channels, 3, stride, 1, false, rng),
        bn2_(out_channels, 0.001),
        relu2_(relu_slope),
        conv2_(out_channels, out_channels, 3, 1, 1, false, rng),
        identity_(in_channels == out_channels && stride == 1) {
    if (!identity_) shortcut_ = std::make_unique<Conv2d<Scalar>>(in_channels, out_channels, 1, stride, 0, false, rng);
  }

  WideBasicBlock(const WideBasicBlock& o)
      : bn1_(o.bn1_), relu1_(o.relu1_), conv1_(o.conv1_), bn2_(o.bn2_), relu2_(o.relu2_), conv2_(o.conv2_),
        identity_(o.identity_) {
    if (o.shortcut_) shortcut_ = std::make_unique<Conv2d<Scalar>>(*o.shortcut_);
  }

  Activation<Scalar> forward(const Activation<Scalar>& x) override {
    Activation<Scalar> h = relu1_.forward(bn1_.forward(x));
    Activation<Scalar> y = conv2_.forward(relu2_.forward(bn2_.forward(conv1_.forward(h))));
    y.data += identity_ ? x.data : shortcut_->forward(h).data;
    return y;
  }

  Activation<Scalar> infer(const Activation<Scalar>& x) const override {
    Activation<Scalar> h = relu1_.infer(bn1_.infer(x));
    Activation<Scalar> y = conv2_.infer(relu2_.infer(bn2_.infer(conv1_.infer(h))));
    y.data += identity_ ? x.data : shortcut_->infer(h).data;
    return y;
  }

  Activation<Scalar> backward(const Activation<Scalar>& g) override {
    Activation<Scalar> dh = conv1_.backward(bn2_.backward(relu2_.backward(conv2_.backward(g))));
    if (!identity_) dh.data += shortcut_->backward(g).data;
    Activation<Scalar> dx = bn1_.backward(relu1_.backward(dh));
    if (identity_) dx.data += g.data;
    return dx;
  }

  void collect_parameters(std::vector<Parameter<Scalar>*>& out) override {
    bn1_.collect_parameters(out);
    conv1_.collect_parameters(out);
    bn2_.collect_parameters(out);
    conv2_.collect_parameters(out);
    if (shortcut_) shortcut_->collect_parameters(out);
  }
  void collect_buffers(std::vector<Buffer<Scalar>>& out) override {
    bn1_.collect_buffers(out);
    bn2_.collect_buffers(out);
  }
  std::unique_ptr<Layer<Scalar>> clone() const override { return std::make_unique<WideBasicBlock>(*this); }

 private:
  BatchNorm2d<Scalar> bn1_;
  LeakyReLU<Scalar> relu1_;
  Conv2d<Scalar> conv1_;
  BatchNorm2d<Scalar> bn2_;
  LeakyReLU<Scalar> relu2_;
  Conv2d<Scalar> conv2_;
  std::unique_ptr<Conv2d<Scalar>> shortcut_;
  bool identity_;
};

}  // namespace rssl::nn
