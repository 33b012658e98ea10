#include <cmath>
#include <functional>

#include "doctest.h"
#include "rebalance_ssl/nn/layers.hpp"

using namespace rssl;
using namespace rssl::nn;

namespace {

Activation<double> random_activation(RngStream& rng, int c, int n, int h, int w) {
  Activation<double> x(c, n, h, w);
  for (Eigen::Index i = 0; i < x.data.size(); ++i) x.data.data()[i] = rng.normal();
  return x;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-7}); }

// Loss = sum(r .* layer.forward(x)). Compares the analytic input and parameter
// gradients against central differences.
void check_layer(Layer<double>& layer, Activation<double> x, RngStream& rng, double tol = 1e-6) {
  const Activation<double> y0 = layer.forward(x);
  Mat<double> r(y0.data.rows(), y0.data.cols());
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();

  std::vector<Parameter<double>*> params;
  layer.collect_parameters(params);
  for (auto* p : params) p->grad.setZero();
  layer.forward(x);
  Activation<double> g = y0;
  g.data = r;
  const Activation<double> dx = layer.backward(g);

  auto loss = [&]() { return (layer.forward(x).data.array() * r.array()).sum(); };
  const double h = 1e-5;
  for (int k = 0; k < 12; ++k) {
    const Eigen::Index i = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(x.data.size())));
    double& v = x.data.data()[i];
    const double saved = v;
    v = saved + h;
    const double up = loss();
    v = saved - h;
    const double down = loss();
    v = saved;
    CHECK(rel_err(dx.data.data()[i], (up - down) / (2 * h)) < tol);
  }
  for (auto* p : params)
    for (int k = 0; k < 6; ++k) {
      const Eigen::Index i = static_cast<Eigen::Index>(rng.uniform_index(static_cast<std::uint64_t>(p->value.size())));
      double& v = p->value.data()[i];
      const double saved = v;
      v = saved + h;
      const double up = loss();
      v = saved - h;
      const double down = loss();
      v = saved;
      INFO(p->name);
      CHECK(rel_err(p->grad.data()[i], (up - down) / (2 * h)) < tol);
    }
}

}  // namespace

TEST_CASE("conv2d gradients") {
  RngStream rng(1);
  Conv2d<double> conv(3, 4, 3, 1, 1, true, rng);
  check_layer(conv, random_activation(rng, 3, 2, 5, 6), rng);
  Conv2d<double> strided(2, 3, 3, 2, 1, false, rng);
  check_layer(strided, random_activation(rng, 2, 2, 7, 6), rng);
  Conv2d<double> pointwise(3, 2, 1, 1, 0, false, rng);
  check_layer(pointwise, random_activation(rng, 3, 2, 4, 4), rng);
}

TEST_CASE("batchnorm gradients in training mode") {
  RngStream rng(2);
  BatchNorm2d<double> bn(3);
  std::vector<Parameter<double>*> ps;
  bn.collect_parameters(ps);
  for (auto* p : ps)
    for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += 0.3 * rng.normal();
  check_layer(bn, random_activation(rng, 3, 3, 3, 3), rng, 1e-5);
}

TEST_CASE("activation and pooling gradients") {
  RngStream rng(3);
  LeakyReLU<double> relu;
  check_layer(relu, random_activation(rng, 2, 2, 3, 3), rng);
  LeakyReLU<double> leaky(0.1);
  check_layer(leaky, random_activation(rng, 2, 2, 3, 3), rng);
  SiLU<double> silu;
  check_layer(silu, random_activation(rng, 2, 2, 3, 3), rng);
  MaxPool2<double> pool;
  check_layer(pool, random_activation(rng, 2, 2, 4, 6), rng);
  GlobalAvgPool<double> gap;
  check_layer(gap, random_activation(rng, 3, 2, 3, 4), rng);
  Linear<double> fc(5, 3, rng);
  check_layer(fc, random_activation(rng, 5, 4, 1, 1), rng);
}

TEST_CASE("wide block gradients, identity and projection shortcuts") {
  RngStream rng(4);
  WideBasicBlock<double> same(4, 4, 1, 0.1, rng);
  check_layer(same, random_activation(rng, 4, 2, 4, 4), rng, 1e-5);
  WideBasicBlock<double> down(3, 5, 2, 0.1, rng);
  check_layer(down, random_activation(rng, 3, 2, 6, 6), rng, 1e-5);
}

TEST_CASE("batchnorm inference uses running statistics") {
  RngStream rng(5);
  BatchNorm2d<double> bn(2, 1.0);  // momentum 1: running stats become the last batch's
  Activation<double> x = random_activation(rng, 2, 4, 3, 3);
  const Activation<double> train = bn.forward(x);
  const Activation<double> eval = bn.infer(x);
  // Running variance is unbiased, so eval differs from train by sqrt((m-1)/m) only.
  const double m = static_cast<double>(x.data.cols());
  CHECK(((eval.data - train.data * std::sqrt((m - 1) / m)).array().abs().maxCoeff()) < 1e-3);
}

TEST_CASE("im2col and col2im are adjoint") {
  RngStream rng(6);
  const Activation<double> x = random_activation(rng, 2, 2, 5, 4);
  const int k = 3, stride = 2, pad = 1;
  const int oh = (5 + 2 * pad - k) / stride + 1, ow = (4 + 2 * pad - k) / stride + 1;
  const Mat<double> cols = im2col(x, k, stride, pad, oh, ow);
  Mat<double> r(cols.rows(), cols.cols());
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = rng.normal();
  Activation<double> back(2, 2, 5, 4);
  col2im_add(r, k, stride, pad, oh, ow, back);
  CHECK((cols.array() * r.array()).sum() == doctest::Approx((x.data.array() * back.data.array()).sum()));
}
