#include "topoforge/postprocess.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "topoforge/errors.hpp"

namespace topoforge::post {

void PostprocessConfig::validate() const {
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw ParameterError("threshold must lie in (0, 1), got " + std::to_string(threshold));
  }
  if (kernel_size < 1 || kernel_size % 2 == 0) {
    throw ParameterError("kernel_size must be odd and >= 1, got " + std::to_string(kernel_size));
  }
  if (!(sigma > 0.0) || !std::isfinite(sigma)) throw ParameterError("sigma must be > 0");
}

DensityField threshold(const DensityField& field, double t) {
  field.check_shape();
  DensityField out(field.nelx, field.nely);
  for (std::size_t i = 0; i < field.size(); ++i) out.values[i] = field.values[i] > t ? 1.0 : 0.0;
  return out;
}

std::vector<double> gaussian_kernel(int kernel_size, double sigma) {
  PostprocessConfig{0.5, kernel_size, sigma}.validate();
  const int half = kernel_size / 2;
  std::vector<double> w(static_cast<std::size_t>(kernel_size));
  double sum = 0.0;
  for (int i = -half; i <= half; ++i) {
    const double v = std::exp(-0.5 * (i * i) / (sigma * sigma));
    w[static_cast<std::size_t>(i + half)] = v;
    sum += v;
  }
  for (auto& v : w) v /= sum;
  return w;
}

namespace {

int reflect(int i, int n) {
  // Period 2n mirror with the edge sample repeated.
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

}  // namespace

DensityField gaussian_smooth(const DensityField& field, int kernel_size, double sigma) {
  field.check_shape();
  const auto w = gaussian_kernel(kernel_size, sigma);
  const int half = kernel_size / 2;
  const int nx = field.nelx;
  const int ny = field.nely;

  DensityField tmp(nx, ny);
  for (int y = 0; y < ny; ++y) {
    for (int x = 0; x < nx; ++x) {
      double s = 0.0;
      for (int k = -half; k <= half; ++k) s += w[static_cast<std::size_t>(k + half)] * field.at(reflect(x + k, nx), y);
      tmp.at(x, y) = s;
    }
  }
  DensityField out(nx, ny);
  const double lo = field.min();
  const double hi = field.max();
  for (int y = 0; y < ny; ++y) {
    for (int x = 0; x < nx; ++x) {
      double s = 0.0;
      for (int k = -half; k <= half; ++k) s += w[static_cast<std::size_t>(k + half)] * tmp.at(x, reflect(y + k, ny));
      // Rounding can leave a convex combination an ulp outside the input range.
      out.at(x, y) = std::min(hi, std::max(lo, s));
    }
  }
  return out;
}

double measured_volfrac(const DensityField& field) {
  field.check_shape();
  return field.mean();
}

DensityField postprocess(const DensityField& raw, const PostprocessConfig& cfg) {
  cfg.validate();
  return gaussian_smooth(threshold(raw, cfg.threshold), cfg.kernel_size, cfg.sigma);
}

}  // namespace topoforge::post
