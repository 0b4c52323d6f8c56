#include "topoforge/density_field.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "topoforge/errors.hpp"

namespace topoforge {

DensityField::DensityField(int nelx_, int nely_, double fill)
    : nelx(nelx_), nely(nely_) {
  if (nelx_ < 1 || nely_ < 1) {
    throw ShapeError("density field dimensions must be >= 1, got " + std::to_string(nelx_) + "x" +
                     std::to_string(nely_));
  }
  values.assign(static_cast<std::size_t>(nelx_) * nely_, fill);
}

DensityField::DensityField(int nelx_, int nely_, std::vector<double> values_)
    : nelx(nelx_), nely(nely_), values(std::move(values_)) {
  check_shape();
}

double DensityField::mean() const {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double DensityField::min() const {
  return values.empty() ? 0.0 : *std::min_element(values.begin(), values.end());
}

double DensityField::max() const {
  return values.empty() ? 0.0 : *std::max_element(values.begin(), values.end());
}

void DensityField::check_shape() const {
  if (nelx < 1 || nely < 1) {
    throw ShapeError("density field dimensions must be >= 1, got " + std::to_string(nelx) + "x" +
                     std::to_string(nely));
  }
  const auto expected = static_cast<std::size_t>(nelx) * static_cast<std::size_t>(nely);
  if (values.size() != expected) {
    throw ShapeError("density field " + std::to_string(nelx) + "x" + std::to_string(nely) + " holds " +
                     std::to_string(values.size()) + " values, expected " + std::to_string(expected));
  }
}

void DensityField::check_range(double lo, double hi) const {
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double v = values[i];
    if (!std::isfinite(v) || v < lo || v > hi) {
      throw ParameterError("density value " + std::to_string(v) + " at element " + std::to_string(i) +
                           " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
  }
}

void require_same_shape(const DensityField& a, const DensityField& b, const char* what) {
  if (a.nelx != b.nelx || a.nely != b.nely || a.values.size() != b.values.size()) {
    throw ShapeError(std::string(what) + ": fields " + std::to_string(a.nelx) + "x" + std::to_string(a.nely) +
                     " and " + std::to_string(b.nelx) + "x" + std::to_string(b.nely) + " differ in shape");
  }
}

}  // namespace topoforge
