#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace topoforge {

/// Lower density bound used by the optimizer and by compliance scoring.
inline constexpr double kMinDensity = 1e-3;

/// Rectangular grid of element densities.
///
/// Storage is row-major with `nely` rows of `nelx` values; row 0 is the top
/// of the design domain (y points down), so element (elx, ely) lives at
/// `ely * nelx + elx`.
struct DensityField {
  int nelx = 0;
  int nely = 0;
  std::vector<double> values;

  DensityField() = default;
  DensityField(int nelx_, int nely_, double fill = 0.0);
  DensityField(int nelx_, int nely_, std::vector<double> values_);

  [[nodiscard]] std::size_t size() const { return values.size(); }
  [[nodiscard]] double& at(int elx, int ely) { return values[static_cast<std::size_t>(ely) * nelx + elx]; }
  [[nodiscard]] double at(int elx, int ely) const { return values[static_cast<std::size_t>(ely) * nelx + elx]; }

  [[nodiscard]] double mean() const;
  [[nodiscard]] double min() const;
  [[nodiscard]] double max() const;

  /// Throws ShapeError if `values.size() != nelx * nely` or a dimension is < 1.
  void check_shape() const;
  /// Throws ParameterError unless every value is finite and inside [lo, hi].
  void check_range(double lo, double hi) const;

  bool operator==(const DensityField&) const = default;
};

/// Throws ShapeError when the two fields do not share dimensions.
void require_same_shape(const DensityField& a, const DensityField& b, const char* what);

}  // namespace topoforge
