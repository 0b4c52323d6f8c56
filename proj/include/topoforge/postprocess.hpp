#pragma once

#include <vector>

#include "topoforge/density_field.hpp"

namespace topoforge::post {

struct PostprocessConfig {
  double threshold = 0.5;
  int kernel_size = 5;
  double sigma = 1.0;

  void validate() const;
};

/// v -> 1 if v > t, else 0. A value exactly equal to t maps to 0.
DensityField threshold(const DensityField& field, double t);

/// 1D Gaussian weights of odd length, normalized to sum 1.
std::vector<double> gaussian_kernel(int kernel_size, double sigma);

/// Separable 2D Gaussian smoothing. Borders use half-sample symmetric
/// reflection (d c b a | a b c d | d c b a).
DensityField gaussian_smooth(const DensityField& field, int kernel_size, double sigma);

/// Arithmetic mean of the field.
double measured_volfrac(const DensityField& field);

/// threshold then gaussian_smooth.
DensityField postprocess(const DensityField& raw, const PostprocessConfig& cfg = {});

}  // namespace topoforge::post
