#pragma once

#include <functional>
#include <vector>

#include "topoforge/density_field.hpp"
#include "topoforge/fem.hpp"

namespace topoforge::simp {

struct OptimizationParams {
  double volfrac = 0.5;
  double penal = 3.0;
  double rmin = 1.5;          // filter radius in element widths
  double move_limit = 0.2;    // per-iteration bound on |x_new - x|
  double change_tol = 0.01;   // stop when max |x_new - x| drops below this
  int max_iters = 200;
  double x_min = kMinDensity;
  double volume_tolerance = 1e-4;  // |mean(x_new) - volfrac| after each OC update

  void validate() const;
};

struct IterationRecord {
  int iteration = 0;          // 1-based
  double compliance = 0.0;    // of the field that entered this iteration
  double change = 0.0;        // max |x_new - x|
  double mean_density = 0.0;  // of x_new
};

struct OptimizationTrace {
  std::vector<IterationRecord> iterations;
  double initial_compliance = 0.0;  // uniform starting field
  double final_compliance = 0.0;    // returned field
  double wall_seconds = 0.0;
  bool converged = false;

  [[nodiscard]] int iteration_count() const { return static_cast<int>(iterations.size()); }
};

struct OptimizationResult {
  DensityField field;
  OptimizationTrace trace;
};

/// Mesh-independency filter on compliance sensitivities:
///   out_e = sum_i w_i x_i dc_i / (x_e sum_i w_i),  w_i = max(0, rmin - dist(e, i)).
DensityField sensitivity_filter(const DensityField& x, const DensityField& dc, double rmin);

/// Optimality-criteria update with move limit and a bisected Lagrange
/// multiplier that restores mean(x_new) = volfrac.
DensityField oc_update(const DensityField& x, const DensityField& dc, const OptimizationParams& params);

using IterationCallback = std::function<void(const IterationRecord&)>;

/// SIMP loop from a uniform field: solve, sensitivities, filter, OC update,
/// until the largest density change falls below change_tol or max_iters is hit.
OptimizationResult optimize(const fem::MeshSpec& mesh, const fem::LoadCase& load, const OptimizationParams& params,
                            const IterationCallback& on_iteration = {}, const fem::SolveOptions& solve = {});

}  // namespace topoforge::simp
