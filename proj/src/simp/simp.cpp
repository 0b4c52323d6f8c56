#include "topoforge/simp.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>
#include <string>

#include "topoforge/errors.hpp"

namespace topoforge::simp {

void OptimizationParams::validate() const {
  if (!(volfrac > 0.0 && volfrac < 1.0)) {
    throw ParameterError("volfrac must lie in (0, 1), got " + std::to_string(volfrac));
  }
  if (!(penal >= 1.0) || !std::isfinite(penal)) throw ParameterError("penal must be >= 1, got " + std::to_string(penal));
  if (!(rmin > 0.0) || !std::isfinite(rmin)) throw ParameterError("rmin must be > 0, got " + std::to_string(rmin));
  if (!(move_limit > 0.0 && move_limit <= 1.0)) {
    throw ParameterError("move_limit must lie in (0, 1], got " + std::to_string(move_limit));
  }
  if (!(change_tol > 0.0)) throw ParameterError("change_tol must be > 0");
  if (max_iters < 1) throw ParameterError("max_iters must be >= 1");
  if (!(x_min > 0.0 && x_min < volfrac)) throw ParameterError("x_min must lie in (0, volfrac)");
  if (!(volume_tolerance > 0.0)) throw ParameterError("volume_tolerance must be > 0");
}

DensityField sensitivity_filter(const DensityField& x, const DensityField& dc, double rmin) {
  require_same_shape(x, dc, "sensitivity_filter");
  if (!(rmin > 0.0)) throw ParameterError("rmin must be > 0, got " + std::to_string(rmin));
  // Only the element itself lies strictly inside the radius.
  if (rmin <= 1.0) return dc;

  const int reach = static_cast<int>(std::floor(rmin));
  DensityField out(x.nelx, x.nely);
  for (int i = 0; i < x.nelx; ++i) {
    for (int j = 0; j < x.nely; ++j) {
      double weight_sum = 0.0;
      double acc = 0.0;
      for (int k = std::max(i - reach, 0); k <= std::min(i + reach, x.nelx - 1); ++k) {
        for (int l = std::max(j - reach, 0); l <= std::min(j + reach, x.nely - 1); ++l) {
          const double w = rmin - std::sqrt(static_cast<double>((i - k) * (i - k) + (j - l) * (j - l)));
          if (w <= 0.0) continue;
          weight_sum += w;
          acc += w * x.at(k, l) * dc.at(k, l);
        }
      }
      const double xe = x.at(i, j);
      if (!(xe > 0.0)) throw ParameterError("sensitivity_filter needs strictly positive densities");
      out.at(i, j) = acc / (xe * weight_sum);
    }
  }
  return out;
}

namespace {

struct OcBounds {
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<double> scale;  // x_e * sqrt(-dc_e)
};

double mean_for_multiplier(const OcBounds& b, double lambda, std::vector<double>* out) {
  const double inv = 1.0 / std::sqrt(lambda);
  double sum = 0.0;
  for (std::size_t e = 0; e < b.scale.size(); ++e) {
    const double v = std::clamp(b.scale[e] * inv, b.lower[e], b.upper[e]);
    if (out != nullptr) (*out)[e] = v;
    sum += v;
  }
  return sum / static_cast<double>(b.scale.size());
}

}  // namespace

DensityField oc_update(const DensityField& x, const DensityField& dc, const OptimizationParams& params) {
  require_same_shape(x, dc, "oc_update");
  params.validate();
  OcBounds b;
  const std::size_t n = x.size();
  b.lower.resize(n);
  b.upper.resize(n);
  b.scale.resize(n);
  for (std::size_t e = 0; e < n; ++e) {
    if (dc.values[e] > 0.0) {
      throw ParameterError("oc_update needs non-positive sensitivities, element " + std::to_string(e) + " has " +
                           std::to_string(dc.values[e]));
    }
    b.lower[e] = std::max(params.x_min, x.values[e] - params.move_limit);
    b.upper[e] = std::min(1.0, x.values[e] + params.move_limit);
    b.scale[e] = x.values[e] * std::sqrt(-dc.values[e]);
  }

  const double target = params.volfrac;
  const double tol = params.volume_tolerance;
  double lo = 1e-9;
  double hi = 1e9;
  const double v_lo = mean_for_multiplier(b, lo, nullptr);
  const double v_hi = mean_for_multiplier(b, hi, nullptr);
  if (v_lo < target - tol || v_hi > target + tol) {
    std::ostringstream msg;
    msg << "oc_update bisection does not bracket volfrac " << target << ": mean " << v_lo << " at lambda=" << lo
        << ", mean " << v_hi << " at lambda=" << hi;
    throw NumericError(msg.str());
  }

  DensityField out(x.nelx, x.nely);
  if (std::abs(v_lo - target) <= tol) {
    mean_for_multiplier(b, lo, &out.values);
    return out;
  }
  if (std::abs(v_hi - target) <= tol) {
    mean_for_multiplier(b, hi, &out.values);
    return out;
  }
  // Geometric bisection; the mean is continuous and non-increasing in lambda.
  while (hi / lo - 1.0 > 1e-14) {
    const double mid = std::sqrt(lo * hi);
    const double v = mean_for_multiplier(b, mid, &out.values);
    if (std::abs(v - target) <= tol) return out;
    if (v > target) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  std::ostringstream msg;
  msg << "oc_update bisection collapsed at lambda in [" << lo << ", " << hi << "] without meeting volfrac " << target;
  throw NumericError(msg.str());
}

OptimizationResult optimize(const fem::MeshSpec& mesh, const fem::LoadCase& load, const OptimizationParams& params,
                            const IterationCallback& on_iteration, const fem::SolveOptions& solve) {
  params.validate();
  const auto start = std::chrono::steady_clock::now();
  fem::StiffnessSystem system(mesh, load, solve);

  OptimizationResult result;
  result.field = DensityField(mesh.nelx, mesh.nely, params.volfrac);
  auto& trace = result.trace;

  for (int it = 1; it <= params.max_iters; ++it) {
    const auto solved = system.solve(result.field, params.penal);
    if (it == 1) trace.initial_compliance = solved.compliance;
    const auto dc = fem::compliance_sensitivity(result.field, solved, params.penal);
    const auto filtered = sensitivity_filter(result.field, dc, params.rmin);
    auto next = oc_update(result.field, filtered, params);

    double change = 0.0;
    for (std::size_t e = 0; e < next.size(); ++e) {
      change = std::max(change, std::abs(next.values[e] - result.field.values[e]));
    }
    IterationRecord rec{it, solved.compliance, change, next.mean()};
    if (std::abs(rec.mean_density - params.volfrac) > params.volume_tolerance) {
      throw NumericError("volume constraint violated at iteration " + std::to_string(it));
    }
    trace.iterations.push_back(rec);
    if (on_iteration) on_iteration(rec);
    result.field = std::move(next);
    if (change < params.change_tol) {
      trace.converged = true;
      break;
    }
  }
  trace.final_compliance = system.solve(result.field, params.penal).compliance;
  trace.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace topoforge::simp
