#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <string>
#include <vector>

#include "topoforge/density_field.hpp"
#include "topoforge/fem.hpp"
#include "topoforge/gan.hpp"
#include "topoforge/postprocess.hpp"
#include "topoforge/simp.hpp"

namespace topoforge::eval {

/// Anything that turns a requested volume fraction into raw density fields.
class StructureSource {
 public:
  virtual ~StructureSource() = default;
  virtual std::vector<DensityField> generate(double volfrac, int count, std::uint64_t seed) = 0;
  [[nodiscard]] virtual std::string name() const = 0;
};

/// Trained generator.
class ModelSource : public StructureSource {
 public:
  explicit ModelSource(const gan::CwganModel& model) : model_(&model) {}
  std::vector<DensityField> generate(double volfrac, int count, std::uint64_t seed) override;
  [[nodiscard]] std::string name() const override { return "cwgan"; }

 private:
  const gan::CwganModel* model_;
};

struct ConditionFidelity {
  double requested = 0.0;
  int samples = 0;
  double raw_mean = 0.0;   // measured volfrac before post-processing
  double raw_std = 0.0;
  double post_mean = 0.0;  // after threshold + smoothing
  double post_std = 0.0;
  double raw_abs_error = 0.0;   // mean |measured - requested|
  double post_abs_error = 0.0;
  double diversity = 0.0;  // of the post-processed samples; 0 with one sample
};

inline constexpr double kCollapseStd = 0.02;
inline constexpr double kCollapseDiversity = 0.05;

struct FidelityReport {
  std::vector<ConditionFidelity> rows;
  double across_std_raw = 0.0;   // population std of per-condition raw means
  double across_std_post = 0.0;
  double mean_diversity = 0.0;
  bool collapse = false;  // across_std_post < kCollapseStd && mean_diversity < kCollapseDiversity
  [[nodiscard]] std::string verdict() const;
  /// Row with the smallest post-processed error.
  [[nodiscard]] std::size_t best_row() const;
};

/// Samples `n_per_condition` structures per condition with seeds derived from
/// `seed` and the condition index.
FidelityReport condition_fidelity(StructureSource& source, const std::vector<double>& conditions, int n_per_condition,
                                  std::uint64_t seed, const post::PostprocessConfig& post = {});

inline constexpr double kInfeasible = std::numeric_limits<double>::infinity();
inline constexpr double kDisconnectedRatio = 1e3;

struct ComplianceResult {
  double compliance = kInfeasible;  // kInfeasible unless feasible
  double raw_compliance = kInfeasible;  // FEA value before the feasibility verdict
  double solid_compliance = 0.0;
  bool feasible = false;
  std::string reason;  // empty when feasible
};

/// Binarizes at 0.5 (void -> x_min), solves, and flags singular or
/// ill-conditioned systems and any compliance above kDisconnectedRatio times
/// the solid compliance.
ComplianceResult compliance_eval(const DensityField& field, const fem::MeshSpec& mesh, const fem::LoadCase& load,
                                 double penal = 3.0, double x_min = kMinDensity);

/// Mean over pairs of ||a - b||_2 / sqrt(cells). Throws ParameterError with
/// fewer than two samples or mismatched shapes.
double diversity(const std::vector<DensityField>& samples);

struct TimingRow {
  double volfrac = 0.0;
  double gen_seconds = 0.0;   // median per-sample generation time
  double simp_seconds = 0.0;  // median optimize() wall time
  double ratio = 0.0;         // simp / gen
  double simp_compliance = 0.0;
  DensityField simp_field;
};

/// Median wall-clock over `repetitions` (>= 5) of one-sample generation and of
/// one SIMP run per parameter set, on the source's own mesh.
std::vector<TimingRow> timing_comparison(StructureSource& source, const std::vector<simp::OptimizationParams>& params,
                                         const fem::MeshSpec& mesh, int repetitions = 5);

struct EvalOptions {
  std::vector<double> conditions{0.3, 0.4, 0.5, 0.6, 0.7};
  int n_per_condition = 8;
  std::uint64_t seed = 0;
  int repetitions = 5;
  double penal = 3.0;  // SIMP reference and compliance scoring
  double rmin = 1.5;
  post::PostprocessConfig post;
  std::filesystem::path pgm_dir;  // empty skips image dumps
};

struct EvalRow {
  ConditionFidelity fidelity;
  double gen_compliance = kInfeasible;  // mean over feasible post-processed samples
  int infeasible = 0;
  double simp_compliance = 0.0;
  double gen_seconds = 0.0;
  double simp_seconds = 0.0;
  double speedup = 0.0;
};

struct EvalReport {
  std::string source;
  int height = 0;
  int width = 0;
  std::vector<EvalRow> rows;  // one per requested condition, same order
  FidelityReport fidelity;

  [[nodiscard]] std::string to_json() const;
  [[nodiscard]] std::string render_table() const;
};

EvalReport evaluate(StructureSource& source, const fem::MeshSpec& mesh, const EvalOptions& options);

/// Binary PGM (P5), 0 density white, 1 black.
std::string encode_pgm(const DensityField& field);

}  // namespace topoforge::eval
