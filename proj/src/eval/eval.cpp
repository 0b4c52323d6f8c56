#include "topoforge/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "topoforge/errors.hpp"
#include "topoforge/grid_io.hpp"

namespace topoforge::eval {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// Population standard deviation.
double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::uint64_t condition_seed(std::uint64_t seed, std::size_t index) { return nn::mix_seed(seed, index); }

}  // namespace

std::vector<DensityField> ModelSource::generate(double volfrac, int count, std::uint64_t seed) {
  return gan::sample(*model_, volfrac, count, seed).fields;
}

std::string FidelityReport::verdict() const {
  std::ostringstream s;
  s << (collapse ? "mode collapse" : "no mode collapse") << " (across-condition std " << across_std_post
    << (across_std_post < kCollapseStd ? " < " : " >= ") << kCollapseStd << ", mean diversity " << mean_diversity
    << (mean_diversity < kCollapseDiversity ? " < " : " >= ") << kCollapseDiversity << ")";
  return s.str();
}

std::size_t FidelityReport::best_row() const {
  if (rows.empty()) throw StateError("fidelity report has no rows");
  std::size_t best = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (rows[i].post_abs_error < rows[best].post_abs_error) best = i;
  }
  return best;
}

FidelityReport condition_fidelity(StructureSource& source, const std::vector<double>& conditions, int n_per_condition,
                                  std::uint64_t seed, const post::PostprocessConfig& post) {
  if (conditions.empty()) throw ParameterError("condition_fidelity needs at least one condition");
  if (n_per_condition < 1) throw ParameterError("n_per_condition must be >= 1");
  post.validate();
  FidelityReport report;
  std::vector<double> raw_means, post_means, diversities;
  for (std::size_t c = 0; c < conditions.size(); ++c) {
    const double req = conditions[c];
    const auto fields = source.generate(req, n_per_condition, condition_seed(seed, c));
    if (static_cast<int>(fields.size()) != n_per_condition) {
      throw StateError(source.name() + " returned " + std::to_string(fields.size()) + " samples, expected " +
                       std::to_string(n_per_condition));
    }
    std::vector<double> raw, pp, raw_err, pp_err;
    std::vector<DensityField> processed;
    for (const auto& f : fields) {
      processed.push_back(post::postprocess(f, post));
      raw.push_back(post::measured_volfrac(f));
      pp.push_back(post::measured_volfrac(processed.back()));
      raw_err.push_back(std::abs(raw.back() - req));
      pp_err.push_back(std::abs(pp.back() - req));
    }
    ConditionFidelity row;
    row.requested = req;
    row.samples = n_per_condition;
    row.raw_mean = mean_of(raw);
    row.raw_std = std_of(raw);
    row.post_mean = mean_of(pp);
    row.post_std = std_of(pp);
    row.raw_abs_error = mean_of(raw_err);
    row.post_abs_error = mean_of(pp_err);
    row.diversity = processed.size() >= 2 ? diversity(processed) : 0.0;
    raw_means.push_back(row.raw_mean);
    post_means.push_back(row.post_mean);
    diversities.push_back(row.diversity);
    report.rows.push_back(row);
  }
  report.across_std_raw = std_of(raw_means);
  report.across_std_post = std_of(post_means);
  report.mean_diversity = mean_of(diversities);
  report.collapse = report.across_std_post < kCollapseStd && report.mean_diversity < kCollapseDiversity;
  return report;
}

ComplianceResult compliance_eval(const DensityField& field, const fem::MeshSpec& mesh, const fem::LoadCase& load,
                                 double penal, double x_min) {
  field.check_shape();
  if (field.nelx != mesh.nelx || field.nely != mesh.nely) {
    throw ShapeError("field " + std::to_string(field.nelx) + "x" + std::to_string(field.nely) +
                     " does not match mesh " + std::to_string(mesh.nelx) + "x" + std::to_string(mesh.nely));
  }
  if (!(x_min > 0.0 && x_min < 1.0)) throw ParameterError("x_min must lie in (0, 1)");
  ComplianceResult r;
  r.solid_compliance = fem::assemble_solve(mesh, DensityField(mesh.nelx, mesh.nely, 1.0), penal, load).compliance;
  DensityField bin = post::threshold(field, 0.5);
  for (auto& v : bin.values) v = v > 0.5 ? 1.0 : x_min;
  try {
    r.raw_compliance = fem::assemble_solve(mesh, bin, penal, load).compliance;
  } catch (const SingularSystemError& e) {
    r.reason = std::string("singular stiffness: ") + e.what();
    return r;
  } catch (const NumericError& e) {
    r.reason = std::string("ill-conditioned stiffness: ") + e.what();
    return r;
  }
  if (!std::isfinite(r.raw_compliance)) {
    r.reason = "non-finite compliance";
    return r;
  }
  if (r.raw_compliance > kDisconnectedRatio * r.solid_compliance) {
    std::ostringstream s;
    s << "load path disconnected: compliance " << r.raw_compliance << " exceeds " << kDisconnectedRatio
      << "x the solid compliance " << r.solid_compliance;
    r.reason = s.str();
    return r;
  }
  r.compliance = r.raw_compliance;
  r.feasible = true;
  return r;
}

double diversity(const std::vector<DensityField>& samples) {
  if (samples.size() < 2) throw ParameterError("diversity needs at least two samples");
  for (std::size_t i = 1; i < samples.size(); ++i) require_same_shape(samples[0], samples[i], "diversity");
  const double cells = static_cast<double>(samples[0].size());
  double total = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    for (std::size_t j = i + 1; j < samples.size(); ++j) {
      double ss = 0.0;
      for (std::size_t k = 0; k < samples[i].size(); ++k) {
        const double d = samples[i].values[k] - samples[j].values[k];
        ss += d * d;
      }
      total += std::sqrt(ss / cells);
      ++pairs;
    }
  }
  return total / static_cast<double>(pairs);
}

std::vector<TimingRow> timing_comparison(StructureSource& source, const std::vector<simp::OptimizationParams>& params,
                                         const fem::MeshSpec& mesh, int repetitions) {
  if (repetitions < 5) throw ParameterError("timing_comparison needs at least 5 repetitions");
  const auto load = fem::cantilever_load(mesh);
  std::vector<TimingRow> rows;
  for (std::size_t c = 0; c < params.size(); ++c) {
    const auto& p = params[c];
    TimingRow row;
    row.volfrac = p.volfrac;
    std::vector<double> gen, simp_t;
    for (int r = 0; r < repetitions; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto f = source.generate(p.volfrac, 1, condition_seed(c, static_cast<std::size_t>(r)));
      gen.push_back(seconds_since(t0));
      if (f.size() != 1 || f[0].nelx != mesh.nelx || f[0].nely != mesh.nely) {
        throw ShapeError(source.name() + " output does not match the " + std::to_string(mesh.nelx) + "x" +
                         std::to_string(mesh.nely) + " timing mesh");
      }
    }
    for (int r = 0; r < repetitions; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      auto res = simp::optimize(mesh, load, p);
      simp_t.push_back(seconds_since(t0));
      row.simp_compliance = res.trace.final_compliance;
      row.simp_field = std::move(res.field);
    }
    row.gen_seconds = median_of(gen);
    row.simp_seconds = median_of(simp_t);
    row.ratio = row.simp_seconds / row.gen_seconds;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string encode_pgm(const DensityField& field) {
  field.check_shape();
  std::string out = "P5\n" + std::to_string(field.nelx) + " " + std::to_string(field.nely) + "\n255\n";
  out.reserve(out.size() + field.size());
  for (double v : field.values) {
    const double c = std::clamp(v, 0.0, 1.0);
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * (1.0 - c)))));
  }
  return out;
}

EvalReport evaluate(StructureSource& source, const fem::MeshSpec& mesh, const EvalOptions& options) {
  mesh.validate();
  if (options.n_per_condition < 1) throw ParameterError("n_per_condition must be >= 1");
  EvalReport report;
  report.source = source.name();
  report.height = mesh.nely;
  report.width = mesh.nelx;
  report.fidelity = condition_fidelity(source, options.conditions, options.n_per_condition, options.seed, options.post);

  std::vector<simp::OptimizationParams> params;
  for (double v : options.conditions) {
    simp::OptimizationParams p;
    p.volfrac = v;
    p.penal = options.penal;
    p.rmin = options.rmin;
    params.push_back(p);
  }
  const auto timing = timing_comparison(source, params, mesh, options.repetitions);
  const auto load = fem::cantilever_load(mesh);
  if (!options.pgm_dir.empty()) std::filesystem::create_directories(options.pgm_dir);

  for (std::size_t c = 0; c < options.conditions.size(); ++c) {
    EvalRow row;
    row.fidelity = report.fidelity.rows[c];
    const auto fields = source.generate(options.conditions[c], options.n_per_condition, condition_seed(options.seed, c));
    std::vector<double> feasible;
    for (std::size_t i = 0; i < fields.size(); ++i) {
      const auto processed = post::postprocess(fields[i], options.post);
      const auto cr = compliance_eval(processed, mesh, load, options.penal);
      if (cr.feasible) {
        feasible.push_back(cr.compliance);
      } else {
        ++row.infeasible;
      }
      if (!options.pgm_dir.empty()) {
        char name[64];
        std::snprintf(name, sizeof name, "gen_v%.3f_%02zu.pgm", options.conditions[c], i);
        io::write_file_atomic(options.pgm_dir / name, encode_pgm(processed));
      }
    }
    if (!feasible.empty()) row.gen_compliance = mean_of(feasible);
    row.simp_compliance = timing[c].simp_compliance;
    row.gen_seconds = timing[c].gen_seconds;
    row.simp_seconds = timing[c].simp_seconds;
    row.speedup = timing[c].ratio;
    if (!options.pgm_dir.empty()) {
      char name[64];
      std::snprintf(name, sizeof name, "simp_v%.3f.pgm", options.conditions[c]);
      io::write_file_atomic(options.pgm_dir / name, encode_pgm(timing[c].simp_field));
    }
    report.rows.push_back(row);
  }
  return report;
}

namespace {

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

}  // namespace

std::string EvalReport::to_json() const {
  nlohmann::json rows_json = nlohmann::json::array();
  for (const auto& r : rows) {
    const auto& f = r.fidelity;
    rows_json.push_back({{"requested_volfrac", f.requested},
                         {"samples", f.samples},
                         {"raw_volfrac_mean", f.raw_mean},
                         {"raw_volfrac_std", f.raw_std},
                         {"post_volfrac_mean", f.post_mean},
                         {"post_volfrac_std", f.post_std},
                         {"raw_abs_error", f.raw_abs_error},
                         {"post_abs_error", f.post_abs_error},
                         {"diversity", f.diversity},
                         {"gen_compliance", number_or_null(r.gen_compliance)},
                         {"infeasible", r.infeasible},
                         {"simp_compliance", r.simp_compliance},
                         {"gen_seconds", r.gen_seconds},
                         {"simp_seconds", r.simp_seconds},
                         {"speedup", r.speedup}});
  }
  nlohmann::json j = {{"source", source},
                      {"height", height},
                      {"width", width},
                      {"rows", rows_json},
                      {"across_condition_std_raw", fidelity.across_std_raw},
                      {"across_condition_std_post", fidelity.across_std_post},
                      {"mean_diversity", fidelity.mean_diversity},
                      {"mode_collapse", fidelity.collapse},
                      {"verdict", fidelity.verdict()}};
  return j.dump(2);
}

std::string EvalReport::render_table() const {
  std::ostringstream s;
  char line[256];
  s << source << " vs SIMP at " << width << "x" << height << "\n";
  std::snprintf(line, sizeof line, "%-7s %-15s %-15s %-7s %-11s %-11s %-10s %-10s %-8s\n", "volfrac", "raw mean/std",
                "post mean/std", "div", "C gen", "C simp", "gen s", "simp s", "speedup");
  s << line;
  for (const auto& r : rows) {
    const auto& f = r.fidelity;
    char cgen[32];
    if (std::isfinite(r.gen_compliance)) {
      std::snprintf(cgen, sizeof cgen, "%.4g", r.gen_compliance);
    } else {
      std::snprintf(cgen, sizeof cgen, "inf");
    }
    std::snprintf(line, sizeof line, "%-7.3f %6.3f/%-8.3f %6.3f/%-8.3f %-7.3f %-11s %-11.4g %-10.4g %-10.4g %-8.1f\n",
                  f.requested, f.raw_mean, f.raw_std, f.post_mean, f.post_std, f.diversity, cgen, r.simp_compliance,
                  r.gen_seconds, r.simp_seconds, r.speedup);
    s << line;
  }
  s << "verdict: " << fidelity.verdict() << "\n";
  return s.str();
}

}  // namespace topoforge::eval
