// Acceptance run: one PASS/FAIL line per primary criterion. Exit status is 0
// only when every selected criterion passes inside its time budget.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "fem_oracles.hpp"
#include "nn_gradcheck.hpp"
#include "test_support.hpp"
#include "topoforge/dataset.hpp"
#include "topoforge/errors.hpp"
#include "topoforge/eval.hpp"
#include "topoforge/fem.hpp"
#include "topoforge/gan.hpp"
#include "topoforge/postprocess.hpp"
#include "topoforge/simp.hpp"

using namespace topoforge;
namespace fs = std::filesystem;

namespace {

class Verdict {
 public:
  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass_ = false;
      failures_.push_back(what);
    }
  }
  void note(const std::string& s) { notes_.push_back(s); }
  [[nodiscard]] bool pass() const { return pass_; }
  [[nodiscard]] std::string detail() const {
    std::string out;
    for (const auto& f : failures_) out += (out.empty() ? "" : "; ") + ("FAILED " + f);
    for (const auto& n : notes_) out += (out.empty() ? "" : "; ") + n;
    return out;
  }

 private:
  bool pass_ = true;
  std::vector<std::string> failures_;
  std::vector<std::string> notes_;
};

std::string fmt(double v, int prec = 3) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

DensityField random_field(int nelx, int nely, std::uint64_t seed, double lo, double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  DensityField f(nelx, nely);
  for (auto& v : f.values) v = u(rng);
  return f;
}

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

// Element stiffness vs 2x2 Gauss quadrature; small-mesh solves vs dense
// elimination for every solver.
Verdict fea_oracles() {
  Verdict v;
  double worst_k = 0.0;
  for (double nu : {0.0, 0.25, 0.3, 0.45}) {
    for (double young : {1.0, 210.0}) {
      const auto ke = fem::element_stiffness(young, nu);
      const auto ref = oracle::quadrature_element_stiffness(young, nu);
      for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 8; ++j) worst_k = std::max(worst_k, std::abs(ke(i, j) - ref[i][j]) / young);
      }
    }
  }
  v.require(worst_k <= 1e-12, "element stiffness error " + fmt(worst_k));
  v.note("max |ke - quadrature| " + fmt(worst_k));

  double worst_u = 0.0;
  for (auto [nx, ny] : {std::pair{2, 1}, std::pair{4, 4}, std::pair{8, 6}, std::pair{12, 5}, std::pair{16, 16}}) {
    const fem::MeshSpec mesh{nx, ny};
    const auto x = random_field(nx, ny, 100u + nx * 17u + ny, 1e-3, 1.0);
    const auto u = oracle::dense_cantilever_displacements(nx, ny, x.values, 3.0);
    const double scale = max_abs(u);
    for (auto kind : {fem::SolverKind::kCholesky, fem::SolverKind::kConjugateGradient, fem::SolverKind::kDense}) {
      fem::SolveOptions opt;
      opt.solver = kind;
      opt.cg_tolerance = 1e-12;
      const auto r = fem::assemble_solve(mesh, x, 3.0, fem::cantilever_load(mesh), opt);
      for (std::size_t i = 0; i < u.size(); ++i) worst_u = std::max(worst_u, std::abs(r.displacements[i] - u[i]) / scale);
    }
  }
  v.require(worst_u <= 1e-9, "solve relative error " + fmt(worst_u));
  v.note("max relative displacement error " + fmt(worst_u));
  return v;
}

Verdict sensitivity_fd() {
  Verdict v;
  const fem::MeshSpec mesh{60, 20};
  const auto load = fem::cantilever_load(mesh);
  const auto x = random_field(60, 20, 2025, 0.3, 0.9);
  const double penal = 3.0;
  const auto dc = fem::compliance_sensitivity(x, fem::assemble_solve(mesh, x, penal, load), penal);
  fem::StiffnessSystem system(mesh, load);
  std::mt19937_64 rng(71);
  std::uniform_int_distribution<std::size_t> pick(0, x.size() - 1);
  const double h = 1e-6;
  double worst = 0.0;
  for (int probe = 0; probe < 10; ++probe) {
    const std::size_t e = pick(rng);
    auto xp = x, xm = x;
    xp.values[e] += h;
    xm.values[e] -= h;
    const double fd = (system.solve(xp, penal).compliance - system.solve(xm, penal).compliance) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - dc.values[e]) / std::abs(dc.values[e]));
  }
  v.require(worst <= 1e-3, "relative error " + fmt(worst));
  v.note("10 elements, max relative error " + fmt(worst));
  return v;
}

// optimize() is run as-is, and its loop is replayed step by step from the
// public building blocks so every OC iterate can be measured directly.
Verdict simp_invariant() {
  Verdict v;
  const fem::MeshSpec mesh{60, 20};
  const auto load = fem::cantilever_load(mesh);
  for (double vf : {0.3, 0.5, 0.7}) {
    simp::OptimizationParams p;
    p.volfrac = vf;
    const auto r = simp::optimize(mesh, load, p);

    fem::StiffnessSystem system(mesh, load);
    DensityField x(mesh.nelx, mesh.nely, vf);
    double worst_iter = 0.0;
    int iters = 0;
    for (int it = 1; it <= p.max_iters; ++it) {
      const auto solved = system.solve(x, p.penal);
      auto next = simp::oc_update(x, simp::sensitivity_filter(x, fem::compliance_sensitivity(x, solved, p.penal), p.rmin), p);
      long double sum = 0.0L;
      for (double d : next.values) sum += d;
      worst_iter = std::max(worst_iter, std::abs(static_cast<double>(sum / next.size()) - vf));
      double change = 0.0;
      for (std::size_t e = 0; e < x.size(); ++e) change = std::max(change, std::abs(next.values[e] - x.values[e]));
      x = std::move(next);
      ++iters;
      if (change < p.change_tol) break;
    }
    long double sum = 0.0L;
    for (double d : r.field.values) sum += d;
    const double final_err = std::abs(static_cast<double>(sum / r.field.size()) - vf);
    double trace_worst = 0.0;
    for (const auto& rec : r.trace.iterations) trace_worst = std::max(trace_worst, std::abs(rec.mean_density - vf));

    const std::string tag = "volfrac " + fmt(vf, 2);
    v.require(iters == r.trace.iteration_count() && x == r.field, tag + " replay differs from optimize()");
    v.require(worst_iter <= 1e-4 && trace_worst <= 1e-4, tag + " iterate volume error " + fmt(worst_iter));
    v.require(!r.trace.converged || final_err <= 1e-3, tag + " final volume error " + fmt(final_err));
    v.require(r.trace.final_compliance < r.trace.initial_compliance, tag + " compliance did not decrease");
    v.note(tag + ": " + std::to_string(iters) + " it" + (r.trace.converged ? " converged" : " capped") +
           ", max iterate error " + fmt(std::max(worst_iter, trace_worst)) + ", c " + fmt(r.trace.initial_compliance, 4) +
           " -> " + fmt(r.trace.final_compliance, 4));
  }
  return v;
}

Verdict dataset_grid() {
  Verdict v;
  const auto spec = dataset::GridSpec::full();
  const auto params = dataset::enumerate_grid(spec);
  v.require(params.size() == 3024 && spec.cardinality() == 3024, "size " + std::to_string(params.size()));
  // Independent count: axis values written out by hand.
  const std::vector<double> vfs{0.30, 0.35, 0.40, 0.45, 0.50, 0.55, 0.60, 0.65, 0.70};
  std::vector<double> penals, rmins;
  for (int i = 0; i <= 20; ++i) penals.push_back(2.0 + 0.1 * i);
  for (int i = 0; i <= 15; ++i) rmins.push_back(1.5 + 0.1 * i);
  v.require(vfs.size() * penals.size() * rmins.size() == params.size(), "differs from 9 x 21 x 16");
  std::set<std::tuple<long, long, long>> seen;
  bool on_axes = true;
  auto near_any = [](double a, const std::vector<double>& axis) {
    return std::any_of(axis.begin(), axis.end(), [&](double b) { return std::abs(a - b) < 1e-9; });
  };
  for (const auto& q : params) {
    on_axes = on_axes && near_any(q.volfrac, vfs) && near_any(q.penal, penals) && near_any(q.rmin, rmins);
    seen.insert({std::lround(q.volfrac * 1e6), std::lround(q.penal * 1e6), std::lround(q.rmin * 1e6)});
  }
  v.require(on_axes, "value off the axis grid");
  v.require(seen.size() == params.size(), "duplicate triples");
  auto has = [&](double a, double b, double c) {
    return seen.count({std::lround(a * 1e6), std::lround(b * 1e6), std::lround(c * 1e6)}) == 1;
  };
  v.require(has(0.3, 2.0, 1.5) && has(0.7, 4.0, 3.0), "endpoints not inclusive");
  v.require(dataset::GridSpec::desk().cardinality() == 180, "desk grid not 180");
  v.note(std::to_string(params.size()) + " unique triples, endpoints inclusive, desk 180");
  return v;
}

Verdict gradient_suite() {
  Verdict v;
  double worst = 0.0;
  std::string worst_case;
  for (const auto& c : oracle::gradient_cases()) {
    const auto r = oracle::run_gradient_case(c, 100, 4242);
    v.require(r.probes == 100 && r.max_rel_error < 1e-4, c.name + " " + r.worst);
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_case = c.name;
    }
  }
  v.note(std::to_string(oracle::gradient_cases().size()) + " layer cases x 100 probes, worst " + fmt(worst) + " (" +
         worst_case + ")");
  return v;
}

gan::GanConfig toy_config() {
  gan::GanConfig c;
  c.height = c.width = 16;
  c.latent_dim = 8;
  c.batch_size = 4;
  c.n_critic = 5;
  c.stages = 2;
  c.generator_channels = {4, 2};
  c.critic_channels = {2, 4};
  c.clip_c = 0.01;
  c.epochs = 100;
  c.seed = 5;
  return c;
}

double max_abs_params(gan::ConditionalNet<float>& net) {
  double m = 0.0;
  for (auto* p : net.parameters()) {
    for (float w : p->value.data) m = std::max(m, static_cast<double>(std::abs(w)));
  }
  return m;
}

Verdict wgan_mechanics(const fs::path& work) {
  Verdict v;
  const auto dir = work / "wgan_toy";
  fs::remove_all(dir);
  const auto manifest = oracle::synthetic_dataset(dir / "data", 12, 16, 16, 8);
  const dataset::DatasetLoader loader(manifest);
  const auto cfg = toy_config();
  const std::uint64_t steps = 50;

  gan::Trainer straight(cfg, loader);
  double worst_live = 0.0;
  for (std::uint64_t s = 0; s < steps; ++s) {
    straight.train_steps(1);
    worst_live = std::max(worst_live, max_abs_params(straight.critic()));
  }
  const auto& m = straight.metrics();
  double worst_logged = 0.0;
  bool schedule = m.size() == steps * (cfg.n_critic + 1);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const bool expect_critic = i % (cfg.n_critic + 1) != static_cast<std::size_t>(cfg.n_critic);
    schedule = schedule && m[i].critic == expect_critic && m[i].step == i &&
               m[i].generator_step == i / (cfg.n_critic + 1);
    if (m[i].critic) worst_logged = std::max(worst_logged, m[i].max_abs_critic_weight);
  }
  v.require(worst_logged <= cfg.clip_c, "logged critic weight " + fmt(worst_logged));
  v.require(worst_live <= cfg.clip_c, "critic weight " + fmt(worst_live));
  v.require(schedule, "schedule is not " + std::to_string(cfg.n_critic) + ":1");

  bool bitwise = true;
  for (std::uint64_t cut : {7u, 25u}) {
    const auto run = dir / ("cut" + std::to_string(cut));
    {
      gan::Trainer first(cfg, loader);
      first.train_steps(cut);
      first.save(run);
    }
    auto resumed = gan::Trainer::resume(run, loader);
    resumed.train_steps(steps - cut);
    bitwise = bitwise && resumed.metrics().size() == m.size();
    for (std::size_t i = 0; bitwise && i < m.size(); ++i) bitwise = resumed.metrics()[i].same_values(m[i]);
    const auto pa = resumed.generator().parameters();
    const auto pb = straight.generator().parameters();
    for (std::size_t i = 0; bitwise && i < pa.size(); ++i) bitwise = pa[i]->value.data == pb[i]->value.data;
    const auto ca = resumed.critic().parameters();
    const auto cb = straight.critic().parameters();
    for (std::size_t i = 0; bitwise && i < ca.size(); ++i) bitwise = ca[i]->value.data == cb[i]->value.data;
  }
  v.require(bitwise, "resume differs from the uninterrupted run");
  v.note(std::to_string(steps) + " generator steps (" + std::to_string(m.size()) + " updates), max |w| " +
         fmt(std::max(worst_live, worst_logged)) + " <= " + fmt(cfg.clip_c) + ", resume at 7 and 25 bitwise");
  fs::remove_all(dir);
  return v;
}

struct DeskRun {
  std::optional<gan::CwganModel> model;
};

Verdict end_to_end(const fs::path& work, DeskRun& out) {
  Verdict v;
  const auto spec = dataset::GridSpec::desk();
  dataset::GenerateOptions gopt;
  gopt.resume = true;
  const auto t0 = std::chrono::steady_clock::now();
  const auto gen = dataset::generate_dataset(spec, work / "dataset_desk", gopt);
  const double data_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::size_t ok = 0;
  for (const auto& r : gen.manifest.records) ok += r.ok() ? 1 : 0;
  v.require(gen.manifest.records.size() == 180 && ok == 180, "dataset has " + std::to_string(ok) + " usable records");
  v.note("dataset 180 at 48x48 (" + std::to_string(gen.simp_runs) + " run, " + std::to_string(gen.skipped) +
         " reused, " + fmt(data_s, 4) + " s)");
  if (!v.pass()) return v;

  const dataset::DatasetLoader loader(gen.manifest);
  const auto cfg = gan::GanConfig::desk();
  const auto run = work / "desk_run";
  fs::remove_all(run);
  gan::Trainer trainer(cfg, loader);
  const auto t1 = std::chrono::steady_clock::now();
  trainer.train(run);
  const double train_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t1).count();
  const auto total = trainer.generator_steps();
  v.require(total >= 2000, "only " + std::to_string(total) + " generator steps");

  // (a) critic-side Wasserstein estimate, averaged over the critic updates of
  // the first and last 10% of generator steps.
  const std::uint64_t tenth = std::max<std::uint64_t>(1, total / 10);
  double first = 0.0, last = 0.0;
  int nf = 0, nl = 0;
  for (const auto& m : trainer.metrics()) {
    if (!m.critic) continue;
    if (m.generator_step < tenth) {
      first += m.wasserstein;
      ++nf;
    } else if (m.generator_step >= total - tenth) {
      last += m.wasserstein;
      ++nl;
    }
  }
  first /= std::max(nf, 1);
  last /= std::max(nl, 1);
  v.require(std::abs(last) < std::abs(first), "(a) |W| last 10% " + fmt(std::abs(last)) + " >= first 10% " +
                                                  fmt(std::abs(first)));
  v.note(std::to_string(total) + " generator steps in " + fmt(train_s, 4) + " s; (a) W first 10% " + fmt(first) +
         ", last 10% " + fmt(last));

  // (b), (c)
  auto model = trainer.model();
  eval::ModelSource source(model);
  eval::EvalOptions eopt;
  eopt.pgm_dir = run / "images";
  const auto report = eval::evaluate(source, spec.mesh(), eopt);
  io::write_file_atomic(run / "report.json", report.to_json());
  const auto table = report.render_table();
  io::write_file_atomic(run / "report.txt", table);
  const auto& best = report.fidelity.rows[report.fidelity.best_row()];
  v.require(best.post_abs_error <= 0.15, "(b) best post error " + fmt(best.post_abs_error));
  const auto verdict = report.fidelity.verdict();
  v.require(!verdict.empty() && !table.empty() && table.find(verdict) != std::string::npos,
            "(c) verdict missing from the report");
  v.note("(b) best condition " + fmt(best.requested, 2) + " post error " + fmt(best.post_abs_error) +
         " (raw " + fmt(best.raw_abs_error) + ")");
  v.note("(c) " + verdict + ", across-condition std " + fmt(report.fidelity.across_std_post) + ", diversity " +
         fmt(report.fidelity.mean_diversity));
  std::cout << table << std::flush;
  out.model = std::move(model);
  return v;
}

Verdict speedup(DeskRun& desk) {
  Verdict v;
  const auto spec = dataset::GridSpec::desk();
  std::optional<gan::CwganModel> fallback;
  const gan::CwganModel* model = desk.model ? &*desk.model : nullptr;
  if (model == nullptr) {
    // Generation cost does not depend on the weights.
    auto cfg = gan::GanConfig::desk();
    fallback.emplace(gan::CwganModel{cfg, gan::build_generator<float>(cfg, 1), 0.3, 0.7, 0});
    model = &*fallback;
    v.note("untrained desk generator");
  }
  eval::ModelSource source(*model);
  std::vector<simp::OptimizationParams> params;
  for (double vf : {0.3, 0.4, 0.5, 0.6, 0.7}) {
    simp::OptimizationParams p;
    p.volfrac = vf;
    params.push_back(p);
  }
  const auto rows = eval::timing_comparison(source, params, spec.mesh(), 5);
  double min_ratio = std::numeric_limits<double>::infinity();
  double gmin = min_ratio, gmax = 0.0;
  for (const auto& r : rows) {
    min_ratio = std::min(min_ratio, r.ratio);
    gmin = std::min(gmin, r.gen_seconds);
    gmax = std::max(gmax, r.gen_seconds);
    v.require(r.gen_seconds * 10.0 <= r.simp_seconds, "volfrac " + fmt(r.volfrac, 2) + " ratio " + fmt(r.ratio));
    v.note("v " + fmt(r.volfrac, 2) + ": gen " + fmt(r.gen_seconds * 1e3) + " ms, SIMP " + fmt(r.simp_seconds) +
           " s, x" + fmt(r.ratio, 4));
  }
  v.note("min ratio " + fmt(min_ratio, 4) + ", generation time spread " + fmt(gmax / gmin) + " (reported only)");
  return v;
}

Verdict postprocessing() {
  Verdict v;
  bool idem = true;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto f = random_field(17, 11, seed, 0.0, 1.0);
    for (double t : {0.3, 0.5, 0.8}) {
      const auto once = post::threshold(f, t);
      idem = idem && post::threshold(once, t) == once;
    }
  }
  v.require(idem, "threshold not idempotent");
  double worst = 0.0;
  for (int k : {1, 3, 5, 7, 9, 11}) {
    for (double s : {0.5, 1.0, 1.7, 3.0}) {
      const auto w = post::gaussian_kernel(k, s);
      long double sum = 0.0L;
      for (double x : w) sum += x;
      worst = std::max(worst, std::abs(static_cast<double>(sum) - 1.0));
    }
  }
  v.require(worst <= 1e-12, "kernel sum error " + fmt(worst));
  bool constant = true;
  for (double c : {0.0, 1.0, 0.3, 0.123456789, 0.999}) {
    for (auto [nx, ny] : {std::pair{48, 48}, std::pair{7, 3}, std::pair{1, 1}}) {
      const DensityField f(nx, ny, c);
      constant = constant && post::gaussian_smooth(f, 5, 1.0) == f && post::gaussian_smooth(f, 9, 2.0) == f;
    }
  }
  v.require(constant, "constant field changed");
  v.note("idempotent over 150 fields, kernel |sum - 1| <= " + fmt(worst) + ", constants exact");
  return v;
}

struct Criterion {
  std::string key;
  std::string title;
  double budget_s;
  std::function<Verdict()> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"topoforge acceptance run"};
  std::string work = "acceptance_work";
  std::vector<std::string> only;
  app.add_option("--work", work, "Scratch directory (dataset is reused across runs)")->capture_default_str();
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  DeskRun desk;
  const std::vector<Criterion> criteria{
      {"fea", "FEA oracle equivalence", 10, [] { return fea_oracles(); }},
      {"sensitivity", "Sensitivity finite differences", 60, [] { return sensitivity_fd(); }},
      {"simp", "SIMP volume constraint invariant", 300, [] { return simp_invariant(); }},
      {"grid", "Dataset grid of 3024", 1, [] { return dataset_grid(); }},
      {"gradients", "Layer gradient suite", 120, [] { return gradient_suite(); }},
      {"wgan", "WGAN mechanics", 120, [&] { return wgan_mechanics(work); }},
      {"e2e", "End-to-end desk training", 3600, [&] { return end_to_end(work, desk); }},
      {"speedup", "Generation vs SIMP speedup at 48x48", 600, [&] { return speedup(desk); }},
      {"post", "Post-processing properties", 1, [] { return postprocessing(); }},
  };

  int failed = 0;
  std::vector<std::string> lines;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.key) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v.require(false, std::string("exception: ") + e.what());
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    v.require(s < c.budget_s, "runtime over " + fmt(c.budget_s) + " s");
    const std::string line = std::string(v.pass() ? "PASS" : "FAIL") + "  " + c.title + "  [" + fmt(s, 4) + " s / " +
                             fmt(c.budget_s) + " s]  " + v.detail();
    std::cout << line << "\n" << std::flush;
    lines.push_back(line);
    failed += v.pass() ? 0 : 1;
  }
  std::cout << "\nSummary\n";
  for (const auto& l : lines) std::cout << l << "\n";
  std::cout << (failed == 0 ? "ALL PASS" : std::to_string(failed) + " FAILED") << "\n";
  return failed == 0 ? 0 : 1;
}
