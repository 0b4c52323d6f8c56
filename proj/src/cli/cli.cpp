#include "topoforge/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "topoforge/dataset.hpp"
#include "topoforge/errors.hpp"
#include "topoforge/eval.hpp"
#include "topoforge/gan.hpp"
#include "topoforge/grid_io.hpp"
#include "topoforge/postprocess.hpp"
#include "topoforge/service.hpp"
#include "topoforge/simp.hpp"

namespace topoforge::cli {

namespace fs = std::filesystem;

fs::path data_root() {
  const char* env = std::getenv("TOPOFORGE_DATA_DIR");
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::path("topoforge-data");
}

namespace {

fs::path or_default(const std::string& given, const char* leaf) {
  return given.empty() ? data_root() / leaf : fs::path(given);
}

fs::path checkpoint_path(const std::string& model) {
  const fs::path p(model);
  return fs::is_directory(p) ? p / gan::kCheckpointName : p;
}

fs::path manifest_path(const std::string& dataset) {
  const fs::path p(dataset);
  return fs::is_directory(p) ? p / dataset::kManifestName : p;
}

std::vector<double> parse_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw ParameterError("conditions: '" + item + "' is not a number");
    }
  }
  if (out.empty()) throw ParameterError("conditions: empty list");
  return out;
}

struct OptimizeArgs {
  int nelx = 60;
  int nely = 20;
  double volfrac = 0.5;
  double penal = 3.0;
  double rmin = 1.5;
  int max_iters = 200;
  std::string out;
};

struct DatasetArgs {
  std::string profile = "desk";
  std::string out;
  int workers = 1;
  bool resume = false;
};

struct TrainArgs {
  std::string dataset;
  std::string profile = "desk";
  int epochs = -1;
  int batch = -1;
  int n_critic = -1;
  double clip = -1.0;
  double lr = -1.0;
  std::uint64_t seed = 0;
  std::string critic_mode = "linear";
  bool label_smoothing = false;
  int checkpoint_every = 0;
  bool resume = false;
  std::string out;
};

struct SampleArgs {
  std::string model;
  double volfrac = 0.5;
  int count = 1;
  std::uint64_t seed = 0;
  bool post = false;
  std::string out;
};

struct EvalArgs {
  std::string model;
  std::string dataset;
  std::string conditions = "0.3,0.4,0.5,0.6,0.7";
  int n = 8;
  int reps = 5;
  std::uint64_t seed = 0;
  bool images = false;
  std::string out;
};

struct ServeArgs {
  std::string model;
  std::string dataset;
  std::string host = "127.0.0.1";
  int port = 8080;
  int workers = 2;
};

int do_optimize(const OptimizeArgs& a, std::ostream& out) {
  simp::OptimizationParams p;
  p.volfrac = a.volfrac;
  p.penal = a.penal;
  p.rmin = a.rmin;
  p.max_iters = a.max_iters;
  p.validate();
  const fem::MeshSpec mesh{a.nelx, a.nely};
  mesh.validate();
  const auto r = simp::optimize(mesh, fem::cantilever_load(mesh), p);
  const auto path = or_default(a.out, "optimize.topo");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  io::write_grid(path, r.field);
  out << nlohmann::json{{"out", path.string()},
                        {"compliance", r.trace.final_compliance},
                        {"initial_compliance", r.trace.initial_compliance},
                        {"iterations", r.trace.iteration_count()},
                        {"converged", r.trace.converged},
                        {"mean_density", r.field.mean()},
                        {"wall_seconds", r.trace.wall_seconds}}
             .dump()
      << "\n";
  return kExitOk;
}

int do_dataset(const DatasetArgs& a, std::ostream& out) {
  const auto spec = a.profile == "full" ? dataset::GridSpec::full() : dataset::GridSpec::desk();
  dataset::GenerateOptions opt;
  opt.workers = a.workers;
  opt.resume = a.resume;
  const std::size_t total = spec.cardinality();
  opt.after_batch = [&](std::size_t done) { out << "dataset: " << done << "/" << total << " samples\n" << std::flush; };
  const auto dir = or_default(a.out, ("dataset_" + a.profile).c_str());
  const auto report = dataset::generate_dataset(spec, dir, opt);
  std::size_t failed = 0;
  for (const auto& r : report.manifest.records) failed += r.ok() ? 0 : 1;
  out << "dataset: " << report.manifest.records.size() << " records (" << report.simp_runs << " run, "
      << report.skipped << " reused, " << failed << " failed) in " << dir.string() << "\n";
  return kExitOk;
}

int do_train(const TrainArgs& a, std::ostream& out) {
  const auto manifest = dataset::read_manifest(manifest_path(a.dataset));
  const dataset::DatasetLoader loader(manifest);
  const auto dir = or_default(a.out, "run");
  std::unique_ptr<gan::Trainer> trainer;
  if (a.resume) {
    trainer = std::make_unique<gan::Trainer>(gan::Trainer::resume(dir, loader));
    out << "train: resumed at generator step " << trainer->generator_steps() << "\n";
  } else {
    auto cfg = a.profile == "paper" ? gan::GanConfig::paper() : gan::GanConfig::desk();
    if (cfg.height != loader.height() || cfg.width != loader.width()) {
      cfg.height = loader.height();
      cfg.width = loader.width();
      cfg.generator_channels.clear();
      cfg.critic_channels.clear();
    }
    if (a.epochs >= 0) cfg.epochs = a.epochs;
    if (a.batch > 0) cfg.batch_size = a.batch;
    if (a.n_critic > 0) cfg.n_critic = a.n_critic;
    if (a.clip > 0.0) cfg.clip_c = a.clip;
    if (a.lr > 0.0) cfg.lr = a.lr;
    cfg.seed = a.seed;
    cfg.critic_mode = gan::critic_mode_from_name(a.critic_mode);
    cfg.label_smoothing = a.label_smoothing;
    cfg.checkpoint_every = a.checkpoint_every;
    trainer = std::make_unique<gan::Trainer>(cfg, loader);
  }
  const auto per_epoch = trainer->steps_per_epoch();
  double w_sum = 0.0;
  int w_count = 0;
  trainer->train(dir, [&](const gan::StepMetrics& m) {
    if (m.critic) {
      w_sum += m.wasserstein;
      ++w_count;
      return;
    }
    if ((m.generator_step + 1) % per_epoch == 0) {
      out << "epoch " << m.epoch << "  generator step " << m.generator_step + 1 << "  W " << std::setprecision(5)
          << (w_count > 0 ? w_sum / w_count : 0.0) << "  G loss " << m.loss << "  " << std::setprecision(4)
          << m.wall_seconds << " s\n"
          << std::flush;
      w_sum = 0.0;
      w_count = 0;
    }
  });
  out << "train: " << trainer->generator_steps() << " generator steps, checkpoint in " << dir.string() << "\n";
  return kExitOk;
}

int do_sample(const SampleArgs& a, std::ostream& out, std::ostream& err) {
  const auto model = gan::load_model(checkpoint_path(a.model));
  const auto r = gan::sample(model, a.volfrac, a.count, a.seed);
  for (const auto& w : r.warnings) err << "warning: " << w << "\n";
  const auto dir = or_default(a.out, "samples");
  fs::create_directories(dir);
  nlohmann::json measured = nlohmann::json::array();
  for (std::size_t i = 0; i < r.fields.size(); ++i) {
    const auto f = a.post ? post::postprocess(r.fields[i]) : r.fields[i];
    char stem[32];
    std::snprintf(stem, sizeof stem, "sample_%03zu", i);
    io::write_grid(dir / (std::string(stem) + ".topo"), f);
    io::write_file_atomic(dir / (std::string(stem) + ".pgm"), eval::encode_pgm(f));
    measured.push_back(post::measured_volfrac(f));
  }
  out << nlohmann::json{{"out", dir.string()},
                        {"requested_volfrac", a.volfrac},
                        {"measured_volfrac", measured},
                        {"post", a.post},
                        {"seconds_per_sample", r.seconds_per_sample},
                        {"warnings", r.warnings}}
             .dump()
      << "\n";
  return kExitOk;
}

int do_eval(const EvalArgs& a, std::ostream& out) {
  const auto model = gan::load_model(checkpoint_path(a.model));
  if (!a.dataset.empty()) {
    const auto m = dataset::read_manifest(manifest_path(a.dataset));
    if (m.mesh.nelx != model.config.width || m.mesh.nely != model.config.height) {
      throw ParameterError("dataset: resolution " + std::to_string(m.mesh.nelx) + "x" + std::to_string(m.mesh.nely) +
                           " differs from the model's " + std::to_string(model.config.width) + "x" +
                           std::to_string(model.config.height));
    }
  }
  eval::EvalOptions opt;
  opt.conditions = parse_list(a.conditions);
  opt.n_per_condition = a.n;
  opt.repetitions = a.reps;
  opt.seed = a.seed;
  const auto dir = or_default(a.out, "eval");
  if (a.images) opt.pgm_dir = dir / "images";
  fs::create_directories(dir);
  eval::ModelSource source(model);
  const auto report = eval::evaluate(source, fem::MeshSpec{model.config.width, model.config.height}, opt);
  io::write_file_atomic(dir / "report.json", report.to_json());
  const auto table = report.render_table();
  io::write_file_atomic(dir / "report.txt", table);
  out << table;
  return kExitOk;
}

int do_serve(const ServeArgs& a, std::ostream& out) {
  const auto model = gan::load_model(checkpoint_path(a.model));
  service::ServiceOptions opt;
  opt.simp_workers = a.workers;
  service::Service svc(model, opt);
  out << "serving " << model.config.width << "x" << model.config.height << " model on http://" << a.host << ":"
      << a.port << "\n"
      << std::flush;
  svc.run(a.host, a.port);
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"topoforge: SIMP topology optimization and conditional WGAN generation"};
  app.require_subcommand(1);

  OptimizeArgs oa;
  auto* optimize = app.add_subcommand("optimize", "Run one SIMP optimization on the cantilever case");
  optimize->add_option("--nelx", oa.nelx, "Elements along x")->capture_default_str();
  optimize->add_option("--nely", oa.nely, "Elements along y")->capture_default_str();
  optimize->add_option("--volfrac", oa.volfrac, "Target volume fraction")->capture_default_str();
  optimize->add_option("--penal", oa.penal, "Penalization power")->capture_default_str();
  optimize->add_option("--rmin", oa.rmin, "Filter radius")->capture_default_str();
  optimize->add_option("--max-iters", oa.max_iters, "Iteration cap")->capture_default_str();
  optimize->add_option("--out", oa.out, "Output grid file (.topo)");

  DatasetArgs da;
  auto* dataset_cmd = app.add_subcommand("dataset", "Generate a SIMP dataset over the parameter grid");
  dataset_cmd->add_option("--profile", da.profile, "desk (48x48, 180) or full (120x120, 3024)")
      ->check(CLI::IsMember({"desk", "full"}))
      ->capture_default_str();
  dataset_cmd->add_option("--out", da.out, "Output directory");
  dataset_cmd->add_option("--workers", da.workers, "Parallel SIMP workers")->capture_default_str();
  dataset_cmd->add_flag("--resume", da.resume, "Skip samples already in the manifest");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "Train the conditional WGAN");
  train->add_option("--dataset", ta.dataset, "Dataset directory or manifest")->required();
  train->add_option("--profile", ta.profile, "desk or paper hyperparameters")
      ->check(CLI::IsMember({"desk", "paper"}))
      ->capture_default_str();
  train->add_option("--epochs", ta.epochs, "Epochs");
  train->add_option("--batch", ta.batch, "Batch size");
  train->add_option("--n-critic", ta.n_critic, "Critic steps per generator step");
  train->add_option("--clip", ta.clip, "Critic weight clip bound");
  train->add_option("--lr", ta.lr, "RMSProp learning rate");
  train->add_option("--seed", ta.seed, "Seed")->capture_default_str();
  train->add_option("--critic-mode", ta.critic_mode, "linear or paper_tanh")
      ->check(CLI::IsMember({"linear", "paper_tanh"}))
      ->capture_default_str();
  train->add_flag("--label-smoothing", ta.label_smoothing, "Squared-error targets (paper_tanh only)");
  train->add_option("--checkpoint-every", ta.checkpoint_every, "Extra checkpoint cadence in generator steps");
  train->add_flag("--resume", ta.resume, "Continue from the checkpoint in --out");
  train->add_option("--out", ta.out, "Run directory");

  SampleArgs sa;
  auto* sample_cmd = app.add_subcommand("sample", "Generate structures from a checkpoint");
  sample_cmd->add_option("--model", sa.model, "Checkpoint file or run directory")->required();
  sample_cmd->add_option("--volfrac", sa.volfrac, "Requested volume fraction")->required();
  sample_cmd->add_option("--count", sa.count, "Number of samples")->capture_default_str();
  sample_cmd->add_option("--seed", sa.seed, "Noise seed")->capture_default_str();
  sample_cmd->add_flag("--post", sa.post, "Threshold and smooth before writing");
  sample_cmd->add_option("--out", sa.out, "Output directory");

  EvalArgs ea;
  auto* eval_cmd = app.add_subcommand("eval", "Fidelity, compliance, diversity and timing report");
  eval_cmd->add_option("--model", ea.model, "Checkpoint file or run directory")->required();
  eval_cmd->add_option("--dataset", ea.dataset, "Dataset the model was trained on (resolution check)");
  eval_cmd->add_option("--conditions", ea.conditions, "Comma-separated volume fractions")->capture_default_str();
  eval_cmd->add_option("--n", ea.n, "Samples per condition")->capture_default_str();
  eval_cmd->add_option("--reps", ea.reps, "Timing repetitions (>= 5)")->capture_default_str();
  eval_cmd->add_option("--seed", ea.seed, "Seed")->capture_default_str();
  eval_cmd->add_flag("--images", ea.images, "Write PGM images");
  eval_cmd->add_option("--out", ea.out, "Report directory");

  ServeArgs va;
  auto* serve = app.add_subcommand("serve", "HTTP/JSON service for generation, SIMP jobs and evaluation");
  serve->add_option("--model", va.model, "Checkpoint file or run directory")->required();
  serve->add_option("--port", va.port, "Port")->capture_default_str();
  serve->add_option("--host", va.host, "Bind address")->capture_default_str();
  serve->add_option("--dataset", va.dataset, "Unused; accepted for symmetry with eval");
  serve->add_option("--workers", va.workers, "SIMP job workers")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    if (*optimize) return do_optimize(oa, out);
    if (*dataset_cmd) return do_dataset(da, out);
    if (*train) return do_train(ta, out);
    if (*sample_cmd) return do_sample(sa, out, err);
    if (*eval_cmd) return do_eval(ea, out);
    if (*serve) return do_serve(va, out);
  } catch (const ParameterError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace topoforge::cli
