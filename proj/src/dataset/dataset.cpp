#include "topoforge/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "topoforge/errors.hpp"
#include "topoforge/grid_io.hpp"

namespace topoforge::dataset {

using nlohmann::json;

void Axis::validate(const char* name) const {
  if (!std::isfinite(start) || !std::isfinite(end) || !std::isfinite(step)) {
    throw ParameterError(std::string(name) + " range has a non-finite bound");
  }
  if (!(step > 0.0)) throw ParameterError(std::string(name) + " step must be > 0, got " + std::to_string(step));
  if (start > end) {
    throw ParameterError(std::string(name) + " range is empty: start " + std::to_string(start) + " > end " +
                         std::to_string(end));
  }
}

std::size_t Axis::count() const {
  validate("axis");
  // The epsilon absorbs representation error so inclusive endpoints survive.
  return static_cast<std::size_t>(std::floor((end - start) / step + 1e-9)) + 1;
}

std::vector<double> Axis::values() const {
  const std::size_t n = count();
  std::vector<double> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = start + static_cast<double>(i) * step;
  return v;
}

GridSpec GridSpec::full() { return GridSpec{}; }

GridSpec GridSpec::desk() {
  GridSpec g;
  g.volfrac = {0.30, 0.70, 0.05};
  g.penal = {2.0, 4.0, 0.5};
  g.rmin = {1.5, 3.0, 0.5};
  g.nelx = 48;
  g.nely = 48;
  return g;
}

void GridSpec::validate() const {
  volfrac.validate("volfrac");
  penal.validate("penal");
  rmin.validate("rmin");
  if (nelx < 1 || nely < 1) throw ParameterError("grid resolution must be >= 1x1");
}

std::size_t GridSpec::cardinality() const {
  validate();
  return volfrac.count() * penal.count() * rmin.count();
}

fem::MeshSpec GridSpec::mesh() const {
  fem::MeshSpec m;
  m.nelx = nelx;
  m.nely = nely;
  return m;
}

std::vector<simp::OptimizationParams> enumerate_grid(const GridSpec& spec, const simp::OptimizationParams& base) {
  spec.validate();
  std::vector<simp::OptimizationParams> out;
  out.reserve(spec.cardinality());
  for (double v : spec.volfrac.values()) {
    for (double p : spec.penal.values()) {
      for (double r : spec.rmin.values()) {
        auto params = base;
        params.volfrac = v;
        params.penal = p;
        params.rmin = r;
        out.push_back(params);
      }
    }
  }
  return out;
}

std::string sample_id(double volfrac, double penal, double rmin, int nelx, int nely) {
  char key[160];
  std::snprintf(key, sizeof key, "volfrac=%.6f;penal=%.6f;rmin=%.6f;nelx=%d;nely=%d", volfrac, penal, rmin, nelx,
                nely);
  std::uint64_t h = 14695981039346656037ull;
  for (const char* c = key; *c != '\0'; ++c) {
    h ^= static_cast<unsigned char>(*c);
    h *= 1099511628211ull;
  }
  char hex[17];
  std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
  return hex;
}

std::vector<std::string> DatasetManifest::ids() const {
  std::vector<std::string> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.id);
  return out;
}

void DatasetManifest::check_unique_ids() const {
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!seen.insert(r.id).second) throw LoadError("manifest has duplicate sample id " + r.id);
  }
}

namespace {

json axis_json(const Axis& a) { return {{"start", a.start}, {"end", a.end}, {"step", a.step}}; }

Axis axis_from(const json& j) { return {j.at("start").get<double>(), j.at("end").get<double>(), j.at("step").get<double>()}; }

json record_json(const SampleRecord& r) {
  json j = {{"type", "sample"},
            {"id", r.id},
            {"index", r.index},
            {"volfrac", r.volfrac},
            {"penal", r.penal},
            {"rmin", r.rmin},
            {"nelx", r.nelx},
            {"nely", r.nely},
            {"compliance", r.compliance},
            {"mean_density", r.mean_density},
            {"iterations", r.iterations},
            {"converged", r.converged},
            {"wall_seconds", r.wall_seconds},
            {"grid_file", r.grid_file}};
  if (!r.error.empty()) j["error"] = r.error;
  return j;
}

SampleRecord record_from(const json& j) {
  SampleRecord r;
  r.id = j.at("id").get<std::string>();
  r.index = j.at("index").get<std::size_t>();
  r.volfrac = j.at("volfrac").get<double>();
  r.penal = j.at("penal").get<double>();
  r.rmin = j.at("rmin").get<double>();
  r.nelx = j.at("nelx").get<int>();
  r.nely = j.at("nely").get<int>();
  r.compliance = j.at("compliance").get<double>();
  r.mean_density = j.at("mean_density").get<double>();
  r.iterations = j.at("iterations").get<int>();
  r.converged = j.at("converged").get<bool>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  r.grid_file = j.at("grid_file").get<std::string>();
  r.error = j.value("error", std::string{});
  return r;
}

}  // namespace

std::string encode_manifest(const DatasetManifest& m) {
  json header = {{"type", "header"},
                 {"format_version", m.format_version},
                 {"mesh",
                  {{"nelx", m.mesh.nelx},
                   {"nely", m.mesh.nely},
                   {"young", m.mesh.young},
                   {"poisson", m.mesh.poisson},
                   {"thickness", m.mesh.thickness}}},
                 {"load_case", m.load_case},
                 {"grid",
                  {{"volfrac", axis_json(m.grid.volfrac)},
                   {"penal", axis_json(m.grid.penal)},
                   {"rmin", axis_json(m.grid.rmin)},
                   {"nelx", m.grid.nelx},
                   {"nely", m.grid.nely}}},
                 {"record_count", m.records.size()}};
  std::string out = header.dump() + "\n";
  for (const auto& r : m.records) out += record_json(r).dump() + "\n";
  return out;
}

DatasetManifest decode_manifest(const std::string& text, const std::string& source) {
  DatasetManifest m;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "header") {
        m.format_version = j.at("format_version").get<int>();
        if (m.format_version != kManifestFormatVersion) {
          throw LoadError("unsupported manifest format_version " + std::to_string(m.format_version));
        }
        const auto& mesh = j.at("mesh");
        m.mesh.nelx = mesh.at("nelx").get<int>();
        m.mesh.nely = mesh.at("nely").get<int>();
        m.mesh.young = mesh.at("young").get<double>();
        m.mesh.poisson = mesh.at("poisson").get<double>();
        m.mesh.thickness = mesh.at("thickness").get<double>();
        m.load_case = j.at("load_case").get<std::string>();
        const auto& g = j.at("grid");
        m.grid.volfrac = axis_from(g.at("volfrac"));
        m.grid.penal = axis_from(g.at("penal"));
        m.grid.rmin = axis_from(g.at("rmin"));
        m.grid.nelx = g.at("nelx").get<int>();
        m.grid.nely = g.at("nely").get<int>();
        have_header = true;
      } else if (type == "sample") {
        if (!have_header) throw LoadError("sample record before header");
        m.records.push_back(record_from(j));
      } else {
        throw LoadError("unknown record type '" + type + "'");
      }
    } catch (const LoadError& e) {
      throw LoadError(source + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const json::exception& e) {
      throw LoadError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw LoadError(source + ": manifest has no header line");
  m.check_unique_ids();
  return m;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  io::write_file_atomic(path, encode_manifest(m));
}

DatasetManifest read_manifest(const std::filesystem::path& path) {
  auto m = decode_manifest(io::read_file(path), path.string());
  m.root = path.parent_path();
  return m;
}

namespace {

bool record_is_reusable(const SampleRecord& r, const std::filesystem::path& root) {
  if (!r.error.empty()) return true;
  if (r.grid_file.empty()) return false;
  try {
    const auto f = io::read_grid(root / r.grid_file);
    return f.nelx == r.nelx && f.nely == r.nely;
  } catch (const LoadError&) {
    return false;
  }
}

SampleRecord run_sample(const fem::MeshSpec& mesh, const fem::LoadCase& load, const simp::OptimizationParams& p,
                        std::size_t index, const std::filesystem::path& out_dir) {
  SampleRecord r;
  r.id = sample_id(p.volfrac, p.penal, p.rmin, mesh.nelx, mesh.nely);
  r.index = index;
  r.volfrac = p.volfrac;
  r.penal = p.penal;
  r.rmin = p.rmin;
  r.nelx = mesh.nelx;
  r.nely = mesh.nely;
  simp::OptimizationResult result;
  try {
    result = simp::optimize(mesh, load, p);
  } catch (const IoError&) {
    throw;
  } catch (const Error& e) {
    r.converged = false;
    r.error = e.what();
    return r;
  }
  r.compliance = result.trace.final_compliance;
  r.iterations = result.trace.iteration_count();
  r.converged = result.trace.converged;
  r.wall_seconds = result.trace.wall_seconds;
  r.grid_file = "grids/" + r.id + ".topo";
  io::write_grid(out_dir / r.grid_file, result.field);
  double sum = 0.0;
  for (double v : result.field.values) sum += static_cast<float>(v);
  r.mean_density = sum / static_cast<double>(result.field.size());
  return r;
}

}  // namespace

GenerateReport generate_dataset(const GridSpec& spec, const std::filesystem::path& out_dir,
                                const GenerateOptions& options) {
  spec.validate();
  if (options.workers < 1) throw ParameterError("workers must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "grids", ec);
  if (ec) throw IoError(out_dir.string() + ": cannot create dataset directory: " + ec.message());

  const auto params = enumerate_grid(spec, options.base);
  const auto mesh = spec.mesh();
  const auto load = fem::cantilever_load(mesh);
  const auto manifest_path = out_dir / kManifestName;

  std::map<std::string, SampleRecord> previous;
  if (options.resume && std::filesystem::exists(manifest_path)) {
    for (auto& r : read_manifest(manifest_path).records) previous.emplace(r.id, std::move(r));
  }

  GenerateReport report;
  auto& manifest = report.manifest;
  manifest.mesh = mesh;
  manifest.grid = spec;
  manifest.root = out_dir;

  std::vector<SampleRecord> slots(params.size());
  std::vector<bool> filled(params.size(), false);
  std::vector<std::size_t> pending;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto id = sample_id(params[i].volfrac, params[i].penal, params[i].rmin, mesh.nelx, mesh.nely);
    const auto it = previous.find(id);
    if (it != previous.end() && record_is_reusable(it->second, out_dir)) {
      slots[i] = it->second;
      slots[i].index = i;
      filled[i] = true;
      ++report.skipped;
    } else {
      pending.push_back(i);
    }
  }

  auto publish = [&] {
    manifest.records.clear();
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (filled[i]) manifest.records.push_back(slots[i]);
    }
    write_manifest(manifest_path, manifest);
  };

  const std::size_t batch = options.batch_size > 0 ? static_cast<std::size_t>(options.batch_size)
                                                   : static_cast<std::size_t>(4 * options.workers);
  if (pending.empty()) publish();
  for (std::size_t first = 0; first < pending.size(); first += batch) {
    const std::size_t last = std::min(pending.size(), first + batch);
    std::atomic<std::size_t> next{first};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
      for (std::size_t k = next++; k < last; k = next++) {
        const std::size_t i = pending[k];
        try {
          slots[i] = run_sample(mesh, load, params[i], i, out_dir);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
          next = last;
          return;
        }
      }
    };
    const int n_threads = static_cast<int>(std::min<std::size_t>(options.workers, last - first));
    if (n_threads == 1) {
      worker();
    } else {
      std::vector<std::jthread> pool;
      for (int t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    }
    if (failure) std::rethrow_exception(failure);
    for (std::size_t k = first; k < last; ++k) {
      filled[pending[k]] = true;
      ++report.simp_runs;
    }
    publish();
    if (options.on_sample) {
      for (std::size_t k = first; k < last; ++k) options.on_sample(slots[pending[k]]);
    }
    if (options.after_batch) options.after_batch(manifest.records.size());
  }
  return report;
}

DatasetLoader::DatasetLoader(const DatasetManifest& manifest) {
  for (const auto& r : manifest.records) {
    if (!r.ok()) continue;
    const auto path = manifest.root / r.grid_file;
    const auto f = io::read_grid(path);
    if (f.nelx != r.nelx || f.nely != r.nely) {
      throw LoadError(path.string() + ": grid is " + std::to_string(f.nelx) + "x" + std::to_string(f.nely) +
                      ", manifest says " + std::to_string(r.nelx) + "x" + std::to_string(r.nely));
    }
    if (records_.empty()) {
      height_ = f.nely;
      width_ = f.nelx;
    } else if (f.nelx != width_ || f.nely != height_) {
      throw LoadError(path.string() + ": resolution differs from the rest of the dataset");
    }
    records_.push_back(r);
    labels_.push_back(static_cast<float>(r.volfrac));
    for (double v : f.values) images_.push_back(static_cast<float>(v));
  }
  if (records_.empty()) throw LoadError("dataset under " + manifest.root.string() + " has no usable samples");
}

std::vector<std::size_t> DatasetLoader::epoch_order(std::uint64_t seed, std::uint64_t epoch) const {
  std::vector<std::size_t> order(size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32)};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

Batch DatasetLoader::gather(const std::vector<std::size_t>& indices) const {
  Batch b;
  b.height = height_;
  b.width = width_;
  const std::size_t pixels = static_cast<std::size_t>(height_) * width_;
  b.images.reserve(indices.size() * pixels);
  for (auto i : indices) {
    if (i >= size()) throw ParameterError("sample index " + std::to_string(i) + " out of range");
    b.images.insert(b.images.end(), image(i), image(i) + pixels);
    b.labels.push_back(labels_[i]);
    b.samples.push_back(i);
  }
  return b;
}

std::size_t DatasetLoader::batches_per_epoch(int batch_size) const {
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  return (size() + batch_size - 1) / static_cast<std::size_t>(batch_size);
}

BatchStream::BatchStream(const DatasetLoader& loader, int batch_size, std::uint64_t seed)
    : loader_(&loader), batch_size_(batch_size), seed_(seed) {
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
}

Batch BatchStream::next() {
  if (order_epoch_ != pos_.epoch) {
    order_ = loader_->epoch_order(seed_, pos_.epoch);
    order_epoch_ = pos_.epoch;
  }
  const std::size_t end = std::min(order_.size(), pos_.cursor + static_cast<std::size_t>(batch_size_));
  std::vector<std::size_t> idx(order_.begin() + static_cast<std::ptrdiff_t>(pos_.cursor),
                               order_.begin() + static_cast<std::ptrdiff_t>(end));
  pos_.cursor = end;
  if (pos_.cursor >= order_.size()) {
    ++pos_.epoch;
    pos_.cursor = 0;
  }
  return loader_->gather(idx);
}

void BatchStream::seek(Position p) {
  if (p.cursor >= loader_->size()) throw ParameterError("stream cursor beyond dataset size");
  pos_ = p;
}

std::vector<Batch> BatchStream::epoch(std::uint64_t e) const {
  BatchStream copy(*loader_, batch_size_, seed_);
  copy.seek({e, 0});
  std::vector<Batch> out;
  do {
    out.push_back(copy.next());
  } while (copy.position().epoch == e);
  return out;
}

}  // namespace topoforge::dataset
