#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "topoforge/density_field.hpp"
#include "topoforge/fem.hpp"
#include "topoforge/simp.hpp"

namespace topoforge::dataset {

/// Inclusive arithmetic range. Values are start + i * step, never accumulated.
struct Axis {
  double start = 0.0;
  double end = 0.0;
  double step = 1.0;

  void validate(const char* name) const;
  [[nodiscard]] std::size_t count() const;
  [[nodiscard]] std::vector<double> values() const;
};

struct GridSpec {
  Axis volfrac{0.30, 0.70, 0.05};
  Axis penal{2.0, 4.0, 0.1};
  Axis rmin{1.5, 3.0, 0.1};
  int nelx = 120;
  int nely = 120;

  /// 9 x 21 x 16 = 3024 points at 120 x 120.
  static GridSpec full();
  /// 9 x 5 x 4 = 180 points at 48 x 48.
  static GridSpec desk();

  void validate() const;
  [[nodiscard]] std::size_t cardinality() const;
  [[nodiscard]] fem::MeshSpec mesh() const;
};

/// Lexicographic (volfrac, penal, rmin) with rmin varying fastest. Fields not
/// on the grid are copied from `base`.
std::vector<simp::OptimizationParams> enumerate_grid(const GridSpec& spec, const simp::OptimizationParams& base = {});

struct SampleRecord {
  std::string id;
  std::size_t index = 0;  // position in enumerate_grid order
  double volfrac = 0.0;
  double penal = 0.0;
  double rmin = 0.0;
  int nelx = 0;
  int nely = 0;
  double compliance = 0.0;
  double mean_density = 0.0;  // of the stored float32 values
  int iterations = 0;
  bool converged = false;
  double wall_seconds = 0.0;
  std::string grid_file;  // relative to the manifest directory; empty on failure
  std::string error;      // non-empty when SIMP raised

  [[nodiscard]] bool ok() const { return error.empty() && !grid_file.empty(); }
  bool operator==(const SampleRecord&) const = default;
};

/// 16 hex digits of FNV-1a 64 over the canonical parameter string.
std::string sample_id(double volfrac, double penal, double rmin, int nelx, int nely);

inline constexpr int kManifestFormatVersion = 1;
inline constexpr const char* kManifestName = "manifest.jsonl";
inline constexpr const char* kCantileverLoadName = "cantilever: left edge clamped, unit -y load at right-edge mid node";

struct DatasetManifest {
  int format_version = kManifestFormatVersion;
  fem::MeshSpec mesh;
  std::string load_case = kCantileverLoadName;
  GridSpec grid;
  std::vector<SampleRecord> records;
  std::filesystem::path root;  // directory holding the manifest; not serialized

  [[nodiscard]] std::vector<std::string> ids() const;
  /// Throws LoadError on duplicate ids.
  void check_unique_ids() const;
};

/// JSON lines: a header object, then one object per record.
std::string encode_manifest(const DatasetManifest& m);
DatasetManifest decode_manifest(const std::string& text, const std::string& source = "<memory>");
void write_manifest(const std::filesystem::path& path, const DatasetManifest& m);
/// Sets `root` to the manifest's directory. Throws LoadError.
DatasetManifest read_manifest(const std::filesystem::path& path);

struct GenerateOptions {
  int workers = 1;
  bool resume = false;
  int batch_size = 0;  // samples between manifest writes; 0 picks 4 * workers
  simp::OptimizationParams base;  // move limit, tolerances, iteration cap
  std::function<void(const SampleRecord&)> on_sample;
  /// Called after each manifest write with the number of finished records.
  /// Exceptions propagate and leave the written manifest in place.
  std::function<void(std::size_t)> after_batch;
};

struct GenerateReport {
  DatasetManifest manifest;
  int simp_runs = 0;
  int skipped = 0;
};

GenerateReport generate_dataset(const GridSpec& spec, const std::filesystem::path& out_dir,
                                const GenerateOptions& options = {});

struct Batch {
  int height = 0;
  int width = 0;
  std::vector<float> images;  // size() x height x width, densities in [0, 1]
  std::vector<float> labels;  // volfrac per image
  std::vector<std::size_t> samples;  // loader indices

  [[nodiscard]] int size() const { return static_cast<int>(labels.size()); }
};

/// In-memory copy of every successful sample of a manifest. Read-only after
/// construction.
class DatasetLoader {
 public:
  /// Throws LoadError naming the first file that fails to parse or whose shape
  /// differs from its record.
  explicit DatasetLoader(const DatasetManifest& manifest);

  [[nodiscard]] std::size_t size() const { return labels_.size(); }
  [[nodiscard]] int height() const { return height_; }
  [[nodiscard]] int width() const { return width_; }
  [[nodiscard]] const SampleRecord& record(std::size_t i) const { return records_[i]; }
  [[nodiscard]] float label(std::size_t i) const { return labels_[i]; }
  [[nodiscard]] const float* image(std::size_t i) const {
    return images_.data() + i * static_cast<std::size_t>(height_) * width_;
  }

  /// Seeded permutation of [0, size()) for one epoch.
  [[nodiscard]] std::vector<std::size_t> epoch_order(std::uint64_t seed, std::uint64_t epoch) const;
  [[nodiscard]] Batch gather(const std::vector<std::size_t>& indices) const;
  [[nodiscard]] std::size_t batches_per_epoch(int batch_size) const;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<SampleRecord> records_;
  std::vector<float> labels_;
  std::vector<float> images_;
};

/// Endless sequence of batches, epoch after epoch. The final batch of an epoch
/// holds the remainder and may be short.
class BatchStream {
 public:
  struct Position {
    std::uint64_t epoch = 0;
    std::size_t cursor = 0;
  };

  BatchStream(const DatasetLoader& loader, int batch_size, std::uint64_t seed);

  Batch next();
  [[nodiscard]] Position position() const { return pos_; }
  void seek(Position p);
  /// All batches of one epoch, in stream order.
  [[nodiscard]] std::vector<Batch> epoch(std::uint64_t e) const;

 private:
  const DatasetLoader* loader_;
  int batch_size_;
  std::uint64_t seed_;
  Position pos_;
  std::vector<std::size_t> order_;
  std::uint64_t order_epoch_ = ~std::uint64_t{0};
};

}  // namespace topoforge::dataset
