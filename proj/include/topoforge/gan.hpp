#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "topoforge/dataset.hpp"
#include "topoforge/density_field.hpp"
#include "topoforge/nn/network.hpp"

namespace topoforge::gan {

enum class CriticMode {
  kLinear,     // unbounded score
  kPaperTanh,  // score squashed into (-1, 1)
};

const char* critic_mode_name(CriticMode m);
CriticMode critic_mode_from_name(const std::string& name);

struct GanConfig {
  int height = 120;
  int width = 120;
  int latent_dim = 120;
  double lr = 5e-5;
  double rms_decay = 0.9;
  double rms_epsilon = 1e-7;
  double clip_c = 0.01;
  int n_critic = 5;
  int batch_size = 64;
  int epochs = 1;
  std::uint64_t seed = 0;
  CriticMode critic_mode = CriticMode::kLinear;
  // Squared-error targets of +-smoothing_target on critic scores. Only
  // meaningful with kPaperTanh; ignored in kLinear mode.
  bool label_smoothing = false;
  double smoothing_target = 0.9;
  // Number of stride-2 stages in each network; 0 picks the largest count up
  // to 4 that divides the resolution.
  int stages = 0;
  // Channel widths. Generator: width at the base grid, then after each
  // up-sampling stage but the last (size == stages). Critic: width after each
  // down-sampling stage (size == stages). Empty selects defaults.
  std::vector<int> generator_channels;
  std::vector<int> critic_channels;
  double critic_dropout = 0.3;
  // Extra checkpoint cadence in generator steps; 0 writes only at epoch ends.
  int checkpoint_every = 0;

  /// 120 x 120, batch 64, 3 stages.
  static GanConfig paper();
  /// 48 x 48, batch 32, small widths sized for a single CPU core.
  static GanConfig desk();

  /// Throws ParameterError; an unreachable resolution lists valid ones.
  void validate() const;
  [[nodiscard]] int resolved_stages() const;
  [[nodiscard]] std::vector<int> resolved_generator_channels() const;
  [[nodiscard]] std::vector<int> resolved_critic_channels() const;
};

/// Body network gated by a trainable label embedding: out = body(x * embed(y)),
/// with embed = reshape(dense(1 -> |x|)).
template <class T>
class ConditionalNet {
 public:
  ConditionalNet() = default;
  ConditionalNet(nn::Shape input_shape, std::vector<nn::LayerSpec> body, std::uint64_t seed,
                 double embedding_bias = 1.0);

  [[nodiscard]] ConditionalNet clone() const;
  [[nodiscard]] const nn::Shape& input_shape() const { return body_.input_shape(); }
  [[nodiscard]] nn::Shape output_shape() const { return body_.output_shape(); }

  void set_mode(nn::Mode m);
  /// labels: shape (N, 1).
  nn::NdArray<T> forward(const nn::NdArray<T>& x, const nn::NdArray<T>& labels, std::uint64_t seed);
  [[nodiscard]] nn::NdArray<T> infer(const nn::NdArray<T>& x, const nn::NdArray<T>& labels) const;
  /// Returns the gradient with respect to x; fills body and embedding grads.
  nn::NdArray<T> backward(const nn::NdArray<T>& grad);
  /// Embedding of each label with shape (N, input_shape...).
  [[nodiscard]] nn::NdArray<T> embed(const nn::NdArray<T>& labels) const;

  nn::Network<T>& body() { return body_; }
  nn::Network<T>& embedding() { return embedding_; }
  [[nodiscard]] const nn::Network<T>& body() const { return body_; }
  [[nodiscard]] const nn::Network<T>& embedding() const { return embedding_; }
  std::vector<nn::Parameter<T>*> parameters();

 private:
  nn::Network<T> body_;
  nn::Network<T> embedding_;
  nn::NdArray<T> x_cache_;
  nn::NdArray<T> e_cache_;
  bool cached_ = false;
};

/// Generator body: latent (latent_dim) -> (1, height, width) in (-1, 1).
std::vector<nn::LayerSpec> generator_layers(const GanConfig& cfg);
/// Critic body: image (1, height, width) -> one score.
std::vector<nn::LayerSpec> critic_layers(const GanConfig& cfg);

template <class T>
ConditionalNet<T> build_generator(const GanConfig& cfg, std::uint64_t seed);
template <class T>
ConditionalNet<T> build_critic(const GanConfig& cfg, std::uint64_t seed);

/// Embedding of one label for a standalone embedding network.
template <class T>
nn::NdArray<T> embed_label(const nn::Network<T>& embedding, double label);

/// mean(fake) - mean(real). Gradients are written when the pointers are set.
double critic_loss(const std::vector<double>& real, const std::vector<double>& fake,
                   std::vector<double>* d_real = nullptr, std::vector<double>* d_fake = nullptr);
/// -mean(fake).
double generator_loss(const std::vector<double>& fake, std::vector<double>* d_fake = nullptr);
/// mean((real - t)^2) + mean((fake + t)^2).
double smoothed_critic_loss(const std::vector<double>& real, const std::vector<double>& fake, double target,
                            std::vector<double>* d_real = nullptr, std::vector<double>* d_fake = nullptr);
/// mean((fake - t)^2).
double smoothed_generator_loss(const std::vector<double>& fake, double target, std::vector<double>* d_fake = nullptr);

/// Density in [0, 1] from a tanh output t: (t + 1) / 2.
inline double to_density(double t) { return 0.5 * (t + 1.0); }
/// Critic input in [-1, 1] from a density.
inline double to_critic_input(double x) { return 2.0 * x - 1.0; }

struct StepMetrics {
  std::uint64_t step = 0;             // optimizer step index, from 0
  std::uint64_t generator_step = 0;   // generator update this step belongs to
  std::uint64_t epoch = 0;
  bool critic = true;                 // critic update, else generator update
  double loss = 0.0;
  double wasserstein = 0.0;           // mean D(real) - mean D(fake); critic steps only
  double max_abs_critic_weight = 0.0;
  double wall_seconds = 0.0;          // not reproducible; excluded from equality

  [[nodiscard]] bool same_values(const StepMetrics& o) const;
};

struct EpochSnapshot {
  std::uint64_t epoch = 0;
  std::vector<double> conditions;
  std::vector<double> raw_volfrac;  // mean of the raw generated densities
};

std::string encode_metrics(const std::vector<StepMetrics>& m);
std::vector<StepMetrics> decode_metrics(const std::string& text, const std::string& source = "<memory>");

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr const char* kCheckpointName = "checkpoint.cwto";
inline constexpr const char* kMetricsName = "metrics.jsonl";
inline constexpr const char* kSnapshotsName = "snapshots.jsonl";

/// Trained generator ready for sampling. Read-only use is thread-safe.
struct CwganModel {
  GanConfig config;
  ConditionalNet<float> generator;
  double label_min = 0.3;
  double label_max = 0.7;
  std::uint64_t generator_steps = 0;

  [[nodiscard]] CwganModel clone() const {
    return {config, generator.clone(), label_min, label_max, generator_steps};
  }
};

/// Throws LoadError on a malformed file or a tensor/config mismatch.
CwganModel load_model(const std::filesystem::path& checkpoint);

struct SampleResult {
  std::vector<DensityField> fields;   // raw densities in [0, 1]
  double seconds_per_sample = 0.0;
  std::vector<std::string> warnings;  // e.g. a condition outside the training range
};

/// Inference-mode generation from N(0, 1) noise seeded by `seed`.
SampleResult sample(const CwganModel& model, double volfrac, int count, std::uint64_t seed);

/// Alternating WGAN training with weight clipping. One epoch is
/// ceil(N / batch) generator steps; each generator step is preceded by
/// n_critic critic steps that consume consecutive real batches.
class Trainer {
 public:
  Trainer(GanConfig cfg, const dataset::DatasetLoader& data);
  /// Restores networks, optimizer state, RNG, data cursor and metrics from a
  /// checkpoint directory. Throws LoadError.
  static Trainer resume(const std::filesystem::path& checkpoint_dir, const dataset::DatasetLoader& data);

  /// Runs `count` generator steps with their critic steps. Throws
  /// NumericError on a non-finite loss before the update is applied.
  void train_steps(std::uint64_t count);
  /// Trains until cfg.epochs are complete, checkpointing into `dir` at every
  /// epoch end (and every checkpoint_every steps).
  void train(const std::filesystem::path& dir, const std::function<void(const StepMetrics&)>& on_step = {});

  /// Writes checkpoint, metrics and snapshots into `dir` atomically.
  void save(const std::filesystem::path& dir) const;
  [[nodiscard]] CwganModel model() const;

  [[nodiscard]] const GanConfig& config() const { return cfg_; }
  [[nodiscard]] const std::vector<StepMetrics>& metrics() const { return metrics_; }
  [[nodiscard]] const std::vector<EpochSnapshot>& snapshots() const { return snapshots_; }
  [[nodiscard]] std::uint64_t generator_steps() const { return generator_steps_; }
  [[nodiscard]] std::uint64_t steps_per_epoch() const { return steps_per_epoch_; }
  [[nodiscard]] std::uint64_t total_generator_steps() const { return steps_per_epoch_ * cfg_.epochs; }
  ConditionalNet<float>& generator() { return generator_; }
  ConditionalNet<float>& critic() { return critic_; }

  /// Probe conditions used for per-epoch snapshots.
  static std::vector<double> probe_conditions() { return {0.3, 0.4, 0.5, 0.6, 0.7}; }

 private:
  void critic_step();
  void generator_step();
  void snapshot_epoch(std::uint64_t epoch);
  nn::NdArray<float> noise(int n);

  GanConfig cfg_;
  const dataset::DatasetLoader* data_;
  dataset::BatchStream stream_;
  ConditionalNet<float> generator_;
  ConditionalNet<float> critic_;
  std::mt19937_64 rng_;
  std::uint64_t generator_steps_ = 0;
  std::uint64_t steps_per_epoch_ = 0;
  std::vector<StepMetrics> metrics_;
  std::vector<EpochSnapshot> snapshots_;
  double label_min_ = 0.0;
  double label_max_ = 0.0;
  double elapsed_ = 0.0;
};

}  // namespace topoforge::gan
