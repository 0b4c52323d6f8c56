#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "topoforge/nn/layers.hpp"
#include "topoforge/nn/ndarray.hpp"

namespace topoforge::nn {

/// Sequential chain of layers with a fixed per-sample input shape.
///
/// Single owner while training: forward/backward mutate caches, parameters
/// and running statistics. infer() only reads and may run concurrently.
template <class T>
class Network {
 public:
  Network() = default;
  /// Builds and initializes the layers (weights ~ N(0, 0.02), biases at
  /// bias_init, batch-norm gamma 1 and beta 0). Throws ShapeError naming the
  /// first layer whose input shape does not fit.
  Network(Shape input_shape, std::vector<LayerSpec> specs, std::uint64_t init_seed);

  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;
  /// Deep copy of layers, parameters, accumulators and buffers.
  [[nodiscard]] Network clone() const;

  [[nodiscard]] const Shape& input_shape() const { return input_shape_; }
  [[nodiscard]] Shape output_shape() const;
  [[nodiscard]] std::size_t size() const { return layers_.size(); }
  [[nodiscard]] Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  [[nodiscard]] const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }
  [[nodiscard]] std::vector<LayerSpec> specs() const;

  void set_mode(Mode m) { mode_ = m; }
  [[nodiscard]] Mode mode() const { return mode_; }

  /// `seed` drives dropout masks; each layer derives its own stream from it.
  NdArray<T> forward(const NdArray<T>& x, std::uint64_t seed = 0);
  [[nodiscard]] NdArray<T> infer(const NdArray<T>& x) const;
  NdArray<T> backward(const NdArray<T>& grad);

  std::vector<Parameter<T>*> parameters();
  std::vector<const Parameter<T>*> parameters() const;
  std::vector<std::pair<std::string, NdArray<T>*>> buffers();
  std::vector<std::pair<std::string, const NdArray<T>*>> buffers() const;
  [[nodiscard]] std::size_t parameter_count() const;

 private:
  void check_input(const NdArray<T>& x) const;
  void name_parameters();

  Shape input_shape_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
  Mode mode_ = Mode::kTraining;
  bool has_forward_ = false;
};

struct RmsPropConfig {
  double lr = 5e-5;
  double decay = 0.9;
  double epsilon = 1e-7;

  void validate() const;
};

/// s <- decay * s + (1 - decay) * g^2;  w <- w - lr * g / (sqrt(s) + epsilon).
/// Throws NumericError before touching anything if a gradient is not finite.
template <class T>
void rmsprop_step(const std::vector<Parameter<T>*>& params, const RmsPropConfig& cfg = {});

/// Clamps every parameter value into [-c, c]. Throws ParameterError unless c > 0.
template <class T>
void clip_weights(const std::vector<Parameter<T>*>& params, double c);

template <class T>
double max_abs_value(const std::vector<Parameter<T>*>& params);

/// 64-bit mixing used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

extern template class Network<float>;
extern template class Network<double>;

}  // namespace topoforge::nn
