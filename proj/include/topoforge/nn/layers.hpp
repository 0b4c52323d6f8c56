#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "topoforge/nn/ndarray.hpp"

namespace topoforge::nn {

enum class LayerKind { kConv, kConvTranspose, kDense, kBatchNorm, kDropout, kLeakyRelu, kTanh, kReshape };

const char* kind_name(LayerKind kind);
/// Throws ParameterError for an unknown name.
LayerKind kind_from_name(const std::string& name);

/// Architecture description of one layer. Unused fields keep their defaults.
struct LayerSpec {
  LayerKind kind = LayerKind::kTanh;
  // dense
  int in_features = 0;
  int out_features = 0;
  // conv, conv_transpose: weight layouts [out, in, k, k] and [in, out, k, k]
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int stride = 1;
  int padding = 0;
  // dense, conv, conv_transpose
  double bias_init = 0.0;
  // batch_norm over axis 1
  int channels = 0;
  double momentum = 0.99;  // running = momentum * running + (1 - momentum) * batch
  double epsilon = 1e-5;
  // dropout
  double rate = 0.0;
  // leaky_relu
  double alpha = 0.2;
  // reshape, batch axis excluded
  Shape target;

  static LayerSpec conv(int in_ch, int out_ch, int kernel, int stride, int padding);
  static LayerSpec conv_transpose(int in_ch, int out_ch, int kernel, int stride, int padding);
  static LayerSpec dense(int in, int out, double bias_init = 0.0);
  static LayerSpec batch_norm(int channels, double momentum = 0.99, double epsilon = 1e-5);
  static LayerSpec dropout(double rate);
  static LayerSpec leaky_relu(double alpha = 0.2);
  static LayerSpec tanh();
  static LayerSpec reshape(Shape target);

  /// Throws ParameterError for out-of-range hyperparameters.
  void validate() const;
  bool operator==(const LayerSpec&) const = default;
};

enum class Mode { kTraining, kInference };

template <class T>
struct Parameter {
  std::string name;
  NdArray<T> value;
  NdArray<T> grad;
  NdArray<T> rms;  // RMSProp accumulator
};

/// One differentiable stage. forward() records what backward() needs;
/// infer() is const and records nothing, so concurrent infer() calls on a
/// shared layer are safe.
template <class T>
class Layer {
 public:
  explicit Layer(LayerSpec spec) : spec_(std::move(spec)) {}
  virtual ~Layer() = default;
  Layer(const Layer&) = delete;
  Layer& operator=(const Layer&) = delete;

  [[nodiscard]] const LayerSpec& spec() const { return spec_; }

  /// Output shape for a batched input shape. Throws ShapeError.
  [[nodiscard]] virtual Shape output_shape(const Shape& in) const = 0;
  virtual NdArray<T> forward(const NdArray<T>& x, Mode mode, std::uint64_t seed) = 0;
  [[nodiscard]] virtual NdArray<T> infer(const NdArray<T>& x) const = 0;
  /// Overwrites parameter gradients and returns the input gradient. Throws
  /// StateError when no forward() has been recorded.
  virtual NdArray<T> backward(const NdArray<T>& grad) = 0;

  virtual void initialize(std::mt19937_64& rng) {}
  virtual std::vector<Parameter<T>*> parameters() { return {}; }
  /// Non-trainable state saved with the weights (batch-norm running stats).
  virtual std::vector<std::pair<std::string, NdArray<T>*>> buffers() { return {}; }

 protected:
  LayerSpec spec_;
};

template <class T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec);

extern template std::unique_ptr<Layer<float>> make_layer<float>(const LayerSpec&);
extern template std::unique_ptr<Layer<double>> make_layer<double>(const LayerSpec&);

}  // namespace topoforge::nn
