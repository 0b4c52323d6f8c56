#include "topoforge/nn/network.hpp"

#include <algorithm>
#include <cmath>

#include "topoforge/errors.hpp"

namespace topoforge::nn {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word.
  std::uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

namespace {

std::string layer_label(std::size_t i, const LayerSpec& s) {
  return "layer " + std::to_string(i) + " (" + kind_name(s.kind) + ")";
}

}  // namespace

template <class T>
Network<T>::Network(Shape input_shape, std::vector<LayerSpec> specs, std::uint64_t init_seed)
    : input_shape_(std::move(input_shape)) {
  if (input_shape_.empty()) throw ShapeError("network input shape is empty");
  Shape shape{1};
  shape.insert(shape.end(), input_shape_.begin(), input_shape_.end());
  std::mt19937_64 rng(init_seed);
  for (std::size_t i = 0; i < specs.size(); ++i) {
    try {
      layers_.push_back(make_layer<T>(specs[i]));
      shape = layers_.back()->output_shape(shape);
    } catch (const ShapeError& e) {
      throw ShapeError(layer_label(i, specs[i]) + ": " + e.what());
    } catch (const ParameterError& e) {
      throw ParameterError(layer_label(i, specs[i]) + ": " + e.what());
    }
    layers_.back()->initialize(rng);
  }
  name_parameters();
}

template <class T>
void Network<T>::name_parameters() {
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (auto* p : layers_[i]->parameters()) p->name = "layer" + std::to_string(i) + "." + p->name;
  }
}

template <class T>
Network<T> Network<T>::clone() const {
  Network<T> out;
  out.input_shape_ = input_shape_;
  out.mode_ = mode_;
  for (const auto& l : layers_) out.layers_.push_back(make_layer<T>(l->spec()));
  out.name_parameters();
  auto dst = out.parameters();
  auto src = parameters();
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = *src[i];
  auto dst_b = out.buffers();
  auto src_b = buffers();
  for (std::size_t i = 0; i < dst_b.size(); ++i) *dst_b[i].second = *src_b[i].second;
  return out;
}

template <class T>
Shape Network<T>::output_shape() const {
  Shape shape{1};
  shape.insert(shape.end(), input_shape_.begin(), input_shape_.end());
  for (const auto& l : layers_) shape = l->output_shape(shape);
  return Shape(shape.begin() + 1, shape.end());
}

template <class T>
std::vector<LayerSpec> Network<T>::specs() const {
  std::vector<LayerSpec> out;
  for (const auto& l : layers_) out.push_back(l->spec());
  return out;
}

template <class T>
void Network<T>::check_input(const NdArray<T>& x) const {
  if (x.shape.size() != input_shape_.size() + 1 || !std::equal(input_shape_.begin(), input_shape_.end(), x.shape.begin() + 1)) {
    throw ShapeError("network input " + shape_string(x.shape) + " does not match (N, " +
                     shape_string(input_shape_).substr(1));
  }
  if (x.batch() < 1) throw ShapeError("network input has an empty batch");
}

template <class T>
NdArray<T> Network<T>::forward(const NdArray<T>& x, std::uint64_t seed) {
  check_input(x);
  NdArray<T> h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    try {
      h = layers_[i]->forward(h, mode_, mix_seed(seed, i));
    } catch (const ShapeError& e) {
      throw ShapeError(layer_label(i, layers_[i]->spec()) + ": " + e.what());
    }
  }
  has_forward_ = true;
  return h;
}

template <class T>
NdArray<T> Network<T>::infer(const NdArray<T>& x) const {
  check_input(x);
  NdArray<T> h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    try {
      h = layers_[i]->infer(h);
    } catch (const ShapeError& e) {
      throw ShapeError(layer_label(i, layers_[i]->spec()) + ": " + e.what());
    }
  }
  return h;
}

template <class T>
NdArray<T> Network<T>::backward(const NdArray<T>& grad) {
  if (!has_forward_) throw StateError("network backward called before forward");
  NdArray<T> g = grad;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    try {
      g = layers_[i]->backward(g);
    } catch (const ShapeError& e) {
      throw ShapeError(layer_label(i, layers_[i]->spec()) + ": " + e.what());
    }
  }
  return g;
}

template <class T>
std::vector<Parameter<T>*> Network<T>::parameters() {
  std::vector<Parameter<T>*> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (auto* p : layers_[i]->parameters()) out.push_back(p);
  }
  return out;
}

template <class T>
std::vector<const Parameter<T>*> Network<T>::parameters() const {
  auto mut = const_cast<Network<T>*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

template <class T>
std::vector<std::pair<std::string, NdArray<T>*>> Network<T>::buffers() {
  std::vector<std::pair<std::string, NdArray<T>*>> out;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    for (auto& [name, b] : layers_[i]->buffers()) out.emplace_back("layer" + std::to_string(i) + "." + name, b);
  }
  return out;
}

template <class T>
std::vector<std::pair<std::string, const NdArray<T>*>> Network<T>::buffers() const {
  std::vector<std::pair<std::string, const NdArray<T>*>> out;
  for (auto& [name, b] : const_cast<Network<T>*>(this)->buffers()) out.emplace_back(name, b);
  return out;
}

template <class T>
std::size_t Network<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto* p : parameters()) n += p->value.size();
  return n;
}

void RmsPropConfig::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ParameterError("learning rate must be > 0");
  if (!(decay >= 0.0 && decay < 1.0)) throw ParameterError("rmsprop decay must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ParameterError("rmsprop epsilon must be > 0");
}

template <class T>
void rmsprop_step(const std::vector<Parameter<T>*>& params, const RmsPropConfig& cfg) {
  cfg.validate();
  for (const auto* p : params) {
    if (p->grad.shape != p->value.shape || p->rms.shape != p->value.shape) {
      throw ShapeError(p->name + ": gradient or accumulator shape differs from the parameter");
    }
    if (!p->grad.all_finite()) throw NumericError(p->name + ": non-finite gradient");
  }
  const double keep = cfg.decay;
  const double fresh = 1.0 - cfg.decay;
  for (auto* p : params) {
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      const double s = keep * p->rms[i] + fresh * g * g;
      p->rms[i] = static_cast<T>(s);
      p->value[i] = static_cast<T>(p->value[i] - cfg.lr * g / (std::sqrt(s) + cfg.epsilon));
    }
  }
}

template <class T>
void clip_weights(const std::vector<Parameter<T>*>& params, double c) {
  if (!(c > 0.0)) throw ParameterError("clip value must be > 0");
  const T hi = static_cast<T>(c);
  for (auto* p : params) {
    for (auto& v : p->value.data) {
      if (v > hi) {
        v = hi;
      } else if (v < -hi) {
        v = -hi;
      }
    }
  }
}

template <class T>
double max_abs_value(const std::vector<Parameter<T>*>& params) {
  double m = 0.0;
  for (const auto* p : params) {
    for (T v : p->value.data) m = std::max(m, static_cast<double>(std::abs(v)));
  }
  return m;
}

template class Network<float>;
template class Network<double>;
template void rmsprop_step<float>(const std::vector<Parameter<float>*>&, const RmsPropConfig&);
template void rmsprop_step<double>(const std::vector<Parameter<double>*>&, const RmsPropConfig&);
template void clip_weights<float>(const std::vector<Parameter<float>*>&, double);
template void clip_weights<double>(const std::vector<Parameter<double>*>&, double);
template double max_abs_value<float>(const std::vector<Parameter<float>*>&);
template double max_abs_value<double>(const std::vector<Parameter<double>*>&);

}  // namespace topoforge::nn
