#include "topoforge/nn/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "topoforge/errors.hpp"

namespace topoforge::nn {

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_string(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_string(const Shape& s) {
  std::string out = "(";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i > 0) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + ")";
}

template <class T>
NdArray<T>::NdArray(Shape s, const std::vector<T>& values)
    : NdArray(std::move(s), AlignedVector<T>(values.begin(), values.end())) {}

template <class T>
NdArray<T>::NdArray(Shape s, AlignedVector<T> values) : shape(std::move(s)), data(std::move(values)) {
  if (shape_size(shape) != data.size()) {
    throw ShapeError("shape " + shape_string(shape) + " needs " + std::to_string(shape_size(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
}

template <class T>
NdArray<T> NdArray<T>::reshaped(Shape s) const {
  return NdArray<T>(std::move(s), data);
}

template struct NdArray<float>;
template struct NdArray<double>;

const char* kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::kConv: return "conv";
    case LayerKind::kConvTranspose: return "conv_transpose";
    case LayerKind::kDense: return "dense";
    case LayerKind::kBatchNorm: return "batch_norm";
    case LayerKind::kDropout: return "dropout";
    case LayerKind::kLeakyRelu: return "leaky_relu";
    case LayerKind::kTanh: return "tanh";
    case LayerKind::kReshape: return "reshape";
  }
  return "unknown";
}

LayerKind kind_from_name(const std::string& name) {
  for (auto k : {LayerKind::kConv, LayerKind::kConvTranspose, LayerKind::kDense, LayerKind::kBatchNorm,
                 LayerKind::kDropout, LayerKind::kLeakyRelu, LayerKind::kTanh, LayerKind::kReshape}) {
    if (name == kind_name(k)) return k;
  }
  throw ParameterError("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::conv(int in_ch, int out_ch, int kernel, int stride, int padding) {
  LayerSpec s;
  s.kind = LayerKind::kConv;
  s.in_channels = in_ch;
  s.out_channels = out_ch;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::conv_transpose(int in_ch, int out_ch, int kernel, int stride, int padding) {
  LayerSpec s = conv(in_ch, out_ch, kernel, stride, padding);
  s.kind = LayerKind::kConvTranspose;
  return s;
}

LayerSpec LayerSpec::dense(int in, int out, double bias_init) {
  LayerSpec s;
  s.kind = LayerKind::kDense;
  s.in_features = in;
  s.out_features = out;
  s.bias_init = bias_init;
  return s;
}

LayerSpec LayerSpec::batch_norm(int channels, double momentum, double epsilon) {
  LayerSpec s;
  s.kind = LayerKind::kBatchNorm;
  s.channels = channels;
  s.momentum = momentum;
  s.epsilon = epsilon;
  return s;
}

LayerSpec LayerSpec::dropout(double rate) {
  LayerSpec s;
  s.kind = LayerKind::kDropout;
  s.rate = rate;
  return s;
}

LayerSpec LayerSpec::leaky_relu(double alpha) {
  LayerSpec s;
  s.kind = LayerKind::kLeakyRelu;
  s.alpha = alpha;
  return s;
}

LayerSpec LayerSpec::tanh() {
  LayerSpec s;
  s.kind = LayerKind::kTanh;
  return s;
}

LayerSpec LayerSpec::reshape(Shape target) {
  LayerSpec s;
  s.kind = LayerKind::kReshape;
  s.target = std::move(target);
  return s;
}

void LayerSpec::validate() const {
  const std::string k = kind_name(kind);
  switch (kind) {
    case LayerKind::kConv:
    case LayerKind::kConvTranspose:
      if (in_channels < 1 || out_channels < 1) throw ParameterError(k + ": channel counts must be >= 1");
      if (kernel < 1 || stride < 1 || padding < 0) throw ParameterError(k + ": need kernel >= 1, stride >= 1, padding >= 0");
      if (kind == LayerKind::kConvTranspose && padding >= kernel) {
        throw ParameterError(k + ": padding must be smaller than the kernel");
      }
      break;
    case LayerKind::kDense:
      if (in_features < 1 || out_features < 1) throw ParameterError(k + ": feature counts must be >= 1");
      break;
    case LayerKind::kBatchNorm:
      if (channels < 1) throw ParameterError(k + ": channels must be >= 1");
      if (!(momentum >= 0.0 && momentum < 1.0)) throw ParameterError(k + ": momentum must lie in [0, 1)");
      if (!(epsilon > 0.0)) throw ParameterError(k + ": epsilon must be > 0");
      break;
    case LayerKind::kDropout:
      if (!(rate >= 0.0 && rate < 1.0)) throw ParameterError(k + ": rate must lie in [0, 1)");
      break;
    case LayerKind::kLeakyRelu:
      if (!std::isfinite(alpha)) throw ParameterError(k + ": alpha must be finite");
      break;
    case LayerKind::kTanh:
      break;
    case LayerKind::kReshape:
      if (target.empty()) throw ParameterError(k + ": empty target shape");
      for (int d : target) {
        if (d < 1) throw ParameterError(k + ": target dimensions must be >= 1");
      }
      break;
  }
}

namespace {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<Mat<T>>;
template <class T>
using MapCM = Eigen::Map<const Mat<T>>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <class T>
using MapCV = Eigen::Map<const Vec<T>>;

[[noreturn]] void shape_fail(const LayerSpec& spec, const Shape& got, const std::string& want) {
  throw ShapeError(std::string(kind_name(spec.kind)) + " expects " + want + ", got " + shape_string(got));
}

template <class T>
void require_cache(bool present, const LayerSpec& spec) {
  if (!present) throw StateError(std::string(kind_name(spec.kind)) + ": backward called without a recorded forward");
}

template <class T>
void require_grad_shape(const NdArray<T>& g, const Shape& expected, const LayerSpec& spec) {
  if (g.shape != expected) {
    throw ShapeError(std::string(kind_name(spec.kind)) + ": upstream gradient " + shape_string(g.shape) +
                     " does not match output " + shape_string(expected));
  }
}

template <class T>
void fill_normal(NdArray<T>& a, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : a.data) v = static_cast<T>(dist(rng));
}

template <class T>
Parameter<T> make_param(const char* name, Shape shape, double fill = 0.0) {
  Parameter<T> p;
  p.name = name;
  p.value = NdArray<T>(shape, static_cast<T>(fill));
  p.grad = NdArray<T>(shape);
  p.rms = NdArray<T>(std::move(shape));
  return p;
}

// Patch geometry shared by convolution and its adjoint. The "image" is
// C x H x W; patches are k x k windows at stride s with zero padding p, laid
// out as rows (c, ki, kj) by columns (oy, ox) over an Ho x Wo position grid.
struct PatchGeometry {
  int c, h, w, k, s, p, ho, wo;

  [[nodiscard]] int rows() const { return c * k * k; }
  [[nodiscard]] int cols() const { return ho * wo; }
};

template <class T>
void im2col(const T* img, const PatchGeometry& g, T* cols) {
  const int positions = g.cols();
  for (int c = 0; c < g.c; ++c) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        T* row = cols + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * positions;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.s - g.p + ki;
          T* out = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wo, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.s - g.p + kj;
            out[ox] = (ix >= 0 && ix < g.w) ? src[ix] : T(0);
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates patch columns back into a zeroed image.
template <class T>
void col2im(const T* cols, const PatchGeometry& g, T* img) {
  const int positions = g.cols();
  for (int c = 0; c < g.c; ++c) {
    for (int ki = 0; ki < g.k; ++ki) {
      for (int kj = 0; kj < g.k; ++kj) {
        const T* row = cols + static_cast<std::size_t>((c * g.k + ki) * g.k + kj) * positions;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.s - g.p + ki;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = img + (static_cast<std::size_t>(c) * g.h + iy) * g.w;
          const T* in = row + oy * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.s - g.p + kj;
            if (ix >= 0 && ix < g.w) dst[ix] += in[ox];
          }
        }
      }
    }
  }
}


std::size_t sample_size(const Shape& s) { return s.empty() || s[0] == 0 ? 0 : shape_size(s) / s[0]; }

template <class T>
class Conv2d final : public Layer<T> {
 public:
  explicit Conv2d(const LayerSpec& s)
      : Layer<T>(s),
        weight_(make_param<T>("weight", {s.out_channels, s.in_channels, s.kernel, s.kernel})),
        bias_(make_param<T>("bias", {s.out_channels}, s.bias_init)) {}

  Shape output_shape(const Shape& in) const override {
    const auto& s = this->spec_;
    if (in.size() != 4 || in[1] != s.in_channels) shape_fail(s, in, "(N, " + std::to_string(s.in_channels) + ", H, W)");
    if (in[2] + 2 * s.padding < s.kernel || in[3] + 2 * s.padding < s.kernel) {
      shape_fail(s, in, "spatial size >= kernel - 2 * padding");
    }
    return {in[0], s.out_channels, (in[2] + 2 * s.padding - s.kernel) / s.stride + 1,
            (in[3] + 2 * s.padding - s.kernel) / s.stride + 1};
  }

  NdArray<T> forward(const NdArray<T>& x, Mode, std::uint64_t) override {
    out_shape_ = output_shape(x.shape);
    in_shape_ = x.shape;
    geo_ = geometry(in_shape_, out_shape_);
    const std::size_t per = static_cast<std::size_t>(geo_.rows()) * geo_.cols();
    cols_.resize(per * x.batch());
    NdArray<T> y(out_shape_);
    for (int n = 0; n < x.batch(); ++n) {
      T* cols = cols_.data() + n * per;
      im2col(x.ptr() + n * sample_size(in_shape_), geo_, cols);
      apply(cols, geo_, y.ptr() + n * sample_size(out_shape_));
    }
    cached_ = true;
    return y;
  }

  NdArray<T> infer(const NdArray<T>& x) const override {
    const auto out_shape = output_shape(x.shape);
    const auto g = geometry(x.shape, out_shape);
    AlignedVector<T> cols(static_cast<std::size_t>(g.rows()) * g.cols());
    NdArray<T> y(out_shape);
    for (int n = 0; n < x.batch(); ++n) {
      im2col(x.ptr() + n * sample_size(x.shape), g, cols.data());
      apply(cols.data(), g, y.ptr() + n * sample_size(out_shape));
    }
    return y;
  }

  NdArray<T> backward(const NdArray<T>& grad) override {
    require_cache<T>(cached_, this->spec_);
    require_grad_shape(grad, out_shape_, this->spec_);
    const int co = this->spec_.out_channels;
    const int kr = geo_.rows();
    const int p = geo_.cols();
    const std::size_t per = static_cast<std::size_t>(kr) * p;
    MapCM<T> w(weight_.value.ptr(), co, kr);
    MapM<T> dw(weight_.grad.ptr(), co, kr);
    dw.setZero();
    auto& db = bias_.grad.data;
    std::fill(db.begin(), db.end(), T(0));
    NdArray<T> dx(in_shape_);
    Mat<T> dcols(kr, p);
    for (int n = 0; n < in_shape_[0]; ++n) {
      MapCM<T> dy(grad.ptr() + n * sample_size(out_shape_), co, p);
      MapCM<T> cols(cols_.data() + n * per, kr, p);
      dw.noalias() += dy * cols.transpose();
      for (int c = 0; c < co; ++c) db[c] += dy.row(c).sum();
      dcols.noalias() = w.transpose() * dy;
      col2im(dcols.data(), geo_, dx.ptr() + n * sample_size(in_shape_));
    }
    return dx;
  }

  void initialize(std::mt19937_64& rng) override {
    fill_normal(weight_.value, rng, 0.02);
    std::fill(bias_.value.data.begin(), bias_.value.data.end(), static_cast<T>(this->spec_.bias_init));
  }
  std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }

 private:
  PatchGeometry geometry(const Shape& in, const Shape& out) const {
    const auto& s = this->spec_;
    return {in[1], in[2], in[3], s.kernel, s.stride, s.padding, out[2], out[3]};
  }

  void apply(const T* cols, const PatchGeometry& g, T* out) const {
    const int co = this->spec_.out_channels;
    MapCM<T> w(weight_.value.ptr(), co, g.rows());
    MapCM<T> c(cols, g.rows(), g.cols());
    MapM<T> y(out, co, g.cols());
    y.noalias() = w * c;
    y.colwise() += MapCV<T>(bias_.value.ptr(), co);
  }

  Parameter<T> weight_;
  Parameter<T> bias_;
  PatchGeometry geo_{};
  Shape in_shape_;
  Shape out_shape_;
  AlignedVector<T> cols_;
  bool cached_ = false;
};

// Adjoint of Conv2d with the same (kernel, stride, padding): output size
// (H - 1) * stride - 2 * padding + kernel.
template <class T>
class ConvTranspose2d final : public Layer<T> {
 public:
  explicit ConvTranspose2d(const LayerSpec& s)
      : Layer<T>(s),
        weight_(make_param<T>("weight", {s.in_channels, s.out_channels, s.kernel, s.kernel})),
        bias_(make_param<T>("bias", {s.out_channels}, s.bias_init)) {}

  Shape output_shape(const Shape& in) const override {
    const auto& s = this->spec_;
    if (in.size() != 4 || in[1] != s.in_channels) shape_fail(s, in, "(N, " + std::to_string(s.in_channels) + ", H, W)");
    const int ho = (in[2] - 1) * s.stride - 2 * s.padding + s.kernel;
    const int wo = (in[3] - 1) * s.stride - 2 * s.padding + s.kernel;
    if (in[2] < 1 || in[3] < 1 || ho < 1 || wo < 1) shape_fail(s, in, "a positive output size");
    return {in[0], s.out_channels, ho, wo};
  }

  NdArray<T> forward(const NdArray<T>& x, Mode, std::uint64_t) override {
    out_shape_ = output_shape(x.shape);
    input_ = x;
    cached_ = true;
    return run(x, out_shape_);
  }

  NdArray<T> infer(const NdArray<T>& x) const override { return run(x, output_shape(x.shape)); }

  NdArray<T> backward(const NdArray<T>& grad) override {
    require_cache<T>(cached_, this->spec_);
    require_grad_shape(grad, out_shape_, this->spec_);
    const auto g = geometry(input_.shape, out_shape_);
    const int ci = this->spec_.in_channels;
    const int co = this->spec_.out_channels;
    const int kr = g.rows();
    const int p = g.cols();
    MapCM<T> w(weight_.value.ptr(), ci, kr);
    MapM<T> dw(weight_.grad.ptr(), ci, kr);
    dw.setZero();
    auto& db = bias_.grad.data;
    std::fill(db.begin(), db.end(), T(0));
    NdArray<T> dx(input_.shape);
    Mat<T> dcols(kr, p);
    const std::size_t plane = static_cast<std::size_t>(out_shape_[2]) * out_shape_[3];
    for (int n = 0; n < input_.batch(); ++n) {
      const T* dy = grad.ptr() + n * sample_size(out_shape_);
      im2col(dy, g, dcols.data());
      MapCM<T> xn(input_.ptr() + n * sample_size(input_.shape), ci, p);
      MapM<T> dxn(dx.ptr() + n * sample_size(input_.shape), ci, p);
      dxn.noalias() = w * dcols;
      dw.noalias() += xn * dcols.transpose();
      for (int c = 0; c < co; ++c) {
        const T* row = dy + c * plane;
        db[c] += std::accumulate(row, row + plane, T(0));
      }
    }
    return dx;
  }

  void initialize(std::mt19937_64& rng) override {
    fill_normal(weight_.value, rng, 0.02);
    std::fill(bias_.value.data.begin(), bias_.value.data.end(), static_cast<T>(this->spec_.bias_init));
  }
  std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }

 private:
  // Patch geometry over the output image with one position per input pixel.
  PatchGeometry geometry(const Shape& in, const Shape& out) const {
    const auto& s = this->spec_;
    return {s.out_channels, out[2], out[3], s.kernel, s.stride, s.padding, in[2], in[3]};
  }

  NdArray<T> run(const NdArray<T>& x, const Shape& out_shape) const {
    const auto g = geometry(x.shape, out_shape);
    const int ci = this->spec_.in_channels;
    const int co = this->spec_.out_channels;
    MapCM<T> w(weight_.value.ptr(), ci, g.rows());
    Mat<T> cols(g.rows(), g.cols());
    NdArray<T> y(out_shape);
    const std::size_t plane = static_cast<std::size_t>(out_shape[2]) * out_shape[3];
    for (int n = 0; n < x.batch(); ++n) {
      MapCM<T> xn(x.ptr() + n * sample_size(x.shape), ci, g.cols());
      cols.noalias() = w.transpose() * xn;
      T* yn = y.ptr() + n * sample_size(out_shape);
      col2im(cols.data(), g, yn);
      for (int c = 0; c < co; ++c) {
        const T b = bias_.value[c];
        for (std::size_t i = 0; i < plane; ++i) yn[c * plane + i] += b;
      }
    }
    return y;
  }

  Parameter<T> weight_;
  Parameter<T> bias_;
  Shape out_shape_;
  NdArray<T> input_;
  bool cached_ = false;
};

template <class T>
class Dense final : public Layer<T> {
 public:
  explicit Dense(const LayerSpec& s)
      : Layer<T>(s),
        weight_(make_param<T>("weight", {s.out_features, s.in_features})),
        bias_(make_param<T>("bias", {s.out_features}, s.bias_init)) {}

  Shape output_shape(const Shape& in) const override {
    const auto& s = this->spec_;
    if (in.size() != 2 || in[1] != s.in_features) shape_fail(s, in, "(N, " + std::to_string(s.in_features) + ")");
    return {in[0], s.out_features};
  }

  NdArray<T> forward(const NdArray<T>& x, Mode, std::uint64_t) override {
    auto y = infer(x);
    input_ = x;
    cached_ = true;
    return y;
  }

  NdArray<T> infer(const NdArray<T>& x) const override {
    const auto out_shape = output_shape(x.shape);
    const auto& s = this->spec_;
    NdArray<T> y(out_shape);
    MapCM<T> xm(x.ptr(), x.batch(), s.in_features);
    MapCM<T> w(weight_.value.ptr(), s.out_features, s.in_features);
    MapM<T> ym(y.ptr(), x.batch(), s.out_features);
    ym.noalias() = xm * w.transpose();
    ym.rowwise() += MapCV<T>(bias_.value.ptr(), s.out_features).transpose();
    return y;
  }

  NdArray<T> backward(const NdArray<T>& grad) override {
    require_cache<T>(cached_, this->spec_);
    const auto& s = this->spec_;
    require_grad_shape(grad, Shape{input_.batch(), s.out_features}, s);
    MapCM<T> dy(grad.ptr(), input_.batch(), s.out_features);
    MapCM<T> xm(input_.ptr(), input_.batch(), s.in_features);
    MapCM<T> w(weight_.value.ptr(), s.out_features, s.in_features);
    MapM<T>(weight_.grad.ptr(), s.out_features, s.in_features).noalias() = dy.transpose() * xm;
    Eigen::Map<Vec<T>>(bias_.grad.ptr(), s.out_features) = dy.colwise().sum().transpose();
    NdArray<T> dx(input_.shape);
    MapM<T>(dx.ptr(), input_.batch(), s.in_features).noalias() = dy * w;
    return dx;
  }

  void initialize(std::mt19937_64& rng) override {
    fill_normal(weight_.value, rng, 0.02);
    std::fill(bias_.value.data.begin(), bias_.value.data.end(), static_cast<T>(this->spec_.bias_init));
  }
  std::vector<Parameter<T>*> parameters() override { return {&weight_, &bias_}; }

 private:
  Parameter<T> weight_;
  Parameter<T> bias_;
  NdArray<T> input_;
  bool cached_ = false;
};

// Normalizes axis 1 over the batch and every trailing axis.
template <class T>
class BatchNorm final : public Layer<T> {
 public:
  explicit BatchNorm(const LayerSpec& s)
      : Layer<T>(s),
        gamma_(make_param<T>("gamma", {s.channels}, 1.0)),
        beta_(make_param<T>("beta", {s.channels})),
        running_mean_(Shape{s.channels}, T(0)),
        running_var_(Shape{s.channels}, T(1)) {}

  Shape output_shape(const Shape& in) const override {
    const auto& s = this->spec_;
    if (in.size() < 2 || in[1] != s.channels) shape_fail(s, in, "(N, " + std::to_string(s.channels) + ", ...)");
    return in;
  }

  NdArray<T> forward(const NdArray<T>& x, Mode mode, std::uint64_t) override {
    output_shape(x.shape);
    const auto& s = this->spec_;
    const int c_count = s.channels;
    const std::size_t inner = sample_size(x.shape) / static_cast<std::size_t>(c_count);
    const std::size_t m = inner * static_cast<std::size_t>(x.batch());
    mode_ = mode;
    inv_std_.assign(c_count, 0.0);
    xhat_ = NdArray<T>(x.shape);
    NdArray<T> y(x.shape);
    for (int c = 0; c < c_count; ++c) {
      double mean = 0.0;
      double var = 0.0;
      if (mode == Mode::kTraining) {
        for_channel(x, c, inner, [&](std::size_t i) { mean += x[i]; });
        mean /= static_cast<double>(m);
        for_channel(x, c, inner, [&](std::size_t i) { var += (x[i] - mean) * (x[i] - mean); });
        var /= static_cast<double>(m);
        running_mean_[c] = static_cast<T>(s.momentum * running_mean_[c] + (1.0 - s.momentum) * mean);
        running_var_[c] = static_cast<T>(s.momentum * running_var_[c] + (1.0 - s.momentum) * var);
      } else {
        mean = running_mean_[c];
        var = running_var_[c];
      }
      const double inv = 1.0 / std::sqrt(var + s.epsilon);
      inv_std_[c] = inv;
      const double g = gamma_.value[c];
      const double b = beta_.value[c];
      for_channel(x, c, inner, [&](std::size_t i) {
        const double h = (x[i] - mean) * inv;
        xhat_[i] = static_cast<T>(h);
        y[i] = static_cast<T>(g * h + b);
      });
    }
    cached_ = true;
    return y;
  }

  NdArray<T> infer(const NdArray<T>& x) const override {
    output_shape(x.shape);
    const auto& s = this->spec_;
    const std::size_t inner = sample_size(x.shape) / static_cast<std::size_t>(s.channels);
    NdArray<T> y(x.shape);
    for (int c = 0; c < s.channels; ++c) {
      const double mean = running_mean_[c];
      const double inv = 1.0 / std::sqrt(static_cast<double>(running_var_[c]) + s.epsilon);
      const double g = gamma_.value[c];
      const double b = beta_.value[c];
      for_channel(x, c, inner, [&](std::size_t i) { y[i] = static_cast<T>(g * ((x[i] - mean) * inv) + b); });
    }
    return y;
  }

  NdArray<T> backward(const NdArray<T>& grad) override {
    require_cache<T>(cached_, this->spec_);
    require_grad_shape(grad, xhat_.shape, this->spec_);
    const int c_count = this->spec_.channels;
    const std::size_t inner = sample_size(xhat_.shape) / static_cast<std::size_t>(c_count);
    const double m = static_cast<double>(inner) * xhat_.batch();
    NdArray<T> dx(xhat_.shape);
    for (int c = 0; c < c_count; ++c) {
      double sum_dy = 0.0;
      double sum_dy_xhat = 0.0;
      for_channel(grad, c, inner, [&](std::size_t i) {
        sum_dy += grad[i];
        sum_dy_xhat += static_cast<double>(grad[i]) * xhat_[i];
      });
      gamma_.grad[c] = static_cast<T>(sum_dy_xhat);
      beta_.grad[c] = static_cast<T>(sum_dy);
      const double g = gamma_.value[c];
      const double inv = inv_std_[c];
      if (mode_ == Mode::kTraining) {
        for_channel(grad, c, inner, [&](std::size_t i) {
          dx[i] = static_cast<T>(g * inv / m * (m * grad[i] - sum_dy - xhat_[i] * sum_dy_xhat));
        });
      } else {
        for_channel(grad, c, inner, [&](std::size_t i) { dx[i] = static_cast<T>(g * inv * grad[i]); });
      }
    }
    return dx;
  }

  void initialize(std::mt19937_64&) override {
    std::fill(gamma_.value.data.begin(), gamma_.value.data.end(), T(1));
    std::fill(beta_.value.data.begin(), beta_.value.data.end(), T(0));
  }
  std::vector<Parameter<T>*> parameters() override { return {&gamma_, &beta_}; }
  std::vector<std::pair<std::string, NdArray<T>*>> buffers() override {
    return {{"running_mean", &running_mean_}, {"running_var", &running_var_}};
  }

 private:
  template <class F>
  static void for_channel(const NdArray<T>& a, int c, std::size_t inner, F&& f) {
    const std::size_t channels = sample_size(a.shape) / inner;
    for (int n = 0; n < a.batch(); ++n) {
      const std::size_t base = (static_cast<std::size_t>(n) * channels + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) f(base + i);
    }
  }

  Parameter<T> gamma_;
  Parameter<T> beta_;
  NdArray<T> running_mean_;
  NdArray<T> running_var_;
  NdArray<T> xhat_;
  std::vector<double> inv_std_;
  Mode mode_ = Mode::kTraining;
  bool cached_ = false;
};

// Inverted dropout: kept units are scaled by 1 / (1 - rate), so E[y] = x.
template <class T>
class Dropout final : public Layer<T> {
 public:
  explicit Dropout(const LayerSpec& s) : Layer<T>(s) {}

  Shape output_shape(const Shape& in) const override {
    if (in.empty()) shape_fail(this->spec_, in, "a batched shape");
    return in;
  }

  NdArray<T> forward(const NdArray<T>& x, Mode mode, std::uint64_t seed) override {
    output_shape(x.shape);
    const double rate = this->spec_.rate;
    mask_ = NdArray<T>(x.shape, T(1));
    if (mode == Mode::kTraining && rate > 0.0) {
      std::mt19937_64 rng(seed);
      std::bernoulli_distribution keep(1.0 - rate);
      const T scale = static_cast<T>(1.0 / (1.0 - rate));
      for (auto& v : mask_.data) v = keep(rng) ? scale : T(0);
    }
    cached_ = true;
    NdArray<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * mask_[i];
    return y;
  }

  NdArray<T> infer(const NdArray<T>& x) const override {
    output_shape(x.shape);
    return x;
  }

  NdArray<T> backward(const NdArray<T>& grad) override {
    require_cache<T>(cached_, this->spec_);
    require_grad_shape(grad, mask_.shape, this->spec_);
    NdArray<T> dx(grad.shape);
    for (std::size_t i = 0; i < grad.size(); ++i) dx[i] = grad[i] * mask_[i];
    return dx;
  }

 private:
  NdArray<T> mask_;
  bool cached_ = false;
};

template <class T>
class LeakyRelu final : public Layer<T> {
 public:
  explicit LeakyRelu(const LayerSpec& s) : Layer<T>(s) {}

  Shape output_shape(const Shape& in) const override {
    if (in.empty()) shape_fail(this->spec_, in, "a batched shape");
    return in;
  }

  NdArray<T> forward(const NdArray<T>& x, Mode, std::uint64_t) override {
    input_ = x;
    cached_ = true;
    return infer(x);
  }

  NdArray<T> infer(const NdArray<T>& x) const override {
    output_shape(x.shape);
    const T a = static_cast<T>(this->spec_.alpha);
    NdArray<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T(0) ? x[i] : a * x[i];
    return y;
  }

  NdArray<T> backward(const NdArray<T>& grad) override {
    require_cache<T>(cached_, this->spec_);
    require_grad_shape(grad, input_.shape, this->spec_);
    const T a = static_cast<T>(this->spec_.alpha);
    NdArray<T> dx(grad.shape);
    for (std::size_t i = 0; i < grad.size(); ++i) dx[i] = input_[i] > T(0) ? grad[i] : a * grad[i];
    return dx;
  }

 private:
  NdArray<T> input_;
  bool cached_ = false;
};

template <class T>
class Tanh final : public Layer<T> {
 public:
  explicit Tanh(const LayerSpec& s) : Layer<T>(s) {}

  Shape output_shape(const Shape& in) const override {
    if (in.empty()) shape_fail(this->spec_, in, "a batched shape");
    return in;
  }

  NdArray<T> forward(const NdArray<T>& x, Mode, std::uint64_t) override {
    output_ = infer(x);
    cached_ = true;
    return output_;
  }

  NdArray<T> infer(const NdArray<T>& x) const override {
    output_shape(x.shape);
    NdArray<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
    return y;
  }

  NdArray<T> backward(const NdArray<T>& grad) override {
    require_cache<T>(cached_, this->spec_);
    require_grad_shape(grad, output_.shape, this->spec_);
    NdArray<T> dx(grad.shape);
    for (std::size_t i = 0; i < grad.size(); ++i) dx[i] = grad[i] * (T(1) - output_[i] * output_[i]);
    return dx;
  }

 private:
  NdArray<T> output_;
  bool cached_ = false;
};

template <class T>
class Reshape final : public Layer<T> {
 public:
  explicit Reshape(const LayerSpec& s) : Layer<T>(s) {}

  Shape output_shape(const Shape& in) const override {
    const auto& t = this->spec_.target;
    if (in.empty() || sample_size(in) != shape_size(t)) {
      shape_fail(this->spec_, in, std::to_string(shape_size(t)) + " values per sample");
    }
    Shape out{in[0]};
    out.insert(out.end(), t.begin(), t.end());
    return out;
  }

  NdArray<T> forward(const NdArray<T>& x, Mode, std::uint64_t) override {
    in_shape_ = x.shape;
    cached_ = true;
    return infer(x);
  }

  NdArray<T> infer(const NdArray<T>& x) const override { return x.reshaped(output_shape(x.shape)); }

  NdArray<T> backward(const NdArray<T>& grad) override {
    require_cache<T>(cached_, this->spec_);
    require_grad_shape(grad, output_shape(in_shape_), this->spec_);
    return grad.reshaped(in_shape_);
  }

 private:
  Shape in_shape_;
  bool cached_ = false;
};

}  // namespace

template <class T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec) {
  spec.validate();
  switch (spec.kind) {
    case LayerKind::kConv: return std::make_unique<Conv2d<T>>(spec);
    case LayerKind::kConvTranspose: return std::make_unique<ConvTranspose2d<T>>(spec);
    case LayerKind::kDense: return std::make_unique<Dense<T>>(spec);
    case LayerKind::kBatchNorm: return std::make_unique<BatchNorm<T>>(spec);
    case LayerKind::kDropout: return std::make_unique<Dropout<T>>(spec);
    case LayerKind::kLeakyRelu: return std::make_unique<LeakyRelu<T>>(spec);
    case LayerKind::kTanh: return std::make_unique<Tanh<T>>(spec);
    case LayerKind::kReshape: return std::make_unique<Reshape<T>>(spec);
  }
  throw ParameterError("unhandled layer kind");
}

template std::unique_ptr<Layer<float>> make_layer<float>(const LayerSpec&);
template std::unique_ptr<Layer<double>> make_layer<double>(const LayerSpec&);

}  // namespace topoforge::nn
