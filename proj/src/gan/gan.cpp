#include "topoforge/gan.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "../binary_codec.hpp"
#include "json.hpp"
#include "topoforge/errors.hpp"
#include "topoforge/grid_io.hpp"

namespace topoforge::gan {

using nlohmann::json;
using nn::LayerSpec;
using nn::NdArray;
using nn::Shape;

const char* critic_mode_name(CriticMode m) { return m == CriticMode::kLinear ? "linear" : "paper_tanh"; }

CriticMode critic_mode_from_name(const std::string& name) {
  if (name == "linear") return CriticMode::kLinear;
  if (name == "paper_tanh") return CriticMode::kPaperTanh;
  throw ParameterError("unknown critic mode '" + name + "' (expected linear or paper_tanh)");
}

// ---------------------------------------------------------------------------
// Configuration

GanConfig GanConfig::paper() {
  GanConfig c;
  c.generator_channels = {128, 64, 32};
  c.critic_channels = {32, 64, 128};
  return c;
}

GanConfig GanConfig::desk() {
  GanConfig c;
  c.height = 48;
  c.width = 48;
  c.batch_size = 32;
  c.epochs = 334;
  c.generator_channels = {64, 32, 16, 8};
  c.critic_channels = {8, 16, 32, 64};
  return c;
}

namespace {

bool divisible(int v, int stages) { return stages >= 1 && stages < 16 && v % (1 << stages) == 0 && (v >> stages) >= 1; }

std::string valid_resolution_hint(int stages) {
  std::string s;
  const int step = 1 << stages;
  for (int k = 1; k <= 8; ++k) s += (k > 1 ? ", " : "") + std::to_string(k * step);
  return s;
}

}  // namespace

int GanConfig::resolved_stages() const {
  if (stages > 0) {
    if (!divisible(height, stages) || !divisible(width, stages)) {
      throw ParameterError("resolution " + std::to_string(height) + "x" + std::to_string(width) +
                           " is not reachable with " + std::to_string(stages) +
                           " stride-2 stages; valid sizes are multiples of " + std::to_string(1 << stages) + " (" +
                           valid_resolution_hint(stages) + ", ...)");
    }
    return stages;
  }
  for (int s = 4; s >= 1; --s) {
    if (divisible(height, s) && divisible(width, s) && (height >> s) >= 2 && (width >> s) >= 2) return s;
  }
  throw ParameterError("resolution " + std::to_string(height) + "x" + std::to_string(width) +
                       " is not reachable by stride-2 stages; valid sizes are even and at least 4 (e.g. 24, 32, 48, "
                       "64, 96, 120)");
}

std::vector<int> GanConfig::resolved_generator_channels() const {
  const int s = resolved_stages();
  if (!generator_channels.empty()) return generator_channels;
  std::vector<int> c(s);
  for (int i = 0; i < s; ++i) c[i] = 8 << (s - 1 - i);
  return c;
}

std::vector<int> GanConfig::resolved_critic_channels() const {
  const int s = resolved_stages();
  if (!critic_channels.empty()) return critic_channels;
  std::vector<int> c(s);
  for (int i = 0; i < s; ++i) c[i] = 8 << i;
  return c;
}

void GanConfig::validate() const {
  if (height < 2 || width < 2) throw ParameterError("resolution must be at least 2x2");
  if (latent_dim < 1) throw ParameterError("latent_dim must be >= 1");
  nn::RmsPropConfig{lr, rms_decay, rms_epsilon}.validate();
  if (!(clip_c > 0.0)) throw ParameterError("clip_c must be > 0");
  if (n_critic < 1) throw ParameterError("n_critic must be >= 1");
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  if (epochs < 0) throw ParameterError("epochs must be >= 0");
  if (!(smoothing_target > 0.0 && smoothing_target < 1.0)) throw ParameterError("smoothing_target must lie in (0, 1)");
  if (!(critic_dropout >= 0.0 && critic_dropout < 1.0)) throw ParameterError("critic_dropout must lie in [0, 1)");
  if (checkpoint_every < 0) throw ParameterError("checkpoint_every must be >= 0");
  const int s = resolved_stages();
  for (const auto* ch : {&generator_channels, &critic_channels}) {
    if (!ch->empty() && static_cast<int>(ch->size()) != s) {
      throw ParameterError("channel list has " + std::to_string(ch->size()) + " entries, expected one per stage (" +
                           std::to_string(s) + ")");
    }
    for (int c : *ch) {
      if (c < 1) throw ParameterError("channel widths must be >= 1");
    }
  }
}

// ---------------------------------------------------------------------------
// Conditional network

template <class T>
ConditionalNet<T>::ConditionalNet(Shape input_shape, std::vector<LayerSpec> body, std::uint64_t seed,
                                  double embedding_bias)
    : body_(input_shape, std::move(body), nn::mix_seed(seed, 0)),
      embedding_(Shape{1},
                 {LayerSpec::dense(1, static_cast<int>(nn::shape_size(input_shape)), embedding_bias),
                  LayerSpec::reshape(input_shape)},
                 nn::mix_seed(seed, 1)) {}

template <class T>
ConditionalNet<T> ConditionalNet<T>::clone() const {
  ConditionalNet<T> out;
  out.body_ = body_.clone();
  out.embedding_ = embedding_.clone();
  return out;
}

template <class T>
void ConditionalNet<T>::set_mode(nn::Mode m) {
  body_.set_mode(m);
  embedding_.set_mode(m);
}

namespace {

template <class T>
void require_labels(const NdArray<T>& x, const NdArray<T>& labels) {
  if (labels.shape != Shape{x.batch(), 1}) {
    throw ShapeError("labels " + nn::shape_string(labels.shape) + " do not match batch " + std::to_string(x.batch()));
  }
}

template <class T>
NdArray<T> hadamard(const NdArray<T>& a, const NdArray<T>& b) {
  if (a.shape != b.shape) throw ShapeError("elementwise product of " + nn::shape_string(a.shape) + " and " + nn::shape_string(b.shape));
  NdArray<T> out(a.shape);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

}  // namespace

template <class T>
NdArray<T> ConditionalNet<T>::forward(const NdArray<T>& x, const NdArray<T>& labels, std::uint64_t seed) {
  require_labels(x, labels);
  e_cache_ = embedding_.forward(labels, nn::mix_seed(seed, 1));
  x_cache_ = x;
  cached_ = true;
  return body_.forward(hadamard(x, e_cache_), nn::mix_seed(seed, 0));
}

template <class T>
NdArray<T> ConditionalNet<T>::infer(const NdArray<T>& x, const NdArray<T>& labels) const {
  require_labels(x, labels);
  return body_.infer(hadamard(x, embedding_.infer(labels)));
}

template <class T>
NdArray<T> ConditionalNet<T>::backward(const NdArray<T>& grad) {
  if (!cached_) throw StateError("conditional network backward called before forward");
  const auto dh = body_.backward(grad);
  embedding_.backward(hadamard(dh, x_cache_));
  return hadamard(dh, e_cache_);
}

template <class T>
NdArray<T> ConditionalNet<T>::embed(const NdArray<T>& labels) const {
  return embedding_.infer(labels);
}

template <class T>
std::vector<nn::Parameter<T>*> ConditionalNet<T>::parameters() {
  auto out = body_.parameters();
  for (auto* p : embedding_.parameters()) out.push_back(p);
  return out;
}

template class ConditionalNet<float>;
template class ConditionalNet<double>;

template <class T>
NdArray<T> embed_label(const nn::Network<T>& embedding, double label) {
  const auto e = embedding.infer(NdArray<T>(Shape{1, 1}, static_cast<T>(label)));
  return e.reshaped(Shape(e.shape.begin() + 1, e.shape.end()));
}

template NdArray<float> embed_label<float>(const nn::Network<float>&, double);
template NdArray<double> embed_label<double>(const nn::Network<double>&, double);

// ---------------------------------------------------------------------------
// Architectures

std::vector<LayerSpec> generator_layers(const GanConfig& cfg) {
  cfg.validate();
  const int s = cfg.resolved_stages();
  const auto ch = cfg.resolved_generator_channels();
  const int bh = cfg.height >> s;
  const int bw = cfg.width >> s;
  std::vector<LayerSpec> l;
  l.push_back(LayerSpec::dense(cfg.latent_dim, ch[0] * bh * bw));
  l.push_back(LayerSpec::reshape({ch[0], bh, bw}));
  l.push_back(LayerSpec::batch_norm(ch[0]));
  l.push_back(LayerSpec::leaky_relu(0.2));
  for (int i = 1; i < s; ++i) {
    l.push_back(LayerSpec::conv_transpose(ch[i - 1], ch[i], 4, 2, 1));
    l.push_back(LayerSpec::batch_norm(ch[i]));
    l.push_back(LayerSpec::leaky_relu(0.2));
  }
  l.push_back(LayerSpec::conv_transpose(ch[s - 1], 1, 4, 2, 1));
  l.push_back(LayerSpec::tanh());
  return l;
}

std::vector<LayerSpec> critic_layers(const GanConfig& cfg) {
  cfg.validate();
  const int s = cfg.resolved_stages();
  const auto ch = cfg.resolved_critic_channels();
  std::vector<LayerSpec> l;
  int in = 1;
  for (int i = 0; i < s; ++i) {
    l.push_back(LayerSpec::conv(in, ch[i], 4, 2, 1));
    l.push_back(LayerSpec::leaky_relu(0.2));
    if (cfg.critic_dropout > 0.0) l.push_back(LayerSpec::dropout(cfg.critic_dropout));
    in = ch[i];
  }
  const int flat = ch[s - 1] * (cfg.height >> s) * (cfg.width >> s);
  l.push_back(LayerSpec::reshape({flat}));
  l.push_back(LayerSpec::dense(flat, 1));
  if (cfg.critic_mode == CriticMode::kPaperTanh) l.push_back(LayerSpec::tanh());
  return l;
}

template <class T>
ConditionalNet<T> build_generator(const GanConfig& cfg, std::uint64_t seed) {
  return ConditionalNet<T>(Shape{cfg.latent_dim}, generator_layers(cfg), seed);
}

template <class T>
ConditionalNet<T> build_critic(const GanConfig& cfg, std::uint64_t seed) {
  return ConditionalNet<T>(Shape{1, cfg.height, cfg.width}, critic_layers(cfg), seed);
}

template ConditionalNet<float> build_generator<float>(const GanConfig&, std::uint64_t);
template ConditionalNet<double> build_generator<double>(const GanConfig&, std::uint64_t);
template ConditionalNet<float> build_critic<float>(const GanConfig&, std::uint64_t);
template ConditionalNet<double> build_critic<double>(const GanConfig&, std::uint64_t);

// ---------------------------------------------------------------------------
// Losses

namespace {

double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw ParameterError("loss needs a non-empty score array");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

void fill_grad(std::vector<double>* out, std::size_t n, double value) {
  if (out != nullptr) out->assign(n, value);
}

}  // namespace

double critic_loss(const std::vector<double>& real, const std::vector<double>& fake, std::vector<double>* d_real,
                   std::vector<double>* d_fake) {
  const double loss = mean_of(fake) - mean_of(real);
  fill_grad(d_real, real.size(), -1.0 / static_cast<double>(real.size()));
  fill_grad(d_fake, fake.size(), 1.0 / static_cast<double>(fake.size()));
  return loss;
}

double generator_loss(const std::vector<double>& fake, std::vector<double>* d_fake) {
  const double loss = -mean_of(fake);
  fill_grad(d_fake, fake.size(), -1.0 / static_cast<double>(fake.size()));
  return loss;
}

double smoothed_critic_loss(const std::vector<double>& real, const std::vector<double>& fake, double target,
                            std::vector<double>* d_real, std::vector<double>* d_fake) {
  mean_of(real);
  mean_of(fake);
  double loss = 0.0;
  if (d_real != nullptr) d_real->resize(real.size());
  if (d_fake != nullptr) d_fake->resize(fake.size());
  const double nr = static_cast<double>(real.size());
  const double nf = static_cast<double>(fake.size());
  for (std::size_t i = 0; i < real.size(); ++i) {
    const double r = real[i] - target;
    loss += r * r / nr;
    if (d_real != nullptr) (*d_real)[i] = 2.0 * r / nr;
  }
  for (std::size_t i = 0; i < fake.size(); ++i) {
    const double f = fake[i] + target;
    loss += f * f / nf;
    if (d_fake != nullptr) (*d_fake)[i] = 2.0 * f / nf;
  }
  return loss;
}

double smoothed_generator_loss(const std::vector<double>& fake, double target, std::vector<double>* d_fake) {
  mean_of(fake);
  const double n = static_cast<double>(fake.size());
  double loss = 0.0;
  if (d_fake != nullptr) d_fake->resize(fake.size());
  for (std::size_t i = 0; i < fake.size(); ++i) {
    const double f = fake[i] - target;
    loss += f * f / n;
    if (d_fake != nullptr) (*d_fake)[i] = 2.0 * f / n;
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Metrics

bool StepMetrics::same_values(const StepMetrics& o) const {
  return step == o.step && generator_step == o.generator_step && epoch == o.epoch && critic == o.critic &&
         loss == o.loss && wasserstein == o.wasserstein && max_abs_critic_weight == o.max_abs_critic_weight;
}

std::string encode_metrics(const std::vector<StepMetrics>& m) {
  std::string out;
  for (const auto& s : m) {
    json j = {{"step", s.step},
              {"generator_step", s.generator_step},
              {"epoch", s.epoch},
              {"kind", s.critic ? "critic" : "generator"},
              {"loss", s.loss},
              {"max_abs_critic_weight", s.max_abs_critic_weight},
              {"wall_seconds", s.wall_seconds}};
    if (s.critic) j["wasserstein"] = s.wasserstein;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<StepMetrics> decode_metrics(const std::string& text, const std::string& source) {
  std::vector<StepMetrics> out;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      StepMetrics s;
      s.step = j.at("step").get<std::uint64_t>();
      s.generator_step = j.at("generator_step").get<std::uint64_t>();
      s.epoch = j.at("epoch").get<std::uint64_t>();
      s.critic = j.at("kind").get<std::string>() == "critic";
      s.loss = j.at("loss").get<double>();
      s.max_abs_critic_weight = j.at("max_abs_critic_weight").get<double>();
      s.wall_seconds = j.at("wall_seconds").get<double>();
      if (s.critic) s.wasserstein = j.at("wasserstein").get<double>();
      out.push_back(s);
    } catch (const json::exception& e) {
      throw LoadError(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

namespace {

std::string encode_snapshots(const std::vector<EpochSnapshot>& snaps) {
  std::string out;
  for (const auto& s : snaps) {
    out += json{{"epoch", s.epoch}, {"conditions", s.conditions}, {"raw_volfrac", s.raw_volfrac}}.dump() + "\n";
  }
  return out;
}

std::vector<EpochSnapshot> decode_snapshots(const std::string& text, const std::string& source) {
  std::vector<EpochSnapshot> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      out.push_back({j.at("epoch").get<std::uint64_t>(), j.at("conditions").get<std::vector<double>>(),
                     j.at("raw_volfrac").get<std::vector<double>>()});
    } catch (const json::exception& e) {
      throw LoadError(source + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint encoding

json spec_json(const LayerSpec& s) {
  return {{"kind", nn::kind_name(s.kind)},
          {"in_features", s.in_features},
          {"out_features", s.out_features},
          {"in_channels", s.in_channels},
          {"out_channels", s.out_channels},
          {"kernel", s.kernel},
          {"stride", s.stride},
          {"padding", s.padding},
          {"bias_init", s.bias_init},
          {"channels", s.channels},
          {"momentum", s.momentum},
          {"epsilon", s.epsilon},
          {"rate", s.rate},
          {"alpha", s.alpha},
          {"target", s.target}};
}

LayerSpec spec_from(const json& j) {
  LayerSpec s;
  s.kind = nn::kind_from_name(j.at("kind").get<std::string>());
  s.in_features = j.at("in_features").get<int>();
  s.out_features = j.at("out_features").get<int>();
  s.in_channels = j.at("in_channels").get<int>();
  s.out_channels = j.at("out_channels").get<int>();
  s.kernel = j.at("kernel").get<int>();
  s.stride = j.at("stride").get<int>();
  s.padding = j.at("padding").get<int>();
  s.bias_init = j.at("bias_init").get<double>();
  s.channels = j.at("channels").get<int>();
  s.momentum = j.at("momentum").get<double>();
  s.epsilon = j.at("epsilon").get<double>();
  s.rate = j.at("rate").get<double>();
  s.alpha = j.at("alpha").get<double>();
  s.target = j.at("target").get<Shape>();
  return s;
}

json config_json(const GanConfig& c) {
  return {{"height", c.height},
          {"width", c.width},
          {"latent_dim", c.latent_dim},
          {"lr", c.lr},
          {"rms_decay", c.rms_decay},
          {"rms_epsilon", c.rms_epsilon},
          {"clip_c", c.clip_c},
          {"n_critic", c.n_critic},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"critic_mode", critic_mode_name(c.critic_mode)},
          {"label_smoothing", c.label_smoothing},
          {"smoothing_target", c.smoothing_target},
          {"stages", c.stages},
          {"generator_channels", c.generator_channels},
          {"critic_channels", c.critic_channels},
          {"critic_dropout", c.critic_dropout},
          {"checkpoint_every", c.checkpoint_every}};
}

GanConfig config_from(const json& j) {
  GanConfig c;
  c.height = j.at("height").get<int>();
  c.width = j.at("width").get<int>();
  c.latent_dim = j.at("latent_dim").get<int>();
  c.lr = j.at("lr").get<double>();
  c.rms_decay = j.at("rms_decay").get<double>();
  c.rms_epsilon = j.at("rms_epsilon").get<double>();
  c.clip_c = j.at("clip_c").get<double>();
  c.n_critic = j.at("n_critic").get<int>();
  c.batch_size = j.at("batch_size").get<int>();
  c.epochs = j.at("epochs").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.critic_mode = critic_mode_from_name(j.at("critic_mode").get<std::string>());
  c.label_smoothing = j.at("label_smoothing").get<bool>();
  c.smoothing_target = j.at("smoothing_target").get<double>();
  c.stages = j.at("stages").get<int>();
  c.generator_channels = j.at("generator_channels").get<std::vector<int>>();
  c.critic_channels = j.at("critic_channels").get<std::vector<int>>();
  c.critic_dropout = j.at("critic_dropout").get<double>();
  c.checkpoint_every = j.at("checkpoint_every").get<int>();
  return c;
}

struct TensorRef {
  std::string name;
  NdArray<float>* array;
};

void collect(ConditionalNet<float>& net, const std::string& prefix, std::vector<TensorRef>& params,
             std::vector<TensorRef>& buffers, std::vector<TensorRef>& rms) {
  for (auto [part, sub] : {std::pair<const char*, nn::Network<float>*>{"body", &net.body()}, {"embedding", &net.embedding()}}) {
    for (auto* p : sub->parameters()) {
      params.push_back({prefix + "." + part + "." + p->name, &p->value});
      rms.push_back({prefix + "." + part + "." + p->name + ".rms", &p->rms});
    }
    for (auto& [name, b] : sub->buffers()) buffers.push_back({prefix + "." + part + "." + name, b});
  }
}

std::vector<TensorRef> tensor_order(ConditionalNet<float>& generator, ConditionalNet<float>* critic) {
  std::vector<TensorRef> gp, gb, gr, cp, cb, cr;
  collect(generator, "generator", gp, gb, gr);
  if (critic != nullptr) collect(*critic, "critic", cp, cb, cr);
  std::vector<TensorRef> all;
  for (auto* group : {&gp, &gb, &cp, &cb, &gr, &cr}) all.insert(all.end(), group->begin(), group->end());
  return all;
}

json network_json(const ConditionalNet<float>& net) {
  json body = json::array();
  for (const auto& s : net.body().specs()) body.push_back(spec_json(s));
  json emb = json::array();
  for (const auto& s : net.embedding().specs()) emb.push_back(spec_json(s));
  return {{"input_shape", net.input_shape()}, {"body", body}, {"embedding", emb}};
}

void check_architecture(const json& stored, const ConditionalNet<float>& built, const std::string& what,
                        const std::string& source) {
  auto specs_from = [](const json& arr) {
    std::vector<LayerSpec> out;
    for (const auto& s : arr) out.push_back(spec_from(s));
    return out;
  };
  if (stored.at("input_shape").get<Shape>() != built.input_shape() ||
      specs_from(stored.at("body")) != built.body().specs() ||
      specs_from(stored.at("embedding")) != built.embedding().specs()) {
    throw LoadError(source + ": stored " + what + " architecture does not match its config");
  }
}

struct CheckpointFile {
  json header;
  std::map<std::string, NdArray<float>> tensors;
};

CheckpointFile read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  const auto src = path.string();
  detail::Reader r(bytes, src);
  if (r.str(4) != "CWTO") throw LoadError(src + ": bad magic, not a CWTO checkpoint");
  const auto version = r.u32();
  if (version != kCheckpointVersion) throw LoadError(src + ": unsupported checkpoint version " + std::to_string(version));
  const auto header_len = r.u32();
  CheckpointFile out;
  try {
    out.header = json::parse(r.str(header_len));
    for (const auto& t : out.header.at("tensors")) {
      Shape shape = t.at("shape").get<Shape>();
      NdArray<float> a(shape);
      for (auto& v : a.data) v = r.f32();
      out.tensors.emplace(t.at("name").get<std::string>(), std::move(a));
    }
  } catch (const json::exception& e) {
    throw LoadError(src + ": malformed header: " + e.what());
  }
  if (r.remaining() != 0) throw LoadError(src + ": " + std::to_string(r.remaining()) + " trailing bytes");
  return out;
}

void assign_tensors(const CheckpointFile& file, const std::vector<TensorRef>& refs, const std::string& source) {
  for (const auto& ref : refs) {
    const auto it = file.tensors.find(ref.name);
    if (it == file.tensors.end()) throw LoadError(source + ": missing tensor " + ref.name);
    if (it->second.shape != ref.array->shape) {
      throw LoadError(source + ": tensor " + ref.name + " has shape " + nn::shape_string(it->second.shape) +
                      ", model expects " + nn::shape_string(ref.array->shape));
    }
    *ref.array = it->second;
  }
}

std::string encode_checkpoint(const json& header_base, const std::vector<TensorRef>& refs) {
  json header = header_base;
  json tensors = json::array();
  for (const auto& r : refs) tensors.push_back({{"name", r.name}, {"shape", r.array->shape}});
  header["tensors"] = tensors;
  const std::string h = header.dump();
  std::string out = "CWTO";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(h.size()));
  out += h;
  for (const auto& r : refs) {
    for (float v : r.array->data) detail::put_f32(out, v);
  }
  return out;
}

}  // namespace

CwganModel load_model(const std::filesystem::path& checkpoint) {
  const auto file = read_checkpoint(checkpoint);
  const auto src = checkpoint.string();
  CwganModel m;
  try {
    m.config = config_from(file.header.at("config"));
    m.config.validate();
    m.generator = build_generator<float>(m.config, 0);
    check_architecture(file.header.at("generator"), m.generator, "generator", src);
    m.label_min = file.header.at("labels").at("min").get<double>();
    m.label_max = file.header.at("labels").at("max").get<double>();
    m.generator_steps = file.header.at("state").at("generator_steps").get<std::uint64_t>();
  } catch (const json::exception& e) {
    throw LoadError(src + ": malformed header: " + e.what());
  } catch (const ParameterError& e) {
    throw LoadError(src + ": invalid config: " + e.what());
  }
  std::vector<TensorRef> gp, gb, gr;
  collect(m.generator, "generator", gp, gb, gr);
  assign_tensors(file, gp, src);
  assign_tensors(file, gb, src);
  m.generator.set_mode(nn::Mode::kInference);
  return m;
}

SampleResult sample(const CwganModel& model, double volfrac, int count, std::uint64_t seed) {
  if (count < 1) throw ParameterError("sample count must be >= 1");
  if (!std::isfinite(volfrac)) throw ParameterError("volfrac must be finite");
  SampleResult out;
  if (volfrac < model.label_min || volfrac > model.label_max) {
    std::ostringstream w;
    w << "condition volfrac=" << volfrac << " lies outside the training range [" << model.label_min << ", "
      << model.label_max << "]";
    out.warnings.push_back(w.str());
  }
  const int latent = model.config.latent_dim;
  NdArray<float> z(Shape{count, latent});
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : z.data) v = static_cast<float>(normal(rng));
  const NdArray<float> labels(Shape{count, 1}, static_cast<float>(volfrac));

  const auto t0 = std::chrono::steady_clock::now();
  const auto y = model.generator.infer(z, labels);
  const auto t1 = std::chrono::steady_clock::now();
  out.seconds_per_sample = std::chrono::duration<double>(t1 - t0).count() / count;

  const int h = model.config.height;
  const int w = model.config.width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int n = 0; n < count; ++n) {
    DensityField f(w, h);
    for (std::size_t i = 0; i < plane; ++i) f.values[i] = std::clamp(to_density(y[n * plane + i]), 0.0, 1.0);
    out.fields.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

Trainer::Trainer(GanConfig cfg, const dataset::DatasetLoader& data)
    : cfg_(std::move(cfg)), data_(&data), stream_(data, std::max(1, cfg_.batch_size), nn::mix_seed(cfg_.seed, 1)) {
  cfg_.validate();
  if (data.height() != cfg_.height || data.width() != cfg_.width) {
    throw ParameterError("dataset resolution " + std::to_string(data.width()) + "x" + std::to_string(data.height()) +
                         " differs from the configured " + std::to_string(cfg_.width) + "x" +
                         std::to_string(cfg_.height));
  }
  generator_ = build_generator<float>(cfg_, nn::mix_seed(cfg_.seed, 2));
  critic_ = build_critic<float>(cfg_, nn::mix_seed(cfg_.seed, 3));
  generator_.set_mode(nn::Mode::kTraining);
  critic_.set_mode(nn::Mode::kTraining);
  rng_.seed(nn::mix_seed(cfg_.seed, 4));
  steps_per_epoch_ = data.batches_per_epoch(cfg_.batch_size);
  label_min_ = label_max_ = data.label(0);
  for (std::size_t i = 0; i < data.size(); ++i) {
    label_min_ = std::min<double>(label_min_, data.label(i));
    label_max_ = std::max<double>(label_max_, data.label(i));
  }
}

NdArray<float> Trainer::noise(int n) {
  NdArray<float> z(Shape{n, cfg_.latent_dim});
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : z.data) v = static_cast<float>(normal(rng_));
  return z;
}

namespace {

std::vector<double> scores_of(const NdArray<float>& s, int from, int to) {
  std::vector<double> out;
  for (int i = from; i < to; ++i) out.push_back(s[i]);
  return out;
}

}  // namespace

void Trainer::critic_step() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto real = stream_.next();
  const int n = real.size();
  const std::size_t plane = static_cast<std::size_t>(cfg_.height) * cfg_.width;

  NdArray<float> labels(Shape{n, 1});
  for (int i = 0; i < n; ++i) labels[i] = real.labels[i];
  const auto fake = generator_.forward(noise(n), labels, rng_());

  NdArray<float> images(Shape{2 * n, 1, cfg_.height, cfg_.width});
  NdArray<float> both(Shape{2 * n, 1});
  for (std::size_t i = 0; i < n * plane; ++i) images[i] = static_cast<float>(to_critic_input(real.images[i]));
  std::copy(fake.data.begin(), fake.data.end(), images.data.begin() + static_cast<std::ptrdiff_t>(n * plane));
  for (int i = 0; i < n; ++i) both[i] = both[n + i] = real.labels[i];

  const auto scores = critic_.forward(images, both, rng_());
  const auto rs = scores_of(scores, 0, n);
  const auto fs = scores_of(scores, n, 2 * n);
  std::vector<double> d_real, d_fake;
  const bool smooth = cfg_.label_smoothing && cfg_.critic_mode == CriticMode::kPaperTanh;
  const double loss = smooth ? smoothed_critic_loss(rs, fs, cfg_.smoothing_target, &d_real, &d_fake)
                             : critic_loss(rs, fs, &d_real, &d_fake);
  if (!std::isfinite(loss)) throw NumericError("non-finite critic loss at generator step " + std::to_string(generator_steps_));

  NdArray<float> grad(Shape{2 * n, 1});
  for (int i = 0; i < n; ++i) {
    grad[i] = static_cast<float>(d_real[i]);
    grad[n + i] = static_cast<float>(d_fake[i]);
  }
  critic_.backward(grad);
  auto params = critic_.parameters();
  nn::rmsprop_step(params, {cfg_.lr, cfg_.rms_decay, cfg_.rms_epsilon});
  nn::clip_weights(params, cfg_.clip_c);

  StepMetrics m;
  m.step = metrics_.size();
  m.generator_step = generator_steps_;
  m.epoch = generator_steps_ / steps_per_epoch_;
  m.critic = true;
  m.loss = loss;
  m.wasserstein = -critic_loss(rs, fs);
  m.max_abs_critic_weight = nn::max_abs_value(params);
  elapsed_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  m.wall_seconds = elapsed_;
  metrics_.push_back(m);
}

void Trainer::generator_step() {
  const auto t0 = std::chrono::steady_clock::now();
  const int n = cfg_.batch_size;
  NdArray<float> labels(Shape{n, 1});
  std::uniform_int_distribution<std::size_t> pick(0, data_->size() - 1);
  for (int i = 0; i < n; ++i) labels[i] = data_->label(pick(rng_));

  const auto fake = generator_.forward(noise(n), labels, rng_());
  const auto scores = critic_.forward(fake, labels, rng_());
  const auto fs = scores_of(scores, 0, n);
  std::vector<double> d_fake;
  const bool smooth = cfg_.label_smoothing && cfg_.critic_mode == CriticMode::kPaperTanh;
  const double loss =
      smooth ? smoothed_generator_loss(fs, cfg_.smoothing_target, &d_fake) : generator_loss(fs, &d_fake);
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite generator loss at generator step " + std::to_string(generator_steps_));
  }
  NdArray<float> grad(Shape{n, 1});
  for (int i = 0; i < n; ++i) grad[i] = static_cast<float>(d_fake[i]);
  generator_.backward(critic_.backward(grad));
  nn::rmsprop_step(generator_.parameters(), {cfg_.lr, cfg_.rms_decay, cfg_.rms_epsilon});

  StepMetrics m;
  m.step = metrics_.size();
  m.generator_step = generator_steps_;
  m.epoch = generator_steps_ / steps_per_epoch_;
  m.critic = false;
  m.loss = loss;
  m.max_abs_critic_weight = nn::max_abs_value(critic_.parameters());
  elapsed_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  m.wall_seconds = elapsed_;
  metrics_.push_back(m);
}

void Trainer::snapshot_epoch(std::uint64_t epoch) {
  const auto m = model();
  EpochSnapshot s;
  s.epoch = epoch;
  s.conditions = probe_conditions();
  for (double c : s.conditions) {
    const auto r = sample(m, c, 1, nn::mix_seed(cfg_.seed, 99));
    s.raw_volfrac.push_back(r.fields[0].mean());
  }
  snapshots_.push_back(s);
}

void Trainer::train_steps(std::uint64_t count) {
  for (std::uint64_t k = 0; k < count; ++k) {
    for (int c = 0; c < cfg_.n_critic; ++c) critic_step();
    generator_step();
    ++generator_steps_;
    if (generator_steps_ % steps_per_epoch_ == 0) snapshot_epoch(generator_steps_ / steps_per_epoch_ - 1);
  }
}

void Trainer::train(const std::filesystem::path& dir, const std::function<void(const StepMetrics&)>& on_step) {
  const std::uint64_t total = total_generator_steps();
  while (generator_steps_ < total) {
    const std::size_t before = metrics_.size();
    train_steps(1);
    if (on_step) {
      for (std::size_t i = before; i < metrics_.size(); ++i) on_step(metrics_[i]);
    }
    const bool epoch_end = generator_steps_ % steps_per_epoch_ == 0;
    const bool cadence = cfg_.checkpoint_every > 0 && generator_steps_ % cfg_.checkpoint_every == 0;
    if (epoch_end || cadence) save(dir);
  }
  save(dir);
}

CwganModel Trainer::model() const {
  CwganModel m;
  m.config = cfg_;
  m.generator = generator_.clone();
  m.generator.set_mode(nn::Mode::kInference);
  m.label_min = label_min_;
  m.label_max = label_max_;
  m.generator_steps = generator_steps_;
  return m;
}

void Trainer::save(const std::filesystem::path& dir) const {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError(dir.string() + ": cannot create checkpoint directory: " + ec.message());
  auto* self = const_cast<Trainer*>(this);
  std::ostringstream rng_state;
  rng_state << rng_;
  const auto pos = stream_.position();
  json header = {{"format", "topoforge-cwgan"},
                 {"config", config_json(cfg_)},
                 {"generator", network_json(generator_)},
                 {"critic", network_json(critic_)},
                 {"labels", {{"min", label_min_}, {"max", label_max_}}},
                 {"state",
                  {{"generator_steps", generator_steps_},
                   {"optimizer_steps", metrics_.size()},
                   {"stream_epoch", pos.epoch},
                   {"stream_cursor", pos.cursor},
                   {"elapsed_seconds", elapsed_},
                   {"rng", rng_state.str()}}}};
  io::write_file_atomic(dir / kMetricsName, encode_metrics(metrics_));
  io::write_file_atomic(dir / kSnapshotsName, encode_snapshots(snapshots_));
  io::write_file_atomic(dir / kCheckpointName,
                        encode_checkpoint(header, tensor_order(self->generator_, &self->critic_)));
}

Trainer Trainer::resume(const std::filesystem::path& checkpoint_dir, const dataset::DatasetLoader& data) {
  const auto path = checkpoint_dir / kCheckpointName;
  const auto src = path.string();
  const auto file = read_checkpoint(path);
  GanConfig cfg;
  try {
    cfg = config_from(file.header.at("config"));
  } catch (const json::exception& e) {
    throw LoadError(src + ": malformed config: " + e.what());
  }
  Trainer t(cfg, data);
  try {
    check_architecture(file.header.at("generator"), t.generator_, "generator", src);
    check_architecture(file.header.at("critic"), t.critic_, "critic", src);
    assign_tensors(file, tensor_order(t.generator_, &t.critic_), src);
    const auto& st = file.header.at("state");
    t.generator_steps_ = st.at("generator_steps").get<std::uint64_t>();
    t.elapsed_ = st.at("elapsed_seconds").get<double>();
    t.stream_.seek({st.at("stream_epoch").get<std::uint64_t>(), st.at("stream_cursor").get<std::size_t>()});
    std::istringstream rng_state(st.at("rng").get<std::string>());
    rng_state >> t.rng_;
    if (!rng_state) throw LoadError(src + ": unreadable RNG state");
    const auto optimizer_steps = st.at("optimizer_steps").get<std::uint64_t>();
    auto metrics = decode_metrics(io::read_file(checkpoint_dir / kMetricsName), (checkpoint_dir / kMetricsName).string());
    if (metrics.size() < optimizer_steps) throw LoadError(src + ": metrics file is shorter than the checkpoint");
    metrics.resize(optimizer_steps);
    t.metrics_ = std::move(metrics);
    auto snaps = decode_snapshots(io::read_file(checkpoint_dir / kSnapshotsName), (checkpoint_dir / kSnapshotsName).string());
    const std::uint64_t epochs_done = t.generator_steps_ / t.steps_per_epoch_;
    snaps.erase(std::remove_if(snaps.begin(), snaps.end(), [&](const EpochSnapshot& s) { return s.epoch >= epochs_done; }),
                snaps.end());
    t.snapshots_ = std::move(snaps);
  } catch (const json::exception& e) {
    throw LoadError(src + ": malformed state: " + e.what());
  }
  return t;
}

}  // namespace topoforge::gan
