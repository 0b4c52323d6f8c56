#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "test_support.hpp"
#include "topoforge/errors.hpp"
#include "topoforge/gan.hpp"
#include "topoforge/grid_io.hpp"

using namespace topoforge;
using namespace topoforge::gan;
using nn::NdArray;
using nn::Shape;
namespace fs = std::filesystem;

namespace {

GanConfig tiny_config() {
  GanConfig c;
  c.height = 16;
  c.width = 16;
  c.latent_dim = 8;
  c.batch_size = 4;
  c.n_critic = 2;
  c.stages = 2;
  c.generator_channels = {4, 2};
  c.critic_channels = {2, 4};
  c.epochs = 2;
  c.seed = 11;
  return c;
}

template <class T>
NdArray<T> uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  NdArray<T> a(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : a.data) v = static_cast<T>(u(rng));
  return a;
}

bool close(double analytic, double numeric) {
  return std::abs(analytic - numeric) <= 1e-4 * std::max(std::abs(analytic), std::abs(numeric)) + 1e-9;
}

// Finite-difference probe of every parameter tensor and of the input.
template <class LossFn>
void check_fd(const std::vector<nn::Parameter<double>*>& params, const LossFn& loss, std::mt19937_64& rng,
              int per_tensor) {
  for (auto* p : params) {
    const auto analytic = p->grad;
    std::uniform_int_distribution<std::size_t> pick(0, p->value.size() - 1);
    for (int k = 0; k < per_tensor; ++k) {
      const std::size_t i = pick(rng);
      const double saved = p->value[i];
      const double h = 1e-6;
      p->value[i] = saved + h;
      const double up = loss();
      p->value[i] = saved - h;
      const double down = loss();
      p->value[i] = saved;
      const double numeric = (up - down) / (2 * h);
      EXPECT_TRUE(close(analytic[i], numeric)) << p->name << "[" << i << "] analytic " << analytic[i] << " numeric "
                                               << numeric;
    }
  }
}

}  // namespace

TEST(GanConfig, PresetsValidate) {
  EXPECT_NO_THROW(GanConfig{}.validate());
  EXPECT_NO_THROW(GanConfig::paper().validate());
  EXPECT_NO_THROW(GanConfig::desk().validate());
  EXPECT_EQ(GanConfig::paper().resolved_stages(), 3);
  EXPECT_EQ(GanConfig::desk().resolved_stages(), 4);
  EXPECT_EQ(GanConfig::paper().batch_size, 64);
}

TEST(GanConfig, UnreachableResolutionListsValidSizes) {
  GanConfig c;
  c.height = c.width = 121;
  try {
    c.validate();
    FAIL() << "expected ParameterError";
  } catch (const ParameterError& e) {
    EXPECT_NE(std::string(e.what()).find("120"), std::string::npos) << e.what();
  }
  c.height = c.width = 120;
  c.stages = 4;
  EXPECT_THROW(c.validate(), ParameterError);
  c.stages = 3;
  c.generator_channels = {8, 4};
  EXPECT_THROW(c.validate(), ParameterError);
}

TEST(GanConfig, RejectsBadHyperparameters) {
  auto c = tiny_config();
  c.clip_c = 0.0;
  EXPECT_THROW(c.validate(), ParameterError);
  c = tiny_config();
  c.n_critic = 0;
  EXPECT_THROW(c.validate(), ParameterError);
  c = tiny_config();
  c.smoothing_target = 1.0;
  EXPECT_THROW(c.validate(), ParameterError);
  c = tiny_config();
  c.lr = -1.0;
  EXPECT_THROW(c.validate(), ParameterError);
  EXPECT_EQ(critic_mode_from_name("paper_tanh"), CriticMode::kPaperTanh);
  EXPECT_THROW(critic_mode_from_name("sigmoid"), ParameterError);
}

TEST(Embedding, ShapeMatchesBodyInput) {
  const auto g = build_generator<float>(tiny_config(), 1);
  const NdArray<float> y(Shape{3, 1}, 0.4f);
  EXPECT_EQ(g.embed(y).shape, (Shape{3, 8}));
  const auto c = build_critic<float>(tiny_config(), 1);
  EXPECT_EQ(c.embed(y).shape, (Shape{3, 1, 16, 16}));
  EXPECT_EQ(embed_label(c.embedding(), 0.4).shape, (Shape{1, 16, 16}));
}

TEST(Embedding, ZeroWeightUnitBiasIsIdentity) {
  auto g = build_generator<double>(tiny_config(), 2);
  for (auto* p : g.embedding().parameters()) {
    if (p->name.find("weight") != std::string::npos) std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
  }
  g.set_mode(nn::Mode::kInference);
  std::mt19937_64 rng(3);
  const auto z = uniform<double>({2, 8}, rng, -1, 1);
  for (double label : {0.3, 0.55, 0.7}) {
    const NdArray<double> y(Shape{2, 1}, label);
    for (double e : g.embed(y).data) EXPECT_EQ(e, 1.0);
    EXPECT_EQ(g.infer(z, y).data, g.body().infer(z).data);
  }
}

TEST(Embedding, DistinctLabelsGiveDistinctEmbeddings) {
  const auto c = build_critic<float>(tiny_config(), 4);
  const auto a = embed_label(c.embedding(), 0.3);
  const auto b = embed_label(c.embedding(), 0.7);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += std::abs(a[i] - b[i]);
  EXPECT_GT(diff, 0.0);
}

TEST(Generator, PaperResolutionShapeAndRange) {
  auto g = build_generator<float>(GanConfig::paper(), 5);
  g.set_mode(nn::Mode::kInference);
  std::mt19937_64 rng(6);
  const auto z = uniform<float>({2, 120}, rng, -2, 2);
  const auto y = g.infer(z, NdArray<float>(Shape{2, 1}, 0.5f));
  ASSERT_EQ(y.shape, (Shape{2, 1, 120, 120}));
  for (float t : y.data) {
    EXPECT_GE(to_density(t), 0.0);
    EXPECT_LE(to_density(t), 1.0);
  }
}

TEST(Generator, DeskResolutionShape) {
  auto g = build_generator<float>(GanConfig::desk(), 7);
  std::mt19937_64 rng(8);
  const auto y = g.forward(uniform<float>({3, 120}, rng, -2, 2), NdArray<float>(Shape{3, 1}, 0.4f), 1);
  EXPECT_EQ(y.shape, (Shape{3, 1, 48, 48}));
  EXPECT_TRUE(y.all_finite());
}

TEST(Critic, OneScorePerImage) {
  const auto cfg = GanConfig::desk();
  auto c = build_critic<float>(cfg, 9);
  std::mt19937_64 rng(10);
  const auto s = c.forward(uniform<float>({5, 1, 48, 48}, rng, -1, 1), NdArray<float>(Shape{5, 1}, 0.5f), 2);
  EXPECT_EQ(s.shape, (Shape{5, 1}));
}

TEST(Critic, PaperTanhModeIsBounded) {
  auto cfg = tiny_config();
  cfg.critic_mode = CriticMode::kPaperTanh;
  auto c = build_critic<double>(cfg, 12);
  for (auto* p : c.parameters()) {
    for (auto& v : p->value.data) v *= 3.0;
  }
  std::mt19937_64 rng(13);
  const auto s = c.forward(uniform<double>({6, 1, 16, 16}, rng, -1, 1), NdArray<double>(Shape{6, 1}, 0.6), 3);
  for (double v : s.data) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_EQ(critic_layers(cfg).back().kind, nn::LayerKind::kTanh);
  EXPECT_NE(critic_layers(tiny_config()).back().kind, nn::LayerKind::kTanh);
}

TEST(Losses, WorkedExamples) {
  std::vector<double> dr, df;
  EXPECT_DOUBLE_EQ(critic_loss({1.0, 2.0}, {0.5}, &dr, &df), -1.0);
  EXPECT_EQ(dr, (std::vector<double>{-0.5, -0.5}));
  EXPECT_EQ(df, (std::vector<double>{1.0}));
  EXPECT_DOUBLE_EQ(generator_loss({0.25, 0.75}, &df), -0.5);
  EXPECT_EQ(df, (std::vector<double>{-0.5, -0.5}));
  EXPECT_NEAR(smoothed_critic_loss({0.9, 0.9}, {-0.9}, 0.9), 0.0, 1e-15);
  EXPECT_NEAR(smoothed_critic_loss({0.0}, {0.0}, 0.9), 1.62, 1e-15);
  EXPECT_NEAR(smoothed_generator_loss({0.9}, 0.9), 0.0, 1e-15);
  EXPECT_NEAR(smoothed_generator_loss({-0.1, 0.9}, 0.9), 0.5, 1e-15);
  EXPECT_THROW(critic_loss({}, {1.0}), ParameterError);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(14);
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> real(5), fake(7);
  for (auto& v : real) v = u(rng);
  for (auto& v : fake) v = u(rng);
  using Fn = std::function<double(const std::vector<double>&, const std::vector<double>&)>;
  const std::vector<std::pair<Fn, bool>> losses = {
      {[](const auto& r, const auto& f) { return critic_loss(r, f); }, true},
      {[](const auto& r, const auto& f) { return smoothed_critic_loss(r, f, 0.9); }, true},
      {[](const auto&, const auto& f) { return generator_loss(f); }, false},
      {[](const auto&, const auto& f) { return smoothed_generator_loss(f, 0.9); }, false},
  };
  std::vector<double> dr, df;
  for (std::size_t k = 0; k < losses.size(); ++k) {
    if (k == 0) critic_loss(real, fake, &dr, &df);
    if (k == 1) smoothed_critic_loss(real, fake, 0.9, &dr, &df);
    if (k == 2) generator_loss(fake, &df);
    if (k == 3) smoothed_generator_loss(fake, 0.9, &df);
    const auto& fn = losses[k].first;
    const double h = 1e-6;
    for (std::size_t i = 0; i < fake.size(); ++i) {
      auto fp = fake, fm = fake;
      fp[i] += h;
      fm[i] -= h;
      EXPECT_NEAR(df[i], (fn(real, fp) - fn(real, fm)) / (2 * h), 1e-8) << "loss " << k;
    }
    if (!losses[k].second) continue;
    for (std::size_t i = 0; i < real.size(); ++i) {
      auto rp = real, rm = real;
      rp[i] += h;
      rm[i] -= h;
      EXPECT_NEAR(dr[i], (fn(rp, fake) - fn(rm, fake)) / (2 * h), 1e-8) << "loss " << k;
    }
  }
}

TEST(GanGradients, CriticLossThroughConditionalCritic) {
  auto cfg = tiny_config();
  cfg.height = cfg.width = 8;
  cfg.critic_dropout = 0.0;
  for (auto mode : {CriticMode::kLinear, CriticMode::kPaperTanh}) {
    cfg.critic_mode = mode;
    auto critic = build_critic<double>(cfg, 15);
    std::mt19937_64 rng(16);
    for (auto* p : critic.parameters()) {
      for (auto& v : p->value.data) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
    }
    const int n = 3;
    const auto x = uniform<double>({2 * n, 1, 8, 8}, rng, -1, 1);
    const auto y = uniform<double>({2 * n, 1}, rng, 0.3, 0.7);
    auto loss = [&](std::vector<double>* dr, std::vector<double>* df) {
      const auto s = critic.forward(x, y, 1);
      const std::vector<double> r(s.data.begin(), s.data.begin() + n);
      const std::vector<double> f(s.data.begin() + n, s.data.end());
      return mode == CriticMode::kPaperTanh ? smoothed_critic_loss(r, f, 0.9, dr, df) : critic_loss(r, f, dr, df);
    };
    std::vector<double> dr, df;
    loss(&dr, &df);
    NdArray<double> g(Shape{2 * n, 1});
    for (int i = 0; i < n; ++i) {
      g[i] = dr[i];
      g[n + i] = df[i];
    }
    critic.backward(g);
    check_fd(critic.parameters(), [&] { return loss(nullptr, nullptr); }, rng, 6);
  }
}

TEST(GanGradients, GeneratorLossThroughCriticAndGenerator) {
  auto cfg = tiny_config();
  cfg.height = cfg.width = 8;
  cfg.critic_dropout = 0.0;
  auto gen = build_generator<double>(cfg, 17);
  auto critic = build_critic<double>(cfg, 18);
  std::mt19937_64 rng(19);
  for (auto* p : critic.parameters()) {
    for (auto& v : p->value.data) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  }
  const auto z = uniform<double>({4, 8}, rng, -1, 1);
  const auto y = uniform<double>({4, 1}, rng, 0.3, 0.7);
  auto loss = [&](std::vector<double>* df) {
    const auto s = critic.forward(gen.forward(z, y, 1), y, 2);
    return generator_loss({s.data.begin(), s.data.end()}, df);
  };
  std::vector<double> df;
  loss(&df);
  NdArray<double> g(Shape{4, 1}, df);
  gen.backward(critic.backward(g));
  check_fd(gen.parameters(), [&] { return loss(nullptr); }, rng, 6);
}

class GanTraining : public ::testing::Test {
 protected:
  void SetUp() override {
    manifest = oracle::synthetic_dataset(data_dir.path(), 10, 16, 16, 21);
    loader = std::make_unique<dataset::DatasetLoader>(manifest);
  }
  oracle::TempDir data_dir{"gan_data"};
  oracle::TempDir run_dir{"gan_run"};
  dataset::DatasetManifest manifest;
  std::unique_ptr<dataset::DatasetLoader> loader;
};

TEST_F(GanTraining, ResolutionMismatchRejected) {
  auto cfg = tiny_config();
  cfg.height = cfg.width = 32;
  EXPECT_THROW(Trainer(cfg, *loader), ParameterError);
}

TEST_F(GanTraining, StepScheduleAndClipBound) {
  const auto cfg = tiny_config();
  Trainer t(cfg, *loader);
  EXPECT_EQ(t.steps_per_epoch(), 3u);  // ceil(10 / 4)
  EXPECT_EQ(t.total_generator_steps(), 6u);
  t.train_steps(4);
  const auto& m = t.metrics();
  ASSERT_EQ(m.size(), 4u * (cfg.n_critic + 1));
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_EQ(m[i].step, i);
    EXPECT_EQ(m[i].critic, i % 3 != 2);
    EXPECT_EQ(m[i].generator_step, i / 3);
    EXPECT_EQ(m[i].epoch, i / 3 / 3);
    EXPECT_LE(m[i].max_abs_critic_weight, cfg.clip_c);
    EXPECT_TRUE(std::isfinite(m[i].loss));
  }
  for (auto* p : t.critic().parameters()) {
    for (float v : p->value.data) EXPECT_LE(std::abs(v), cfg.clip_c);
  }
  ASSERT_EQ(t.snapshots().size(), 1u);
  EXPECT_EQ(t.snapshots()[0].conditions, Trainer::probe_conditions());
  for (double v : t.snapshots()[0].raw_volfrac) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST_F(GanTraining, UpdatesChangeBothNetworks) {
  Trainer t(tiny_config(), *loader);
  const auto g0 = t.generator().clone();
  const auto c0 = t.critic().clone();
  t.train_steps(1);
  auto changed = [](ConditionalNet<float> a, ConditionalNet<float>& b) {
    const auto pa = a.parameters();
    const auto pb = b.parameters();
    int n = 0;
    for (std::size_t i = 0; i < pa.size(); ++i) n += pa[i]->value.data != pb[i]->value.data;
    return n;
  };
  EXPECT_GT(changed(g0.clone(), t.generator()), 0);
  EXPECT_GT(changed(c0.clone(), t.critic()), 0);
}

TEST_F(GanTraining, NonFiniteLossStopsBeforeUpdate) {
  Trainer t(tiny_config(), *loader);
  t.generator().body().parameters()[0]->value[0] = std::numeric_limits<float>::quiet_NaN();
  const auto critic_before = t.critic().clone();
  EXPECT_THROW(t.train_steps(1), NumericError);
  auto a = critic_before.clone();
  const auto pa = a.parameters();
  const auto pb = t.critic().parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value.data, pb[i]->value.data);
}

TEST_F(GanTraining, SameSeedSameRun) {
  Trainer a(tiny_config(), *loader);
  Trainer b(tiny_config(), *loader);
  a.train_steps(2);
  b.train_steps(2);
  ASSERT_EQ(a.metrics().size(), b.metrics().size());
  for (std::size_t i = 0; i < a.metrics().size(); ++i) EXPECT_TRUE(a.metrics()[i].same_values(b.metrics()[i]));
}

TEST_F(GanTraining, ResumeReproducesUninterruptedRun) {
  const auto cfg = tiny_config();
  Trainer straight(cfg, *loader);
  straight.train_steps(5);

  for (std::uint64_t cut : {1u, 3u, 4u}) {
    const auto dir = run_dir.path() / std::to_string(cut);
    {
      Trainer first(cfg, *loader);
      first.train_steps(cut);
      first.save(dir);
    }
    auto resumed = Trainer::resume(dir, *loader);
    EXPECT_EQ(resumed.generator_steps(), cut);
    resumed.train_steps(5 - cut);
    ASSERT_EQ(resumed.metrics().size(), straight.metrics().size());
    for (std::size_t i = 0; i < straight.metrics().size(); ++i) {
      EXPECT_TRUE(resumed.metrics()[i].same_values(straight.metrics()[i])) << "cut " << cut << " step " << i;
    }
    const auto pa = resumed.generator().parameters();
    const auto pb = straight.generator().parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value.data, pb[i]->value.data);
    ASSERT_EQ(resumed.snapshots().size(), straight.snapshots().size());
    for (std::size_t i = 0; i < straight.snapshots().size(); ++i) {
      EXPECT_EQ(resumed.snapshots()[i].raw_volfrac, straight.snapshots()[i].raw_volfrac);
    }
  }
}

TEST_F(GanTraining, ResumeTruncatesMetricsWrittenAfterCheckpoint) {
  Trainer t(tiny_config(), *loader);
  t.train_steps(2);
  t.save(run_dir.path());
  const auto kept = t.metrics().size();
  t.train_steps(1);
  io::write_file_atomic(run_dir.path() / kMetricsName, encode_metrics(t.metrics()));
  const auto r = Trainer::resume(run_dir.path(), *loader);
  EXPECT_EQ(r.metrics().size(), kept);
}

TEST_F(GanTraining, TrainWritesCheckpointAndMetrics) {
  auto cfg = tiny_config();
  cfg.epochs = 1;
  Trainer t(cfg, *loader);
  int seen = 0;
  t.train(run_dir.path(), [&](const StepMetrics&) { ++seen; });
  EXPECT_EQ(seen, 3 * 3);
  EXPECT_TRUE(fs::exists(run_dir.path() / kCheckpointName));
  const auto m = decode_metrics(io::read_file(run_dir.path() / kMetricsName));
  ASSERT_EQ(m.size(), t.metrics().size());
  for (std::size_t i = 0; i < m.size(); ++i) {
    EXPECT_TRUE(m[i].same_values(t.metrics()[i]));
    EXPECT_EQ(m[i].wall_seconds, t.metrics()[i].wall_seconds);
  }
}

TEST_F(GanTraining, CheckpointRoundTripIsBitwise) {
  Trainer t(tiny_config(), *loader);
  t.train_steps(2);
  t.save(run_dir.path());
  const auto loaded = load_model(run_dir.path() / kCheckpointName);
  auto live = t.model();
  auto copy = loaded.generator.clone();
  const auto pa = copy.parameters();
  const auto pb = live.generator.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->value.data, pb[i]->value.data) << pa[i]->name;
  EXPECT_EQ(loaded.generator_steps, 2u);
  EXPECT_DOUBLE_EQ(loaded.label_min, 0.3f);
  EXPECT_DOUBLE_EQ(loaded.label_max, 0.7f);
  const auto a = sample(loaded, 0.5, 3, 42);
  const auto b = sample(live, 0.5, 3, 42);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(a.fields[i].values, b.fields[i].values);
}

TEST_F(GanTraining, CorruptCheckpointRaisesLoadError) {
  Trainer t(tiny_config(), *loader);
  t.save(run_dir.path());
  const auto path = run_dir.path() / kCheckpointName;
  auto bytes = io::read_file(path);
  io::write_file_atomic(path, bytes.substr(0, bytes.size() - 7));
  EXPECT_THROW(load_model(path), LoadError);
  bytes[0] = 'X';
  io::write_file_atomic(path, bytes);
  EXPECT_THROW(load_model(path), LoadError);
  EXPECT_THROW(Trainer::resume(run_dir.path(), *loader), LoadError);
}

TEST_F(GanTraining, SamplingIsSeededAndConditioned) {
  Trainer t(tiny_config(), *loader);
  t.train_steps(1);
  const auto m = t.model();
  const auto a = sample(m, 0.5, 2, 7);
  const auto b = sample(m, 0.5, 2, 7);
  const auto c = sample(m, 0.5, 2, 8);
  const auto d = sample(m, 0.3, 2, 7);
  ASSERT_EQ(a.fields.size(), 2u);
  EXPECT_EQ(a.fields[0].nelx, 16);
  EXPECT_EQ(a.fields[0].values, b.fields[0].values);
  EXPECT_NE(a.fields[0].values, c.fields[0].values);
  EXPECT_NE(a.fields[0].values, d.fields[0].values);
  EXPECT_TRUE(a.warnings.empty());
  EXPECT_GT(a.seconds_per_sample, 0.0);
  for (double v : a.fields[1].values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  const auto w = sample(m, 0.9, 1, 7);
  ASSERT_EQ(w.warnings.size(), 1u);
  EXPECT_NE(w.warnings[0].find("0.9"), std::string::npos);
  EXPECT_THROW(sample(m, 0.5, 0, 7), ParameterError);
  EXPECT_THROW(sample(m, std::nan(""), 1, 7), ParameterError);
}

TEST(Metrics, EncodeDecodeRoundTrip) {
  std::vector<StepMetrics> m(3);
  m[0] = {0, 0, 0, true, -0.1234567890123, 0.98765432101234, 0.01, 0.5};
  m[1] = {1, 0, 0, false, 1e-30, 0.0, 0.00999999977648258, 1.25};
  m[2] = {2, 1, 0, true, -3.0, 1.0 / 3.0, 0.01, 2.0};
  const auto back = decode_metrics(encode_metrics(m));
  ASSERT_EQ(back.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_TRUE(back[i].same_values(m[i]));
    EXPECT_EQ(back[i].wall_seconds, m[i].wall_seconds);
  }
  auto other = m[0];
  other.wall_seconds = 99.0;
  EXPECT_TRUE(other.same_values(m[0]));
  EXPECT_THROW(decode_metrics("{\"step\": 1}\n", "m.jsonl"), LoadError);
}
