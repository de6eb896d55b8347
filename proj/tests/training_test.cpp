#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "apc/builders.hpp"
#include "apc/io.hpp"
#include "apc/training.hpp"
#include "test_util.hpp"

using namespace apc;
using ag::Array;
using ag::Var;

namespace {

Circuit small_tabular(std::uint64_t seed, std::size_t num_data = 64, std::size_t z = 4) {
  Rng rng(seed);
  TabularBuilderConfig cfg;
  cfg.num_data_vars = num_data;
  cfg.embedding_dim = z;
  cfg.depth = 2;
  cfg.channels = 4;
  return build_tabular(cfg, rng);
}

nn::Decoder small_decoder(std::size_t z, std::size_t out, std::uint64_t seed) {
  nn::DecoderConfig dc;
  dc.embedding_dim = z;
  dc.output_dim = out;
  dc.hidden = {16};
  Rng rng(seed);
  return nn::Decoder(dc, rng);
}

TrainConfig quick(std::size_t iterations) {
  TrainConfig tc;
  tc.iterations = iterations;
  tc.batch_size = 32;
  tc.log_every = 0;
  return tc;
}

// z ~ N(mean, e^log_std) over one embedding variable, times Bernoulli(x0).
Circuit gaussian_toy(double mean, double log_std) {
  Circuit c(1, 1);
  const auto x = c.add_input(0, LeafFamily::Bernoulli, Array(ag::Shape{1}, 0.3));
  const auto z = c.add_input(1, LeafFamily::Gaussian, Array(ag::Shape{2}, std::vector<double>{mean, log_std}));
  c.add_product({x, z});
  return c;
}

}  // namespace

TEST(LrSchedule, WarmupAndDrops) {
  const std::size_t T = 1000;  // warmup 20 steps
  EXPECT_NEAR(lr_factor(0, T), 0.01, 1e-12);
  EXPECT_NEAR(lr_factor(10, T), 0.1, 1e-12);
  EXPECT_DOUBLE_EQ(lr_factor(20, T), 1.0);
  EXPECT_DOUBLE_EQ(lr_factor(659, T), 1.0);
  EXPECT_DOUBLE_EQ(lr_factor(660, T), 0.1);
  EXPECT_DOUBLE_EQ(lr_factor(899, T), 0.1);
  EXPECT_DOUBLE_EQ(lr_factor(900, T), 0.01);
  for (std::size_t t = 1; t < 20; ++t) EXPECT_GT(lr_factor(t, T), lr_factor(t - 1, T));
}

TEST(AdamW, ZeroLrLeavesParametersBitwise) {
  std::mt19937_64 rng(1);
  Var p = Var::leaf(oracle::random_array({3, 4}, rng), true);
  const Array before = p.value();
  AdamW opt({{{p}, 0.0, 0.5}});
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    ag::backward(ag::sum_all(ag::square(p)));
    opt.step();
  }
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(p.value()[i], before[i]);
}

TEST(AdamW, FirstStepMatchesHandComputation) {
  Var p = Var::leaf(Array(ag::Shape{2}, std::vector<double>{1.0, -2.0}), true);
  AdamW opt({{{p}, 0.1, 0.01}});
  ag::backward(ag::sum_all(ag::square(p)));  // grad = 2p
  opt.step(0.5);
  // bias-corrected m/sqrt(v) = sign(g) on step one
  const double lr = 0.05;
  EXPECT_NEAR(p.value()[0], 1.0 - lr * (2.0 / (2.0 + 1e-8) + 0.01 * 1.0), 1e-12);
  EXPECT_NEAR(p.value()[1], -2.0 - lr * (-4.0 / (4.0 + 1e-8) + 0.01 * -2.0), 1e-12);
  EXPECT_EQ(opt.steps(), 1u);
}

TEST(LossRec, Examples) {
  Array x(ag::Shape{2, 3}, std::vector<double>{0, 1, 0.5, 1, 0, 0.25});
  EXPECT_DOUBLE_EQ(loss_rec(Var::constant(x), x).item(), 0.0);
  Array x1 = x;
  for (auto& v : x1.vec()) v += 1.0;
  EXPECT_DOUBLE_EQ(loss_rec(Var::constant(x1), x).item(), 1.0);
  EXPECT_THROW(loss_rec(Var::constant(Array(ag::Shape{3, 2})), x), ShapeError);
}

TEST(LossRec, GradientIsTwoResidualOverN) {
  std::mt19937_64 rng(2);
  const Array x = oracle::random_array({3, 5}, rng, 0, 1);
  Var xh = Var::leaf(oracle::random_array({3, 5}, rng, 0, 1), true);
  ag::backward(loss_rec(xh, x));
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(xh.grad()[i], 2 * (xh.value()[i] - x[i]) / 15.0, 1e-14);
  const double err = oracle::gradcheck([&](std::vector<Var>& v) { return loss_rec(v[0], x); }, {xh.value()});
  EXPECT_LT(err, 1e-8);
}

TEST(LossRec, MaskedEntriesDoNotMatter) {
  std::mt19937_64 rng(3);
  const Array xh = oracle::random_array({4, 6}, rng, 0, 1);
  Array x = oracle::random_array({4, 6}, rng, 0, 1);
  std::vector<std::uint8_t> mask(24);
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = (i * 7) % 3 != 0;
  const double a = loss_rec(Var::constant(xh), x, mask).item();
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (!mask[i]) x[i] = 1e6;
  EXPECT_DOUBLE_EQ(loss_rec(Var::constant(xh), x, mask).item(), a);
}

TEST(LossKld, StandardNormalLeavesGiveExactZero) {
  Circuit c = gaussian_toy(0.0, 0.0);
  Rng rng(4);
  auto enc = encode(c, data_evidence(c, Array(ag::Shape{5, 1}, 1.0)), rng);
  EXPECT_EQ(loss_kld(enc.trace).item(), 0.0);
}

TEST(LossKld, UnitMeanShiftGivesHalf) {
  Circuit c = gaussian_toy(1.0, 0.0);
  Rng rng(5);
  auto enc = encode(c, data_evidence(c, Array(ag::Shape{3, 1}, 0.0)), rng);
  EXPECT_NEAR(loss_kld(enc.trace).item(), 0.5, 1e-15);  // per row, averaged over the batch
}

TEST(LossKld, MatchesMonteCarlo) {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> mu(-1.5, 1.5), ls(-1.0, 0.7);
  std::normal_distribution<double> n01;
  for (int rep = 0; rep < 5; ++rep) {
    const double m = mu(rng), l = ls(rng), s = std::exp(l);
    Circuit c = gaussian_toy(m, l);
    Rng r2(rep);
    auto enc = encode(c, data_evidence(c, Array(ag::Shape{1, 1}, 1.0)), r2);
    const double closed = loss_kld(enc.trace).item();
    double acc = 0;
    const int N = 1000000;
    for (int i = 0; i < N; ++i) {
      const double z = m + s * n01(rng);
      const double t = (z - m) / s;
      acc += (-0.5 * t * t - l) - (-0.5 * z * z);
    }
    EXPECT_NEAR(acc / N, closed, 1e-2);
  }
}

TEST(LossNll, IndependentCircuitFactorizes) {
  Circuit c = gaussian_toy(0.4, -0.3);
  Array x(ag::Shape{2, 1}, std::vector<double>{1, 0});
  Array z(ag::Shape{2, 1}, std::vector<double>{0.2, -1.1});
  const double nll = loss_nll(c, data_evidence(c, x), Var::constant(z)).item();
  double expect = 0;
  const double p1 = 1 / (1 + std::exp(-0.3));
  expect -= std::log(p1) + std::log(oracle::gaussian_pdf(0.2, 0.4, -0.3));
  expect -= std::log(1 - p1) + std::log(oracle::gaussian_pdf(-1.1, 0.4, -0.3));
  EXPECT_NEAR(nll, expect / 2, 1e-12);
}

TEST(LossNll, MatchesEnumerationOnDiscreteCircuits) {
  std::mt19937_64 rng(7);
  for (int rep = 0; rep < 20; ++rep) {
    oracle::RandomCircuitOptions opt;
    opt.num_vars = 4;
    Circuit c = oracle::random_binary_circuit(rng, opt);
    Array x = oracle::random_array({6, 4}, rng, 0, 1);
    for (auto& v : x.vec()) v = v > 0.5;
    double expect = 0;
    for (std::size_t b = 0; b < 6; ++b) {
      std::vector<double> s(x.data() + 4 * b, x.data() + 4 * b + 4);
      expect -= std::log(oracle::prob_full(c, c.root(), s));
    }
    EXPECT_NEAR(loss_nll(c, data_evidence(c, x), {}).item(), expect / 6, 1e-9);
  }
}

TEST(TrainApc, TotalIsWeightedSumOfComponents) {
  auto data = io::synthetic_clusters(200, 1);
  Circuit c = small_tabular(1);
  auto dec = small_decoder(4, 64, 1);
  TrainConfig tc = quick(5);
  tc.weights = {2.0, 0.5, 1.5};
  auto log = train_apc(tc, c, dec, data);
  ASSERT_EQ(log.steps.size(), 5u);
  for (const auto& m : log.steps) EXPECT_NEAR(m.total, 2.0 * m.rec + 0.5 * m.kld + 1.5 * m.nll, 1e-10);
}

TEST(TrainApc, ZeroWeightRemovesGradient) {
  auto data = io::synthetic_clusters(200, 1);
  Circuit c = small_tabular(2);
  auto dec = small_decoder(4, 64, 2);
  std::vector<Array> before;
  for (auto& p : dec.parameters()) before.push_back(p.value());
  TrainConfig tc = quick(5);
  tc.weights = {0.0, 1.0, 1.0};
  tc.weight_decay_neural = 0.0;  // otherwise decay alone would move them
  train_apc(tc, c, dec, data);
  const auto after = dec.parameters();
  for (std::size_t i = 0; i < after.size(); ++i)
    for (std::size_t k = 0; k < before[i].size(); ++k) EXPECT_EQ(after[i].value()[k], before[i][k]);
}

TEST(TrainApc, NllOnlyRunUsesOnlyTheCircuit) {
  auto data = io::synthetic_clusters(200, 1);
  Circuit c = small_tabular(3);
  auto dec = small_decoder(4, 64, 3);
  TrainConfig tc = quick(3);
  tc.weights = {0.0, 0.0, 1.0};
  auto log = train_apc(tc, c, dec, data);
  for (const auto& m : log.steps) {
    EXPECT_EQ(m.rec, 0.0);
    EXPECT_EQ(m.kld, 0.0);
    EXPECT_DOUBLE_EQ(m.total, m.nll);
  }
}

TEST(TrainApc, DeterministicUnderSeed) {
  auto data = io::synthetic_clusters(200, 1);
  auto run = [&] {
    Circuit c = small_tabular(4);
    auto dec = small_decoder(4, 64, 4);
    TrainConfig tc = quick(15);
    tc.seed = 9;
    return train_apc(tc, c, dec, data);
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.steps.size(), b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    EXPECT_EQ(a.steps[i].rec, b.steps[i].rec);
    EXPECT_EQ(a.steps[i].kld, b.steps[i].kld);
    EXPECT_EQ(a.steps[i].nll, b.steps[i].nll);
  }
}

TEST(TrainApc, InvariantsHoldAfterEveryStep) {
  auto data = io::synthetic_clusters(200, 1);
  Circuit c = small_tabular(5);
  auto dec = small_decoder(4, 64, 5);
  TrainConfig tc = quick(1);
  tc.lr_circuit = 5.0;  // large steps push log-stds against the clamps
  for (int s = 0; s < 10; ++s) {
    tc.seed = s;
    train_apc(tc, c, dec, data);
    for (const auto& u : c.units()) {
      if (u.kind == UnitKind::Sum) {
        double sum = 0;
        for (double w : oracle::softmax_of(u.params.value())) sum += w;
        EXPECT_NEAR(sum, 1.0, 1e-9);
      }
      if (u.kind == UnitKind::Input && u.family == LeafFamily::Gaussian) {
        EXPECT_GE(u.params.value()[1], kLogStdMin);
        EXPECT_LE(u.params.value()[1], kLogStdMax);
      }
    }
  }
}

TEST(TrainApc, NllAloneDecreasesSmoothed) {
  auto data = io::synthetic_clusters(500, 2);
  Circuit c = small_tabular(6);
  auto dec = small_decoder(4, 64, 6);
  TrainConfig tc = quick(400);
  tc.batch_size = 128;
  tc.weights = {0.0, 0.0, 1.0};
  auto log = train_apc(tc, c, dec, data);
  // Window means of the batch NLL; once the curve flattens, consecutive
  // windows may differ by sampling noise, so allow two standard errors.
  std::vector<double> window, se;
  for (std::size_t w = 0; w < 8; ++w) {
    double s = 0, s2 = 0;
    for (std::size_t i = 50 * w; i < 50 * (w + 1); ++i) {
      s += log.steps[i].nll;
      s2 += log.steps[i].nll * log.steps[i].nll;
    }
    window.push_back(s / 50);
    se.push_back(std::sqrt(std::max(0.0, s2 / 50 - window.back() * window.back()) / 49));
  }
  EXPECT_LT(window.back(), window.front() - 10.0);
  for (std::size_t w = 1; w < window.size(); ++w)
    EXPECT_LE(window[w], window[w - 1] + 2 * std::hypot(se[w], se[w - 1])) << "window " << w;
}

TEST(TrainApc, NonFiniteLossAbortsWithSnapshot) {
  auto data = io::synthetic_clusters(50, 1);
  Circuit c = small_tabular(7);
  auto dec = small_decoder(4, 64, 7);
  for (auto& p : c.parameters()) p.mutable_value()[0] = std::nan("");
  try {
    train_apc(quick(3), c, dec, data);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_EQ(e.snapshot.at("step").get<int>(), 0);
  }
}

TEST(TrainApc, RejectsMismatchedDecoder) {
  auto data = io::synthetic_clusters(50, 1);
  Circuit c = small_tabular(8);
  auto dec = small_decoder(3, 64, 8);
  EXPECT_THROW(train_apc(quick(1), c, dec, data), ShapeError);
}

TEST(TrainVae, ZeroInitEncoderHasZeroKld) {
  auto data = io::synthetic_clusters(100, 3);
  nn::VAEConfig vc;
  vc.data_dim = 64;
  vc.embedding_dim = 4;
  vc.encoder_hidden = {16};
  vc.decoder.embedding_dim = 4;
  vc.decoder.output_dim = 64;
  vc.decoder.hidden = {16};
  Rng rng(1);
  nn::VAE vae(vc, rng, nn::Init::Zero);
  auto log = train_vae(quick(1), vae, data);
  EXPECT_EQ(log.steps[0].kld, 0.0);
}

TEST(TrainVae, ElboDecreases) {
  auto data = io::synthetic_clusters(300, 3);
  nn::VAEConfig vc;
  vc.data_dim = 64;
  vc.embedding_dim = 4;
  vc.encoder_hidden = {32};
  vc.decoder.embedding_dim = 4;
  vc.decoder.output_dim = 64;
  vc.decoder.hidden = {32};
  Rng rng(2);
  nn::VAE vae(vc, rng);
  TrainConfig tc = quick(400);
  auto log = train_vae(tc, vae, data);
  auto avg = [&](std::size_t from) {
    double s = 0;
    for (std::size_t i = from; i < from + 50; ++i) s += log.steps[i].total;
    return s / 50;
  };
  EXPECT_LT(avg(350), avg(0));
}

TEST(Distill, FiniteAtStepZero) {
  nn::VAEConfig vc;
  vc.data_dim = 64;
  vc.embedding_dim = 4;
  vc.encoder_hidden = {16};
  vc.decoder.embedding_dim = 4;
  vc.decoder.output_dim = 64;
  vc.decoder.hidden = {16};
  Rng rng(3);
  nn::VAE teacher(vc, rng);
  Circuit c = small_tabular(9);
  auto dec = small_decoder(4, 64, 9);
  DistillConfig dc{quick(1), 1};
  auto log = distill(dc, teacher, c, dec);
  ASSERT_EQ(log.steps.size(), 1u);
  EXPECT_TRUE(std::isfinite(log.steps[0].rec));
  EXPECT_TRUE(std::isfinite(log.steps[0].kld));
  EXPECT_TRUE(std::isfinite(log.steps[0].nll));
}

TEST(Distill, NonFiniteTeacherBatchesAreSkipped) {
  nn::VAEConfig vc;
  vc.data_dim = 64;
  vc.embedding_dim = 4;
  vc.encoder_hidden = {16};
  vc.decoder.embedding_dim = 4;
  vc.decoder.output_dim = 64;
  vc.decoder.hidden = {16};
  Rng rng(4);
  nn::VAE teacher(vc, rng);
  teacher.decoder().parameters().back().mutable_value()[0] = std::nan("");
  Circuit c = small_tabular(10);
  auto dec = small_decoder(4, 64, 10);
  auto log = distill(DistillConfig{quick(4), 1}, teacher, c, dec);
  EXPECT_EQ(log.skipped_batches, 4u);
  EXPECT_TRUE(log.steps.empty());
}

TEST(Distill, RejectsDimensionMismatch) {
  nn::VAEConfig vc;
  vc.data_dim = 10;
  vc.embedding_dim = 4;
  vc.decoder.embedding_dim = 4;
  vc.decoder.output_dim = 10;
  Rng rng(5);
  nn::VAE teacher(vc, rng);
  Circuit c = small_tabular(11);
  auto dec = small_decoder(4, 64, 11);
  EXPECT_THROW(distill(DistillConfig{quick(1), 1}, teacher, c, dec), ShapeError);
}

TEST(Helpers, DiscretizeRoundsOntoSupport) {
  Array x(ag::Shape{1, 4}, std::vector<double>{0.0, 0.49, 0.51, 1.2});
  const Array d1 = discretize(x, 1);
  EXPECT_EQ(d1.vec(), (std::vector<double>{0, 0, 1, 1}));
  const Array d255 = discretize(x, 255);
  EXPECT_EQ(d255[1], std::round(0.49 * 255));
  EXPECT_EQ(d255[3], 255);
}

TEST(Helpers, DataEvidenceHonorsMask) {
  Circuit c = small_tabular(12, 6, 2);
  Array x(ag::Shape{2, 6}, 1.0);
  std::vector<std::uint8_t> mask = {1, 0, 1, 0, 1, 0, 0, 0, 0, 0, 0, 1};
  Evidence e = data_evidence(c, x, mask);
  EXPECT_EQ(e.observed_count(), 4u);
  EXPECT_FALSE(e.observed(0, 6));  // embedding stays missing
  EXPECT_THROW(data_evidence(c, Array(ag::Shape{2, 5})), ShapeError);
}

TEST(TrainConfigJson, RoundTripAndValidation) {
  TrainConfig tc;
  tc.iterations = 123;
  tc.weights.kld = 0.0;
  tc.detach_embedding = true;
  const TrainConfig back = train_config_from_json(to_json(tc));
  EXPECT_EQ(back.iterations, 123u);
  EXPECT_EQ(back.weights.kld, 0.0);
  EXPECT_TRUE(back.detach_embedding);
  EXPECT_THROW(train_config_from_json({{"batch_size", 0}}), FormatError);
  EXPECT_THROW(train_config_from_json({{"lambda_rec", -1.0}}), FormatError);
}
