#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "apc/autodiff.hpp"
#include "apc/inference.hpp"
#include "json.hpp"

namespace apc::bench {

enum class Estimator { Simple, GumbelSoftmax };

std::string to_string(Estimator e);
Estimator estimator_from_string(const std::string& s);

struct BenchConfig {
  std::vector<std::size_t> dims = {32, 64, 128, 256};  // number of sum-unit inputs
  std::size_t iterations = 1000;
  std::size_t batch = 64;
  double lr = 0.01;
  std::size_t seeds = 10;
  std::uint64_t first_seed = 0;  // runs use first_seed .. first_seed + seeds - 1
  std::vector<Estimator> estimators = {Estimator::Simple, Estimator::GumbelSoftmax};
  double tau = 1.0;  // Gumbel-Softmax temperature
};

// KL(p || q) for probability vectors; +inf when p puts mass where q has none.
double kld(const std::vector<double>& p, const std::vector<double>& q);

// Hard straight-through Gumbel-Softmax: one-hot forward, gradient of
// softmax((log theta + g) / tau) backward. theta is [B, D].
ag::Var gumbel_softmax_st(const ag::Var& theta, double tau, Rng& rng);

struct BenchRun {
  std::size_t dim = 0;
  Estimator estimator = Estimator::Simple;
  std::uint64_t seed = 0;
  std::vector<double> kld;  // after each iteration (entry 0: at init)
  double final_kld() const { return kld.back(); }
};

// One sum unit with learnable logits fitted so that its one-hot samples match
// samples from a fixed Dirichlet(1) ground truth (squared error, rows paired
// by batch index), AdamW at constant lr. Tracks KL(learned || truth).
BenchRun run_bench(std::size_t dim, Estimator est, std::uint64_t seed, const BenchConfig& cfg = {});

struct BenchSummary {
  std::size_t dim = 0;
  Estimator estimator = Estimator::Simple;
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> finals;
};

std::vector<BenchRun> run_all(const BenchConfig& cfg);
std::vector<BenchSummary> summarize(const std::vector<BenchRun>& runs);

// Columns: dim, estimator, seed, iteration, kld.
std::string trajectory_table(const std::vector<BenchRun>& runs, std::size_t every = 10);
std::string summary_table(const std::vector<BenchSummary>& s);
nlohmann::json to_json(const std::vector<BenchSummary>& s);

}  // namespace apc::bench
