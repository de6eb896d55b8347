#include "apc/bench.hpp"

#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "apc/error.hpp"
#include "apc/training.hpp"  // AdamW

namespace apc::bench {

std::string to_string(Estimator e) { return e == Estimator::Simple ? "simple" : "gumbel-softmax"; }

Estimator estimator_from_string(const std::string& s) {
  if (s == "simple") return Estimator::Simple;
  if (s == "gumbel-softmax" || s == "gumbel") return Estimator::GumbelSoftmax;
  throw FormatError("unknown estimator '" + s + "'");
}

double kld(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) throw ShapeError("kld: size mismatch");
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0) continue;
    if (q[i] <= 0) return INFINITY;
    s += p[i] * (std::log(p[i]) - std::log(q[i]));
  }
  return std::max(0.0, s);
}

ag::Var gumbel_softmax_st(const ag::Var& theta, double tau, Rng& rng) {
  const auto& tv = theta.value();
  if (tv.rank() != 2) throw ShapeError("gumbel_softmax_st expects [B, D]");
  if (!(tau > 0)) throw DomainError("gumbel_softmax_st: tau must be positive");
  ag::Array g(tv.shape());
  for (auto& v : g.vec()) v = gumbel(rng);
  const ag::Var soft = ag::softmax((ag::log(theta) + ag::Var::constant(g)) * (1.0 / tau));
  const std::size_t B = tv.dim(0), D = tv.dim(1);
  ag::Array hard(tv.shape(), 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < D; ++k)
      if (soft.value()[b * D + k] > soft.value()[b * D + best]) best = k;
    hard[b * D + best] = 1.0;
  }
  return ag::Var::constant(hard) + soft - ag::detach(soft);
}

BenchRun run_bench(std::size_t dim, Estimator est, std::uint64_t seed, const BenchConfig& cfg) {
  if (dim < 2) throw DomainError("bench: need at least two inputs");
  Rng rng(seed);
  // Dirichlet(1) truth via normalized Exp(1) draws
  std::exponential_distribution<double> ex(1.0);
  std::vector<double> truth(dim);
  for (auto& t : truth) t = ex(rng);
  const double tsum = std::accumulate(truth.begin(), truth.end(), 0.0);
  for (auto& t : truth) t /= tsum;
  std::discrete_distribution<std::size_t> truth_dist(truth.begin(), truth.end());

  std::normal_distribution<double> n01;
  ag::Array w0(ag::Shape{dim});
  for (auto& v : w0.vec()) v = n01(rng);
  ag::Var w = ag::Var::leaf(w0, true);
  AdamW opt({{{w}, cfg.lr, 0.0}});

  auto probs = [&] {
    const ag::Var p = ag::softmax(ag::reshape(ag::detach(w), {1, dim}));
    return p.value().vec();
  };
  BenchRun run{dim, est, seed, {}};
  run.kld.push_back(kld(probs(), truth));
  const std::size_t B = cfg.batch;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    ag::Array target(ag::Shape{B, dim}, 0.0);
    for (std::size_t b = 0; b < B; ++b) target[b * dim + truth_dist(rng)] = 1.0;
    // theta broadcast to one row per sample
    ag::Array ones(ag::Shape{B, 1}, 1.0);
    const ag::Var theta = ag::matmul(ag::Var::constant(ones), ag::reshape(ag::softmax(ag::reshape(w, {1, dim})), {1, dim}));
    const ag::Var s = est == Estimator::Simple ? simple_sample(theta, rng) : gumbel_softmax_st(theta, cfg.tau, rng);
    const ag::Var loss = ag::sum_all(ag::square(s - ag::Var::constant(target))) * (1.0 / double(B));
    opt.zero_grad();
    ag::backward(loss);
    opt.step();
    run.kld.push_back(kld(probs(), truth));
  }
  return run;
}

std::vector<BenchRun> run_all(const BenchConfig& cfg) {
  std::vector<BenchRun> runs;
  for (auto d : cfg.dims)
    for (auto e : cfg.estimators)
      for (std::size_t s = 0; s < cfg.seeds; ++s) runs.push_back(run_bench(d, e, cfg.first_seed + s, cfg));
  return runs;
}

std::vector<BenchSummary> summarize(const std::vector<BenchRun>& runs) {
  std::vector<BenchSummary> out;
  for (const auto& r : runs) {
    auto it = std::find_if(out.begin(), out.end(), [&](const BenchSummary& s) { return s.dim == r.dim && s.estimator == r.estimator; });
    if (it == out.end()) {
      out.push_back({r.dim, r.estimator, 0, 0, {}});
      it = out.end() - 1;
    }
    it->finals.push_back(r.final_kld());
  }
  for (auto& s : out) {
    const double n = double(s.finals.size());
    s.mean = std::accumulate(s.finals.begin(), s.finals.end(), 0.0) / n;
    double v = 0;
    for (double f : s.finals) v += (f - s.mean) * (f - s.mean);
    s.stddev = s.finals.size() > 1 ? std::sqrt(v / (n - 1)) : 0.0;
  }
  return out;
}

std::string trajectory_table(const std::vector<BenchRun>& runs, std::size_t every) {
  std::ostringstream ss;
  ss << "dim\testimator\tseed\titeration\tkld\n";
  ss.precision(8);
  for (const auto& r : runs)
    for (std::size_t i = 0; i < r.kld.size(); ++i)
      if (i % std::max<std::size_t>(1, every) == 0 || i + 1 == r.kld.size())
        ss << r.dim << '\t' << to_string(r.estimator) << '\t' << r.seed << '\t' << i << '\t' << r.kld[i] << '\n';
  return ss.str();
}

std::string summary_table(const std::vector<BenchSummary>& s) {
  std::ostringstream ss;
  ss << "dim\testimator\tfinal_kld_mean\tfinal_kld_std\tseeds\n";
  ss.precision(6);
  for (const auto& r : s)
    ss << r.dim << '\t' << to_string(r.estimator) << '\t' << r.mean << '\t' << r.stddev << '\t' << r.finals.size() << '\n';
  return ss.str();
}

nlohmann::json to_json(const std::vector<BenchSummary>& s) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : s)
    j.push_back({{"dim", r.dim}, {"estimator", to_string(r.estimator)}, {"mean", r.mean}, {"std", r.stddev}, {"finals", r.finals}});
  return j;
}

}  // namespace apc::bench
