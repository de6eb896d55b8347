// Acceptance run: one PASS/FAIL line per criterion. The exit status is
// nonzero only when a check could not be carried out at all; a FAIL line is
// a measured result, not a crash.

#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>

#include "CLI11.hpp"
#include "apc/bench.hpp"
#include "apc/builders.hpp"
#include "apc/eval.hpp"
#include "apc/io.hpp"
#include "apc/training.hpp"
#include "test_util.hpp"

using namespace apc;
using ag::Array;
using ag::Var;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double secs_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Verdict {
  bool pass = false;
  std::string detail;
};

nlohmann::json g_report = nlohmann::json::object();

std::vector<std::string> g_notes;

// Notes are printed under the verdict line of the criterion that made them.
void note(const std::string& s) { g_notes.push_back(s); }

void report(int id, const char* name, const Verdict& v) {
  std::printf("criterion %d %s: %s | %s\n", id, v.pass ? "PASS" : "FAIL", name, v.detail.c_str());
  for (const auto& n : g_notes) std::printf("  note: %s\n", n.c_str());
  std::fflush(stdout);
  g_report[std::to_string(id)] = {{"name", name}, {"pass", v.pass}, {"detail", v.detail}, {"notes", g_notes}};
  g_notes.clear();
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()); }

// ---------------------------------------------------------------------------
// 1. SIMPLE vs Gumbel-Softmax on a single sum unit

Verdict simple_benchmark() {
  const auto t0 = Clock::now();
  bench::BenchConfig cfg;
  cfg.dims = {64};
  const auto summary = bench::summarize(bench::run_all(cfg));
  const double took = secs_since(t0);
  const bench::BenchSummary *s = nullptr, *g = nullptr;
  for (const auto& x : summary) (x.estimator == bench::Estimator::Simple ? s : g) = &x;
  Verdict v;
  v.pass = s->mean < 0.01 && g->mean >= 5 * s->mean && took < 600;
  v.detail = fmt("D=64, %zu seeds, %zu iterations: SIMPLE KLD %.4f +- %.4f, Gumbel-Softmax %.4f +- %.4f, ratio %.1fx, "
                 "%.0f s (need SIMPLE < 0.01 and ratio >= 5)",
                 cfg.seeds, cfg.iterations, s->mean, s->stddev, g->mean, g->stddev, g->mean / s->mean, took);
  // how far training is from its floor
  cfg.iterations = 4000;
  cfg.estimators = {bench::Estimator::Simple};
  const auto longer = bench::summarize(bench::run_all(cfg));
  note(fmt("SIMPLE after 4000 iterations: KLD %.4f +- %.4f", longer[0].mean, longer[0].stddev));
  return v;
}

// ---------------------------------------------------------------------------
// 2. Inference against exhaustive enumeration

// Per-unit probabilities for one full state, bottom-up in probability space.
// `point_gauss`: Gaussian leaves act as point masses at their mean.
std::vector<double> unit_probs(const Circuit& c, const std::vector<double>& st, bool max_product, bool point_gauss) {
  std::vector<double> p(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Unit& u = c.unit(i);
    if (u.kind == UnitKind::Input) {
      const double x = st[u.var];
      const Array& th = u.params.value();
      if (u.family == LeafFamily::Bernoulli) {
        const double q = 1.0 / (1.0 + std::exp(-th[0]));
        p[i] = x == 1.0 ? q : 1.0 - q;
      } else if (u.family == LeafFamily::Gaussian) {
        p[i] = point_gauss ? double(x == th[0]) : oracle::gaussian_pdf(x, th[0], th[1]);
      } else {
        throw std::logic_error("unexpected leaf family");
      }
    } else if (u.kind == UnitKind::Product) {
      p[i] = 1.0;
      for (auto ch : u.children) p[i] *= p[ch];
    } else {
      const auto w = oracle::softmax_of(u.params.value());
      p[i] = 0.0;
      for (std::size_t k = 0; k < u.children.size(); ++k)
        p[i] = max_product ? std::max(p[i], w[k] * p[u.children[k]]) : p[i] + w[k] * p[u.children[k]];
    }
  }
  return p;
}

std::vector<double> bits_state(std::size_t y, std::size_t n) {
  std::vector<double> s(n);
  for (std::size_t v = 0; v < n; ++v) s[v] = double((y >> v) & 1);
  return s;
}

// Full joint table (2^n entries) of a circuit over n binary-valued variables.
std::vector<double> joint_table(const Circuit& c, bool max_product, bool point_gauss) {
  const std::size_t n = c.num_vars();
  std::vector<double> t(std::size_t(1) << n);
  for (std::size_t y = 0; y < t.size(); ++y) t[y] = unit_probs(c, bits_state(y, n), max_product, point_gauss)[c.root()];
  return t;
}

double total_variation(const std::vector<double>& a, const std::vector<double>& b) {
  double tv = 0;
  for (std::size_t i = 0; i < a.size(); ++i) tv += 0.5 * std::abs(a[i] - b[i]);
  return tv;
}

Verdict inference_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 g(2024);
  const std::size_t circuits = 200;
  double worst_marg = 0, worst_mpe = 0, worst_tv_u = 0, worst_tv_c = 0;
  std::size_t rows_marg = 0, rows_mpe = 0, state_mismatch = 0;

  // marginals under every mask and MPE, 1..12 binary data variables
  for (std::size_t t = 0; t < circuits; ++t) {
    const std::size_t V = 1 + t % 12;
    const Circuit c = oracle::random_binary_circuit(g, {.num_vars = V});
    const std::vector<double> P = joint_table(c, false, false);
    const std::size_t S = P.size();
    for (int rep = 0; rep < 2; ++rep) {
      const std::size_t xbits = std::uniform_int_distribution<std::size_t>(0, S - 1)(g);
      Evidence e(S, V);
      for (std::size_t m = 0; m < S; ++m)
        for (std::size_t v = 0; v < V; ++v)
          if ((m >> v) & 1) e.observe(m, v, double((xbits >> v) & 1));
      const Array lm = log_marginal(c, e).value();
      for (std::size_t m = 0; m < S; ++m) {
        double f = 0;
        for (std::size_t y = 0; y < S; ++y)
          if (((y ^ xbits) & m) == 0) f += P[y];
        worst_marg = std::max(worst_marg, std::abs(lm[m] - std::log(f)));
      }
      rows_marg += S;
    }
    const std::vector<double> M = joint_table(c, true, false);
    const std::size_t R = 32;
    Evidence e(R, V);
    std::vector<std::size_t> masks(R), xs(R);
    for (std::size_t b = 0; b < R; ++b) {
      masks[b] = std::uniform_int_distribution<std::size_t>(0, S - 1)(g);
      xs[b] = std::uniform_int_distribution<std::size_t>(0, S - 1)(g);
      for (std::size_t v = 0; v < V; ++v)
        if ((masks[b] >> v) & 1) e.observe(b, v, double((xs[b] >> v) & 1));
    }
    const MpeResult res = mpe(c, e);
    for (std::size_t b = 0; b < R; ++b) {
      double best = 0;
      for (std::size_t y = 0; y < S; ++y)
        if (((y ^ xs[b]) & masks[b]) == 0) best = std::max(best, M[y]);
      std::size_t ystar = 0;
      for (std::size_t v = 0; v < V; ++v) ystar |= std::size_t(res.state.at(b, v) == 1.0) << v;
      if (((ystar ^ xs[b]) & masks[b]) != 0) ++state_mismatch;
      worst_mpe = std::max({worst_mpe, std::abs(res.log_value[b] - std::log(best)), std::abs(std::log(M[ystar]) - std::log(best))});
    }
    rows_mpe += R;
  }

  // sampling: data plus near-point-mass embedding leaves, at most 6 variables
  const std::size_t N = 100000;
  for (std::size_t t = 0; t < circuits; ++t) {
    const std::size_t nd = 1 + t % 4, ne = 1 + (t / 4) % 2, V = nd + ne;
    Circuit c = oracle::random_binary_circuit(g, {.num_vars = nd, .num_emb = ne});
    for (std::size_t i = 0; i < c.size(); ++i) {
      const Unit& u = c.unit(i);
      if (u.kind != UnitKind::Input || u.family != LeafFamily::Gaussian) continue;
      Var p = u.params;
      p.mutable_value()[0] = double(std::bernoulli_distribution(0.5)(g));
      p.mutable_value()[1] = kLogStdMin;
    }
    const std::vector<double> P = joint_table(c, false, true);
    auto state_of = [&](const Array& x, const Array& z, std::size_t i) {
      std::size_t y = 0;
      for (std::size_t v = 0; v < nd; ++v) y |= std::size_t(x.at(i, v) == 1.0) << v;
      for (std::size_t j = 0; j < ne; ++j) y |= std::size_t(std::lround(z.at(i, j)) == 1) << (nd + j);
      return y;
    };
    Rng rng(7000 + t);
    const JointSamples s = sample_joint(c, rng, N);
    std::vector<double> freq(P.size(), 0.0);
    for (std::size_t i = 0; i < N; ++i) freq[state_of(s.x, s.z, i)] += 1.0 / double(N);
    worst_tv_u = std::max(worst_tv_u, total_variation(freq, P));

    // conditional p(z | observed data)
    std::size_t mask = 0, xbits = 0;
    for (std::size_t v = 0; v < nd; ++v) {
      mask |= std::size_t(std::bernoulli_distribution(0.6)(g)) << v;
      xbits |= std::size_t(std::bernoulli_distribution(0.5)(g)) << v;
    }
    std::vector<double> post(std::size_t(1) << ne, 0.0);
    for (std::size_t y = 0; y < P.size(); ++y)
      if (((y ^ xbits) & mask) == 0) post[y >> nd] += P[y];
    const double tot = std::accumulate(post.begin(), post.end(), 0.0);
    for (auto& q : post) q /= tot;
    Evidence e(N, V);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t v = 0; v < nd; ++v)
        if ((mask >> v) & 1) e.observe(i, v, double((xbits >> v) & 1));
    const Array z = encode(c, e, rng).z.value();
    std::vector<double> cf(post.size(), 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      std::size_t k = 0;
      for (std::size_t j = 0; j < ne; ++j) k |= std::size_t(std::lround(z.at(i, j)) == 1) << j;
      cf[k] += 1.0 / double(N);
    }
    worst_tv_c = std::max(worst_tv_c, total_variation(cf, post));
  }
  const double took = secs_since(t0);
  Verdict v;
  v.pass = worst_marg < 1e-9 && worst_mpe < 1e-9 && state_mismatch == 0 && worst_tv_u < 0.02 && worst_tv_c < 0.02 &&
           took < 300;
  v.detail = fmt("%zu circuits: log-marginal max |err| %.2e over %zu masked rows; MPE max |err| %.2e over %zu rows; "
                 "%zu circuits x %zu samples: max TV unconditional %.4f, conditional %.4f; %.0f s",
                 circuits, worst_marg, rows_marg, worst_mpe, rows_mpe, circuits, N, worst_tv_u, worst_tv_c, took);
  return v;
}

// ---------------------------------------------------------------------------
// 3. Gradients against central differences

double param_gradcheck(std::vector<Var> params, const std::function<Var()>& loss, double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  ag::backward(loss());
  std::vector<Array> grads;
  for (auto& p : params) grads.push_back(p.grad());
  double worst = 0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Var& p = params[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double x0 = p.value()[i];
      p.mutable_value()[i] = x0 + h;
      const double up = loss().item();
      p.mutable_value()[i] = x0 - h;
      const double dn = loss().item();
      p.mutable_value()[i] = x0;
      const double num = (up - dn) / (2 * h);
      const double an = grads[k][i];
      worst = std::max(worst, std::abs(num - an) / std::max({std::abs(num), std::abs(an), 1e-2}));
    }
  }
  return worst;
}

Verdict gradients() {
  std::mt19937_64 g(3);
  using F = std::function<Var(std::vector<Var>&)>;
  const std::vector<std::size_t> pick_idx = {2, 0, 1};
  struct OpCase {
    std::string name;
    struct {
      F f;
      std::vector<ag::Shape> shapes;
    } body;
  };
  const std::vector<OpCase> ops = {
      {"add", {[](auto& v) { return ag::sum_all(ag::square(v[0] + v[1])); }, {{3, 2}, {3, 2}}}},
      {"sub", {[](auto& v) { return ag::sum_all(ag::square(v[0] - v[1])); }, {{3, 2}, {3, 2}}}},
      {"mul", {[](auto& v) { return ag::sum_all(v[0] * v[1]); }, {{4}, {4}}}},
      {"div", {[](auto& v) { return ag::sum_all(v[0] / (ag::exp(v[1]) + 0.5)); }, {{4}, {4}}}},
      {"scalar ops", {[](auto& v) { return ag::sum_all(ag::square(ag::mul(ag::add(v[0], 0.3), -1.7))); }, {{5}}}},
      {"exp/log", {[](auto& v) { return ag::sum_all(ag::log(ag::exp(v[0]) + 0.1)); }, {{5}}}},
      {"neg", {[](auto& v) { return ag::sum_all(ag::square(ag::neg(v[0]) + 1.0)); }, {{5}}}},
      {"max_with", {[](auto& v) { return ag::sum_all(ag::square(ag::max_with(v[0], 0.05))); }, {{6}}}},
      {"relu", {[](auto& v) { return ag::sum_all(ag::square(ag::relu(v[0]))); }, {{6}}}},
      {"leaky_relu", {[](auto& v) { return ag::sum_all(ag::square(ag::leaky_relu(v[0], 0.1))); }, {{6}}}},
      {"sigmoid", {[](auto& v) { return ag::sum_all(ag::sigmoid(v[0]) * v[0]); }, {{5}}}},
      {"sum/mean axis", {[](auto& v) { return ag::sum_all(ag::square(ag::sum(v[0], 1)) + ag::square(ag::mean(v[0], 1))); }, {{3, 4}}}},
      {"logsumexp", {[](auto& v) { return ag::sum_all(ag::square(ag::logsumexp(v[0], 0))); }, {{3, 4}}}},
      {"max axis", {[](auto& v) { return ag::sum_all(ag::square(ag::max(v[0], 1).value)); }, {{3, 4}}}},
      {"mean_all", {[](auto& v) { return ag::mean_all(ag::square(v[0])); }, {{2, 3}}}},
      {"matmul", {[](auto& v) { return ag::sum_all(ag::square(ag::matmul(v[0], v[1]))); }, {{3, 4}, {4, 2}}}},
      {"conv_transpose2d", {[](auto& v) { return ag::sum_all(ag::square(ag::conv_transpose2d(v[0], v[1], 2))); }, {{1, 2, 3, 3}, {2, 2, 2, 2}}}},
      {"reshape", {[](auto& v) { return ag::sum_all(ag::square(ag::reshape(v[0], {6}) * 2.0)); }, {{2, 3}}}},
      {"add_bias", {[](auto& v) { return ag::sum_all(ag::square(ag::add_bias(v[0], v[1]))); }, {{2, 3}, {3}}}},
      {"add_channel_bias", {[](auto& v) { return ag::sum_all(ag::square(ag::add_channel_bias(v[0], v[1]))); }, {{2, 3, 2, 2}, {3}}}},
      {"slice_cols", {[](auto& v) { return ag::sum_all(ag::square(ag::slice_cols(v[0], 1, 3))); }, {{3, 4}}}},
      {"log_softmax/pick", {[&](auto& v) { return ag::sum_all(ag::pick(ag::log_softmax(v[0]), pick_idx)); }, {{3, 4}}}},
      {"softmax", {[](auto& v) { return ag::sum_all(ag::square(ag::softmax(v[0]))); }, {{2, 4}}}},
      {"kld_standard_normal", {[](auto& v) { return ag::sum_all(nn::kld_standard_normal(v[0], v[1])); }, {{2, 3}, {2, 3}}}},
      {"reparameterize", {[](auto& v) { Rng r(5); return ag::sum_all(ag::square(nn::reparameterize(v[0], v[1], r))); }, {{2, 3}, {2, 3}}}},
  };
  double worst_op = 0;
  std::string worst_name;
  for (const auto& op : ops) {
    std::vector<Array> in;
    for (const auto& s : op.body.shapes) in.push_back(oracle::random_array(s, g));
    const double e = oracle::gradcheck(op.body.f, in);
    if (e > worst_op) worst_op = e, worst_name = op.name;
  }

  // circuit, embedding input and losses
  std::mt19937_64 cg(9);
  const Circuit rc = oracle::random_binary_circuit(cg, {.num_vars = 3, .num_emb = 2});
  Evidence ev(4, 5);
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t v = 0; v < 3; ++v)
      if ((b + v) % 3) ev.observe(b, v, double((b >> (v % 2)) & 1));
  const Array zin = oracle::random_array({4, 2}, cg, -1, 1);
  Var zleaf = Var::leaf(zin, true);
  const double e_lm = param_gradcheck(rc.parameters(), [&] { return ag::sum_all(log_marginal(rc, ev, Var::constant(zin))); });
  const double e_lz = param_gradcheck({zleaf}, [&] { return ag::sum_all(log_marginal(rc, ev, zleaf)); });
  Array x01 = oracle::random_array({4, 3}, cg, 0, 1);
  const std::vector<std::uint8_t> mask = {1, 0, 1, 1, 1, 0, 0, 1, 1, 1, 1, 1};
  Var xh = Var::leaf(oracle::random_array({4, 3}, cg, 0, 1), true);
  const double e_rec = param_gradcheck({xh}, [&] { return loss_rec(xh, x01, mask); });

  // Full loss on a 5-variable APC: 3 binary data variables, 2 embeddings.
  Rng brng(1);
  TabularBuilderConfig tb;
  tb.num_data_vars = 3;
  tb.embedding_dim = 2;
  tb.depth = 1;
  tb.channels = 3;
  Circuit apc = build_tabular(tb, brng);
  nn::DecoderConfig dc;
  dc.embedding_dim = 2;
  dc.output_dim = 3;
  dc.hidden = {5};
  nn::Decoder dec(dc, brng);
  const Array xb(ag::Shape{4, 3}, std::vector<double>{1, 0, 1, 0, 0, 1, 1, 1, 0, 0, 1, 1});
  const Evidence eb = data_evidence(apc, xb);
  auto total = [&] {
    Rng r(11);  // same sampled tree and noise on every call
    const Encoding enc = encode(apc, eb, r);
    return loss_rec(dec(enc.z), xb) + loss_kld(enc.trace) + loss_nll(apc, eb, enc.z);
  };
  std::vector<Var> pathwise = dec.parameters(), discrete;
  for (std::size_t i = 0; i < apc.size(); ++i) {
    const Unit& u = apc.unit(i);
    if (u.kind == UnitKind::Product) continue;
    (u.kind == UnitKind::Input && u.family == LeafFamily::Gaussian ? pathwise : discrete).push_back(u.params);
  }
  const double e_full = param_gradcheck(pathwise, total);
  Rng r0(11);
  const Array zfix = encode(apc, eb, r0).z.value();
  const double e_nll = param_gradcheck(discrete, [&] { return loss_nll(apc, eb, Var::constant(zfix)); });

  const double worst = std::max({worst_op, e_lm, e_lz, e_rec, e_full, e_nll});
  Verdict v;
  v.pass = worst < 1e-4;
  v.detail = fmt("%zu ops, worst %.1e (%s); log-marginal params %.1e, embedding input %.1e; L_REC %.1e; "
                 "total loss on 5-variable APC: decoder + Gaussian leaves %.1e, sum weights + Bernoulli logits via L_NLL %.1e",
                 ops.size(), worst_op, worst_name.c_str(), e_lm, e_lz, e_rec, e_full, e_nll);
  return v;
}

// ---------------------------------------------------------------------------
// 4. Closed-form KLD

Verdict closed_form_kld() {
  std::mt19937_64 g(4);
  std::uniform_real_distribution<double> um(-2, 2), us(-1, 1);
  std::normal_distribution<double> n01;
  double worst = 0, worst_se = 0;
  for (int t = 0; t < 100; ++t) {
    const double mu = um(g), ls = us(g), sd = std::exp(ls);
    SampleTrace tr;
    tr.batch = 1;
    tr.mean = Var::constant(Array(ag::Shape{1, 1}, mu));
    tr.log_std = Var::constant(Array(ag::Shape{1, 1}, ls));
    const double closed = loss_kld(tr).item();
    // log q(z) - log p(z), averaged over antithetic pairs (eps, -eps)
    const int n = 1000000;
    double s = 0, s2 = 0;
    for (int i = 0; i < n; ++i) {
      const double eps = n01(g);
      double r = 0;
      for (double e : {eps, -eps}) {
        const double z = mu + sd * e;
        r += 0.5 * (-ls - 0.5 * e * e + 0.5 * z * z);
      }
      s += r;
      s2 += r * r;
    }
    const double m = s / n, se = std::sqrt((s2 / n - m * m) / n);
    worst = std::max(worst, std::abs(closed - m));
    worst_se = std::max(worst_se, se);
  }
  // standard-normal leaves inside a built circuit
  Rng rng(0);
  TabularBuilderConfig tb;
  tb.num_data_vars = 4;
  tb.embedding_dim = 3;
  tb.depth = 2;
  tb.channels = 3;
  Circuit c = build_tabular(tb, rng);
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Unit& u = c.unit(i);
    if (u.kind == UnitKind::Input && u.family == LeafFamily::Gaussian) {
      Var p = u.params;
      p.mutable_value()[0] = 0.0;
      p.mutable_value()[1] = 0.0;
    }
  }
  const Array x(ag::Shape{2, 4}, std::vector<double>{1, 0, 0, 1, 1, 1, 0, 0});
  const double at_prior = loss_kld(encode(c, data_evidence(c, x), rng).trace).item();
  Verdict v;
  v.pass = worst < 1e-2 && at_prior == 0.0;
  v.detail = fmt("100 (mu, log-sigma) pairs vs 1e6-draw antithetic Monte Carlo: max |diff| %.4f (largest MC std. error %.4f); "
                 "N(0,1) leaves give %.1f",
                 worst, worst_se, at_prior);
  return v;
}

// ---------------------------------------------------------------------------
// Trained models shared by criteria 5-9

ConvPCConfig convpc_cfg() { return ConvPCConfig{8, 8, 8, 4, 4, 1}; }

nn::DecoderConfig decoder_cfg(std::size_t out) {
  nn::DecoderConfig dc;
  dc.embedding_dim = 8;
  dc.output_dim = out;
  dc.hidden = {64, 64};
  return dc;
}

TrainConfig train_cfg(std::uint64_t seed) {
  TrainConfig tc;
  tc.iterations = 2000;
  tc.batch_size = 128;
  tc.log_every = 0;
  tc.seed = seed;
  return tc;
}

struct Apc {
  Circuit circuit;
  nn::Decoder decoder;
  TrainLog log;
};

// One dataset with its models, built on first use.
struct Zoo {
  std::string name;
  Dataset train, test;
  std::function<Circuit(Rng&)> build;
  std::map<std::string, Apc> apcs;
  std::map<std::uint64_t, nn::VAE> vaes;
  std::map<std::string, eval::SweepResult> sweeps;

  Apc& apc(const std::string& variant, std::uint64_t seed) {
    const std::string key = variant + "/" + std::to_string(seed);
    auto it = apcs.find(key);
    if (it != apcs.end()) return it->second;
    Rng rng(seed);
    Apc a;
    a.circuit = build(rng);
    a.decoder = nn::Decoder(decoder_cfg(train.dim()), rng);
    TrainConfig tc = train_cfg(seed);
    if (variant == "detach") tc.detach_embedding = true;
    if (variant == "no-kld") tc.weights.kld = 0.0;
    if (variant == "nll-x10") tc.weights.nll = 10.0;
    const auto t0 = Clock::now();
    if (variant == "student") {
      DistillConfig dc;
      dc.train = tc;
      dc.max_value = train.max_value;
      a.log = distill(dc, vae(seed), a.circuit, a.decoder);
    } else {
      a.log = train_apc(tc, a.circuit, a.decoder, train);
    }
    std::fprintf(stderr, "  [%s] trained %s in %.0f s\n", name.c_str(), key.c_str(), secs_since(t0));
    return apcs.emplace(key, std::move(a)).first->second;
  }

  nn::VAE& vae(std::uint64_t seed) {
    auto it = vaes.find(seed);
    if (it != vaes.end()) return it->second;
    Rng rng(seed);
    nn::VAEConfig vc;
    vc.data_dim = train.dim();
    vc.embedding_dim = 8;
    vc.encoder_hidden = {64, 64};
    vc.decoder = decoder_cfg(train.dim());
    nn::VAE v(vc, rng);
    const auto t0 = Clock::now();
    train_vae(train_cfg(seed), v, train);
    std::fprintf(stderr, "  [%s] trained vae/%llu in %.0f s\n", name.c_str(), (unsigned long long)seed, secs_since(t0));
    return vaes.emplace(seed, std::move(v)).first->second;
  }

  eval::Model model(const std::string& variant, std::uint64_t seed) {
    if (variant == "vae") return eval::vae_model(vae(seed), double(train.max_value));
    const Apc& a = apc(variant, seed);
    return eval::apc_model(a.circuit, a.decoder);
  }

  // MSE over the full MCAR grid, one corruption draw per level.
  const eval::SweepResult& mcar_mse(const std::string& variant, std::uint64_t seed) {
    const std::string key = "mse:" + variant + "/" + std::to_string(seed);
    auto it = sweeps.find(key);
    if (it != sweeps.end()) return it->second;
    eval::SweepConfig sc;
    sc.seeds = 1;
    sc.seed = seed;
    return sweeps.emplace(key, eval::robustness_sweep(model(variant, seed), train, test, sc)).first->second;
  }

  double accuracy_at(const std::string& variant, std::uint64_t seed, double level) {
    eval::SweepConfig sc;
    sc.seeds = 1;
    sc.seed = seed;
    sc.levels = {level};
    sc.metrics = {"accuracy"};
    sc.probe.seed = seed;
    return eval::robustness_sweep(model(variant, seed), train, test, sc).mean("accuracy")[0];
  }
};

const std::size_t kSeeds = 5;

Zoo synthetic_zoo() {
  const fs::path dir = fs::path(APC_SOURCE_DIR) / "data";
  Zoo z;
  z.name = "synthetic";
  z.train = io::load_debd(dir / "synthetic_train.data");
  z.train.labels = io::load_labels(dir / "synthetic_train.labels");
  z.test = io::load_debd(dir / "synthetic_test.data");
  z.test.labels = io::load_labels(dir / "synthetic_test.labels");
  for (Dataset* d : {&z.train, &z.test}) d->height = d->width = 8;
  z.build = [](Rng& rng) { return build_convpc(convpc_cfg(), rng); };
  return z;
}

// nltcs from APC_NLTCS_DIR (nltcs.train.data / nltcs.test.data) or data/.
std::optional<Zoo> nltcs_zoo() {
  std::vector<fs::path> dirs;
  if (const char* e = std::getenv("APC_NLTCS_DIR")) dirs.emplace_back(e);
  dirs.push_back(fs::path(APC_SOURCE_DIR) / "data");
  for (const auto& d : dirs) {
    if (!fs::exists(d / "nltcs.train.data") || !fs::exists(d / "nltcs.test.data")) continue;
    Zoo z;
    z.name = "nltcs";
    z.train = io::load_debd(d / "nltcs.train.data");
    z.test = io::load_debd(d / "nltcs.test.data");
    const std::size_t nv = z.train.dim();
    z.build = [nv](Rng& rng) {
      TabularBuilderConfig tb;
      tb.num_data_vars = nv;
      tb.embedding_dim = 8;
      tb.depth = 3;
      tb.channels = 8;
      return build_tabular(tb, rng);
    };
    return z;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// 5. Desk-scale training

Verdict end_to_end(Zoo& zoo) {
  const Apc& a = zoo.apc("full", 0);
  bool finite = a.log.steps.size() == 2000;
  for (const auto& m : a.log.steps) finite = finite && std::isfinite(m.rec) && std::isfinite(m.kld) && std::isfinite(m.nll);
  double tail = 0;
  for (std::size_t i = a.log.steps.size() - 100; i < a.log.steps.size(); ++i) tail += a.log.steps[i].rec / 100.0;
  double best = 1e9;
  for (const auto& m : a.log.steps) best = std::min(best, m.rec);

  Rng rng(0);
  Circuit c = zoo.build(rng);
  nn::Decoder d(decoder_cfg(zoo.train.dim()), rng);
  const TrainLog again = train_apc(train_cfg(0), c, d, zoo.train);
  bool same = again.steps.size() == a.log.steps.size();
  for (std::size_t i = 0; same && i < again.steps.size(); ++i) {
    const auto &p = a.log.steps[i], &q = again.steps[i];
    same = std::memcmp(&p.rec, &q.rec, sizeof(double)) == 0 && std::memcmp(&p.kld, &q.kld, sizeof(double)) == 0 &&
           std::memcmp(&p.nll, &q.nll, sizeof(double)) == 0 && std::memcmp(&p.total, &q.total, sizeof(double)) == 0;
  }
  Verdict v;
  v.pass = finite && tail < 0.05 && same;
  v.detail = fmt("ConvPC z=8, 2000 steps: L_REC mean of last 100 steps %.4f (lowest batch %.4f), all components finite: %s, "
                 "re-run bitwise identical: %s",
                 tail, best, finite ? "yes" : "no", same ? "yes" : "no");
  return v;
}

// ---------------------------------------------------------------------------
// 6. Robustness: APC vs zero-imputing VAE

struct HalfResult {
  bool pass = false;
  std::string detail;
};

HalfResult robustness_half(Zoo& zoo, bool with_accuracy) {
  std::size_t auc_wins = 0, acc_wins = 0;
  std::vector<double> auc_apc, auc_vae, acc_apc, acc_vae;
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    auc_apc.push_back(zoo.mcar_mse("full", s).area("mse"));
    auc_vae.push_back(zoo.mcar_mse("vae", s).area("mse"));
    auc_wins += auc_apc.back() < auc_vae.back();
    if (with_accuracy) {
      acc_apc.push_back(zoo.accuracy_at("full", s, 0.8));
      acc_vae.push_back(zoo.accuracy_at("vae", s, 0.8));
      acc_wins += acc_apc.back() > acc_vae.back();
    }
  }
  HalfResult h;
  h.pass = auc_wins >= 4 && (!with_accuracy || acc_wins >= 4);
  h.detail = fmt("%s: MSE AUC APC %.4f vs VAE %.4f (APC lower %zu/5)", zoo.name.c_str(), mean_of(auc_apc),
                 mean_of(auc_vae), auc_wins);
  if (with_accuracy)
    h.detail += fmt(", probe accuracy at 80%% MCAR APC %.3f vs VAE %.3f (APC higher %zu/5)", mean_of(acc_apc),
                    mean_of(acc_vae), acc_wins);
  else
    h.detail += ", no labels so no probe";
  return h;
}

Verdict robustness(Zoo& syn) {
  const HalfResult a = robustness_half(syn, true);
  Verdict v;
  auto nl = nltcs_zoo();
  if (nl) {
    const HalfResult b = robustness_half(*nl, nl->train.has_labels() && nl->test.has_labels());
    v.pass = a.pass && b.pass;
    v.detail = a.detail + "; " + b.detail;
  } else {
    v.pass = false;
    v.detail = a.detail + (a.pass ? " [synthetic half passes]" : " [synthetic half fails]") +
               "; nltcs: NOT RUN, files not available offline (set APC_NLTCS_DIR to a directory with "
               "nltcs.train.data and nltcs.test.data)";
  }
  return v;
}

// ---------------------------------------------------------------------------
// 7. Ablations

Verdict ablations(Zoo& zoo) {
  std::vector<double> full0, det0, full_avg, nokld_avg;
  std::size_t det_wins = 0, kld_wins = 0;
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    full0.push_back(zoo.mcar_mse("full", s).mean("mse")[0]);
    det0.push_back(zoo.mcar_mse("detach", s).mean("mse")[0]);
    full_avg.push_back(zoo.mcar_mse("full", s).average("mse"));
    nokld_avg.push_back(zoo.mcar_mse("no-kld", s).average("mse"));
    det_wins += det0.back() > 2 * full0.back();
    kld_wins += nokld_avg.back() > full_avg.back();
  }
  const double ratio = mean_of(det0) / mean_of(full0);
  Verdict v;
  v.pass = ratio > 2.0 && mean_of(nokld_avg) > mean_of(full_avg);
  v.detail = fmt("detached decoder path: full-evidence MSE %.4f vs %.4f, %.2fx (> 2x in %zu/5 seeds); "
                 "without L_KLD: MCAR-average MSE %.4f vs %.4f with it (worse in %zu/5 seeds); means over 5 seeds",
                 mean_of(det0), mean_of(full0), ratio, det_wins, mean_of(nokld_avg), mean_of(full_avg), kld_wins);
  return v;
}

// ---------------------------------------------------------------------------
// 8. Distillation from a VAE teacher

Verdict distillation(Zoo& zoo) {
  std::size_t ok = 0;
  std::vector<double> mses, auc_s, auc_t;
  for (std::uint64_t s = 0; s < kSeeds; ++s) {
    const nn::VAE& teacher = zoo.vae(s);
    const Apc& st = zoo.apc("student", s);
    // held-out teacher outputs: fresh prior draws decoded by the teacher
    Rng rng(9000 + s);
    const Array zp = sample_joint(st.circuit, rng, 500).z;
    const Array xt = teacher.decode(Var::constant(zp)).value();
    const Array zs = encode(st.circuit, data_evidence(st.circuit, discretize(xt, zoo.train.max_value)), rng).z.value();
    mses.push_back(eval::mse(st.decoder(Var::constant(zs)).value(), xt));
    auc_s.push_back(zoo.mcar_mse("student", s).area("mse"));
    auc_t.push_back(zoo.mcar_mse("vae", s).area("mse"));
    ok += mses.back() < 0.05 && auc_s.back() < auc_t.back();
  }
  Verdict v;
  v.pass = ok >= 4;
  v.detail = fmt("student MSE vs held-out teacher outputs %.4f (max %.4f); MCAR MSE AUC student %.4f vs teacher %.4f; "
                 "both conditions hold in %zu/5 seeds",
                 mean_of(mses), *std::max_element(mses.begin(), mses.end()), mean_of(auc_s), mean_of(auc_t), ok);
  return v;
}

// ---------------------------------------------------------------------------
// 9. OOD separation with log p(z)

Verdict ood(Zoo& zoo) {
  const Apc& a = zoo.apc("full", 0);
  const Dataset other = io::synthetic_clusters(500, 3000, 1);
  const Dataset held = io::synthetic_clusters(500, 4000, 0);
  Rng rng(0);
  const double out_auc = eval::ood_histogram(a.circuit, zoo.test.x, other.x, rng).auroc;
  const double in_auc = eval::ood_histogram(a.circuit, zoo.test.x, held.x, rng).auroc;
  Verdict v;
  v.pass = out_auc > 0.9 && std::abs(in_auc - 0.5) <= 0.05;
  v.detail = fmt("sampled embeddings, default objective: AUROC vs second family %.3f (need > 0.9), vs held-out "
                 "in-distribution %.3f (need 0.5 +- 0.05)",
                 out_auc, in_auc);
  // what the score does under other choices
  Rng r2(0);
  auto scores = [&](const Circuit& c, const Dataset& d, bool mpe) { return eval::embedding_scores(c, d.x, r2, mpe); };
  note(fmt("MPE embeddings, same model: AUROC vs second family %.3f",
           eval::auroc(scores(a.circuit, zoo.test, true), scores(a.circuit, other, true))));
  const Apc& b = zoo.apc("nll-x10", 0);
  note(fmt("lambda_NLL = 10 model: AUROC vs second family %.3f, vs held-out in-distribution %.3f",
           eval::auroc(scores(b.circuit, zoo.test, false), scores(b.circuit, other, false)),
           eval::auroc(scores(b.circuit, zoo.test, false), scores(b.circuit, held, false))));
  note(fmt("exact log p(x) on the same model: AUROC vs second family %.3f", [&] {
    auto lp = [&](const Dataset& d) {
      const Array v = log_marginal(a.circuit, data_evidence(a.circuit, d.x)).value();
      return std::vector<double>(v.vec().begin(), v.vec().end());
    };
    return eval::auroc(lp(zoo.test), lp(other));
  }()));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  std::string report_path = "acceptance_report.json";
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',')->check(CLI::Range(1, 9));
  app.add_option("--report", report_path, "JSON report path")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  const std::set<int> want = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8, 9} : std::set<int>(only.begin(), only.end());

  const auto t0 = Clock::now();
  std::size_t passed = 0;
  try {
    Zoo syn = synthetic_zoo();
    const std::vector<std::tuple<int, const char*, std::function<Verdict()>>> checks = {
        {1, "SIMPLE benchmark", simple_benchmark},
        {2, "inference oracle equivalence", inference_oracles},
        {3, "gradient correctness", gradients},
        {4, "closed-form KLD", closed_form_kld},
        {5, "end-to-end desk-scale training", [&] { return end_to_end(syn); }},
        {6, "robustness trend vs VAE", [&] { return robustness(syn); }},
        {7, "ablation direction", [&] { return ablations(syn); }},
        {8, "distillation", [&] { return distillation(syn); }},
        {9, "OOD separation", [&] { return ood(syn); }},
    };
    for (const auto& [id, name, fn] : checks) {
      if (!want.count(id)) continue;
      const Verdict v = fn();
      passed += v.pass;
      report(id, name, v);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "acceptance run aborted: %s\n", e.what());
    return 2;
  }
  std::printf("%zu/%zu criteria passed in %.0f s\n", passed, want.size(), secs_since(t0));
  g_report["passed"] = passed;
  g_report["run"] = want.size();
  io::write_file_atomic(report_path, g_report.dump(2) + "\n");
  return 0;
}
