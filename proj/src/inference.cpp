#include "apc/inference.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <numbers>

namespace apc {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();
constexpr double kHalfLog2Pi = 0.91893853320467274178;  // 0.5 * ln(2 pi)
constexpr double kGumbelEps = 1e-12;

std::atomic<std::uint64_t> g_degenerate{0};
std::atomic<std::uint64_t> g_pass_id{0};

double softplus(double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }
double log_sigmoid(double l) { return -softplus(-l); }
double sigmoid(double l) { return l >= 0 ? 1.0 / (1.0 + std::exp(-l)) : std::exp(l) / (1.0 + std::exp(l)); }

double log_binom_coeff(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

// Normalized log weights of every sum unit, flattened by edge offset.
std::vector<double> log_weights(const Circuit& c) {
  std::vector<double> lw(c.num_sum_edges());
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Unit& u = c.unit(i);
    if (u.kind != UnitKind::Sum) continue;
    const auto& raw = u.params.value();
    const std::size_t o = c.edge_offset(i), k = u.children.size();
    double m = kNegInf;
    for (std::size_t j = 0; j < k; ++j) m = std::max(m, raw[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(raw[j] - m);
    const double lse = m + std::log(s);
    for (std::size_t j = 0; j < k; ++j) lw[o + j] = raw[j] - lse;
  }
  return lw;
}

// Where an input unit reads its value from.
struct LeafInput {
  const Evidence* e = nullptr;
  const ag::Array* z = nullptr;  // [B, |Z|] overrides embedding evidence when set
  bool ignore_embedding = false;

  bool observed(const Circuit& c, std::size_t var, std::size_t b) const {
    if (var >= c.num_data()) {
      if (z) return true;
      if (ignore_embedding) return false;
    }
    return e->observed(b, var);
  }
  double value(const Circuit& c, std::size_t var, std::size_t b) const {
    if (var >= c.num_data() && z) return (*z)[b * c.num_embedding() + (var - c.num_data())];
    return e->value(b, var);
  }
};

double density(const Unit& u, double x) {
  const auto& p = u.params.value();
  switch (u.family) {
    case LeafFamily::Bernoulli: return x > 0.5 ? log_sigmoid(p[0]) : log_sigmoid(-p[0]);
    case LeafFamily::Binomial: {
      const int k = static_cast<int>(std::lround(x));
      return log_binom_coeff(u.trials, k) + k * log_sigmoid(p[0]) + (u.trials - k) * log_sigmoid(-p[0]);
    }
    case LeafFamily::Gaussian: {
      const double t = (x - p[0]) * std::exp(-p[1]);
      return -0.5 * t * t - p[1] - kHalfLog2Pi;
    }
  }
  return 0.0;
}

// Log-values of every unit for every batch row, unit-major.
std::vector<double> forward_pass(const Circuit& c, const LeafInput& in, const std::vector<double>& lw,
                                 std::size_t B) {
  const std::size_t U = c.size();
  std::vector<double> v(U * B, 0.0);
  std::vector<double> m(B), s(B);
  for (std::size_t i = 0; i < U; ++i) {
    const Unit& u = c.unit(i);
    double* out = v.data() + i * B;
    switch (u.kind) {
      case UnitKind::Input:
        for (std::size_t b = 0; b < B; ++b)
          out[b] = in.observed(c, u.var, b) ? density(u, in.value(c, u.var, b)) : 0.0;
        break;
      case UnitKind::Product:
        for (auto ch : u.children) {
          const double* cv = v.data() + ch * B;
          for (std::size_t b = 0; b < B; ++b) out[b] += cv[b];
        }
        break;
      case UnitKind::Sum: {
        const std::size_t o = c.edge_offset(i);
        std::fill(m.begin(), m.end(), kNegInf);
        for (std::size_t k = 0; k < u.children.size(); ++k) {
          const double w = lw[o + k];
          const double* cv = v.data() + u.children[k] * B;
          for (std::size_t b = 0; b < B; ++b) m[b] = std::max(m[b], w + cv[b]);
        }
        std::fill(s.begin(), s.end(), 0.0);
        for (std::size_t k = 0; k < u.children.size(); ++k) {
          const double w = lw[o + k];
          const double* cv = v.data() + u.children[k] * B;
          for (std::size_t b = 0; b < B; ++b)
            if (m[b] != kNegInf) s[b] += std::exp(w + cv[b] - m[b]);
        }
        for (std::size_t b = 0; b < B; ++b) out[b] = m[b] == kNegInf ? kNegInf : m[b] + std::log(s[b]);
        break;
      }
    }
  }
  return v;
}

// Per-unit parameter gradient buffers (only units with parameters).
struct ParamGrads {
  std::vector<ag::Array> g;
  explicit ParamGrads(const Circuit& c) : g(c.size()) {
    for (std::size_t i = 0; i < c.size(); ++i)
      if (c.unit(i).params.defined()) g[i] = ag::Array(c.unit(i).params.shape());
  }
};

// Reverse pass through the forward computation, starting from seeded
// adjoints `dv` of unit log-values. Accumulates into `dlogw` (per edge),
// parameter gradients of input units, and `dz` for observed embeddings.
void backward_pass(const Circuit& c, const LeafInput& in, const std::vector<double>& lw, const std::vector<double>& v,
                   std::size_t B, std::vector<double>& dv, std::vector<double>& dlogw, ParamGrads& pg,
                   ag::Array* dz) {
  const std::size_t U = c.size();
  for (std::size_t ii = U; ii-- > 0;) {
    const Unit& u = c.unit(ii);
    const double* d = dv.data() + ii * B;
    bool any = false;
    for (std::size_t b = 0; b < B && !any; ++b) any = d[b] != 0.0;
    if (!any) continue;
    const double* vi = v.data() + ii * B;
    switch (u.kind) {
      case UnitKind::Product:
        for (auto ch : u.children) {
          double* dc = dv.data() + ch * B;
          for (std::size_t b = 0; b < B; ++b) dc[b] += d[b];
        }
        break;
      case UnitKind::Sum: {
        const std::size_t o = c.edge_offset(ii);
        for (std::size_t k = 0; k < u.children.size(); ++k) {
          const double w = lw[o + k];
          const double* cv = v.data() + u.children[k] * B;
          double* dc = dv.data() + u.children[k] * B;
          double acc = 0.0;
          for (std::size_t b = 0; b < B; ++b) {
            if (d[b] == 0.0 || vi[b] == kNegInf) continue;
            const double post = std::exp(w + cv[b] - vi[b]);
            const double t = d[b] * post;
            dc[b] += t;
            acc += t;
          }
          dlogw[o + k] += acc;
        }
        break;
      }
      case UnitKind::Input: {
        const auto& p = u.params.value();
        ag::Array& g = pg.g[ii];
        for (std::size_t b = 0; b < B; ++b) {
          if (d[b] == 0.0 || !in.observed(c, u.var, b)) continue;
          const double x = in.value(c, u.var, b);
          switch (u.family) {
            case LeafFamily::Bernoulli: g[0] += d[b] * ((x > 0.5 ? 1.0 : 0.0) - sigmoid(p[0])); break;
            case LeafFamily::Binomial: g[0] += d[b] * (std::round(x) - u.trials * sigmoid(p[0])); break;
            case LeafFamily::Gaussian: {
              const double inv_var = std::exp(-2.0 * p[1]);
              const double diff = x - p[0];
              g[0] += d[b] * diff * inv_var;
              g[1] += d[b] * (diff * diff * inv_var - 1.0);
              if (dz && u.var >= c.num_data() && in.z) {
                (*dz)[b * c.num_embedding() + (u.var - c.num_data())] -= d[b] * diff * inv_var;
              }
              break;
            }
          }
        }
        break;
      }
    }
  }
}

// Moves per-edge log-weight adjoints onto raw weights (log-softmax backward)
// and flushes all gradients into the circuit's parameter nodes.
void flush_grads(const Circuit& c, const std::vector<double>& lw, const std::vector<double>& dlogw, ParamGrads& pg) {
  for (std::size_t i = 0; i < c.size(); ++i) {
    const Unit& u = c.unit(i);
    if (!u.params.defined() || !u.params.requires_grad()) continue;
    if (u.kind == UnitKind::Sum) {
      const std::size_t o = c.edge_offset(i), k = u.children.size();
      double tot = 0.0;
      for (std::size_t j = 0; j < k; ++j) tot += dlogw[o + j];
      for (std::size_t j = 0; j < k; ++j) pg.g[i][j] = dlogw[o + j] - std::exp(lw[o + j]) * tot;
    }
    ag::accumulate(u.params, pg.g[i]);
  }
}

std::vector<ag::Var> param_parents(const Circuit& c) { return c.parameters(); }

}  // namespace

// ---------------------------------------------------------------------------

Evidence::Evidence(std::size_t batch, std::size_t num_vars)
    : batch_(batch), num_vars_(num_vars), values_(batch * num_vars, 0.0), mask_(batch * num_vars, 0) {}

void Evidence::observe(std::size_t b, std::size_t var, double value) {
  values_[b * num_vars_ + var] = value;
  mask_[b * num_vars_ + var] = 1;
}

void Evidence::set_missing(std::size_t b, std::size_t var) {
  values_[b * num_vars_ + var] = 0.0;
  mask_[b * num_vars_ + var] = 0;
}

std::size_t Evidence::observed_count() const {
  return static_cast<std::size_t>(std::count(mask_.begin(), mask_.end(), std::uint8_t{1}));
}

Evidence Evidence::from_data(const ag::Array& data, std::size_t num_vars) {
  if (data.rank() != 2 || data.dim(1) > num_vars) throw ShapeError("evidence data must be [batch, num_data]");
  Evidence e(data.dim(0), num_vars);
  for (std::size_t b = 0; b < data.dim(0); ++b)
    for (std::size_t j = 0; j < data.dim(1); ++j) e.observe(b, j, data.at(b, j));
  return e;
}

void check_support(const Circuit& c, const Evidence& e) {
  if (e.num_vars() != c.num_vars()) {
    throw ShapeError("evidence covers " + std::to_string(e.num_vars()) + " variables, circuit has " +
                     std::to_string(c.num_vars()));
  }
  // One representative leaf per variable is enough: the family is fixed per variable.
  std::vector<const Unit*> leaf_of(c.num_vars(), nullptr);
  for (const auto& u : c.units())
    if (u.kind == UnitKind::Input && !leaf_of[u.var]) leaf_of[u.var] = &u;
  for (std::size_t b = 0; b < e.batch(); ++b) {
    for (std::size_t v = 0; v < c.num_vars(); ++v) {
      if (!e.observed(b, v) || !leaf_of[v]) continue;
      const double x = e.value(b, v);
      bool ok = std::isfinite(x);
      switch (leaf_of[v]->family) {
        case LeafFamily::Bernoulli: ok = ok && (x == 0.0 || x == 1.0); break;
        case LeafFamily::Binomial: ok = ok && x >= 0 && x <= leaf_of[v]->trials && x == std::round(x); break;
        case LeafFamily::Gaussian: break;
      }
      if (!ok) {
        throw DomainError("observed value " + std::to_string(x) + " for variable " + std::to_string(v) + " (row " +
                          std::to_string(b) + ") is outside the " + to_string(leaf_of[v]->family) + " support");
      }
    }
  }
}

double leaf_log_density(const Unit& u, double x) { return density(u, x); }

ag::Var log_marginal(const Circuit& c, const Evidence& e, const ag::Var& embedding, ForwardCache* cache) {
  check_support(c, e);
  const std::size_t B = e.batch();
  if (embedding.defined()) {
    const auto& zs = embedding.shape();
    if (zs.size() != 2 || zs[0] != B || zs[1] != c.num_embedding())
      throw ShapeError("embedding must be [batch, |Z|], got " + ag::shape_str(zs));
    for (double x : embedding.value().vec())
      if (!std::isfinite(x)) throw DomainError("non-finite embedding value");
  }
  auto lw = log_weights(c);
  LeafInput in{&e, embedding.defined() ? &embedding.value() : nullptr, false};
  auto v = forward_pass(c, in, lw, B);

  ag::Array out(ag::Shape{B});
  const std::size_t r = c.root();
  for (std::size_t b = 0; b < B; ++b) out[b] = v[r * B + b];
  if (cache) {
    cache->batch = B;
    cache->pass_id = ++g_pass_id;
    cache->log_values = v;
  }

  auto parents = param_parents(c);
  if (embedding.defined()) parents.push_back(embedding);
  const Circuit* cp = &c;
  return ag::make_node(
      std::move(out), std::move(parents),
      [cp, e, embedding, lw = std::move(lw), v = std::move(v), B](const ag::Array& g, const ag::Array&) {
        const Circuit& c = *cp;
        LeafInput in{&e, embedding.defined() ? &embedding.value() : nullptr, false};
        std::vector<double> dv(c.size() * B, 0.0);
        const std::size_t r = c.root();
        for (std::size_t b = 0; b < B; ++b) dv[r * B + b] = g[b];
        std::vector<double> dlogw(c.num_sum_edges(), 0.0);
        ParamGrads pg(c);
        ag::Array dz;
        if (embedding.requires_grad()) dz = ag::Array(embedding.shape());
        backward_pass(c, in, lw, v, B, dv, dlogw, pg, embedding.requires_grad() ? &dz : nullptr);
        flush_grads(c, lw, dlogw, pg);
        if (embedding.requires_grad()) ag::accumulate(embedding, dz);
      });
}

std::uint64_t degenerate_evidence_count() { return g_degenerate.load(); }
void reset_degenerate_evidence_count() { g_degenerate = 0; }

std::vector<double> condition_log_weights(std::span<const double> log_theta, std::span<const double> log_gamma) {
  if (log_theta.size() != log_gamma.size() || log_theta.empty())
    throw ShapeError("condition_weights: theta and gamma must have equal, non-zero length");
  std::vector<double> y(log_theta.size());
  double m = kNegInf;
  for (std::size_t i = 0; i < y.size(); ++i) m = std::max(m, y[i] = log_theta[i] + log_gamma[i]);
  if (m == kNegInf) {
    ++g_degenerate;
    y.assign(log_theta.begin(), log_theta.end());
    m = *std::max_element(y.begin(), y.end());
  }
  double s = 0.0;
  for (double t : y) s += std::exp(t - m);
  const double lse = m + std::log(s);
  for (double& t : y) t -= lse;
  return y;
}

std::vector<double> condition_weights(std::span<const double> theta, std::span<const double> gamma) {
  std::vector<double> lt(theta.size()), lg(gamma.size());
  for (std::size_t i = 0; i < theta.size(); ++i) lt[i] = theta[i] > 0 ? std::log(theta[i]) : kNegInf;
  for (std::size_t i = 0; i < gamma.size(); ++i) {
    if (gamma[i] < 0) throw DomainError("condition_weights: negative likelihood");
    lg[i] = gamma[i] > 0 ? std::log(gamma[i]) : kNegInf;
  }
  auto out = condition_log_weights(lt, lg);
  for (double& x : out) x = std::exp(x);
  return out;
}

double gumbel(Rng& rng) {
  std::uniform_real_distribution<double> unif(kGumbelEps, 1.0 - kGumbelEps);
  return -std::log(-std::log(unif(rng)));
}

namespace {

// Index of max(log_p[k] + Gumbel noise); entries at -inf are never chosen.
std::size_t gumbel_argmax(const double* log_p, std::size_t n, Rng& rng) {
  std::size_t best = n;
  double best_val = kNegInf;
  for (std::size_t k = 0; k < n; ++k) {
    const double g = gumbel(rng);
    if (log_p[k] == kNegInf) continue;
    const double val = log_p[k] + g;
    if (best == n || val > best_val) {
      best = k;
      best_val = val;
    }
  }
  return best;
}

}  // namespace

ag::Var simple_sample(const ag::Var& theta, Rng& rng) {
  const auto& tv = theta.value();
  if (tv.rank() != 1 && tv.rank() != 2) throw ShapeError("simple_sample expects [D] or [B, D]");
  const std::size_t D = tv.shape().back();
  const std::size_t rows = tv.rank() == 1 ? 1 : tv.dim(0);
  if (D == 0) throw ShapeError("simple_sample on empty distribution");
  ag::Array s(tv.shape(), 0.0);
  std::vector<double> lp(D);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < D; ++k) {
      const double p = tv[r * D + k];
      if (p < 0) throw DomainError("simple_sample: negative probability");
      lp[k] = p > 0 ? std::log(p) : kNegInf;
    }
    const std::size_t pick = gumbel_argmax(lp.data(), D, rng);
    if (pick == D) throw DomainError("simple_sample: every probability is zero");
    s[r * D + pick] = 1.0;
  }
  // Value s with the gradient of (s - theta).detach() + theta.
  return ag::make_node(std::move(s), {theta}, [theta](const ag::Array& g, const ag::Array&) { ag::accumulate(theta, g); });
}

// ---------------------------------------------------------------------------

namespace {

// Buffers for the differentiable encode op. Every unit with an embedding
// variable in scope carries, per batch row and per such variable, a triple
// (sampled z, leaf mean, leaf log-std) selected along the sampled tree.
struct EncodeState {
  std::size_t B = 0;
  std::vector<double> lw;
  std::vector<double> v;                 // forward log-values [U, B]
  std::vector<std::size_t> sample_off;   // per unit offset into samples
  std::vector<double> samples;           // [B][|zscope|][3] per unit
  std::vector<double> eps;               // per Gaussian leaf per row
  std::vector<std::size_t> eps_off;
  std::vector<double> q;                 // conditioned weights [edge, B] for Z-bearing sums
  std::vector<std::int32_t> choice;      // [U, B]
  std::vector<std::uint8_t> degenerate;  // [U, B]
  // For product units: for each child, positions of its Z vars in the parent list.
  std::vector<std::vector<std::vector<std::size_t>>> child_pos;
};

std::vector<std::size_t> positions_in(const std::vector<std::size_t>& parent, const std::vector<std::size_t>& child) {
  std::vector<std::size_t> pos;
  pos.reserve(child.size());
  for (auto j : child) pos.push_back(static_cast<std::size_t>(std::lower_bound(parent.begin(), parent.end(), j) - parent.begin()));
  return pos;
}

}  // namespace

Encoding encode(const Circuit& c, const Evidence& e, Rng& rng) {
  check_support(c, e);
  const std::size_t B = e.batch(), U = c.size(), Z = c.num_embedding();
  auto st = std::make_shared<EncodeState>();
  st->B = B;
  st->lw = log_weights(c);
  LeafInput in{&e, nullptr, true};
  st->v = forward_pass(c, in, st->lw, B);

  // Conditioned weights and SIMPLE draws at sum units that can reach Z.
  st->q.assign(c.num_sum_edges() * B, 0.0);
  st->choice.assign(U * B, -1);
  st->degenerate.assign(U * B, 0);
  std::vector<double> y;
  for (std::size_t i = 0; i < U; ++i) {
    const Unit& u = c.unit(i);
    if (u.kind != UnitKind::Sum || c.embedding_scope(i).empty()) continue;
    const std::size_t o = c.edge_offset(i), K = u.children.size();
    y.resize(K);
    for (std::size_t b = 0; b < B; ++b) {
      const double vi = st->v[i * B + b];
      double m = kNegInf;
      for (std::size_t k = 0; k < K; ++k) {
        y[k] = st->lw[o + k] + (vi == kNegInf ? 0.0 : st->v[u.children[k] * B + b]);
        m = std::max(m, y[k]);
      }
      if (vi == kNegInf) {
        st->degenerate[i * B + b] = 1;
        ++g_degenerate;
      }
      double s = 0.0;
      for (std::size_t k = 0; k < K; ++k) s += std::exp(y[k] - m);
      const double lse = m + std::log(s);
      for (std::size_t k = 0; k < K; ++k) {
        y[k] -= lse;
        st->q[(o + k) * B + b] = std::exp(y[k]);
      }
      st->choice[i * B + b] = static_cast<std::int32_t>(gumbel_argmax(y.data(), K, rng));
    }
  }

  // Bottom-up selection of (z, mean, log-std) triples.
  st->sample_off.assign(U + 1, 0);
  for (std::size_t i = 0; i < U; ++i) st->sample_off[i + 1] = st->sample_off[i] + B * c.embedding_scope(i).size() * 3;
  st->samples.assign(st->sample_off[U], 0.0);
  st->eps_off.assign(U, 0);
  st->child_pos.resize(U);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t i = 0; i < U; ++i) {
    const auto& zs = c.embedding_scope(i);
    if (zs.empty()) continue;
    const Unit& u = c.unit(i);
    const std::size_t nz = zs.size();
    double* out = st->samples.data() + st->sample_off[i];
    switch (u.kind) {
      case UnitKind::Input: {
        const auto& p = u.params.value();
        const double sigma = std::exp(p[1]);
        st->eps_off[i] = st->eps.size();
        for (std::size_t b = 0; b < B; ++b) {
          const double eps = normal(rng);
          st->eps.push_back(eps);
          out[b * 3 + 0] = p[0] + sigma * eps;
          out[b * 3 + 1] = p[0];
          out[b * 3 + 2] = p[1];
        }
        break;
      }
      case UnitKind::Product: {
        auto& cp = st->child_pos[i];
        cp.resize(u.children.size());
        for (std::size_t k = 0; k < u.children.size(); ++k) {
          const std::size_t ch = u.children[k];
          const auto& czs = c.embedding_scope(ch);
          if (czs.empty()) continue;
          cp[k] = positions_in(zs, czs);
          const double* src = st->samples.data() + st->sample_off[ch];
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t t = 0; t < czs.size(); ++t)
              for (int f = 0; f < 3; ++f) out[(b * nz + cp[k][t]) * 3 + f] = src[(b * czs.size() + t) * 3 + f];
        }
        break;
      }
      case UnitKind::Sum: {
        for (std::size_t b = 0; b < B; ++b) {
          const std::size_t ch = u.children[static_cast<std::size_t>(st->choice[i * B + b])];
          const double* src = st->samples.data() + st->sample_off[ch] + b * nz * 3;
          std::copy(src, src + nz * 3, out + b * nz * 3);
        }
        break;
      }
    }
  }

  const std::size_t r = c.root();
  if (c.embedding_scope(r).size() != Z) throw StructureError("root scope does not cover every embedding variable");
  ag::Array packed(ag::Shape{B, 3 * Z});
  {
    const double* src = st->samples.data() + st->sample_off[r];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t j = 0; j < Z; ++j)
        for (std::size_t f = 0; f < 3; ++f) packed[b * 3 * Z + f * Z + j] = src[(b * Z + j) * 3 + f];
  }

  // Trace of the sampling-induced tree.
  SampleTrace trace;
  trace.batch = B;
  trace.num_units = U;
  trace.choice.assign(U * B, -1);
  trace.leaf.assign(B * Z, 0);
  {
    std::vector<std::size_t> stack;
    for (std::size_t b = 0; b < B; ++b) {
      stack.assign(1, r);
      while (!stack.empty()) {
        const std::size_t i = stack.back();
        stack.pop_back();
        if (c.embedding_scope(i).empty()) continue;
        const Unit& u = c.unit(i);
        if (u.kind == UnitKind::Input) {
          trace.leaf[b * Z + (u.var - c.num_data())] = i;
        } else if (u.kind == UnitKind::Product) {
          for (auto ch : u.children) stack.push_back(ch);
        } else {
          const auto k = st->choice[i * B + b];
          trace.choice[i * B + b] = k;
          stack.push_back(u.children[static_cast<std::size_t>(k)]);
        }
      }
    }
  }

  const Circuit* cp = &c;
  ag::Var packed_var = ag::make_node(
      std::move(packed), param_parents(c), [cp, st, e](const ag::Array& g, const ag::Array&) {
        const Circuit& c = *cp;
        const std::size_t B = st->B, U = c.size(), Z = c.num_embedding();
        std::vector<double> adj(st->samples.size(), 0.0);
        {
          double* dst = adj.data() + st->sample_off[c.root()];
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t j = 0; j < Z; ++j)
              for (std::size_t f = 0; f < 3; ++f) dst[(b * Z + j) * 3 + f] = g[b * 3 * Z + f * Z + j];
        }
        std::vector<double> dv(U * B, 0.0);
        std::vector<double> dlogw(c.num_sum_edges(), 0.0);
        ParamGrads pg(c);
        std::vector<double> gs;
        for (std::size_t i = U; i-- > 0;) {
          const auto& zs = c.embedding_scope(i);
          if (zs.empty()) continue;
          const std::size_t nz = zs.size();
          const Unit& u = c.unit(i);
          const double* a_all = adj.data() + st->sample_off[i];
          switch (u.kind) {
            case UnitKind::Input: {
              const auto& p = u.params.value();
              const double sigma = std::exp(p[1]);
              ag::Array& pgr = pg.g[i];
              for (std::size_t b = 0; b < B; ++b) {
                const double* a = a_all + b * 3;
                pgr[0] += a[0] + a[1];
                pgr[1] += a[0] * sigma * st->eps[st->eps_off[i] + b] + a[2];
              }
              break;
            }
            case UnitKind::Product: {
              const auto& cpos = st->child_pos[i];
              for (std::size_t k = 0; k < u.children.size(); ++k) {
                const std::size_t ch = u.children[k];
                const std::size_t cnz = c.embedding_scope(ch).size();
                if (cnz == 0) continue;
                double* dst = adj.data() + st->sample_off[ch];
                for (std::size_t b = 0; b < B; ++b)
                  for (std::size_t t = 0; t < cnz; ++t)
                    for (int f = 0; f < 3; ++f) dst[(b * cnz + t) * 3 + f] += a_all[(b * nz + cpos[k][t]) * 3 + f];
              }
              break;
            }
            case UnitKind::Sum: {
              const std::size_t o = c.edge_offset(i), K = u.children.size();
              gs.resize(K);
              for (std::size_t b = 0; b < B; ++b) {
                const double* a = a_all + b * nz * 3;
                bool any = false;
                for (std::size_t t = 0; t < nz * 3 && !any; ++t) any = a[t] != 0.0;
                if (!any) continue;
                const std::size_t chosen = u.children[static_cast<std::size_t>(st->choice[i * B + b])];
                double* dst = adj.data() + st->sample_off[chosen] + b * nz * 3;
                for (std::size_t t = 0; t < nz * 3; ++t) dst[t] += a[t];
                // Straight-through: d loss / d theta'_k = <a, sample of child k>.
                double tot = 0.0;
                for (std::size_t k = 0; k < K; ++k) {
                  const double* sk = st->samples.data() + st->sample_off[u.children[k]] + b * nz * 3;
                  double dot = 0.0;
                  for (std::size_t t = 0; t < nz * 3; ++t) dot += a[t] * sk[t];
                  gs[k] = dot * st->q[(o + k) * B + b];
                  tot += gs[k];
                }
                const bool degen = st->degenerate[i * B + b] != 0;
                for (std::size_t k = 0; k < K; ++k) {
                  const double dy = gs[k] - st->q[(o + k) * B + b] * tot;
                  dlogw[o + k] += dy;
                  if (!degen) dv[u.children[k] * B + b] += dy;
                }
              }
              break;
            }
          }
        }
        LeafInput in{&e, nullptr, true};
        backward_pass(c, in, st->lw, st->v, B, dv, dlogw, pg, nullptr);
        flush_grads(c, st->lw, dlogw, pg);
      });

  Encoding enc;
  enc.z = ag::slice_cols(packed_var, 0, Z);
  trace.mean = ag::slice_cols(packed_var, Z, 2 * Z);
  trace.log_std = ag::slice_cols(packed_var, 2 * Z, 3 * Z);
  trace.z = enc.z.value();
  enc.trace = std::move(trace);
  return enc;
}

// ---------------------------------------------------------------------------

JointSamples sample_joint(const Circuit& c, Rng& rng, std::size_t n) {
  const std::size_t X = c.num_data(), Z = c.num_embedding();
  JointSamples out{ag::Array(ag::Shape{n, X}), ag::Array(ag::Shape{n, Z})};
  std::vector<std::vector<double>> cum(c.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (c.unit(i).kind != UnitKind::Sum) continue;
    auto w = sum_weights(c, i);
    std::partial_sum(w.begin(), w.end(), w.begin());
    cum[i] = std::move(w);
  }
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::size_t> stack;
  for (std::size_t s = 0; s < n; ++s) {
    stack.assign(1, c.root());
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const Unit& u = c.unit(i);
      switch (u.kind) {
        case UnitKind::Product:
          for (auto ch : u.children) stack.push_back(ch);
          break;
        case UnitKind::Sum: {
          const auto& cw = cum[i];
          const double r = unif(rng) * cw.back();
          auto k = static_cast<std::size_t>(std::upper_bound(cw.begin(), cw.end(), r) - cw.begin());
          stack.push_back(u.children[std::min(k, cw.size() - 1)]);
          break;
        }
        case UnitKind::Input: {
          const auto& p = u.params.value();
          double x = 0.0;
          switch (u.family) {
            case LeafFamily::Bernoulli: x = unif(rng) < sigmoid(p[0]) ? 1.0 : 0.0; break;
            case LeafFamily::Binomial: {
              std::binomial_distribution<int> bin(u.trials, sigmoid(p[0]));
              x = bin(rng);
              break;
            }
            case LeafFamily::Gaussian: x = p[0] + std::exp(p[1]) * normal(rng); break;
          }
          if (u.var < X)
            out.x[s * X + u.var] = x;
          else
            out.z[s * Z + (u.var - X)] = x;
          break;
        }
      }
    }
  }
  return out;
}

namespace {

struct LeafMode {
  double value;
  double log_density;
};

LeafMode leaf_mode(const Unit& u) {
  const auto& p = u.params.value();
  switch (u.family) {
    case LeafFamily::Bernoulli: {
      const double l1 = log_sigmoid(p[0]), l0 = log_sigmoid(-p[0]);
      return l1 > l0 ? LeafMode{1.0, l1} : LeafMode{0.0, l0};
    }
    case LeafFamily::Binomial: {
      const double pr = sigmoid(p[0]);
      const auto k_hi = static_cast<int>(std::floor((u.trials + 1) * pr));
      LeafMode best{0.0, kNegInf};
      for (int k = std::max(0, k_hi - 1); k <= std::min(u.trials, k_hi); ++k) {
        const double ld = density(u, k);
        if (ld > best.log_density) best = {static_cast<double>(k), ld};
      }
      return best;
    }
    case LeafFamily::Gaussian: return {p[0], -p[1] - kHalfLog2Pi};
  }
  return {0.0, 0.0};
}

}  // namespace

MpeResult mpe(const Circuit& c, const Evidence& e) {
  check_support(c, e);
  const std::size_t B = e.batch(), U = c.size(), V = c.num_vars();
  const auto lw = log_weights(c);
  std::vector<double> mv(U * B, 0.0);
  std::vector<std::int32_t> arg(U * B, 0);
  for (std::size_t i = 0; i < U; ++i) {
    const Unit& u = c.unit(i);
    double* out = mv.data() + i * B;
    switch (u.kind) {
      case UnitKind::Input: {
        const LeafMode mode = leaf_mode(u);
        for (std::size_t b = 0; b < B; ++b) out[b] = e.observed(b, u.var) ? density(u, e.value(b, u.var)) : mode.log_density;
        break;
      }
      case UnitKind::Product:
        for (auto ch : u.children)
          for (std::size_t b = 0; b < B; ++b) out[b] += mv[ch * B + b];
        break;
      case UnitKind::Sum: {
        const std::size_t o = c.edge_offset(i);
        for (std::size_t b = 0; b < B; ++b) {
          double best = kNegInf;
          std::int32_t bk = 0;
          for (std::size_t k = 0; k < u.children.size(); ++k) {
            const double val = lw[o + k] + mv[u.children[k] * B + b];
            if (val > best) {
              best = val;
              bk = static_cast<std::int32_t>(k);
            }
          }
          out[b] = best;
          arg[i * B + b] = bk;
        }
        break;
      }
    }
  }
  MpeResult res{ag::Array(ag::Shape{B, c.num_embedding()}), ag::Array(ag::Shape{B, V}), std::vector<double>(B)};
  std::vector<std::size_t> stack;
  for (std::size_t b = 0; b < B; ++b) {
    res.log_value[b] = mv[c.root() * B + b];
    stack.assign(1, c.root());
    while (!stack.empty()) {
      const std::size_t i = stack.back();
      stack.pop_back();
      const Unit& u = c.unit(i);
      if (u.kind == UnitKind::Product) {
        for (auto ch : u.children) stack.push_back(ch);
      } else if (u.kind == UnitKind::Sum) {
        stack.push_back(u.children[static_cast<std::size_t>(arg[i * B + b])]);
      } else {
        const double x = e.observed(b, u.var) ? e.value(b, u.var) : leaf_mode(u).value;
        res.state[b * V + u.var] = x;
        if (u.var >= c.num_data()) res.z[b * c.num_embedding() + (u.var - c.num_data())] = x;
      }
    }
  }
  return res;
}

ag::Array mpe_encode(const Circuit& c, const Evidence& e) {
  // Embedding evidence is ignored: Z is the query.
  Evidence data_only = e;
  for (std::size_t b = 0; b < e.batch(); ++b)
    for (std::size_t j = 0; j < c.num_embedding(); ++j) data_only.set_missing(b, c.embedding_var(j));
  return mpe(c, data_only).z;
}

std::vector<double> log_embedding_marginal(const Circuit& c, const ag::Array& z) {
  if (z.rank() != 2 || z.dim(1) != c.num_embedding()) throw ShapeError("embedding batch must be [batch, |Z|]");
  Evidence e(z.dim(0), c.num_vars());
  for (std::size_t b = 0; b < z.dim(0); ++b)
    for (std::size_t j = 0; j < c.num_embedding(); ++j) e.observe(b, c.embedding_var(j), z.at(b, j));
  const auto lp = log_marginal(c, e);
  return lp.value().vec();
}

}  // namespace apc
