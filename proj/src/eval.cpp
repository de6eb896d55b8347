#include "apc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "apc/error.hpp"
#include "apc/io.hpp"
#include "apc/training.hpp"

namespace apc::eval {

namespace {

constexpr std::size_t kChunk = 512;

ag::Array rows_of(const ag::Array& x, std::size_t begin, std::size_t end) {
  const std::size_t D = x.dim(1);
  ag::Array out(ag::Shape{end - begin, D});
  std::copy(x.data() + begin * D, x.data() + end * D, out.data());
  return out;
}

void put_rows(ag::Array& dst, std::size_t begin, const ag::Array& src) {
  std::copy(src.data(), src.data() + src.size(), dst.data() + begin * dst.dim(1));
}

std::vector<std::uint8_t> mask_rows(const std::vector<std::uint8_t>& m, std::size_t D, std::size_t begin, std::size_t end) {
  if (m.empty()) return {};
  return {m.begin() + std::ptrdiff_t(begin * D), m.begin() + std::ptrdiff_t(end * D)};
}

ag::Array scaled(ag::Array a, double s) {
  for (auto& v : a.vec()) v *= s;
  return a;
}

// Rows or columns selected so that k of n lines are evenly spread.
std::vector<std::uint8_t> spread_lines(std::size_t n, double fraction) {
  std::vector<std::uint8_t> hit(n, 0);
  const std::size_t k = std::size_t(std::lround(std::clamp(fraction, 0.0, 1.0) * double(n)));
  for (std::size_t i = 0; i < k; ++i) hit[std::size_t((double(i) + 0.5) * double(n) / double(k))] = 1;
  return hit;
}

// true where the pixel is hidden
std::vector<std::uint8_t> mar_pixels(MarPattern p, double s, std::size_t H, std::size_t W) {
  std::vector<std::uint8_t> hide(H * W, 0);
  s = std::clamp(s, 0.0, 1.0);
  auto set = [&](std::size_t r, std::size_t c) { hide[r * W + c] = 1; };
  const auto kw = std::size_t(std::lround(s * double(W)));
  const auto kh = std::size_t(std::lround(s * double(H)));
  switch (p) {
    case MarPattern::LeftBand:
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < kw; ++c) set(r, c);
      break;
    case MarPattern::RightBand:
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = W - kw; c < W; ++c) set(r, c);
      break;
    case MarPattern::TopBand:
      for (std::size_t r = 0; r < kh; ++r)
        for (std::size_t c = 0; c < W; ++c) set(r, c);
      break;
    case MarPattern::BottomBand:
      for (std::size_t r = H - kh; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c) set(r, c);
      break;
    case MarPattern::CenterSquare: {
      // side scales with sqrt(s) so the area grows linearly
      const auto sh = std::size_t(std::lround(std::sqrt(s) * double(H)));
      const auto sw = std::size_t(std::lround(std::sqrt(s) * double(W)));
      const std::size_t r0 = (H - sh) / 2, c0 = (W - sw) / 2;
      for (std::size_t r = r0; r < r0 + sh; ++r)
        for (std::size_t c = c0; c < c0 + sw; ++c) set(r, c);
      break;
    }
    case MarPattern::BorderFrame: {
      const auto ih = std::size_t(std::lround(std::sqrt(1.0 - s) * double(H)));
      const auto iw = std::size_t(std::lround(std::sqrt(1.0 - s) * double(W)));
      const std::size_t r0 = (H - ih) / 2, c0 = (W - iw) / 2;
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c)
          if (r < r0 || r >= r0 + ih || c < c0 || c >= c0 + iw) set(r, c);
      break;
    }
    case MarPattern::HorizontalBands: {
      const auto rows = spread_lines(H, s);
      for (std::size_t r = 0; r < H; ++r)
        if (rows[r])
          for (std::size_t c = 0; c < W; ++c) set(r, c);
      break;
    }
    case MarPattern::VerticalBands: {
      const auto cols = spread_lines(W, s);
      for (std::size_t r = 0; r < H; ++r)
        for (std::size_t c = 0; c < W; ++c)
          if (cols[c]) set(r, c);
      break;
    }
  }
  return hide;
}

}  // namespace

// ---------------------------------------------------------------------------
// corruption

std::string to_string(MarPattern p) {
  switch (p) {
    case MarPattern::LeftBand: return "left-band";
    case MarPattern::RightBand: return "right-band";
    case MarPattern::TopBand: return "top-band";
    case MarPattern::BottomBand: return "bottom-band";
    case MarPattern::CenterSquare: return "center-square";
    case MarPattern::BorderFrame: return "border-frame";
    case MarPattern::HorizontalBands: return "horizontal-bands";
    case MarPattern::VerticalBands: return "vertical-bands";
  }
  return "?";
}

const std::vector<MarPattern>& all_mar_patterns() {
  static const std::vector<MarPattern> all = {MarPattern::LeftBand,     MarPattern::RightBand,   MarPattern::TopBand,
                                              MarPattern::BottomBand,   MarPattern::CenterSquare, MarPattern::BorderFrame,
                                              MarPattern::HorizontalBands, MarPattern::VerticalBands};
  return all;
}

MarPattern mar_pattern_from_string(const std::string& s) {
  for (auto p : all_mar_patterns())
    if (to_string(p) == s) return p;
  throw FormatError("unknown MAR pattern '" + s + "'");
}

CorruptionSpec CorruptionSpec::mcar(double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p <= 1.0)) throw DomainError("MCAR fraction must lie in [0, 1]");
  CorruptionSpec s;
  s.kind = Kind::MCAR;
  s.p = p;
  s.seed = seed;
  return s;
}

CorruptionSpec CorruptionSpec::mar(MarPattern pattern, double severity) {
  if (!(severity >= 0.0 && severity <= 1.0)) throw DomainError("MAR severity must lie in [0, 1]");
  CorruptionSpec s;
  s.kind = Kind::MAR;
  s.pattern = pattern;
  s.severity = severity;
  return s;
}

CorruptionSpec CorruptionSpec::parse(const std::string& text) {
  auto number = [&](const std::string& tok) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(tok, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != tok.size() || tok.empty()) throw FormatError("bad number '" + tok + "' in corruption '" + text + "'");
    return v;
  };
  if (text.rfind("mcar:", 0) == 0) return mcar(number(text.substr(5)));
  if (text.rfind("mar:", 0) == 0) {
    const std::string rest = text.substr(4);
    const auto colon = rest.find(':');
    if (colon == std::string::npos) throw FormatError("expected mar:<pattern>:<severity>, got '" + text + "'");
    return mar(mar_pattern_from_string(rest.substr(0, colon)), number(rest.substr(colon + 1)));
  }
  throw FormatError("expected mcar:<p> or mar:<pattern>:<severity>, got '" + text + "'");
}

std::string CorruptionSpec::str() const {
  std::ostringstream ss;
  if (kind == Kind::MCAR)
    ss << "mcar:" << p;
  else
    ss << "mar:" << to_string(pattern) << ":" << severity;
  return ss.str();
}

std::vector<std::uint8_t> corruption_mask(const CorruptionSpec& spec, std::size_t n, std::size_t dim,
                                          const ImageShape& shape) {
  std::vector<std::uint8_t> mask(n * dim, 1);
  if (spec.kind == CorruptionSpec::Kind::MCAR) {
    Rng rng(spec.seed);
    std::bernoulli_distribution drop(spec.p);
    for (auto& m : mask) m = drop(rng) ? 0 : 1;
    return mask;
  }
  const std::size_t H = shape.height, W = shape.width, C = std::max<std::size_t>(1, shape.channels);
  if (H == 0 || W == 0 || H * W * C != dim)
    throw ShapeError("MAR corruption needs an image shape matching the " + std::to_string(dim) + " data dims");
  const auto hide = mar_pixels(spec.pattern, spec.severity, H, W);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t px = 0; px < H * W; ++px)
      if (hide[px])
        for (std::size_t ch = 0; ch < C; ++ch) mask[i * dim + px * C + ch] = 0;
  return mask;
}

Evidence corrupt(const Circuit& c, const ag::Array& x, const CorruptionSpec& spec, const ImageShape& shape) {
  return data_evidence(c, x, corruption_mask(spec, x.dim(0), x.dim(1), shape));
}

ag::Array zero_impute(const ag::Array& x, const std::vector<std::uint8_t>& mask) {
  if (mask.empty()) return x;
  if (mask.size() != x.size()) throw ShapeError("zero_impute: mask size mismatch");
  ag::Array out = x;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (!mask[i]) out[i] = 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// metrics

double mse(const ag::Array& x_hat, const ag::Array& x) {
  if (x_hat.shape() != x.shape()) throw ShapeError("mse: shape mismatch");
  if (x.size() == 0) throw ShapeError("mse: empty input");
  double s = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x_hat[i] - x[i];
    s += d * d;
  }
  return s / double(x.size());
}

double ssim(const ag::Array& x_hat, const ag::Array& x, const ImageShape& shape) {
  constexpr int kWin = 11;
  constexpr double kSigma = 1.5, C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  if (x_hat.shape() != x.shape() || x.rank() != 2) throw ShapeError("ssim: shape mismatch");
  const std::size_t H = shape.height, W = shape.width, C = std::max<std::size_t>(1, shape.channels);
  if (H * W * C != x.dim(1)) throw ShapeError("ssim: image shape does not match the data");
  if (H < std::size_t(kWin) || W < std::size_t(kWin))
    throw ShapeError("ssim: images smaller than the 11x11 window (" + std::to_string(H) + "x" + std::to_string(W) + ")");
  double g[kWin], gs = 0;
  for (int i = 0; i < kWin; ++i) gs += g[i] = std::exp(-0.5 * (i - 5) * (i - 5) / (kSigma * kSigma));
  for (auto& v : g) v /= gs;

  const std::size_t OH = H - kWin + 1, OW = W - kWin + 1;
  double total = 0;
  std::vector<double> a(H * W), b(H * W);
  for (std::size_t n = 0; n < x.dim(0); ++n) {
    for (std::size_t ch = 0; ch < C; ++ch) {
      for (std::size_t px = 0; px < H * W; ++px) {
        a[px] = x_hat.at(n, px * C + ch);
        b[px] = x.at(n, px * C + ch);
      }
      double acc = 0;
      for (std::size_t r = 0; r < OH; ++r)
        for (std::size_t c = 0; c < OW; ++c) {
          double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
          for (int i = 0; i < kWin; ++i)
            for (int j = 0; j < kWin; ++j) {
              const double w = g[i] * g[j];
              const double va = a[(r + i) * W + c + j], vb = b[(r + i) * W + c + j];
              ma += w * va;
              mb += w * vb;
              saa += w * va * va;
              sbb += w * vb * vb;
              sab += w * va * vb;
            }
          const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
          acc += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        }
      total += acc / double(OH * OW);
    }
  }
  return total / double(x.dim(0) * C);
}

// ---------------------------------------------------------------------------
// probe

double downstream_probe(const ag::Array& train_emb, const std::vector<int>& train_labels, const ag::Array& test_emb,
                        const std::vector<int>& test_labels, const ProbeConfig& cfg) {
  if (train_emb.rank() != 2 || test_emb.rank() != 2 || train_emb.dim(1) != test_emb.dim(1))
    throw ShapeError("probe: embeddings must be [n, d] with matching d");
  if (train_labels.size() != train_emb.dim(0) || test_labels.size() != test_emb.dim(0))
    throw ShapeError("probe: one label per embedding row expected");
  if (train_labels.empty() || test_labels.empty()) throw ShapeError("probe: empty split");
  const int K = std::max(*std::max_element(train_labels.begin(), train_labels.end()),
                         *std::max_element(test_labels.begin(), test_labels.end())) + 1;
  if (std::any_of(train_labels.begin(), train_labels.end(), [](int l) { return l < 0; }))
    throw DomainError("probe: negative label");
  if (std::all_of(train_labels.begin(), train_labels.end(), [&](int l) { return l == train_labels[0]; }))
    throw DomainError("probe: training labels contain a single class");

  const std::size_t N = train_emb.dim(0), d = train_emb.dim(1);
  // standardize with training statistics
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < d; ++j) mu[j] += train_emb.at(i, j) / double(N);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < d; ++j) sd[j] += std::pow(train_emb.at(i, j) - mu[j], 2) / double(N);
  for (auto& s : sd) s = s > 1e-24 ? std::sqrt(s) : 1.0;
  auto feature = [&](const ag::Array& e, std::size_t i, std::size_t j) { return (e.at(i, j) - mu[j]) / sd[j]; };

  std::vector<double> Wt(d * K, 0.0), bias(K, 0.0), gW(d * K), gb(K), logits(K);
  Rng rng(cfg.seed);
  for (std::size_t step = 0; step < cfg.iterations; ++step) {
    const auto idx = sample_batch(N, cfg.batch, rng);
    std::fill(gW.begin(), gW.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (auto i : idx) {
      double m = -INFINITY;
      for (int k = 0; k < K; ++k) {
        double s = bias[k];
        for (std::size_t j = 0; j < d; ++j) s += Wt[j * K + k] * feature(train_emb, i, j);
        m = std::max(m, logits[k] = s);
      }
      double z = 0;
      for (int k = 0; k < K; ++k) z += logits[k] = std::exp(logits[k] - m);
      for (int k = 0; k < K; ++k) {
        const double r = logits[k] / z - (k == train_labels[i] ? 1.0 : 0.0);
        gb[k] += r;
        for (std::size_t j = 0; j < d; ++j) gW[j * K + k] += r * feature(train_emb, i, j);
      }
    }
    const double lr = cfg.lr * lr_factor(step, cfg.iterations) / double(idx.size());
    for (std::size_t q = 0; q < Wt.size(); ++q) Wt[q] -= lr * gW[q];
    for (int k = 0; k < K; ++k) bias[k] -= lr * gb[k];
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < test_emb.dim(0); ++i) {
    int best = 0;
    double bv = -INFINITY;
    for (int k = 0; k < K; ++k) {
      double s = bias[k];
      for (std::size_t j = 0; j < d; ++j) s += Wt[j * K + k] * feature(test_emb, i, j);
      if (s > bv) bv = s, best = k;
    }
    correct += best == test_labels[i];
  }
  return double(correct) / double(test_emb.dim(0));
}

// ---------------------------------------------------------------------------
// models

Model apc_model(const Circuit& c, const nn::Decoder& decoder, bool use_mpe) {
  Model m;
  m.name = use_mpe ? "apc-mpe" : "apc";
  m.embed = [c, use_mpe](const ag::Array& x, const std::vector<std::uint8_t>& mask, Rng& rng) {
    const std::size_t N = x.dim(0), D = x.dim(1);
    ag::Array z(ag::Shape{N, c.num_embedding()});
    for (std::size_t b = 0; b < N; b += kChunk) {
      const std::size_t e = std::min(N, b + kChunk);
      const Evidence ev = data_evidence(c, rows_of(x, b, e), mask_rows(mask, D, b, e));
      put_rows(z, b, use_mpe ? mpe_encode(c, ev) : encode(c, ev, rng).z.value());
    }
    return z;
  };
  m.decode = [decoder](const ag::Array& z) { return decoder(ag::Var::constant(z)).value(); };
  return m;
}

Model vae_model(const nn::VAE& vae, double max_value) {
  Model m;
  m.name = "vae";
  m.embed = [vae, max_value](const ag::Array& x, const std::vector<std::uint8_t>& mask, Rng& rng) {
    return vae.embed(scaled(x, 1.0 / max_value), false, &rng, mask);
  };
  m.decode = [vae](const ag::Array& z) { return vae.decode(ag::Var::constant(z)).value(); };
  return m;
}

// ---------------------------------------------------------------------------
// sweeps

std::vector<double> default_levels() {
  std::vector<double> l;
  for (int i = 0; i < 20; ++i) l.push_back(0.05 * i);
  return l;
}

std::size_t SweepResult::metric_index(const std::string& metric) const {
  auto it = std::find(metrics.begin(), metrics.end(), metric);
  if (it == metrics.end()) throw DomainError("sweep has no metric '" + metric + "'");
  return std::size_t(it - metrics.begin());
}

std::vector<double> SweepResult::mean(const std::string& metric) const {
  std::vector<double> out;
  for (const auto& cell : values[metric_index(metric)])
    out.push_back(std::accumulate(cell.begin(), cell.end(), 0.0) / double(cell.size()));
  return out;
}

std::vector<double> SweepResult::stddev(const std::string& metric) const {
  std::vector<double> out;
  for (const auto& cell : values[metric_index(metric)]) {
    const double m = std::accumulate(cell.begin(), cell.end(), 0.0) / double(cell.size());
    double s = 0;
    for (double v : cell) s += (v - m) * (v - m);
    out.push_back(cell.size() > 1 ? std::sqrt(s / double(cell.size() - 1)) : 0.0);
  }
  return out;
}

double SweepResult::average(const std::string& metric) const {
  const auto m = mean(metric);
  return std::accumulate(m.begin(), m.end(), 0.0) / double(m.size());
}

namespace {
double trapezoid(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() < 2) return y.empty() ? 0.0 : y[0];
  double a = 0;
  for (std::size_t i = 1; i < x.size(); ++i) a += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  return a;
}
}  // namespace

double SweepResult::area(const std::string& metric) const { return trapezoid(levels, mean(metric)); }

double SweepResult::area(const std::string& metric, std::size_t seed) const {
  std::vector<double> y;
  for (const auto& cell : values[metric_index(metric)]) y.push_back(cell.at(seed));
  return trapezoid(levels, y);
}

SweepResult robustness_sweep(const Model& model, const Dataset& train, const Dataset& test, const SweepConfig& cfg) {
  SweepResult r;
  r.model = model.name;
  r.levels = cfg.levels.empty() ? default_levels() : cfg.levels;
  r.metrics = cfg.metrics;
  if (cfg.seeds == 0) throw DomainError("sweep needs at least one seed");
  for (const auto& m : r.metrics)
    if (m != "mse" && m != "ssim" && m != "accuracy") throw FormatError("unknown metric '" + m + "'");
  const bool want_acc = std::find(r.metrics.begin(), r.metrics.end(), "accuracy") != r.metrics.end();
  if (want_acc && (!train.has_labels() || !test.has_labels())) throw DomainError("accuracy metric needs labelled splits");
  const ImageShape shape{test.height, test.width, test.channels};
  const ag::Array truth = test.normalized();
  r.values.assign(r.metrics.size(), std::vector<std::vector<double>>(r.levels.size()));

  for (std::size_t li = 0; li < r.levels.size(); ++li) {
    for (std::size_t s = 0; s < cfg.seeds; ++s) {
      const std::uint64_t seed = cfg.seed * 1000003u + li * 101u + s;
      const CorruptionSpec spec =
          cfg.mar ? CorruptionSpec::mar(cfg.pattern, r.levels[li]) : CorruptionSpec::mcar(r.levels[li], seed);
      Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
      const auto mask = corruption_mask(spec, test.size(), test.dim(), shape);
      const ag::Array z = model.embed(test.x, mask, rng);
      const ag::Array x_hat = model.decode(z);
      ag::Array z_train;
      for (std::size_t mi = 0; mi < r.metrics.size(); ++mi) {
        const auto& name = r.metrics[mi];
        double v = 0;
        if (name == "mse") {
          v = mse(x_hat, truth);
        } else if (name == "ssim") {
          v = ssim(x_hat, truth, shape);
        } else {
          // probe trained on equally corrupted training embeddings
          CorruptionSpec tspec = spec;
          tspec.seed = seed + 7919;
          const auto tmask = corruption_mask(tspec, train.size(), train.dim(), shape);
          z_train = model.embed(train.x, tmask, rng);
          ProbeConfig pc = cfg.probe;
          pc.seed = seed;
          v = downstream_probe(z_train, train.labels, z, test.labels, pc);
        }
        r.values[mi][li].push_back(v);
      }
    }
  }
  return r;
}

std::string to_table(const SweepResult& r) {
  std::ostringstream ss;
  ss << "level";
  for (const auto& m : r.metrics) ss << '\t' << m << "_mean\t" << m << "_std";
  ss << '\n';
  std::vector<std::vector<double>> means, sds;
  for (const auto& m : r.metrics) {
    means.push_back(r.mean(m));
    sds.push_back(r.stddev(m));
  }
  ss.setf(std::ios::fixed);
  for (std::size_t li = 0; li < r.levels.size(); ++li) {
    ss.precision(2);
    ss << r.levels[li];
    ss.precision(6);
    for (std::size_t mi = 0; mi < r.metrics.size(); ++mi) ss << '\t' << means[mi][li] << '\t' << sds[mi][li];
    ss << '\n';
  }
  return ss.str();
}

nlohmann::json to_json(const SweepResult& r) {
  nlohmann::json j = {{"model", r.model}, {"levels", r.levels}};
  for (const auto& m : r.metrics)
    j["metrics"][m] = {{"mean", r.mean(m)}, {"std", r.stddev(m)}, {"average", r.average(m)}, {"area", r.area(m)},
                       {"values", r.values[r.metric_index(m)]}};
  return j;
}

void write_svg_plot(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                    const std::string& y_label, const std::filesystem::path& path) {
  constexpr double Wd = 640, Ht = 420, L = 70, R = 150, T = 40, Bm = 50;
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw ShapeError("svg: series '" + s.name + "' has mismatched x/y");
    for (double v : s.x) x0 = std::min(x0, v), x1 = std::max(x1, v);
    for (double v : s.y)
      if (std::isfinite(v)) y0 = std::min(y0, v), y1 = std::max(y1, v);
  }
  if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return L + (x - x0) / (x1 - x0) * (Wd - L - R); };
  auto py = [&](double y) { return Ht - Bm - (y - y0) / (y1 - y0) * (Ht - T - Bm); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << Wd << "\" height=\"" << Ht << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << Wd / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << title << "</text>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << Ht - Bm << "\" x2=\"" << Wd - R << "\" y2=\"" << Ht - Bm << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << Ht - Bm << "\" stroke=\"black\"/>\n";
  for (int t = 0; t <= 4; ++t) {
    const double xv = x0 + (x1 - x0) * t / 4, yv = y0 + (y1 - y0) * t / 4;
    o << "<text x=\"" << px(xv) << "\" y=\"" << Ht - Bm + 16 << "\" text-anchor=\"middle\">" << xv << "</text>\n";
    o << "<text x=\"" << L - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << yv << "</text>\n";
  }
  o << "<text x=\"" << (L + Wd - R) / 2 << "\" y=\"" << Ht - 12 << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
  o << "<text x=\"16\" y=\"" << (T + Ht - Bm) / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
    << (T + Ht - Bm) / 2 << ")\">" << y_label << "</text>\n";
  for (std::size_t i = 0; i < series.size(); ++i) {
    const auto& s = series[i];
    const char* col = colors[i % 6];
    o << "<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
    for (std::size_t k = 0; k < s.x.size(); ++k)
      if (std::isfinite(s.y[k])) o << px(s.x[k]) << ',' << py(s.y[k]) << ' ';
    o << "\"/>\n";
    o << "<text x=\"" << Wd - R + 10 << "\" y=\"" << T + 16 * (i + 1) << "\" fill=\"" << col << "\">" << s.name << "</text>\n";
  }
  o << "</svg>\n";
  io::write_file_atomic(path, o.str());
}

// ---------------------------------------------------------------------------
// OOD

Histogram histogram(const std::vector<double>& values, std::size_t bins, double lo, double hi) {
  if (bins == 0) throw DomainError("histogram needs at least one bin");
  if (!(hi > lo)) hi = lo + 1.0;
  Histogram h{lo, hi, std::vector<std::size_t>(bins, 0)};
  for (double v : values) {
    if (!std::isfinite(v)) continue;
    auto k = std::ptrdiff_t(std::floor((v - lo) / (hi - lo) * double(bins)));
    h.counts[std::size_t(std::clamp<std::ptrdiff_t>(k, 0, std::ptrdiff_t(bins) - 1))]++;
  }
  return h;
}

double auroc(const std::vector<double>& positive, const std::vector<double>& negative) {
  if (positive.empty() || negative.empty()) throw DomainError("auroc needs both classes");
  // rank-sum with midranks for ties
  std::vector<std::pair<double, int>> all;
  for (double v : positive) all.emplace_back(v, 1);
  for (double v : negative) all.emplace_back(v, 0);
  std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  double rank_sum = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    while (j < all.size() && all[j].first == all[i].first) ++j;
    const double mid = 0.5 * double(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (all[k].second) rank_sum += mid;
    i = j;
  }
  const double P = double(positive.size()), N = double(negative.size());
  return (rank_sum - P * (P + 1) / 2) / (P * N);
}

std::vector<double> embedding_scores(const Circuit& c, const ag::Array& x, Rng& rng, bool use_mpe) {
  std::vector<double> out;
  out.reserve(x.dim(0));
  for (std::size_t b = 0; b < x.dim(0); b += kChunk) {
    const std::size_t e = std::min(x.dim(0), b + kChunk);
    const Evidence ev = data_evidence(c, rows_of(x, b, e));
    const ag::Array z = use_mpe ? mpe_encode(c, ev) : encode(c, ev, rng).z.value();
    for (double s : log_embedding_marginal(c, z)) out.push_back(s);
  }
  return out;
}

OodResult ood_histogram(const Circuit& c, const ag::Array& in_x, const ag::Array& out_x, Rng& rng, std::size_t bins) {
  OodResult r;
  r.in_scores = embedding_scores(c, in_x, rng);
  r.out_scores = embedding_scores(c, out_x, rng);
  double lo = INFINITY, hi = -INFINITY;
  for (const auto* v : {&r.in_scores, &r.out_scores})
    for (double s : *v)
      if (std::isfinite(s)) lo = std::min(lo, s), hi = std::max(hi, s);
  if (!std::isfinite(lo)) lo = 0, hi = 1;
  r.in_hist = histogram(r.in_scores, bins, lo, hi);
  r.out_hist = histogram(r.out_scores, bins, lo, hi);
  r.auroc = auroc(r.in_scores, r.out_scores);
  return r;
}

nlohmann::json to_json(const OodResult& r) {
  auto hist = [](const Histogram& h) { return nlohmann::json{{"lo", h.lo}, {"hi", h.hi}, {"counts", h.counts}}; };
  return {{"auroc", r.auroc}, {"in", hist(r.in_hist)}, {"out", hist(r.out_hist)},
          {"in_scores", r.in_scores}, {"out_scores", r.out_scores}};
}

}  // namespace apc::eval
