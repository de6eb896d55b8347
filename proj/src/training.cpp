#include "apc/training.hpp"

#include <cmath>

namespace apc {

namespace {

constexpr double kWarmupFraction = 0.02;

ag::Array gather_rows(const ag::Array& x, const std::vector<std::size_t>& idx) {
  const std::size_t D = x.dim(1);
  ag::Array out(ag::Shape{idx.size(), D});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(x.data() + idx[i] * D, D, out.data() + i * D);
  return out;
}

ag::Array scaled(ag::Array a, double s) {
  for (auto& v : a.vec()) v *= s;
  return a;
}

bool all_finite(const StepMetrics& m) {
  return std::isfinite(m.rec) && std::isfinite(m.kld) && std::isfinite(m.nll) && std::isfinite(m.total);
}

void check_finite(const StepMetrics& m, const char* who) {
  if (!all_finite(m))
    throw NumericalError(std::string(who) + ": non-finite loss at step " + std::to_string(m.step), to_json(m));
}

std::vector<ParamGroup> model_groups(const TrainConfig& cfg, const Circuit& c, const nn::Decoder& d) {
  return {{c.parameters(), cfg.lr_circuit, 0.0}, {d.parameters(), cfg.lr_neural, cfg.weight_decay_neural}};
}

// A NaN embedding would otherwise surface as a decoder DomainError.
void check_embedding(const ag::Var& z, std::size_t step, const char* who) {
  for (double v : z.value().vec())
    if (!std::isfinite(v))
      throw NumericalError(std::string(who) + ": non-finite embedding at step " + std::to_string(step),
                           {{"step", step}, {"where", "embedding"}});
}

void emit(const TrainConfig& cfg, const MetricsSink& sink, const StepMetrics& m) {
  if (!sink) return;
  if ((cfg.log_every && m.step % cfg.log_every == 0) || m.step + 1 == cfg.iterations) sink(m);
}

// Adds the weighted components; a zero weight leaves its term out of the graph.
ag::Var combine(const LossWeights& w, const ag::Var& rec, const ag::Var& kld, const ag::Var& nll, StepMetrics& m) {
  m.rec = rec.defined() ? rec.item() : 0.0;
  m.kld = kld.defined() ? kld.item() : 0.0;
  m.nll = nll.defined() ? nll.item() : 0.0;
  ag::Var total = ag::Var::scalar(0.0);
  if (w.rec != 0.0) total = total + rec * w.rec;
  if (w.kld != 0.0) total = total + kld * w.kld;
  if (w.nll != 0.0) total = total + nll * w.nll;
  m.total = total.item();
  return total;
}

}  // namespace

double lr_factor(std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return 1.0;
  const double T = double(total_steps);
  const double warm = std::max(1.0, std::round(kWarmupFraction * T));
  const double t = double(step);
  if (t < warm) return std::exp(std::log(100.0) * (t / warm - 1.0));
  if (t >= 0.9 * T) return 0.01;
  if (t >= 0.66 * T) return 0.1;
  return 1.0;
}

AdamW::AdamW(std::vector<ParamGroup> groups, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& g : groups_)
    for (const auto& p : g.params) {
      m_.emplace_back(p.size(), 0.0);
      v_.emplace_back(p.size(), 0.0);
    }
}

void AdamW::step(double lr_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, double(t_));
  const double bc2 = 1.0 - std::pow(beta2_, double(t_));
  std::size_t k = 0;
  for (auto& g : groups_) {
    const double lr = g.lr * lr_scale;
    for (auto& p : g.params) {
      auto& m = m_[k];
      auto& v = v_[k];
      ++k;
      const ag::Array& grad = p.grad();
      ag::Array& w = p.mutable_value();
      for (std::size_t i = 0; i < w.size(); ++i) {
        const double gi = grad[i];
        m[i] = beta1_ * m[i] + (1 - beta1_) * gi;
        v[i] = beta2_ * v[i] + (1 - beta2_) * gi * gi;
        if (lr == 0.0) continue;
        const double upd = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + eps_) + g.weight_decay * w[i];
        w[i] -= lr * upd;
      }
    }
  }
}

void AdamW::zero_grad() {
  for (auto& g : groups_) ag::zero_grad(g.params);
}

ag::Var loss_rec(const ag::Var& x_hat, const ag::Array& x, const std::vector<std::uint8_t>& mask) {
  if (x_hat.shape() != x.shape())
    throw ShapeError("loss_rec: shape " + ag::shape_str(x_hat.shape()) + " vs " + ag::shape_str(x.shape()));
  auto sq = ag::square(x_hat - ag::Var::constant(x));
  if (mask.empty()) return ag::mean_all(sq);
  if (mask.size() != x.size()) throw ShapeError("loss_rec: mask size mismatch");
  ag::Array m(x.shape());
  std::size_t n = 0;
  for (std::size_t i = 0; i < mask.size(); ++i) n += (m[i] = mask[i] ? 1.0 : 0.0) != 0.0;
  if (n == 0) return ag::Var::scalar(0.0);
  return ag::sum_all(sq * ag::Var::constant(std::move(m))) * (1.0 / double(n));
}

ag::Var loss_kld(const SampleTrace& trace) {
  if (trace.batch == 0) return ag::Var::scalar(0.0);
  return ag::sum_all(nn::kld_standard_normal(trace.mean, trace.log_std)) * (1.0 / double(trace.batch));
}

ag::Var loss_nll(const Circuit& c, const Evidence& e, const ag::Var& z) {
  return ag::sum_all(log_marginal(c, e, z)) * (-1.0 / double(e.batch()));
}

nlohmann::json to_json(const StepMetrics& m) {
  return {{"step", m.step}, {"lr", m.lr_scale}, {"rec", m.rec}, {"kld", m.kld}, {"nll", m.nll}, {"total", m.total}};
}

nlohmann::json to_json(const TrainConfig& cfg) {
  return {{"iterations", cfg.iterations},
          {"batch_size", cfg.batch_size},
          {"lr_circuit", cfg.lr_circuit},
          {"lr_neural", cfg.lr_neural},
          {"weight_decay_neural", cfg.weight_decay_neural},
          {"seed", cfg.seed},
          {"lambda_rec", cfg.weights.rec},
          {"lambda_kld", cfg.weights.kld},
          {"lambda_nll", cfg.weights.nll},
          {"log_every", cfg.log_every},
          {"detach_embedding", cfg.detach_embedding}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.iterations = j.value("iterations", c.iterations);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr_circuit = j.value("lr_circuit", c.lr_circuit);
  c.lr_neural = j.value("lr_neural", c.lr_neural);
  c.weight_decay_neural = j.value("weight_decay_neural", c.weight_decay_neural);
  c.seed = j.value("seed", c.seed);
  c.weights.rec = j.value("lambda_rec", c.weights.rec);
  c.weights.kld = j.value("lambda_kld", c.weights.kld);
  c.weights.nll = j.value("lambda_nll", c.weights.nll);
  c.log_every = j.value("log_every", c.log_every);
  c.detach_embedding = j.value("detach_embedding", c.detach_embedding);
  if (c.batch_size < 1) throw FormatError("train.batch_size must be >= 1");
  if (c.weights.rec < 0 || c.weights.kld < 0 || c.weights.nll < 0) throw FormatError("loss weights must be >= 0");
  return c;
}

Evidence data_evidence(const Circuit& c, const ag::Array& x, const std::vector<std::uint8_t>& mask) {
  if (x.rank() != 2 || x.dim(1) != c.num_data())
    throw ShapeError("data batch must be [B, " + std::to_string(c.num_data()) + "], got " + ag::shape_str(x.shape()));
  if (!mask.empty() && mask.size() != x.size()) throw ShapeError("mask size mismatch");
  const std::size_t B = x.dim(0), D = x.dim(1);
  Evidence e(B, c.num_vars());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t j = 0; j < D; ++j)
      if (mask.empty() || mask[b * D + j]) e.observe(b, j, x[b * D + j]);
  return e;
}

ag::Array discretize(const ag::Array& x01, int max_value) {
  ag::Array out = x01;
  for (auto& v : out.vec()) v = std::round(std::clamp(v, 0.0, 1.0) * max_value);
  return out;
}

TrainLog train_apc(const TrainConfig& cfg, Circuit& circuit, nn::Decoder& decoder, const Dataset& data,
                   const MetricsSink& sink) {
  if (data.size() == 0) throw ShapeError("train_apc: empty dataset");
  if (decoder.config().embedding_dim != circuit.num_embedding())
    throw ShapeError("train_apc: decoder embedding_dim differs from the circuit's");
  Rng rng(cfg.seed);
  AdamW opt(model_groups(cfg, circuit, decoder));
  TrainLog log;
  const double inv_max = 1.0 / double(data.max_value);
  for (std::size_t step = 0; step < cfg.iterations; ++step) {
    const auto idx = sample_batch(data.size(), cfg.batch_size, rng);
    const ag::Array xb = gather_rows(data.x, idx);
    const Evidence e = data_evidence(circuit, xb);
    Encoding enc = encode(circuit, e, rng);
    check_embedding(enc.z, step, "train_apc");
    ag::Var rec, kld, nll;
    if (cfg.weights.rec != 0.0) {
      const ag::Var z_dec = cfg.detach_embedding ? ag::detach(enc.z) : enc.z;
      rec = loss_rec(decoder(z_dec), scaled(xb, inv_max));
    }
    if (cfg.weights.kld != 0.0) kld = loss_kld(enc.trace);
    if (cfg.weights.nll != 0.0) nll = loss_nll(circuit, e, enc.z);
    StepMetrics m;
    m.step = step;
    m.lr_scale = lr_factor(step, cfg.iterations);
    ag::Var total = combine(cfg.weights, rec, kld, nll, m);
    check_finite(m, "train_apc");
    opt.zero_grad();
    if (total.requires_grad()) ag::backward(total);
    opt.step(m.lr_scale);
    circuit.clamp_log_std();
    log.steps.push_back(m);
    emit(cfg, sink, m);
  }
  return log;
}

TrainLog train_vae(const TrainConfig& cfg, nn::VAE& vae, const Dataset& data, const MetricsSink& sink) {
  if (data.size() == 0) throw ShapeError("train_vae: empty dataset");
  Rng rng(cfg.seed);
  AdamW opt({{vae.parameters(), cfg.lr_neural, cfg.weight_decay_neural}});
  TrainLog log;
  const double inv_max = 1.0 / double(data.max_value);
  for (std::size_t step = 0; step < cfg.iterations; ++step) {
    const auto idx = sample_batch(data.size(), cfg.batch_size, rng);
    const ag::Array xb = scaled(gather_rows(data.x, idx), inv_max);
    auto out = vae.forward(xb, rng);
    const ag::Var rec = loss_rec(out.x_hat, xb);
    // KLD per embedding dim, on the same per-dimension scale as the MSE
    const ag::Var kld = ag::mean_all(nn::kld_standard_normal(out.mean, out.log_std));
    StepMetrics m;
    m.step = step;
    m.lr_scale = lr_factor(step, cfg.iterations);
    LossWeights w = cfg.weights;
    w.nll = 0.0;
    ag::Var total = combine(w, rec, kld, {}, m);
    check_finite(m, "train_vae");
    opt.zero_grad();
    if (total.requires_grad()) ag::backward(total);
    opt.step(m.lr_scale);
    log.steps.push_back(m);
    emit(cfg, sink, m);
  }
  return log;
}

TrainLog distill(const DistillConfig& dcfg, const nn::VAE& teacher, Circuit& circuit, nn::Decoder& decoder,
                 const MetricsSink& sink) {
  const TrainConfig& cfg = dcfg.train;
  if (teacher.config().embedding_dim != circuit.num_embedding())
    throw ShapeError("distill: teacher and student embedding dims differ");
  if (teacher.config().data_dim != circuit.num_data()) throw ShapeError("distill: teacher and student data dims differ");
  Rng rng(cfg.seed);
  AdamW opt(model_groups(cfg, circuit, decoder));
  TrainLog log;
  for (std::size_t step = 0; step < cfg.iterations; ++step) {
    // Embeddings from the student prior, data from the teacher decoder.
    const ag::Array z_prior = sample_joint(circuit, rng, cfg.batch_size).z;
    const ag::Array x_teacher = teacher.decode(ag::Var::constant(z_prior)).value();
    bool finite = true;
    for (double v : x_teacher.vec()) finite = finite && std::isfinite(v);
    if (!finite) {
      ++log.skipped_batches;
      continue;
    }
    const ag::Array z_teacher = teacher.embed(x_teacher);
    const Evidence e = data_evidence(circuit, discretize(x_teacher, dcfg.max_value));
    Encoding enc = encode(circuit, e, rng);
    check_embedding(enc.z, step, "distill");
    ag::Var rec, kld, nll;
    if (cfg.weights.rec != 0.0) rec = loss_rec(decoder(enc.z), x_teacher);
    if (cfg.weights.kld != 0.0) kld = loss_kld(enc.trace);
    if (cfg.weights.nll != 0.0) nll = loss_nll(circuit, e, ag::Var::constant(z_teacher));
    StepMetrics m;
    m.step = step;
    m.lr_scale = lr_factor(step, cfg.iterations);
    ag::Var total = combine(cfg.weights, rec, kld, nll, m);
    check_finite(m, "distill");
    opt.zero_grad();
    if (total.requires_grad()) ag::backward(total);
    opt.step(m.lr_scale);
    circuit.clamp_log_std();
    log.steps.push_back(m);
    emit(cfg, sink, m);
  }
  return log;
}

}  // namespace apc
