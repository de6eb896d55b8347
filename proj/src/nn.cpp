#include "apc/nn.hpp"

#include <cmath>

#include "apc/error.hpp"

namespace apc::nn {

namespace {

ag::Array uniform(ag::Shape shape, double bound, Rng& rng) {
  ag::Array a(std::move(shape));
  std::uniform_real_distribution<double> d(-bound, bound);
  for (auto& v : a.vec()) v = d(rng);
  return a;
}

double kaiming_bound(std::size_t fan_in) {
  const double gain = std::sqrt(2.0 / (1.0 + kLeakySlope * kLeakySlope));
  return gain * std::sqrt(3.0 / double(fan_in));
}

std::size_t log2_exact(std::size_t n) {
  std::size_t k = 0;
  while ((std::size_t{1} << k) < n) ++k;
  return k;
}

void count_into(std::size_t& n, const std::vector<ag::Var>& ps) {
  for (const auto& p : ps) n += p.size();
}

}  // namespace

Linear::Linear(std::size_t in, std::size_t out, Init init, Rng& rng) {
  if (init == Init::Zero) {
    weight = ag::Var::leaf(ag::Array({in, out}), true);
    bias = ag::Var::leaf(ag::Array({out}), true);
  } else {
    weight = ag::Var::leaf(uniform({in, out}, kaiming_bound(in), rng), true);
    bias = ag::Var::leaf(uniform({out}, 1.0 / std::sqrt(double(in)), rng), true);
  }
}

ag::Var Linear::operator()(const ag::Var& x) const { return ag::add_bias(ag::matmul(x, weight), bias); }

DeconvLayer::DeconvLayer(std::size_t in_ch, std::size_t out_ch, Init init, Rng& rng) {
  if (init == Init::Zero) {
    kernel = ag::Var::leaf(ag::Array({in_ch, out_ch, 2, 2}), true);
    bias = ag::Var::leaf(ag::Array({out_ch}), true);
  } else {
    // stride 2 with a 2x2 kernel: each output pixel sees in_ch inputs
    kernel = ag::Var::leaf(uniform({in_ch, out_ch, 2, 2}, kaiming_bound(in_ch), rng), true);
    bias = ag::Var::leaf(uniform({out_ch}, 1.0 / std::sqrt(double(in_ch)), rng), true);
  }
}

ag::Var DeconvLayer::operator()(const ag::Var& x) const {
  return ag::add_channel_bias(ag::conv_transpose2d(x, kernel, 2), bias);
}

nlohmann::json to_json(const DecoderConfig& cfg) {
  return {{"kind", cfg.kind == DecoderConfig::Kind::MLP ? "mlp" : "deconv"},
          {"embedding_dim", cfg.embedding_dim},
          {"output_dim", cfg.output_dim},
          {"hidden", cfg.hidden},
          {"image_size", cfg.image_size},
          {"image_channels", cfg.image_channels},
          {"base_channels", cfg.base_channels}};
}

DecoderConfig decoder_config_from_json(const nlohmann::json& j) {
  DecoderConfig c;
  const std::string kind = j.value("kind", std::string("mlp"));
  if (kind == "mlp")
    c.kind = DecoderConfig::Kind::MLP;
  else if (kind == "deconv")
    c.kind = DecoderConfig::Kind::Deconv;
  else
    throw FormatError("unknown decoder kind '" + kind + "'");
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.output_dim = j.value("output_dim", c.output_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.image_size = j.value("image_size", c.image_size);
  c.image_channels = j.value("image_channels", c.image_channels);
  c.base_channels = j.value("base_channels", c.base_channels);
  return c;
}

Decoder::Decoder(const DecoderConfig& cfg, Rng& rng, Init init) : cfg_(cfg) {
  if (cfg.embedding_dim == 0) throw ShapeError("decoder: embedding_dim must be >= 1");
  if (cfg.kind == DecoderConfig::Kind::MLP) {
    if (cfg.output_dim == 0) throw ShapeError("decoder: output_dim must be >= 1");
    std::size_t in = cfg.embedding_dim;
    for (auto h : cfg.hidden) {
      dense_.emplace_back(in, h, init, rng);
      in = h;
    }
    dense_.emplace_back(in, cfg.output_dim, init, rng);
    return;
  }
  const std::size_t S = cfg.image_size;
  if (S < 4 || (S & (S - 1)) != 0) throw ShapeError("deconv decoder: image_size must be a power of two >= 4");
  if (cfg_.output_dim == 0) cfg_.output_dim = S * S * cfg.image_channels;
  if (cfg_.output_dim != S * S * cfg.image_channels)
    throw ShapeError("deconv decoder: output_dim must equal image_size^2 * image_channels");
  const std::size_t ups = log2_exact(S) - 2;
  if (ups == 0) {
    dense_.emplace_back(cfg.embedding_dim, 16 * cfg.image_channels, init, rng);
    return;
  }
  std::size_t ch = cfg.base_channels;
  dense_.emplace_back(cfg.embedding_dim, 16 * ch, init, rng);
  for (std::size_t u = 0; u < ups; ++u) {
    const std::size_t out = u + 1 == ups ? cfg.image_channels : std::max<std::size_t>(ch / 2, 1);
    deconv_.emplace_back(ch, out, init, rng);
    ch = out;
  }
}

ag::Var Decoder::operator()(const ag::Var& z) const {
  const auto& zv = z.value();
  if (zv.rank() != 2 || zv.dim(1) != cfg_.embedding_dim)
    throw ShapeError("decoder expects [B, " + std::to_string(cfg_.embedding_dim) + "], got " + ag::shape_str(zv.shape()));
  for (double v : zv.vec())
    if (!std::isfinite(v)) throw DomainError("decoder: non-finite embedding");
  const std::size_t B = zv.dim(0);
  if (cfg_.kind == DecoderConfig::Kind::MLP) {
    ag::Var h = z;
    for (std::size_t i = 0; i + 1 < dense_.size(); ++i) h = ag::leaky_relu(dense_[i](h), kLeakySlope);
    return ag::sigmoid(dense_.back()(h));
  }
  ag::Var h = dense_[0](z);
  if (deconv_.empty()) return ag::sigmoid(h);
  h = ag::reshape(ag::relu(h), {B, cfg_.base_channels, 4, 4});
  for (std::size_t i = 0; i < deconv_.size(); ++i) {
    h = deconv_[i](h);
    if (i + 1 < deconv_.size()) h = ag::relu(h);
  }
  return ag::sigmoid(ag::reshape(h, {B, cfg_.output_dim}));
}

std::vector<ag::Var> Decoder::parameters() const {
  std::vector<ag::Var> out;
  for (const auto& l : dense_) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  for (const auto& l : deconv_) {
    out.push_back(l.kernel);
    out.push_back(l.bias);
  }
  return out;
}

std::size_t Decoder::parameter_count() const {
  std::size_t n = 0;
  count_into(n, parameters());
  return n;
}

nlohmann::json to_json(const VAEConfig& cfg) {
  return {{"data_dim", cfg.data_dim},
          {"embedding_dim", cfg.embedding_dim},
          {"encoder_hidden", cfg.encoder_hidden},
          {"decoder", to_json(cfg.decoder)}};
}

VAEConfig vae_config_from_json(const nlohmann::json& j) {
  VAEConfig c;
  c.data_dim = j.value("data_dim", c.data_dim);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.encoder_hidden = j.value("encoder_hidden", c.encoder_hidden);
  if (j.contains("decoder")) c.decoder = decoder_config_from_json(j.at("decoder"));
  return c;
}

VAE::VAE(const VAEConfig& cfg, Rng& rng, Init init) : cfg_(cfg) {
  if (cfg.data_dim == 0 || cfg.embedding_dim == 0) throw ShapeError("vae: data_dim and embedding_dim must be >= 1");
  if (cfg_.decoder.embedding_dim != cfg.embedding_dim) throw ShapeError("vae: decoder embedding_dim mismatch");
  std::size_t in = cfg.data_dim;
  for (auto h : cfg.encoder_hidden) {
    encoder_.emplace_back(in, h, init, rng);
    in = h;
  }
  encoder_.emplace_back(in, 2 * cfg.embedding_dim, init, rng);
  decoder_ = Decoder(cfg.decoder, rng, init);
  if (decoder_.config().output_dim != cfg.data_dim) throw ShapeError("vae: decoder output_dim must equal data_dim");
}

std::pair<ag::Var, ag::Var> VAE::encode(const ag::Array& x, const std::vector<std::uint8_t>& mask) const {
  if (x.rank() != 2 || x.dim(1) != cfg_.data_dim) throw ShapeError("vae encoder expects [B, data_dim]");
  ag::Array in = x;
  if (!mask.empty()) {
    if (mask.size() != x.size()) throw ShapeError("vae: mask size mismatch");
    for (std::size_t i = 0; i < in.size(); ++i)
      if (!mask[i]) in[i] = 0.0;
  }
  ag::Var h = ag::Var::constant(std::move(in));
  for (std::size_t i = 0; i + 1 < encoder_.size(); ++i) h = ag::leaky_relu(encoder_[i](h), kLeakySlope);
  h = encoder_.back()(h);
  const std::size_t Z = cfg_.embedding_dim;
  return {ag::slice_cols(h, 0, Z), ag::slice_cols(h, Z, 2 * Z)};
}

VAEOutput VAE::forward(const ag::Array& x, Rng& rng, const std::vector<std::uint8_t>& mask) const {
  VAEOutput out;
  std::tie(out.mean, out.log_std) = encode(x, mask);
  out.z = reparameterize(out.mean, out.log_std, rng);
  out.x_hat = decoder_(out.z);
  return out;
}

ag::Array VAE::embed(const ag::Array& x, bool mean, Rng* rng, const std::vector<std::uint8_t>& mask) const {
  auto [mu, ls] = encode(x, mask);
  if (mean) return mu.value();
  if (!rng) throw Error("vae: sampling embed needs an rng");
  return reparameterize(mu, ls, *rng).value();
}

std::vector<ag::Var> VAE::parameters() const {
  std::vector<ag::Var> out;
  for (const auto& l : encoder_) {
    out.push_back(l.weight);
    out.push_back(l.bias);
  }
  for (auto& p : decoder_.parameters()) out.push_back(p);
  return out;
}

std::size_t VAE::parameter_count() const {
  std::size_t n = 0;
  count_into(n, parameters());
  return n;
}

ag::Var kld_standard_normal(const ag::Var& mean, const ag::Var& log_std) {
  // 0.5 * (mu^2 + sigma^2 - 1 - 2 log sigma)
  auto var = ag::exp(log_std * 2.0);
  return (ag::square(mean) + var - log_std * 2.0 - 1.0) * 0.5;
}

ag::Var reparameterize(const ag::Var& mean, const ag::Var& log_std, Rng& rng) {
  ag::Array eps(mean.shape());
  std::normal_distribution<double> n(0.0, 1.0);
  for (auto& v : eps.vec()) v = n(rng);
  return mean + ag::exp(log_std) * ag::Var::constant(std::move(eps));
}

}  // namespace apc::nn
