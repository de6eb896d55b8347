#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "apc/autodiff.hpp"
#include "json.hpp"

namespace apc::nn {

using Rng = std::mt19937_64;

inline constexpr double kLeakySlope = 0.1;

enum class Init { KaimingUniform, Zero };

struct Linear {
  ag::Var weight;  // [in, out]
  ag::Var bias;    // [out]

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Init init, Rng& rng);
  ag::Var operator()(const ag::Var& x) const;
};

struct DeconvLayer {
  ag::Var kernel;  // [in_ch, out_ch, 2, 2]
  ag::Var bias;    // [out_ch]

  DeconvLayer() = default;
  DeconvLayer(std::size_t in_ch, std::size_t out_ch, Init init, Rng& rng);
  ag::Var operator()(const ag::Var& x) const;  // doubles H and W
};

struct DecoderConfig {
  enum class Kind { MLP, Deconv };
  Kind kind = Kind::MLP;
  std::size_t embedding_dim = 8;
  std::size_t output_dim = 0;  // |X|
  // MLP
  std::vector<std::size_t> hidden = {128, 128, 128, 128};
  // Deconv: square image of side `image_size` (power of two, >= 4) with
  // `image_channels` channels; `base_channels` at 4x4, halved per upsampling.
  std::size_t image_size = 0;
  std::size_t image_channels = 1;
  std::size_t base_channels = 64;
};

nlohmann::json to_json(const DecoderConfig& cfg);
DecoderConfig decoder_config_from_json(const nlohmann::json& j);

// g: Z -> X with a sigmoid output in [0, 1].
class Decoder {
 public:
  Decoder() = default;
  Decoder(const DecoderConfig& cfg, Rng& rng, Init init = Init::KaimingUniform);

  // z: [B, embedding_dim] -> [B, output_dim]. Throws DomainError on non-finite z.
  ag::Var operator()(const ag::Var& z) const;

  const DecoderConfig& config() const { return cfg_; }
  std::vector<ag::Var> parameters() const;
  std::size_t parameter_count() const;

 private:
  DecoderConfig cfg_;
  std::vector<Linear> dense_;
  std::vector<DeconvLayer> deconv_;
};

struct VAEConfig {
  std::size_t data_dim = 0;
  std::size_t embedding_dim = 8;
  std::vector<std::size_t> encoder_hidden = {128, 128, 128, 128};
  DecoderConfig decoder;
};

nlohmann::json to_json(const VAEConfig& cfg);
VAEConfig vae_config_from_json(const nlohmann::json& j);

struct VAEOutput {
  ag::Var x_hat;    // [B, X]
  ag::Var mean;     // [B, Z]
  ag::Var log_std;  // [B, Z]
  ag::Var z;        // [B, Z]
};

class VAE {
 public:
  VAE() = default;
  VAE(const VAEConfig& cfg, Rng& rng, Init init = Init::KaimingUniform);

  // Encoder head: (mean, log-std). Entries with mask 0 are replaced by zero
  // before encoding; an empty mask means fully observed.
  std::pair<ag::Var, ag::Var> encode(const ag::Array& x, const std::vector<std::uint8_t>& mask = {}) const;
  VAEOutput forward(const ag::Array& x, Rng& rng, const std::vector<std::uint8_t>& mask = {}) const;

  // f_VAE: posterior mean (or a reparameterized sample).
  ag::Array embed(const ag::Array& x, bool mean = true, Rng* rng = nullptr,
                  const std::vector<std::uint8_t>& mask = {}) const;
  // g_VAE
  ag::Var decode(const ag::Var& z) const { return decoder_(z); }

  const VAEConfig& config() const { return cfg_; }
  const Decoder& decoder() const { return decoder_; }
  std::vector<ag::Var> parameters() const;
  std::size_t parameter_count() const;

 private:
  VAEConfig cfg_;
  std::vector<Linear> encoder_;
  Decoder decoder_;
};

// Per-entry KL(N(mean, exp(log_std)^2) || N(0, 1)).
ag::Var kld_standard_normal(const ag::Var& mean, const ag::Var& log_std);

// z = mean + exp(log_std) * eps, eps ~ N(0, 1).
ag::Var reparameterize(const ag::Var& mean, const ag::Var& log_std, Rng& rng);

}  // namespace apc::nn
