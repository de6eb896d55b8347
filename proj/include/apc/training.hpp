#pragma once

#include <cstddef>
#include <functional>
#include <iosfwd>
#include <vector>

#include "apc/circuit.hpp"
#include "apc/data.hpp"
#include "apc/error.hpp"
#include "apc/inference.hpp"
#include "apc/nn.hpp"
#include "json.hpp"

namespace apc {

// Non-finite loss during training. `snapshot` holds the step and the loss
// components at the time of failure.
class NumericalError : public Error {
 public:
  NumericalError(const std::string& msg, nlohmann::json snapshot) : Error(msg), snapshot(std::move(snapshot)) {}
  nlohmann::json snapshot;
};

struct LossWeights {
  double rec = 1.0;
  double kld = 1.0;
  double nll = 1.0;
};

// Multiplier on the target lr: exponential x100 warmup over the first 2% of
// steps, then x0.1 at 66% and again at 90%.
double lr_factor(std::size_t step, std::size_t total_steps);

struct ParamGroup {
  std::vector<ag::Var> params;
  double lr = 0.0;
  double weight_decay = 0.0;
};

class AdamW {
 public:
  AdamW(std::vector<ParamGroup> groups, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  // One update with every group's lr scaled by `lr_scale`.
  void step(double lr_scale = 1.0);
  void zero_grad();
  std::size_t steps() const { return t_; }
  const std::vector<ParamGroup>& groups() const { return groups_; }

  // Moments, flattened per group then parameter, for checkpoints.
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  void set_steps(std::size_t t) { t_ = t; }

 private:
  std::vector<ParamGroup> groups_;
  double beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;  // one per parameter node
};

// Mean squared error over observed entries (all entries when mask is empty).
ag::Var loss_rec(const ag::Var& x_hat, const ag::Array& x, const std::vector<std::uint8_t>& mask = {});
// (1/B) sum over batch and embedding dims of KL(N(mean, sigma^2) || N(0, 1)).
ag::Var loss_kld(const SampleTrace& trace);
// -(1/B) sum_i log p_C(x_i, z_i), missing data marginalized.
ag::Var loss_nll(const Circuit& c, const Evidence& e, const ag::Var& z);

struct StepMetrics {
  std::size_t step = 0;
  double lr_scale = 0.0;
  double rec = 0.0;
  double kld = 0.0;
  double nll = 0.0;
  double total = 0.0;
};

nlohmann::json to_json(const StepMetrics& m);

struct TrainConfig {
  std::size_t iterations = 10000;
  std::size_t batch_size = 512;
  double lr_circuit = 0.1;
  double lr_neural = 0.005;
  double weight_decay_neural = 0.01;
  std::uint64_t seed = 0;
  LossWeights weights;
  std::size_t log_every = 100;
  // Ablation: cut the encoder -> decoder gradient path.
  bool detach_embedding = false;
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct TrainLog {
  std::vector<StepMetrics> steps;  // every step
  std::size_t skipped_batches = 0;
};

// Optional sink for line-delimited JSON metrics (every `log_every` steps).
using MetricsSink = std::function<void(const StepMetrics&)>;

TrainLog train_apc(const TrainConfig& cfg, Circuit& circuit, nn::Decoder& decoder, const Dataset& data,
                   const MetricsSink& sink = {});

TrainLog train_vae(const TrainConfig& cfg, nn::VAE& vae, const Dataset& data, const MetricsSink& sink = {});

struct DistillConfig {
  TrainConfig train;
  int max_value = 1;  // support of the student's data leaves (1 binary, 255 counts)
};

// Data-free distillation: embeddings from the student's prior, synthetic
// data from the teacher decoder, student trained on the three KD losses.
TrainLog distill(const DistillConfig& cfg, const nn::VAE& teacher, Circuit& circuit, nn::Decoder& decoder,
                 const MetricsSink& sink = {});

// Evidence over data variables from raw values, honoring an optional mask.
Evidence data_evidence(const Circuit& c, const ag::Array& x, const std::vector<std::uint8_t>& mask = {});

// Teacher outputs in [0, 1] rounded onto the student's discrete support.
ag::Array discretize(const ag::Array& x01, int max_value);

}  // namespace apc
