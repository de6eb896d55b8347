#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "apc/autodiff.hpp"
#include "apc/circuit.hpp"

namespace apc {

using Rng = std::mt19937_64;

// Batched partial assignment over all circuit variables (data and embedding).
class Evidence {
 public:
  Evidence() = default;
  // Everything missing.
  Evidence(std::size_t batch, std::size_t num_vars);

  std::size_t batch() const { return batch_; }
  std::size_t num_vars() const { return num_vars_; }

  void observe(std::size_t b, std::size_t var, double value);
  void set_missing(std::size_t b, std::size_t var);
  bool observed(std::size_t b, std::size_t var) const { return mask_[b * num_vars_ + var] != 0; }
  double value(std::size_t b, std::size_t var) const { return values_[b * num_vars_ + var]; }
  std::size_t observed_count() const;

  // Rows of `data` ([batch, num_data]) become observed data values.
  static Evidence from_data(const ag::Array& data, std::size_t num_vars);

 private:
  std::size_t batch_ = 0;
  std::size_t num_vars_ = 0;
  std::vector<double> values_;
  std::vector<std::uint8_t> mask_;
};

// Throws DomainError if an observed value lies outside its input unit's support.
void check_support(const Circuit& c, const Evidence& e);

// Per-unit log-values of the most recent forward pass, unit-major: [units, batch].
struct ForwardCache {
  std::size_t batch = 0;
  std::uint64_t pass_id = 0;
  std::vector<double> log_values;
  double at(std::size_t unit, std::size_t b) const { return log_values[unit * batch + b]; }
};

// log p_C(observed variables) per batch row, missing variables marginalized.
// When `embedding` ([batch, |Z|]) is given, Z is observed at those values and
// gradients flow into it. Differentiable w.r.t. all circuit parameters.
ag::Var log_marginal(const Circuit& c, const Evidence& e, const ag::Var& embedding = {},
                     ForwardCache* cache = nullptr);

// Event counter for conditioned sum units whose every branch has zero
// likelihood; those fall back to the unconditioned weights.
std::uint64_t degenerate_evidence_count();
void reset_degenerate_evidence_count();

// theta_i * gamma_i / sum_j theta_j * gamma_j, evaluated in log space.
std::vector<double> condition_weights(std::span<const double> theta, std::span<const double> gamma);
// Log-space form: inputs log theta and log gamma, output normalized log weights.
std::vector<double> condition_log_weights(std::span<const double> log_theta, std::span<const double> log_gamma);

// Gumbel(0, 1) draw via -log(-log u), u ~ U(eps, 1 - eps).
double gumbel(Rng& rng);

// Exact one-hot sample from theta ([D] or [B, D]) with straight-through
// gradients: value s, gradient identity w.r.t. theta.
ag::Var simple_sample(const ag::Var& theta, Rng& rng);

// Sampling-induced tree of one encode call.
struct SampleTrace {
  std::size_t batch = 0;
  std::size_t num_units = 0;
  // Chosen child position per (sum unit, batch row); -1 when the unit is not on
  // that row's tree (or has no embedding variable in scope).
  std::vector<std::int32_t> choice;
  // Unit id of the Gaussian leaf visited for each (batch row, embedding var).
  std::vector<std::size_t> leaf;
  // Differentiable mean and log-std of the visited leaves, [batch, |Z|].
  ag::Var mean;
  ag::Var log_std;
  // Values drawn for Z, [batch, |Z|].
  ag::Array z;

  std::int32_t chosen(std::size_t unit, std::size_t b) const { return choice[unit * batch + b]; }
  std::size_t visited_leaf(std::size_t b, std::size_t j) const { return leaf[b * (leaf.size() / batch) + j]; }
};

struct Encoding {
  ag::Var z;  // [batch, |Z|]
  SampleTrace trace;
};

// Draws z ~ p_C(Z | observed data) per batch row: a marginal forward pass,
// then SIMPLE sampling at sum units under conditioned weights and
// reparameterized draws at Gaussian leaves. Data leaves are not sampled.
// Embedding entries of `e` are ignored (treated as missing).
Encoding encode(const Circuit& c, const Evidence& e, Rng& rng);

struct JointSamples {
  ag::Array x;  // [n, |X|]
  ag::Array z;  // [n, |Z|]
};

// Unconditional ancestral samples; non-differentiable.
JointSamples sample_joint(const Circuit& c, Rng& rng, std::size_t n);

struct MpeResult {
  ag::Array z;                   // [batch, |Z|]
  ag::Array state;               // [batch, num_vars], observed entries copied
  std::vector<double> log_value; // max-product value per row
};

// Max-product forward pass and argmax traceback. Missing variables take the
// mode of their selected leaf (Gaussian leaves: the mean).
MpeResult mpe(const Circuit& c, const Evidence& e);
ag::Array mpe_encode(const Circuit& c, const Evidence& e);

// log p_C(z) = log of the integral of p_C(x, z) over x, per row of z [batch, |Z|].
std::vector<double> log_embedding_marginal(const Circuit& c, const ag::Array& z);

// Log-density of one input unit at value x (params taken from the unit).
double leaf_log_density(const Unit& u, double x);

}  // namespace apc
