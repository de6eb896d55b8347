#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "apc/circuit.hpp"
#include "apc/data.hpp"
#include "apc/inference.hpp"
#include "apc/nn.hpp"
#include "json.hpp"

namespace apc::eval {

// ---- corruption ----

enum class MarPattern {
  LeftBand,
  RightBand,
  TopBand,
  BottomBand,
  CenterSquare,
  BorderFrame,
  HorizontalBands,
  VerticalBands,
};

std::string to_string(MarPattern p);
MarPattern mar_pattern_from_string(const std::string& s);
const std::vector<MarPattern>& all_mar_patterns();

struct CorruptionSpec {
  enum class Kind { MCAR, MAR };
  Kind kind = Kind::MCAR;
  double p = 0.0;  // MCAR missing fraction
  MarPattern pattern = MarPattern::LeftBand;
  double severity = 0.0;  // MAR: missing area fraction
  std::uint64_t seed = 0;

  static CorruptionSpec mcar(double p, std::uint64_t seed = 0);
  static CorruptionSpec mar(MarPattern pattern, double severity);
  // "mcar:<p>" or "mar:<pattern>:<severity>"
  static CorruptionSpec parse(const std::string& s);
  std::string str() const;
};

struct ImageShape {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
};

// Observation mask [n * dim], 1 = observed. MAR needs an image shape with
// height * width * channels == dim (channel-last layout); all channels of a
// masked pixel go missing together.
std::vector<std::uint8_t> corruption_mask(const CorruptionSpec& spec, std::size_t n, std::size_t dim,
                                          const ImageShape& shape = {});

// Evidence over the circuit's data variables; masked entries are missing.
Evidence corrupt(const Circuit& c, const ag::Array& x, const CorruptionSpec& spec, const ImageShape& shape = {});

// Missing entries replaced by zero.
ag::Array zero_impute(const ag::Array& x, const std::vector<std::uint8_t>& mask);

// ---- metrics ----

double mse(const ag::Array& x_hat, const ag::Array& x);
// Mean SSIM over images (rows of [n, h*w*c]), channels averaged. Gaussian
// 11x11 window, sigma 1.5, K1 0.01, K2 0.03, data range 1.
double ssim(const ag::Array& x_hat, const ag::Array& x, const ImageShape& shape);

// ---- downstream probe ----

struct ProbeConfig {
  std::size_t iterations = 5000;
  std::size_t batch = 512;
  double lr = 0.05;
  std::uint64_t seed = 0;
};

// Multinomial logistic regression on standardized embeddings, trained with
// minibatch SGD under the usual warmup/decay schedule. Returns test accuracy.
double downstream_probe(const ag::Array& train_emb, const std::vector<int>& train_labels, const ag::Array& test_emb,
                        const std::vector<int>& test_labels, const ProbeConfig& cfg = {});

// ---- models under evaluation ----

struct Model {
  std::string name;
  // Embeddings [n, d] from raw data values with an observation mask.
  std::function<ag::Array(const ag::Array& x, const std::vector<std::uint8_t>& mask, Rng& rng)> embed;
  // Reconstruction in [0, 1] from embeddings.
  std::function<ag::Array(const ag::Array& z)> decode;
};

// Missing inputs are marginalized by the circuit; z is a posterior sample
// (or the MPE embedding when `use_mpe`).
Model apc_model(const Circuit& c, const nn::Decoder& decoder, bool use_mpe = false);
// Missing inputs are zero-imputed; z is a reparameterized posterior sample.
Model vae_model(const nn::VAE& vae, double max_value);

// ---- robustness sweep ----

struct SweepConfig {
  std::vector<double> levels;  // empty: 0.00, 0.05, ..., 0.95
  std::size_t seeds = 5;
  std::vector<std::string> metrics = {"mse"};  // mse, ssim, accuracy
  ProbeConfig probe;
  std::uint64_t seed = 0;
  // MAR sweep instead of MCAR when set: levels are severities.
  bool mar = false;
  MarPattern pattern = MarPattern::LeftBand;
};

std::vector<double> default_levels();

struct SweepResult {
  std::string model;
  std::vector<double> levels;
  std::vector<std::string> metrics;
  // values[metric][level][seed]
  std::vector<std::vector<std::vector<double>>> values;

  std::vector<double> mean(const std::string& metric) const;
  std::vector<double> stddev(const std::string& metric) const;
  // Mean of the per-level means.
  double average(const std::string& metric) const;
  // Trapezoidal area under the mean curve over the level grid.
  double area(const std::string& metric) const;
  // Same for a single seed.
  double area(const std::string& metric, std::size_t seed) const;
  std::size_t metric_index(const std::string& metric) const;
};

SweepResult robustness_sweep(const Model& model, const Dataset& train, const Dataset& test, const SweepConfig& cfg);

// level, then <metric>_mean / <metric>_std columns, tab separated.
std::string to_table(const SweepResult& r);
nlohmann::json to_json(const SweepResult& r);

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

void write_svg_plot(const std::vector<Series>& series, const std::string& title, const std::string& x_label,
                    const std::string& y_label, const std::filesystem::path& path);

// ---- OOD ----

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;
};

Histogram histogram(const std::vector<double>& values, std::size_t bins, double lo, double hi);

// P(score_pos > score_neg) + 0.5 P(tie).
double auroc(const std::vector<double>& positive, const std::vector<double>& negative);

// log p_C(z) at embeddings encoded from each row of x (samples by default).
std::vector<double> embedding_scores(const Circuit& c, const ag::Array& x, Rng& rng, bool use_mpe = false);

struct OodResult {
  std::vector<double> in_scores;
  std::vector<double> out_scores;
  Histogram in_hist;
  Histogram out_hist;
  double auroc = 0.5;  // in-distribution as the positive (higher-scoring) class
};

OodResult ood_histogram(const Circuit& c, const ag::Array& in_x, const ag::Array& out_x, Rng& rng,
                        std::size_t bins = 30);
nlohmann::json to_json(const OodResult& r);

}  // namespace apc::eval
