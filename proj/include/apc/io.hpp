#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "apc/builders.hpp"
#include "apc/circuit.hpp"
#include "apc/data.hpp"
#include "apc/nn.hpp"
#include "apc/training.hpp"
#include "json.hpp"

namespace apc::io {

// ---- datasets ----

// Comma-separated 0/1 rows, one sample per line.
Dataset load_debd(const std::filesystem::path& path);
// IDX (ubyte) images, optionally with an IDX1 label file of equal count.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels = {});
// One integer label per line.
std::vector<int> load_labels(const std::filesystem::path& path);

void save_debd(const Dataset& d, const std::filesystem::path& path);
void save_labels(const std::vector<int>& labels, const std::filesystem::path& path);

// 8x8 binary images in two clusters with labels. Family 0: a 4x4 block in
// the top-left (label 0) or bottom-right (label 1) quadrant. Family 1 is the
// out-of-distribution set: hollow frames (label 0) and diagonal bands
// (label 1), each with a random size/orientation. Each pixel is flipped with
// probability `flip`.
Dataset synthetic_clusters(std::size_t n, std::uint64_t seed, int family = 0, double flip = 0.02);

// ---- atomic writes ----

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

// ---- checkpoints ----

struct Models {
  std::optional<Circuit> circuit;
  std::optional<nn::Decoder> decoder;
  std::optional<nn::VAE> vae;
  nlohmann::json extra = nlohmann::json::object();  // free-form metadata
};

inline constexpr int kCheckpointVersion = 1;

// Header (structured text) + little-endian float64 blocks, each with a crc32.
void save_checkpoint(const Models& m, const std::filesystem::path& path);
Models load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint parameters into existing models; throws FormatError if
// the stored structure or configs differ from the targets.
void restore_into(const Models& stored, Circuit* circuit, nn::Decoder* decoder, nn::VAE* vae);

nlohmann::json circuit_to_json(const Circuit& c);  // structure only
Circuit circuit_from_json(const nlohmann::json& j);

// ---- experiment configuration ----

struct DataConfig {
  std::string format = "synthetic";  // synthetic | debd | idx
  std::string train_path;
  std::string test_path;
  std::string train_labels;
  std::string test_labels;
  std::size_t synthetic_train = 2000;
  std::size_t synthetic_test = 500;
  std::size_t synthetic_family = 0;
};

struct EvalConfig {
  std::vector<double> levels;  // empty: 0.00, 0.05, ..., 0.95
  std::size_t seeds = 5;
  std::vector<std::string> metrics = {"mse"};
  std::size_t probe_iterations = 5000;
  std::size_t probe_batch = 512;
  double probe_lr = 0.05;
  std::size_t max_test = 0;  // 0: whole test split
  bool mpe = false;          // MPE encoder instead of sampling
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string builder = "convpc";
  nlohmann::json builder_config = nlohmann::json::object();
  nn::DecoderConfig decoder;
  std::vector<std::size_t> vae_encoder_hidden = {128, 128, 128, 128};
  TrainConfig train;
  EvalConfig eval;
  DataConfig data;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);
void save_experiment_config(const ExperimentConfig& cfg, const std::filesystem::path& path);

// Resolves the configured data source into train/test splits.
DatasetSplit load_data(const DataConfig& cfg, std::uint64_t seed);

// ---- images ----

// Grid of images (values in [0, 1]) with a 1px gray border: binary PGM for
// 1 channel, PPM for 3 (channel-last rows).
void write_image_grid(const ag::Array& images01, std::size_t height, std::size_t width, std::size_t channels,
                      std::size_t cols, const std::filesystem::path& path);
void write_pgm_grid(const ag::Array& images01, std::size_t height, std::size_t width, std::size_t cols,
                    const std::filesystem::path& path);

}  // namespace apc::io
