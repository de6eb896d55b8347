#pragma once

#include <cstddef>
#include <vector>

#include "apc/circuit.hpp"
#include "apc/inference.hpp"

namespace apc {

struct TabularBuilderConfig {
  std::size_t num_data_vars = 0;
  std::size_t embedding_dim = 8;
  std::size_t depth = 4;
  std::size_t repetitions = 1;
  std::size_t channels = 32;
};

struct ConvPCConfig {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t embedding_dim = 64;
  std::size_t leaf_channels = 256;
  // Sum layers halve the channel count down to this floor.
  std::size_t min_channels = 32;
  int trials = 255;
};

nlohmann::json to_json(const TabularBuilderConfig& cfg);
nlohmann::json to_json(const ConvPCConfig& cfg);
TabularBuilderConfig tabular_config_from_json(const nlohmann::json& j);
ConvPCConfig convpc_config_from_json(const nlohmann::json& j);

// Random-region binary-split structure over the shuffled union of data and
// embedding variables. Bernoulli leaves for data, Gaussian for embeddings.
Circuit build_tabular(const TabularBuilderConfig& cfg, Rng& rng);

// Layerwise convolutional structure over an H x W image with Binomial pixel
// leaves; each embedding variable is paired with a distinct random pixel
// through a local product at the lowest layer.
Circuit build_convpc(const ConvPCConfig& cfg, Rng& rng);

// Channel count of every sum layer after the leaves, top layer last (= 1).
std::vector<std::size_t> convpc_channel_schedule(const ConvPCConfig& cfg);
std::size_t convpc_num_product_layers(const ConvPCConfig& cfg);

// Rebuilds the structure recorded in a circuit's builder metadata.
Circuit rebuild(const std::string& builder, const nlohmann::json& config, Rng& rng);

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;  // row-major
};

struct PaddedImage {
  Image image;
  std::vector<std::uint8_t> observed;  // 0 for padding
};

std::size_t next_pow2(std::size_t n);

// Zero-pads right and bottom to the next power of two. Padding is flagged
// unobserved so it is marginalized, never fitted.
PaddedImage pad_to_pow2(const Image& img);

}  // namespace apc
