#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "apc/autodiff.hpp"

namespace apc {

enum class DatasetKind { BinaryTabular, GrayImage, RGBImage };

std::string to_string(DatasetKind k);
DatasetKind dataset_kind_from_string(const std::string& s);

// Raw values as the circuit sees them: {0,1} for binary tabular data, integer
// counts in [0, 255] for images. Decoder targets are x / max_value.
struct Dataset {
  DatasetKind kind = DatasetKind::BinaryTabular;
  ag::Array x;              // [N, D]
  std::vector<int> labels;  // empty or N entries
  std::size_t height = 0;   // images only
  std::size_t width = 0;
  std::size_t channels = 1;
  int max_value = 1;

  std::size_t size() const { return x.rank() ? x.dim(0) : 0; }
  std::size_t dim() const { return x.rank() == 2 ? x.dim(1) : 0; }
  bool has_labels() const { return !labels.empty(); }
  std::size_t num_classes() const;

  Dataset rows(const std::vector<std::size_t>& idx) const;
  ag::Array normalized() const;  // x / max_value
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

// Uniform random batch indices (with replacement across calls).
std::vector<std::size_t> sample_batch(std::size_t n, std::size_t batch, std::mt19937_64& rng);

}  // namespace apc
