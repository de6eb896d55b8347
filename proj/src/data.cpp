#include "apc/data.hpp"

#include <algorithm>

#include "apc/error.hpp"

namespace apc {

std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::BinaryTabular: return "binary";
    case DatasetKind::GrayImage: return "gray";
    case DatasetKind::RGBImage: return "rgb";
  }
  return "?";
}

DatasetKind dataset_kind_from_string(const std::string& s) {
  if (s == "binary") return DatasetKind::BinaryTabular;
  if (s == "gray") return DatasetKind::GrayImage;
  if (s == "rgb") return DatasetKind::RGBImage;
  throw FormatError("unknown dataset kind '" + s + "'");
}

std::size_t Dataset::num_classes() const {
  if (labels.empty()) return 0;
  return std::size_t(*std::max_element(labels.begin(), labels.end())) + 1;
}

Dataset Dataset::rows(const std::vector<std::size_t>& idx) const {
  Dataset out = *this;
  const std::size_t D = dim();
  out.x = ag::Array(ag::Shape{idx.size(), D});
  out.labels.clear();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= size()) throw ShapeError("dataset row index out of range");
    std::copy_n(x.data() + idx[i] * D, D, out.x.data() + i * D);
    if (has_labels()) out.labels.push_back(labels[idx[i]]);
  }
  return out;
}

ag::Array Dataset::normalized() const {
  ag::Array out = x;
  const double s = 1.0 / double(max_value);
  for (auto& v : out.vec()) v *= s;
  return out;
}

std::vector<std::size_t> sample_batch(std::size_t n, std::size_t batch, std::mt19937_64& rng) {
  if (n == 0) throw ShapeError("sample_batch: empty dataset");
  std::uniform_int_distribution<std::size_t> d(0, n - 1);
  std::vector<std::size_t> idx(batch);
  for (auto& i : idx) i = d(rng);
  return idx;
}

}  // namespace apc
