#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "apc/autodiff.hpp"
#include "json.hpp"

namespace apc {

// Variables [0, num_data) are data variables X, [num_data, num_data + num_embedding)
// are embedding variables Z.
enum class VarRole { Data, Embedding };

struct VariableId {
  std::size_t index = 0;
  VarRole role = VarRole::Data;
  friend bool operator==(const VariableId&, const VariableId&) = default;
};

// Dynamic bitset over variable indices.
class Scope {
 public:
  Scope() = default;
  explicit Scope(std::size_t num_vars) : words_((num_vars + 63) / 64, 0), num_vars_(num_vars) {}

  void set(std::size_t v) { words_[v / 64] |= (std::uint64_t{1} << (v % 64)); }
  bool test(std::size_t v) const { return (words_[v / 64] >> (v % 64)) & 1U; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
  bool intersects(const Scope& o) const;
  Scope& operator|=(const Scope& o);
  std::vector<std::size_t> members() const;
  std::size_t universe() const { return num_vars_; }
  friend bool operator==(const Scope&, const Scope&) = default;

 private:
  std::vector<std::uint64_t> words_;
  std::size_t num_vars_ = 0;
};

enum class UnitKind : std::uint8_t { Input, Sum, Product };
enum class LeafFamily : std::uint8_t { Bernoulli, Binomial, Gaussian };

std::string to_string(UnitKind k);
std::string to_string(LeafFamily f);

// Log-std bounds for Gaussian input units, enforced after every optimizer step.
inline constexpr double kLogStdMin = -7.0;
inline constexpr double kLogStdMax = 2.0;

struct Unit {
  UnitKind kind = UnitKind::Input;
  // Input units.
  std::size_t var = 0;
  LeafFamily family = LeafFamily::Bernoulli;
  int trials = 0;  // Binomial only
  // Sum / product units.
  std::vector<std::size_t> children;
  // Input: [1] logit (Bernoulli, Binomial) or [2] (mean, log-std) (Gaussian).
  // Sum: [children.size()] unconstrained weights, normalized with softmax.
  // Product: undefined.
  ag::Var params;
};

class Circuit {
 public:
  Circuit() = default;
  Circuit(std::size_t num_data, std::size_t num_embedding);

  // Incremental construction. Children must already exist, so the unit list
  // stays topologically ordered; the last unit added is the root.
  std::size_t add_input(std::size_t var, LeafFamily family, ag::Array params, int trials = 0);
  std::size_t add_sum(std::vector<std::size_t> children, ag::Array raw_weights);
  std::size_t add_product(std::vector<std::size_t> children);

  // Wraps an arbitrary unit list (e.g. read from disk). No ordering is assumed;
  // call validate_structure() before inference. Throws StructureError on cycles.
  static Circuit from_units(std::size_t num_data, std::size_t num_embedding, std::vector<Unit> units);

  std::size_t num_data() const { return num_data_; }
  std::size_t num_embedding() const { return num_embedding_; }
  std::size_t num_vars() const { return num_data_ + num_embedding_; }
  VariableId variable(std::size_t index) const;
  VarRole role(std::size_t index) const { return index < num_data_ ? VarRole::Data : VarRole::Embedding; }
  // Embedding variable j as a global variable index.
  std::size_t embedding_var(std::size_t j) const { return num_data_ + j; }

  std::size_t size() const { return units_.size(); }
  bool empty() const { return units_.empty(); }
  const Unit& unit(std::size_t i) const { return units_.at(i); }
  const std::vector<Unit>& units() const { return units_; }
  std::size_t root() const;

  const Scope& scope(std::size_t unit) const { return scopes_.at(unit); }
  // Embedding indices j (0-based within Z) covered by a unit's scope, ascending.
  const std::vector<std::size_t>& embedding_scope(std::size_t unit) const { return z_scopes_.at(unit); }

  // Offset of a sum unit's first edge in a flat per-edge array.
  std::size_t edge_offset(std::size_t unit) const { return edge_offsets_.at(unit); }
  std::size_t num_sum_edges() const { return num_sum_edges_; }

  // Every trainable parameter node, once, in unit order.
  std::vector<ag::Var> parameters() const;
  std::size_t parameter_count() const;

  // Copies share parameter nodes; clone() duplicates them.
  Circuit clone() const;

  // Projects Gaussian log-stds into [kLogStdMin, kLogStdMax].
  void clamp_log_std();

  // Builder provenance stored alongside checkpoints.
  std::string builder;
  nlohmann::json builder_config = nlohmann::json::object();

 private:
  void index_unit(std::size_t i);

  std::size_t num_data_ = 0;
  std::size_t num_embedding_ = 0;
  std::vector<Unit> units_;
  std::vector<Scope> scopes_;
  std::vector<std::vector<std::size_t>> z_scopes_;
  std::vector<std::size_t> edge_offsets_;
  std::size_t num_sum_edges_ = 0;
};

struct Violation {
  enum class Kind { Smoothness, Decomposability, LeafRole, RootScope, Ordering, Arity };
  Kind kind;
  std::size_t unit;
  std::string message;
};

struct ValidationReport {
  std::vector<Violation> violations;
  bool valid() const { return violations.empty(); }
  std::string summary() const;
};

// Checks smoothness, decomposability, leaf families per variable role, root
// scope and topological ordering. Throws StructureError if the graph has a cycle.
ValidationReport validate_structure(const Circuit& c);

const Scope& scope_of(const Circuit& c, std::size_t unit);
std::vector<ag::Var> parameter_views(const Circuit& c);

// Normalized mixture weights of a sum unit.
std::vector<double> sum_weights(const Circuit& c, std::size_t unit);

}  // namespace apc
