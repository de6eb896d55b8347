#include "apc/circuit.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <sstream>

namespace apc {

std::size_t Scope::count() const {
  std::size_t n = 0;
  for (auto w : words_) n += static_cast<std::size_t>(std::popcount(w));
  return n;
}

bool Scope::intersects(const Scope& o) const {
  const std::size_t n = std::min(words_.size(), o.words_.size());
  for (std::size_t i = 0; i < n; ++i)
    if (words_[i] & o.words_[i]) return true;
  return false;
}

Scope& Scope::operator|=(const Scope& o) {
  if (o.words_.size() > words_.size()) words_.resize(o.words_.size(), 0);
  num_vars_ = std::max(num_vars_, o.num_vars_);
  for (std::size_t i = 0; i < o.words_.size(); ++i) words_[i] |= o.words_[i];
  return *this;
}

std::vector<std::size_t> Scope::members() const {
  std::vector<std::size_t> out;
  for (std::size_t w = 0; w < words_.size(); ++w) {
    std::uint64_t bits = words_[w];
    while (bits) {
      const int b = std::countr_zero(bits);
      out.push_back(w * 64 + static_cast<std::size_t>(b));
      bits &= bits - 1;
    }
  }
  return out;
}

std::string to_string(UnitKind k) {
  switch (k) {
    case UnitKind::Input: return "input";
    case UnitKind::Sum: return "sum";
    case UnitKind::Product: return "product";
  }
  return "?";
}

std::string to_string(LeafFamily f) {
  switch (f) {
    case LeafFamily::Bernoulli: return "bernoulli";
    case LeafFamily::Binomial: return "binomial";
    case LeafFamily::Gaussian: return "gaussian";
  }
  return "?";
}

Circuit::Circuit(std::size_t num_data, std::size_t num_embedding)
    : num_data_(num_data), num_embedding_(num_embedding) {}

VariableId Circuit::variable(std::size_t index) const {
  if (index >= num_vars()) throw StructureError("variable index " + std::to_string(index) + " out of range");
  return {index, role(index)};
}

std::size_t Circuit::root() const {
  if (units_.empty()) throw StructureError("empty circuit has no root");
  return units_.size() - 1;
}

void Circuit::index_unit(std::size_t i) {
  const Unit& u = units_[i];
  Scope s(num_vars());
  if (u.kind == UnitKind::Input) {
    s.set(u.var);
  } else {
    for (auto c : u.children) s |= scopes_.at(c);
  }
  std::vector<std::size_t> zs;
  for (auto v : s.members())
    if (v >= num_data_) zs.push_back(v - num_data_);
  scopes_[i] = std::move(s);
  z_scopes_[i] = std::move(zs);
}

std::size_t Circuit::add_input(std::size_t var, LeafFamily family, ag::Array params, int trials) {
  if (var >= num_vars()) throw StructureError("input unit on unknown variable " + std::to_string(var));
  const std::size_t expect = family == LeafFamily::Gaussian ? 2 : 1;
  if (params.size() != expect) {
    throw ShapeError(to_string(family) + " input unit expects " + std::to_string(expect) + " parameters");
  }
  if (family == LeafFamily::Binomial && trials < 1) throw StructureError("binomial input needs trials >= 1");
  Unit u;
  u.kind = UnitKind::Input;
  u.var = var;
  u.family = family;
  u.trials = family == LeafFamily::Binomial ? trials : 0;
  u.params = ag::Var::leaf(std::move(params), true);
  units_.push_back(std::move(u));
  scopes_.emplace_back();
  z_scopes_.emplace_back();
  edge_offsets_.push_back(0);
  index_unit(units_.size() - 1);
  return units_.size() - 1;
}

std::size_t Circuit::add_sum(std::vector<std::size_t> children, ag::Array raw_weights) {
  if (children.empty()) throw StructureError("sum unit needs at least one child");
  if (raw_weights.size() != children.size()) throw ShapeError("sum unit weight count must match children");
  for (auto c : children)
    if (c >= units_.size()) throw StructureError("sum child " + std::to_string(c) + " does not exist yet");
  Unit u;
  u.kind = UnitKind::Sum;
  u.params = ag::Var::leaf(raw_weights.reshaped({children.size()}), true);
  u.children = std::move(children);
  edge_offsets_.push_back(num_sum_edges_);
  num_sum_edges_ += u.children.size();
  units_.push_back(std::move(u));
  scopes_.emplace_back();
  z_scopes_.emplace_back();
  index_unit(units_.size() - 1);
  return units_.size() - 1;
}

std::size_t Circuit::add_product(std::vector<std::size_t> children) {
  if (children.empty()) throw StructureError("product unit needs at least one child");
  for (auto c : children)
    if (c >= units_.size()) throw StructureError("product child " + std::to_string(c) + " does not exist yet");
  Unit u;
  u.kind = UnitKind::Product;
  u.children = std::move(children);
  units_.push_back(std::move(u));
  scopes_.emplace_back();
  z_scopes_.emplace_back();
  edge_offsets_.push_back(0);
  index_unit(units_.size() - 1);
  return units_.size() - 1;
}

Circuit Circuit::from_units(std::size_t num_data, std::size_t num_embedding, std::vector<Unit> units) {
  Circuit c(num_data, num_embedding);
  const std::size_t n = units.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (auto ch : units[i].children)
      if (ch >= n) throw StructureError("unit " + std::to_string(i) + " references missing child " + std::to_string(ch));
    if (units[i].kind == UnitKind::Input && units[i].var >= c.num_vars())
      throw StructureError("unit " + std::to_string(i) + " on unknown variable");
  }
  c.units_ = std::move(units);
  c.scopes_.assign(n, Scope{});
  c.z_scopes_.assign(n, {});
  c.edge_offsets_.assign(n, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (c.units_[i].kind == UnitKind::Sum) {
      c.edge_offsets_[i] = c.num_sum_edges_;
      c.num_sum_edges_ += c.units_[i].children.size();
    }
  }
  // Iterative DFS: 0 = new, 1 = on stack, 2 = done.
  std::vector<std::uint8_t> state(n, 0);
  for (std::size_t start = 0; start < n; ++start) {
    if (state[start]) continue;
    std::vector<std::pair<std::size_t, std::size_t>> stack{{start, 0}};
    state[start] = 1;
    while (!stack.empty()) {
      auto& [u, next] = stack.back();
      const auto& ch = c.units_[u].children;
      if (next < ch.size()) {
        const std::size_t v = ch[next++];
        if (state[v] == 1) throw StructureError("circuit graph has a cycle through unit " + std::to_string(v));
        if (state[v] == 0) {
          state[v] = 1;
          stack.emplace_back(v, 0);
        }
      } else {
        c.index_unit(u);
        state[u] = 2;
        stack.pop_back();
      }
    }
  }
  return c;
}

std::vector<ag::Var> Circuit::parameters() const {
  std::vector<ag::Var> out;
  for (const auto& u : units_)
    if (u.params.defined()) out.push_back(u.params);
  return out;
}

Circuit Circuit::clone() const {
  Circuit c = *this;
  for (auto& u : c.units_)
    if (u.params.defined()) u.params = ag::Var::leaf(u.params.value(), u.params.requires_grad());
  return c;
}

std::size_t Circuit::parameter_count() const {
  std::size_t n = 0;
  for (const auto& u : units_)
    if (u.params.defined()) n += u.params.size();
  return n;
}

void Circuit::clamp_log_std() {
  for (auto& u : units_) {
    if (u.kind == UnitKind::Input && u.family == LeafFamily::Gaussian) {
      auto& p = u.params.mutable_value();
      p[1] = std::clamp(p[1], kLogStdMin, kLogStdMax);
    }
  }
}

std::string ValidationReport::summary() const {
  if (valid()) return "valid";
  std::ostringstream os;
  os << violations.size() << " violation(s)";
  for (const auto& v : violations) os << "\n  unit " << v.unit << ": " << v.message;
  return os.str();
}

ValidationReport validate_structure(const Circuit& c) {
  ValidationReport r;
  const std::size_t n = c.size();
  if (n == 0) {
    r.violations.push_back({Violation::Kind::RootScope, 0, "empty circuit"});
    return r;
  }
  // from_units already rejected cycles; an out-of-order child is reported
  // separately because inference walks units in list order.
  for (std::size_t i = 0; i < n; ++i) {
    const Unit& u = c.unit(i);
    for (auto ch : u.children) {
      if (ch >= i) {
        r.violations.push_back({Violation::Kind::Ordering, i,
                                "child " + std::to_string(ch) + " does not precede its parent"});
      }
    }
    switch (u.kind) {
      case UnitKind::Input: {
        const bool is_z = c.role(u.var) == VarRole::Embedding;
        if (is_z && u.family != LeafFamily::Gaussian)
          r.violations.push_back({Violation::Kind::LeafRole, i, "embedding variable needs a Gaussian input unit"});
        if (!is_z && u.family == LeafFamily::Gaussian)
          r.violations.push_back({Violation::Kind::LeafRole, i, "Gaussian input units are reserved for embedding variables"});
        break;
      }
      case UnitKind::Sum: {
        if (u.children.empty()) r.violations.push_back({Violation::Kind::Arity, i, "sum unit without children"});
        if (!u.params.defined() || u.params.size() != u.children.size())
          r.violations.push_back({Violation::Kind::Arity, i, "sum unit weight count differs from child count"});
        for (auto ch : u.children) {
          if (!(c.scope(ch) == c.scope(i))) {
            r.violations.push_back({Violation::Kind::Smoothness, i,
                                    "child " + std::to_string(ch) + " scope differs from sum scope"});
          }
        }
        break;
      }
      case UnitKind::Product: {
        if (u.children.empty()) r.violations.push_back({Violation::Kind::Arity, i, "product unit without children"});
        Scope seen(c.num_vars());
        for (auto ch : u.children) {
          if (seen.intersects(c.scope(ch))) {
            r.violations.push_back({Violation::Kind::Decomposability, i,
                                    "child " + std::to_string(ch) + " overlaps the scope of an earlier sibling"});
          }
          seen |= c.scope(ch);
        }
        break;
      }
    }
  }
  if (c.scope(c.root()).count() != c.num_vars()) {
    r.violations.push_back({Violation::Kind::RootScope, c.root(), "root scope does not cover all variables"});
  }
  return r;
}

const Scope& scope_of(const Circuit& c, std::size_t unit) { return c.scope(unit); }

std::vector<ag::Var> parameter_views(const Circuit& c) { return c.parameters(); }

std::vector<double> sum_weights(const Circuit& c, std::size_t unit) {
  const Unit& u = c.unit(unit);
  if (u.kind != UnitKind::Sum) throw StructureError("unit " + std::to_string(unit) + " is not a sum unit");
  const auto& raw = u.params.value();
  double m = raw[0];
  for (std::size_t i = 1; i < raw.size(); ++i) m = std::max(m, raw[i]);
  std::vector<double> w(raw.size());
  double s = 0.0;
  for (std::size_t i = 0; i < raw.size(); ++i) s += (w[i] = std::exp(raw[i] - m));
  for (auto& x : w) x /= s;
  return w;
}

}  // namespace apc
