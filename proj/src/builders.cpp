#include "apc/builders.hpp"

#include <algorithm>
#include <numeric>

namespace apc {

namespace {

ag::Array uniform_array(std::size_t n, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> d(lo, hi);
  ag::Array a(ag::Shape{n});
  for (std::size_t i = 0; i < n; ++i) a[i] = d(rng);
  return a;
}

ag::Array gaussian_leaf_params(Rng& rng) {
  std::normal_distribution<double> d(0.0, 0.5);
  return ag::Array(ag::Shape{2}, std::vector<double>{d(rng), 0.0});
}

std::size_t add_sum_unit(Circuit& c, std::vector<std::size_t> children, Rng& rng) {
  const std::size_t k = children.size();
  return c.add_sum(std::move(children), uniform_array(k, -0.01, 0.01, rng));
}

// Input unit for variable `var` with role-dependent family.
std::size_t add_leaf(Circuit& c, std::size_t var, Rng& rng) {
  if (c.role(var) == VarRole::Embedding) return c.add_input(var, LeafFamily::Gaussian, gaussian_leaf_params(rng));
  return c.add_input(var, LeafFamily::Bernoulli, uniform_array(1, -0.1, 0.1, rng));
}

// Returns the units (one per channel) representing a region of the region graph.
std::vector<std::size_t> build_region(Circuit& c, const std::vector<std::size_t>& vars, std::size_t depth_left,
                                      std::size_t channels, bool is_root, Rng& rng) {
  if (depth_left == 0 || vars.size() == 1) {
    // Leaf region: `channels` fully factorized distributions over its variables.
    std::vector<std::vector<std::size_t>> leaves;
    for (auto v : vars) {
      std::vector<std::size_t> per_var;
      for (std::size_t k = 0; k < channels; ++k) per_var.push_back(add_leaf(c, v, rng));
      leaves.push_back(std::move(per_var));
    }
    std::vector<std::size_t> out;
    if (vars.size() == 1) {
      out = leaves[0];
    } else {
      for (std::size_t k = 0; k < channels; ++k) {
        std::vector<std::size_t> ch;
        for (auto& l : leaves) ch.push_back(l[k]);
        out.push_back(c.add_product(std::move(ch)));
      }
    }
    if (is_root) return {add_sum_unit(c, out, rng)};
    return out;
  }
  const std::size_t half = (vars.size() + 1) / 2;
  std::vector<std::size_t> left(vars.begin(), vars.begin() + static_cast<std::ptrdiff_t>(half));
  std::vector<std::size_t> right(vars.begin() + static_cast<std::ptrdiff_t>(half), vars.end());
  auto lu = build_region(c, left, depth_left - 1, channels, false, rng);
  auto ru = build_region(c, right, depth_left - 1, channels, false, rng);
  std::vector<std::size_t> prods;
  for (auto l : lu)
    for (auto r : ru) prods.push_back(c.add_product({l, r}));
  const std::size_t n_sums = is_root ? 1 : channels;
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < n_sums; ++k) out.push_back(add_sum_unit(c, prods, rng));
  return out;
}

}  // namespace

nlohmann::json to_json(const TabularBuilderConfig& cfg) {
  return {{"num_data_vars", cfg.num_data_vars}, {"embedding_dim", cfg.embedding_dim}, {"depth", cfg.depth},
          {"repetitions", cfg.repetitions},     {"channels", cfg.channels}};
}

nlohmann::json to_json(const ConvPCConfig& cfg) {
  return {{"height", cfg.height},
          {"width", cfg.width},
          {"embedding_dim", cfg.embedding_dim},
          {"leaf_channels", cfg.leaf_channels},
          {"min_channels", cfg.min_channels},
          {"trials", cfg.trials}};
}

TabularBuilderConfig tabular_config_from_json(const nlohmann::json& j) {
  TabularBuilderConfig c;
  c.num_data_vars = j.value("num_data_vars", c.num_data_vars);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.depth = j.value("depth", c.depth);
  c.repetitions = j.value("repetitions", c.repetitions);
  c.channels = j.value("channels", c.channels);
  return c;
}

ConvPCConfig convpc_config_from_json(const nlohmann::json& j) {
  ConvPCConfig c;
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.leaf_channels = j.value("leaf_channels", c.leaf_channels);
  c.min_channels = j.value("min_channels", c.min_channels);
  c.trials = j.value("trials", c.trials);
  return c;
}

Circuit build_tabular(const TabularBuilderConfig& cfg, Rng& rng) {
  const std::size_t V = cfg.num_data_vars + cfg.embedding_dim;
  if (cfg.embedding_dim < 1) throw StructureError("tabular builder: embedding_dim must be >= 1");
  if (V < 2) throw StructureError("tabular builder: needs at least two variables in total");
  if (cfg.depth < 1) throw StructureError("tabular builder: depth must be >= 1");
  if (cfg.channels < 1) throw StructureError("tabular builder: channels must be >= 1");
  if (cfg.repetitions != 1) throw StructureError("tabular builder: only a single repetition is supported");
  Circuit c(cfg.num_data_vars, cfg.embedding_dim);
  std::vector<std::size_t> order(V);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  build_region(c, order, cfg.depth, cfg.channels, true, rng);
  c.builder = "tabular";
  c.builder_config = to_json(cfg);
  return c;
}

std::size_t convpc_num_product_layers(const ConvPCConfig& cfg) {
  std::size_t n = 0;
  for (std::size_t m = std::max(cfg.height, cfg.width); m > 1; m /= 2) ++n;
  return n;
}

std::vector<std::size_t> convpc_channel_schedule(const ConvPCConfig& cfg) {
  const std::size_t layers = convpc_num_product_layers(cfg);
  std::vector<std::size_t> out;
  std::size_t ch = cfg.leaf_channels;
  for (std::size_t l = 0; l < layers; ++l) {
    if (l + 1 == layers) {
      out.push_back(1);
    } else {
      ch = std::max(ch / 2, std::min(cfg.min_channels, ch));
      out.push_back(ch);
    }
  }
  return out;
}

Circuit build_convpc(const ConvPCConfig& cfg, Rng& rng) {
  const std::size_t H = cfg.height, W = cfg.width, Z = cfg.embedding_dim;
  if (H < 2 || W < 2) throw StructureError("convpc builder: height and width must be >= 2");
  if (next_pow2(H) != H || next_pow2(W) != W) throw StructureError("convpc builder: pad the image to powers of two");
  if (Z > H * W) throw StructureError("convpc builder: more embedding variables than pixels");
  if (cfg.leaf_channels < 1) throw StructureError("convpc builder: leaf_channels must be >= 1");
  const std::size_t C0 = cfg.leaf_channels;
  Circuit c(H * W, Z);

  // Pixel positions receiving an embedding variable, without replacement.
  std::vector<std::size_t> pixels(H * W);
  std::iota(pixels.begin(), pixels.end(), 0);
  std::shuffle(pixels.begin(), pixels.end(), rng);
  std::vector<std::ptrdiff_t> z_at(H * W, -1);
  for (std::size_t j = 0; j < Z; ++j) z_at[pixels[j]] = static_cast<std::ptrdiff_t>(j);

  // region grid of unit lists
  std::size_t gh = H, gw = W;
  std::vector<std::vector<std::size_t>> grid(H * W);
  for (std::size_t p = 0; p < H * W; ++p) {
    auto& units = grid[p];
    for (std::size_t k = 0; k < C0; ++k)
      units.push_back(c.add_input(p, LeafFamily::Binomial, uniform_array(1, -0.1, 0.1, rng), cfg.trials));
    if (z_at[p] >= 0) {
      const std::size_t zvar = c.embedding_var(static_cast<std::size_t>(z_at[p]));
      for (std::size_t k = 0; k < C0; ++k) {
        const std::size_t zl = c.add_input(zvar, LeafFamily::Gaussian, gaussian_leaf_params(rng));
        units[k] = c.add_product({units[k], zl});
      }
    }
  }

  const auto schedule = convpc_channel_schedule(cfg);
  std::size_t ch = C0;
  for (std::size_t out_ch : schedule) {
    const std::size_t kh = gh > 1 ? 2 : 1, kw = gw > 1 ? 2 : 1;
    const std::size_t nh = gh / kh, nw = gw / kw;
    std::vector<std::vector<std::size_t>> next(nh * nw);
    for (std::size_t r = 0; r < nh; ++r) {
      for (std::size_t q = 0; q < nw; ++q) {
        std::vector<std::size_t> prods;
        for (std::size_t k = 0; k < ch; ++k) {
          std::vector<std::size_t> kids;
          for (std::size_t dr = 0; dr < kh; ++dr)
            for (std::size_t dq = 0; dq < kw; ++dq) kids.push_back(grid[(r * kh + dr) * gw + (q * kw + dq)][k]);
          prods.push_back(c.add_product(std::move(kids)));
        }
        auto& sums = next[r * nw + q];
        for (std::size_t o = 0; o < out_ch; ++o) sums.push_back(add_sum_unit(c, prods, rng));
      }
    }
    grid = std::move(next);
    gh = nh;
    gw = nw;
    ch = out_ch;
  }
  c.builder = "convpc";
  c.builder_config = to_json(cfg);
  return c;
}

Circuit rebuild(const std::string& builder, const nlohmann::json& config, Rng& rng) {
  if (builder == "tabular") return build_tabular(tabular_config_from_json(config), rng);
  if (builder == "convpc") return build_convpc(convpc_config_from_json(config), rng);
  throw StructureError("unknown circuit builder '" + builder + "'");
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

PaddedImage pad_to_pow2(const Image& img) {
  const std::size_t H = next_pow2(img.height), W = next_pow2(img.width);
  PaddedImage out;
  out.image.height = H;
  out.image.width = W;
  out.image.pixels.assign(H * W, 0.0);
  out.observed.assign(H * W, 0);
  for (std::size_t r = 0; r < img.height; ++r)
    for (std::size_t q = 0; q < img.width; ++q) {
      out.image.pixels[r * W + q] = img.pixels[r * img.width + q];
      out.observed[r * W + q] = 1;
    }
  return out;
}

}  // namespace apc
