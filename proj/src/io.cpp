#include "apc/io.hpp"

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "apc/error.hpp"

namespace apc::io {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// files

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, const std::string& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// datasets

Dataset load_debd(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<double> values;
  std::size_t cols = 0, rows = 0, lineno = 0;
  std::string line;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t n = 0, pos = 0;
    while (pos <= line.size()) {
      std::size_t end = line.find(',', pos);
      if (end == std::string::npos) end = line.size();
      std::string tok = line.substr(pos, end - pos);
      while (!tok.empty() && tok.front() == ' ') tok.erase(tok.begin());
      while (!tok.empty() && tok.back() == ' ') tok.pop_back();
      if (tok != "0" && tok != "1")
        throw FormatError(path.string() + ":" + std::to_string(lineno) + ": token " + std::to_string(n + 1) + " '" +
                          tok + "' is not 0 or 1");
      values.push_back(tok == "1" ? 1.0 : 0.0);
      ++n;
      pos = end + 1;
    }
    if (rows == 0) cols = n;
    if (n != cols)
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(cols) +
                        " values, got " + std::to_string(n));
    ++rows;
  }
  if (rows == 0) throw FormatError(path.string() + ": no data rows");
  Dataset d;
  d.kind = DatasetKind::BinaryTabular;
  d.x = ag::Array(ag::Shape{rows, cols}, std::move(values));
  d.max_value = 1;
  return d;
}

void save_debd(const Dataset& d, const fs::path& path) {
  std::string out;
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t j = 0; j < d.dim(); ++j) {
      if (j) out += ',';
      out += d.x.at(i, j) > 0.5 ? '1' : '0';
    }
    out += '\n';
  }
  write_file_atomic(path, out);
}

std::vector<int> load_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::vector<int> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    try {
      std::size_t used = 0;
      const int v = std::stoi(line, &used);
      if (v < 0) throw std::invalid_argument("negative");
      out.push_back(v);
    } catch (const std::exception&) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": bad label '" + line + "'");
    }
  }
  return out;
}

void save_labels(const std::vector<int>& labels, const fs::path& path) {
  std::string out;
  for (int l : labels) out += std::to_string(l) + '\n';
  write_file_atomic(path, out);
}

namespace {

struct IdxFile {
  std::vector<std::uint32_t> dims;
  std::string payload;
};

IdxFile read_idx(const fs::path& path, std::size_t expect_rank) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 4) throw FormatError(path.string() + ": too short for an IDX header");
  const auto* u = reinterpret_cast<const unsigned char*>(bytes.data());
  if (u[0] != 0 || u[1] != 0 || u[2] != 0x08)
    throw FormatError(path.string() + ": bad IDX magic (only unsigned-byte data is supported)");
  const std::size_t rank = u[3];
  if (rank != expect_rank && !(expect_rank == 3 && rank == 4))
    throw FormatError(path.string() + ": IDX rank " + std::to_string(rank) + ", expected " + std::to_string(expect_rank));
  if (bytes.size() < 4 + 4 * rank) throw FormatError(path.string() + ": truncated IDX header");
  IdxFile f;
  std::size_t total = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const unsigned char* p = u + 4 + 4 * i;
    const std::uint32_t d = (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) | p[3];
    f.dims.push_back(d);
    total *= d;
  }
  const std::size_t off = 4 + 4 * rank;
  if (bytes.size() - off != total)
    throw FormatError(path.string() + ": payload has " + std::to_string(bytes.size() - off) + " bytes, header says " +
                      std::to_string(total));
  f.payload = bytes.substr(off);
  return f;
}

}  // namespace

Dataset load_idx(const fs::path& images, const fs::path& labels) {
  IdxFile f = read_idx(images, 3);
  Dataset d;
  const std::size_t N = f.dims[0];
  d.height = f.dims[1];
  d.width = f.dims[2];
  d.channels = f.dims.size() == 4 ? f.dims[3] : 1;
  d.kind = d.channels == 1 ? DatasetKind::GrayImage : DatasetKind::RGBImage;
  d.max_value = 255;
  const std::size_t D = d.height * d.width * d.channels;
  d.x = ag::Array(ag::Shape{N, D});
  for (std::size_t i = 0; i < N * D; ++i) d.x[i] = double(static_cast<unsigned char>(f.payload[i]));
  if (!labels.empty()) {
    IdxFile l = read_idx(labels, 1);
    if (l.dims[0] != N)
      throw FormatError(labels.string() + ": " + std::to_string(l.dims[0]) + " labels for " + std::to_string(N) + " images");
    for (unsigned char c : l.payload) d.labels.push_back(int(c));
  }
  return d;
}

Dataset synthetic_clusters(std::size_t n, std::uint64_t seed, int family, double flip) {
  constexpr std::size_t S = 8;
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(0.5), noise(flip);
  std::uniform_int_distribution<int> jitter(0, 1);
  Dataset d;
  d.kind = DatasetKind::BinaryTabular;
  d.height = S;
  d.width = S;
  d.max_value = 1;
  d.x = ag::Array(ag::Shape{n, S * S});
  for (std::size_t i = 0; i < n; ++i) {
    const int label = coin(rng) ? 1 : 0;
    const int a = jitter(rng), b = jitter(rng);  // family 1 only
    for (std::size_t r = 0; r < S; ++r) {
      for (std::size_t c = 0; c < S; ++c) {
        const int ri = int(r), ci = int(c);
        bool on;
        if (family == 0) {
          on = label == 0 ? (ri < 4 && ci < 4) : (ri >= 4 && ci >= 4);
        } else {
          if (label == 0) {
            const int lo = a, hi = 7 - a;  // hollow frame
            on = (ri >= lo && ri <= hi && ci >= lo && ci <= hi) && (ri == lo || ri == hi || ci == lo || ci == hi);
          } else {
            const int off = b ? (ri + ci - 7) : (ri - ci);  // diagonal band
            on = std::abs(off) <= a;
          }
        }
        if (noise(rng)) on = !on;
        d.x.at(i, r * S + c) = on ? 1.0 : 0.0;
      }
    }
    d.labels.push_back(label);
  }
  return d;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr const char* kMagic = "APCCKPT";

std::string family_name(LeafFamily f) { return to_string(f); }

LeafFamily family_from(const std::string& s) {
  if (s == to_string(LeafFamily::Bernoulli)) return LeafFamily::Bernoulli;
  if (s == to_string(LeafFamily::Binomial)) return LeafFamily::Binomial;
  if (s == to_string(LeafFamily::Gaussian)) return LeafFamily::Gaussian;
  throw FormatError("unknown leaf family '" + s + "'");
}

UnitKind kind_from(const std::string& s) {
  if (s == to_string(UnitKind::Input)) return UnitKind::Input;
  if (s == to_string(UnitKind::Sum)) return UnitKind::Sum;
  if (s == to_string(UnitKind::Product)) return UnitKind::Product;
  throw FormatError("unknown unit kind '" + s + "'");
}

void append_le(std::string& out, const ag::Array& a) {
  const std::size_t start = out.size();
  out.resize(start + 8 * a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::uint64_t bits = std::bit_cast<std::uint64_t>(a[i]);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    std::memcpy(out.data() + start + 8 * i, &bits, 8);
  }
}

void read_le(const char* src, ag::Array& a) {
  for (std::size_t i = 0; i < a.size(); ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, src + 8 * i, 8);
    if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap64(bits);
    a[i] = std::bit_cast<double>(bits);
  }
}

std::uint32_t crc(const char* p, std::size_t n) {
  return static_cast<std::uint32_t>(::crc32(0L, reinterpret_cast<const Bytef*>(p), static_cast<uInt>(n)));
}

struct Block {
  std::string name;
  ag::Var param;
};

std::vector<Block> manifest(const Models& m) {
  std::vector<Block> out;
  if (m.circuit)
    for (std::size_t i = 0; i < m.circuit->size(); ++i)
      if (m.circuit->unit(i).params.defined()) out.push_back({"circuit/" + std::to_string(i), m.circuit->unit(i).params});
  if (m.decoder) {
    auto ps = m.decoder->parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) out.push_back({"decoder/" + std::to_string(i), ps[i]});
  }
  if (m.vae) {
    auto ps = m.vae->parameters();
    for (std::size_t i = 0; i < ps.size(); ++i) out.push_back({"vae/" + std::to_string(i), ps[i]});
  }
  return out;
}

}  // namespace

nlohmann::json circuit_to_json(const Circuit& c) {
  nlohmann::json units = nlohmann::json::array();
  for (const auto& u : c.units()) {
    nlohmann::json ju = {{"kind", to_string(u.kind)}};
    if (u.kind == UnitKind::Input) {
      ju["var"] = u.var;
      ju["family"] = family_name(u.family);
      if (u.family == LeafFamily::Binomial) ju["trials"] = u.trials;
    } else {
      ju["children"] = u.children;
    }
    units.push_back(std::move(ju));
  }
  return {{"builder", c.builder},
          {"builder_config", c.builder_config},
          {"num_data", c.num_data()},
          {"num_embedding", c.num_embedding()},
          {"units", std::move(units)}};
}

Circuit circuit_from_json(const nlohmann::json& j) {
  std::vector<Unit> units;
  for (const auto& ju : j.at("units")) {
    Unit u;
    u.kind = kind_from(ju.at("kind").get<std::string>());
    if (u.kind == UnitKind::Input) {
      u.var = ju.at("var").get<std::size_t>();
      u.family = family_from(ju.at("family").get<std::string>());
      u.trials = ju.value("trials", 0);
      u.params = ag::Var::leaf(ag::Array(ag::Shape{u.family == LeafFamily::Gaussian ? 2u : 1u}), true);
    } else {
      u.children = ju.at("children").get<std::vector<std::size_t>>();
      if (u.kind == UnitKind::Sum) u.params = ag::Var::leaf(ag::Array(ag::Shape{u.children.size()}), true);
    }
    units.push_back(std::move(u));
  }
  Circuit c = Circuit::from_units(j.at("num_data").get<std::size_t>(), j.at("num_embedding").get<std::size_t>(),
                                  std::move(units));
  c.builder = j.value("builder", std::string());
  c.builder_config = j.value("builder_config", nlohmann::json::object());
  return c;
}

void save_checkpoint(const Models& m, const fs::path& path) {
  nlohmann::json header;
  header["version"] = kCheckpointVersion;
  header["extra"] = m.extra;
  if (m.circuit) header["circuit"] = circuit_to_json(*m.circuit);
  if (m.decoder) header["decoder"] = nn::to_json(m.decoder->config());
  if (m.vae) header["vae"] = nn::to_json(m.vae->config());
  std::string payload;
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : manifest(m)) {
    const std::size_t off = payload.size();
    append_le(payload, b.param.value());
    blocks.push_back({{"name", b.name},
                      {"shape", b.param.shape()},
                      {"offset", off},
                      {"crc32", crc(payload.data() + off, payload.size() - off)}});
  }
  header["blocks"] = std::move(blocks);
  header["payload_bytes"] = payload.size();
  std::string out = std::string(kMagic) + "\n" + header.dump() + "\n";
  out += payload;
  write_file_atomic(path, out);
}

Models load_checkpoint(const fs::path& path) {
  const std::string bytes = read_file(path);
  const std::size_t l1 = bytes.find('\n');
  if (l1 == std::string::npos || bytes.substr(0, l1) != kMagic) throw FormatError(path.string() + ": not a checkpoint");
  const std::size_t l2 = bytes.find('\n', l1 + 1);
  if (l2 == std::string::npos) throw FormatError(path.string() + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(l1 + 1, l2 - l1 - 1));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header: " + e.what());
  }
  const int version = header.value("version", -1);
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  const char* payload = bytes.data() + l2 + 1;
  const std::size_t payload_size = bytes.size() - l2 - 1;
  if (payload_size != header.at("payload_bytes").get<std::size_t>()) throw FormatError(path.string() + ": truncated payload");

  Models m;
  m.extra = header.value("extra", nlohmann::json::object());
  nn::Rng rng(0);
  if (header.contains("circuit")) m.circuit = circuit_from_json(header["circuit"]);
  if (header.contains("decoder")) m.decoder = nn::Decoder(nn::decoder_config_from_json(header["decoder"]), rng, nn::Init::Zero);
  if (header.contains("vae")) m.vae = nn::VAE(nn::vae_config_from_json(header["vae"]), rng, nn::Init::Zero);
  const auto blocks = manifest(m);
  const auto& jb = header.at("blocks");
  if (jb.size() != blocks.size()) throw FormatError(path.string() + ": parameter manifest does not match the models");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = jb[i];
    if (b.at("name").get<std::string>() != blocks[i].name || b.at("shape").get<ag::Shape>() != blocks[i].param.shape())
      throw FormatError(path.string() + ": block " + blocks[i].name + " does not match the models");
    const std::size_t off = b.at("offset").get<std::size_t>();
    const std::size_t n = 8 * blocks[i].param.size();
    if (off + n > payload_size) throw FormatError(path.string() + ": block " + blocks[i].name + " out of range");
    if (crc(payload + off, n) != b.at("crc32").get<std::uint32_t>())
      throw FormatError(path.string() + ": checksum mismatch in block " + blocks[i].name);
    ag::Var p = blocks[i].param;
    read_le(payload + off, p.mutable_value());
  }
  return m;
}

void restore_into(const Models& stored, Circuit* circuit, nn::Decoder* decoder, nn::VAE* vae) {
  auto copy = [](const std::vector<ag::Var>& from, std::vector<ag::Var> to, const char* what) {
    if (from.size() != to.size()) throw FormatError(std::string(what) + ": parameter count mismatch");
    for (std::size_t i = 0; i < from.size(); ++i) {
      if (from[i].shape() != to[i].shape()) throw FormatError(std::string(what) + ": parameter shape mismatch");
      to[i].mutable_value() = from[i].value();
    }
  };
  if (circuit) {
    if (!stored.circuit) throw FormatError("checkpoint has no circuit");
    if (stored.circuit->builder != circuit->builder || stored.circuit->builder_config != circuit->builder_config)
      throw FormatError("checkpoint circuit was built with a different builder config");
    if (circuit_to_json(*stored.circuit) != circuit_to_json(*circuit))
      throw FormatError("checkpoint circuit structure differs");
    copy(stored.circuit->parameters(), circuit->parameters(), "circuit");
  }
  if (decoder) {
    if (!stored.decoder) throw FormatError("checkpoint has no decoder");
    if (nn::to_json(stored.decoder->config()) != nn::to_json(decoder->config()))
      throw FormatError("checkpoint decoder config differs");
    copy(stored.decoder->parameters(), decoder->parameters(), "decoder");
  }
  if (vae) {
    if (!stored.vae) throw FormatError("checkpoint has no vae");
    if (nn::to_json(stored.vae->config()) != nn::to_json(vae->config())) throw FormatError("checkpoint vae config differs");
    copy(stored.vae->parameters(), vae->parameters(), "vae");
  }
}

// ---------------------------------------------------------------------------
// experiment config

nlohmann::json to_json(const ExperimentConfig& cfg) {
  const auto& e = cfg.eval;
  const auto& d = cfg.data;
  return {{"seed", cfg.seed},
          {"model",
           {{"builder", cfg.builder},
            {"builder_config", cfg.builder_config},
            {"decoder", nn::to_json(cfg.decoder)},
            {"vae_encoder_hidden", cfg.vae_encoder_hidden}}},
          {"train", apc::to_json(cfg.train)},
          {"eval",
           {{"levels", e.levels},
            {"seeds", e.seeds},
            {"metrics", e.metrics},
            {"probe_iterations", e.probe_iterations},
            {"probe_batch", e.probe_batch},
            {"probe_lr", e.probe_lr},
            {"max_test", e.max_test},
            {"mpe", e.mpe}}},
          {"data",
           {{"format", d.format},
            {"train_path", d.train_path},
            {"test_path", d.test_path},
            {"train_labels", d.train_labels},
            {"test_labels", d.test_labels},
            {"synthetic_train", d.synthetic_train},
            {"synthetic_test", d.synthetic_test},
            {"synthetic_family", d.synthetic_family}}}};
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  try {
    ExperimentConfig c;
    c.seed = j.value("seed", c.seed);
    const auto model = j.value("model", nlohmann::json::object());
    c.builder = model.value("builder", c.builder);
    c.builder_config = model.value("builder_config", c.builder_config);
    if (model.contains("decoder")) c.decoder = nn::decoder_config_from_json(model["decoder"]);
    c.vae_encoder_hidden = model.value("vae_encoder_hidden", c.vae_encoder_hidden);
    if (j.contains("train")) c.train = train_config_from_json(j["train"]);
    const auto ev = j.value("eval", nlohmann::json::object());
    auto& e = c.eval;
    e.levels = ev.value("levels", e.levels);
    e.seeds = ev.value("seeds", e.seeds);
    e.metrics = ev.value("metrics", e.metrics);
    e.probe_iterations = ev.value("probe_iterations", e.probe_iterations);
    e.probe_batch = ev.value("probe_batch", e.probe_batch);
    e.probe_lr = ev.value("probe_lr", e.probe_lr);
    e.max_test = ev.value("max_test", e.max_test);
    e.mpe = ev.value("mpe", e.mpe);
    const auto dj = j.value("data", nlohmann::json::object());
    auto& d = c.data;
    d.format = dj.value("format", d.format);
    d.train_path = dj.value("train_path", d.train_path);
    d.test_path = dj.value("test_path", d.test_path);
    d.train_labels = dj.value("train_labels", d.train_labels);
    d.test_labels = dj.value("test_labels", d.test_labels);
    d.synthetic_train = dj.value("synthetic_train", d.synthetic_train);
    d.synthetic_test = dj.value("synthetic_test", d.synthetic_test);
    d.synthetic_family = dj.value("synthetic_family", d.synthetic_family);
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad experiment config: ") + e.what());
  }
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  try {
    return experiment_config_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

void save_experiment_config(const ExperimentConfig& cfg, const fs::path& path) {
  write_file_atomic(path, to_json(cfg).dump(2) + "\n");
}

DatasetSplit load_data(const DataConfig& cfg, std::uint64_t seed) {
  DatasetSplit s;
  if (cfg.format == "synthetic") {
    s.train = synthetic_clusters(cfg.synthetic_train, 1000 + seed, int(cfg.synthetic_family));
    s.test = synthetic_clusters(cfg.synthetic_test, 2000 + seed, int(cfg.synthetic_family));
    return s;
  }
  if (cfg.format == "debd") {
    s.train = load_debd(cfg.train_path);
    s.test = cfg.test_path.empty() ? s.train : load_debd(cfg.test_path);
    if (!cfg.train_labels.empty()) s.train.labels = load_labels(cfg.train_labels);
    if (!cfg.test_labels.empty()) s.test.labels = load_labels(cfg.test_labels);
    if (s.train.has_labels() && s.train.labels.size() != s.train.size())
      throw FormatError("train labels do not match the number of rows");
    if (s.test.has_labels() && s.test.labels.size() != s.test.size())
      throw FormatError("test labels do not match the number of rows");
    return s;
  }
  if (cfg.format == "idx") {
    s.train = load_idx(cfg.train_path, cfg.train_labels);
    s.test = cfg.test_path.empty() ? s.train : load_idx(cfg.test_path, cfg.test_labels);
    return s;
  }
  throw FormatError("unknown data format '" + cfg.format + "'");
}

void write_image_grid(const ag::Array& images01, std::size_t height, std::size_t width, std::size_t channels,
                      std::size_t cols, const fs::path& path) {
  if (channels != 1 && channels != 3) throw ShapeError("write_image_grid: channels must be 1 or 3");
  const std::size_t n = images01.dim(0);
  if (images01.dim(1) != height * width * channels)
    throw ShapeError("write_image_grid: row size does not match height*width*channels");
  cols = std::max<std::size_t>(1, std::min(cols, n));
  const std::size_t rows = (n + cols - 1) / cols;
  const std::size_t W = cols * (width + 1) + 1, H = rows * (height + 1) + 1;
  std::string pix(W * H * channels, char(128));
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t r0 = 1 + (k / cols) * (height + 1), c0 = 1 + (k % cols) * (width + 1);
    for (std::size_t r = 0; r < height; ++r)
      for (std::size_t c = 0; c < width; ++c)
        for (std::size_t ch = 0; ch < channels; ++ch) {
          const double v = std::clamp(images01.at(k, (r * width + c) * channels + ch), 0.0, 1.0);
          pix[((r0 + r) * W + c0 + c) * channels + ch] = char(static_cast<unsigned char>(std::lround(v * 255)));
        }
  }
  const std::string magic = channels == 1 ? "P5" : "P6";
  write_file_atomic(path, magic + "\n" + std::to_string(W) + " " + std::to_string(H) + "\n255\n" + pix);
}

void write_pgm_grid(const ag::Array& images01, std::size_t height, std::size_t width, std::size_t cols,
                    const fs::path& path) {
  write_image_grid(images01, height, width, 1, cols, path);
}

}  // namespace apc::io
