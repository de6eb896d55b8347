#include "cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "apc/bench.hpp"
#include "apc/builders.hpp"
#include "apc/eval.hpp"
#include "apc/io.hpp"
#include "apc/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace apc::cli {

std::size_t thread_cap() {
  const char* v = std::getenv("APC_THREADS");
  if (!v || !*v) return 1;
  std::size_t pos = 0;
  long n = 0;
  try {
    n = std::stol(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != std::string(v).size() || n < 1) throw DomainError(std::string("APC_THREADS must be a positive integer, got '") + v + "'");
  return std::size_t(n);
}

namespace {

// Flags shared by every subcommand. Anything set here wins over the config file.
struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
  std::vector<std::string> sets;
  std::optional<std::size_t> iterations, batch_size;
  std::optional<double> lr_circuit, lr_neural, lambda_rec, lambda_kld, lambda_nll;
  bool detach = false;
  std::optional<std::string> data_format, train_path, test_path;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  sub->add_option("--seed", c.seed, "master seed");
  sub->add_option("--out", c.out, "output directory")->capture_default_str();
  sub->add_option("--set", c.sets, "override a config field, e.g. train.iterations=500 (repeatable)");
  sub->add_option("--iterations", c.iterations, "training steps");
  sub->add_option("--batch-size", c.batch_size);
  sub->add_option("--lr-circuit", c.lr_circuit);
  sub->add_option("--lr-neural", c.lr_neural);
  sub->add_option("--lambda-rec", c.lambda_rec);
  sub->add_option("--lambda-kld", c.lambda_kld);
  sub->add_option("--lambda-nll", c.lambda_nll);
  sub->add_flag("--detach", c.detach, "cut the encoder -> decoder gradient");
  sub->add_option("--data", c.data_format, "synthetic | debd | idx");
  sub->add_option("--train-path", c.train_path);
  sub->add_option("--test-path", c.test_path);
}

// key=value with a dotted key; the value is JSON if it parses, else a string.
void apply_set(json& j, const std::string& kv, const json& schema) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) throw FormatError("--set expects key=value, got '" + kv + "'");
  const std::string key = kv.substr(0, eq), raw = kv.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;
  json* node = &j;
  const json* shape = &schema;
  std::stringstream ss(key);
  std::string part;
  std::vector<std::string> parts;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::string& p = parts[i];
    // builder_config is free-form; below it anything goes
    if (shape && !(shape->is_object() && shape->contains(p)))
      throw FormatError("--set: unknown config field '" + key + "'");
    shape = (p == "builder_config" || !shape) ? nullptr : &(*shape)[p];
    if (i + 1 == parts.size()) {
      (*node)[p] = value;
    } else {
      if (!node->contains(p) || !(*node)[p].is_object()) (*node)[p] = json::object();
      node = &(*node)[p];
    }
  }
}

io::ExperimentConfig resolve_config(const Common& c, const json* stored = nullptr) {
  json j = to_json(io::ExperimentConfig{});
  const json schema = j;
  if (!c.config.empty())
    j = to_json(io::load_experiment_config(c.config));
  else if (stored && stored->is_object())
    j = *stored;
  for (const auto& kv : c.sets) apply_set(j, kv, schema);
  io::ExperimentConfig cfg = io::experiment_config_from_json(j);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.train.seed = *c.seed;
  }
  if (c.iterations) cfg.train.iterations = *c.iterations;
  if (c.batch_size) cfg.train.batch_size = *c.batch_size;
  if (c.lr_circuit) cfg.train.lr_circuit = *c.lr_circuit;
  if (c.lr_neural) cfg.train.lr_neural = *c.lr_neural;
  if (c.lambda_rec) cfg.train.weights.rec = *c.lambda_rec;
  if (c.lambda_kld) cfg.train.weights.kld = *c.lambda_kld;
  if (c.lambda_nll) cfg.train.weights.nll = *c.lambda_nll;
  if (c.detach) cfg.train.detach_embedding = true;
  if (c.data_format) cfg.data.format = *c.data_format;
  if (c.train_path) cfg.data.train_path = *c.train_path;
  if (c.test_path) cfg.data.test_path = *c.test_path;
  return cfg;
}

// Fills data-dependent fields the config may leave out.
json builder_config_for(const io::ExperimentConfig& cfg, const Dataset& d) {
  json b = cfg.builder_config.is_object() ? cfg.builder_config : json::object();
  if (cfg.builder == "convpc") {
    if (d.height == 0) throw ShapeError("convpc builder needs image data (height/width unknown)");
    if (b.value("height", 0) == 0) b["height"] = d.height;
    if (b.value("width", 0) == 0) b["width"] = d.width;
    if (!b.contains("trials")) b["trials"] = d.max_value;
  } else if (cfg.builder == "tabular") {
    if (b.value("num_data_vars", 0) == 0) b["num_data_vars"] = d.dim();
  }
  return b;
}

nn::DecoderConfig decoder_config_for(const io::ExperimentConfig& cfg, const Dataset& d, std::size_t z_dim) {
  nn::DecoderConfig dc = cfg.decoder;
  dc.embedding_dim = z_dim;
  dc.output_dim = d.dim();
  if (dc.kind == nn::DecoderConfig::Kind::Deconv) {
    if (d.height != d.width) throw ShapeError("deconv decoder needs square images");
    dc.image_size = d.height;
    dc.image_channels = d.channels;
  }
  return dc;
}

struct Run {
  io::ExperimentConfig cfg;
  DatasetSplit data;
  fs::path out;
};

Run start(const Common& c, std::ostream& err, const json* stored = nullptr) {
  Run r;
  r.cfg = resolve_config(c, stored);
  const std::size_t threads = thread_cap();
  err << "apc: " << threads << " thread cap, running single-threaded\n";
  r.data = io::load_data(r.cfg.data, r.cfg.seed);
  r.out = c.out;
  fs::create_directories(r.out);
  return r;
}

// Collects JSON lines and echoes them.
struct MetricsLog {
  std::ostream& out;
  std::string lines;
  MetricsSink sink() {
    return [this](const StepMetrics& m) {
      const std::string l = to_json(m).dump();
      out << l << "\n";
      lines += l + "\n";
    };
  }
};

const json* stored_config(const io::Models& m) {
  return m.extra.contains("config") ? &m.extra.at("config") : nullptr;
}

io::Models load_models(const std::string& path) {
  if (path.empty()) throw FormatError("--checkpoint is required");
  return io::load_checkpoint(path);
}

eval::Model model_from(const io::Models& m, const Dataset& d, bool use_mpe) {
  if (m.circuit && m.decoder) return eval::apc_model(*m.circuit, *m.decoder, use_mpe);
  if (m.vae) return eval::vae_model(*m.vae, double(d.max_value));
  throw FormatError("checkpoint holds neither an APC (circuit + decoder) nor a VAE");
}

// ---- subcommands ----

int cmd_train(const Common& c, std::ostream& out, std::ostream& err) {
  Run r = start(c, err);
  Rng rng(r.cfg.seed);
  const json bc = builder_config_for(r.cfg, r.data.train);
  Circuit circuit = rebuild(r.cfg.builder, bc, rng);
  nn::Decoder decoder(decoder_config_for(r.cfg, r.data.train, circuit.num_embedding()), rng);
  MetricsLog log{out, {}};
  train_apc(r.cfg.train, circuit, decoder, r.data.train, log.sink());
  io::Models m;
  m.circuit = std::move(circuit);
  m.decoder = std::move(decoder);
  m.extra = {{"kind", "apc"}, {"config", to_json(r.cfg)}};
  io::save_checkpoint(m, r.out / "apc.ckpt");
  io::write_file_atomic(r.out / "train_metrics.jsonl", log.lines);
  io::save_experiment_config(r.cfg, r.out / "config.json");
  err << "wrote " << (r.out / "apc.ckpt").string() << "\n";
  return 0;
}

nn::VAE make_vae(const io::ExperimentConfig& cfg, const Dataset& d, Rng& rng) {
  const std::size_t z = builder_config_for(cfg, d).value("embedding_dim", std::size_t(8));
  nn::VAEConfig vc;
  vc.data_dim = d.dim();
  vc.embedding_dim = z;
  vc.encoder_hidden = cfg.vae_encoder_hidden;
  vc.decoder = decoder_config_for(cfg, d, z);
  return nn::VAE(vc, rng);
}

int cmd_train_vae(const Common& c, std::ostream& out, std::ostream& err) {
  Run r = start(c, err);
  Rng rng(r.cfg.seed);
  nn::VAE vae = make_vae(r.cfg, r.data.train, rng);
  MetricsLog log{out, {}};
  train_vae(r.cfg.train, vae, r.data.train, log.sink());
  io::Models m;
  m.vae = std::move(vae);
  m.extra = {{"kind", "vae"}, {"config", to_json(r.cfg)}};
  io::save_checkpoint(m, r.out / "vae.ckpt");
  io::write_file_atomic(r.out / "train_vae_metrics.jsonl", log.lines);
  io::save_experiment_config(r.cfg, r.out / "config.json");
  err << "wrote " << (r.out / "vae.ckpt").string() << "\n";
  return 0;
}

int cmd_distill(const Common& c, const std::string& teacher_path, std::ostream& out, std::ostream& err) {
  const io::Models teacher = load_models(teacher_path);
  if (!teacher.vae) throw FormatError("teacher checkpoint holds no VAE");
  Run r = start(c, err, stored_config(teacher));
  Rng rng(r.cfg.seed);
  Dataset shape = r.data.train;  // only its geometry is used
  if (shape.dim() != teacher.vae->config().data_dim)
    throw ShapeError("teacher data dim does not match the configured dataset");
  Circuit circuit = rebuild(r.cfg.builder, builder_config_for(r.cfg, shape), rng);
  if (circuit.num_embedding() != teacher.vae->config().embedding_dim)
    throw ShapeError("student embedding dim differs from the teacher's");
  nn::Decoder decoder(decoder_config_for(r.cfg, shape, circuit.num_embedding()), rng);
  DistillConfig dc;
  dc.train = r.cfg.train;
  dc.max_value = shape.max_value;
  MetricsLog log{out, {}};
  distill(dc, *teacher.vae, circuit, decoder, log.sink());
  io::Models m;
  m.circuit = std::move(circuit);
  m.decoder = std::move(decoder);
  m.extra = {{"kind", "apc"}, {"config", to_json(r.cfg)}, {"distilled_from", teacher_path}};
  io::save_checkpoint(m, r.out / "student.ckpt");
  io::write_file_atomic(r.out / "distill_metrics.jsonl", log.lines);
  err << "wrote " << (r.out / "student.ckpt").string() << "\n";
  return 0;
}

int cmd_eval(const Common& c, const std::string& ckpt, const std::string& corruption, const std::string& pattern,
             bool use_mpe, std::ostream& out, std::ostream& err) {
  const io::Models m = load_models(ckpt);
  Run r = start(c, err, stored_config(m));
  eval::SweepConfig sc;
  sc.levels = r.cfg.eval.levels;
  sc.seeds = r.cfg.eval.seeds;
  sc.metrics = r.cfg.eval.metrics;
  sc.probe.iterations = r.cfg.eval.probe_iterations;
  sc.probe.batch = r.cfg.eval.probe_batch;
  sc.probe.lr = r.cfg.eval.probe_lr;
  sc.probe.seed = r.cfg.seed;
  sc.seed = r.cfg.seed;
  if (corruption == "sweep") {
    if (!pattern.empty()) {
      sc.mar = true;
      sc.pattern = eval::mar_pattern_from_string(pattern);
    }
  } else {
    const auto spec = eval::CorruptionSpec::parse(corruption);
    if (spec.kind == eval::CorruptionSpec::Kind::MAR) {
      sc.mar = true;
      sc.pattern = spec.pattern;
      sc.levels = {spec.severity};
    } else {
      sc.levels = {spec.p};
    }
  }
  Dataset test = r.data.test;
  if (r.cfg.eval.max_test && r.cfg.eval.max_test < test.size()) {
    std::vector<std::size_t> idx(r.cfg.eval.max_test);
    std::iota(idx.begin(), idx.end(), 0);
    test = test.rows(idx);
  }
  const eval::Model model = model_from(m, r.data.train, use_mpe || r.cfg.eval.mpe);
  const eval::SweepResult res = eval::robustness_sweep(model, r.data.train, test, sc);
  const std::string table = eval::to_table(res);
  out << table;
  const std::string stem = "eval_" + res.model;
  io::write_file_atomic(r.out / (stem + ".tsv"), table);
  io::write_file_atomic(r.out / (stem + ".json"), eval::to_json(res).dump(2) + "\n");
  if (res.levels.size() > 1) {
    std::vector<eval::Series> series;
    for (const auto& metric : res.metrics) series.push_back({res.model + " " + metric, res.levels, res.mean(metric)});
    eval::write_svg_plot(series, res.model + (sc.mar ? " MAR " + eval::to_string(sc.pattern) : " MCAR"),
                         sc.mar ? "severity" : "missing fraction", "metric", r.out / (stem + ".svg"));
  }
  return 0;
}

int cmd_sample(const Common& c, const std::string& ckpt, std::size_t n, std::size_t cols, std::ostream& out,
               std::ostream& err) {
  const io::Models m = load_models(ckpt);
  if (!m.circuit || !m.decoder) throw FormatError("sample needs an APC checkpoint");
  const io::ExperimentConfig cfg = resolve_config(c, stored_config(m));
  fs::create_directories(c.out);
  Rng rng(cfg.seed);
  const JointSamples s = sample_joint(*m.circuit, rng, n);
  const ag::Array x = m.decoder->operator()(ag::Var::constant(s.z)).value();
  std::ostringstream rows;
  rows.precision(17);
  for (std::size_t i = 0; i < x.dim(0); ++i)
    for (std::size_t j = 0; j < x.dim(1); ++j) rows << x.at(i, j) << (j + 1 < x.dim(1) ? "," : "\n");
  io::write_file_atomic(fs::path(c.out) / "samples.csv", rows.str());
  // image geometry from the data config; tabular data gets rows only
  const DatasetSplit data = io::load_data(cfg.data, cfg.seed);
  const Dataset& d = data.train;
  if (d.height && d.width && (d.channels == 1 || d.channels == 3) && d.dim() == x.dim(1)) {
    const fs::path img = fs::path(c.out) / (d.channels == 1 ? "samples.pgm" : "samples.ppm");
    io::write_image_grid(x, d.height, d.width, d.channels, cols, img);
    err << "wrote " << img.string() << "\n";
  }
  out << json{{"samples", n}, {"dim", x.dim(1)}}.dump() << "\n";
  return 0;
}

int cmd_ood(const Common& c, const std::string& ckpt, std::size_t family, const std::string& ood_path,
            std::size_t bins, std::ostream& out, std::ostream& err) {
  const io::Models m = load_models(ckpt);
  if (!m.circuit) throw FormatError("ood needs a checkpoint with a circuit");
  Run r = start(c, err, stored_config(m));
  Dataset other;
  if (!ood_path.empty()) {
    other = io::load_debd(ood_path);
  } else {
    if (r.cfg.data.format != "synthetic") throw FormatError("ood: --ood-data is required for non-synthetic data");
    if (family == r.cfg.data.synthetic_family) throw DomainError("ood: --family must differ from the training family");
    other = io::synthetic_clusters(r.data.test.size(), 3000 + r.cfg.seed, int(family));
  }
  if (other.dim() != r.data.test.dim()) throw ShapeError("ood data has a different number of features");
  Rng rng(r.cfg.seed);
  const eval::OodResult res = eval::ood_histogram(*m.circuit, r.data.test.x, other.x, rng, bins);
  io::write_file_atomic(r.out / "ood.json", eval::to_json(res).dump(2) + "\n");
  auto centers = [&](const eval::Histogram& h) {
    std::vector<double> x, y;
    const double w = (h.hi - h.lo) / double(h.counts.size());
    for (std::size_t i = 0; i < h.counts.size(); ++i) {
      x.push_back(h.lo + (double(i) + 0.5) * w);
      y.push_back(double(h.counts[i]));
    }
    return std::make_pair(x, y);
  };
  const auto [xi, yi] = centers(res.in_hist);
  const auto [xo, yo] = centers(res.out_hist);
  eval::write_svg_plot({{"in-distribution", xi, yi}, {"out-of-distribution", xo, yo}}, "log p(z)", "log p(z)",
                       "count", r.out / "ood.svg");
  out << json{{"auroc", res.auroc}, {"in", res.in_scores.size()}, {"out", res.out_scores.size()}}.dump() << "\n";
  return 0;
}

// Config values apply only where the flag was not given.
void apply_bench_config(bench::BenchConfig& bc, std::vector<std::string>& estimators, const std::string& path,
                        const CLI::App* cmd) {
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
  auto unset = [&](const char* flag) { return cmd->count(std::string("--") + flag) == 0 && j.contains(flag); };
  try {
    if (unset("dims")) bc.dims = j.at("dims").get<std::vector<std::size_t>>();
    if (unset("iterations")) bc.iterations = j.at("iterations").get<std::size_t>();
    if (unset("batch")) bc.batch = j.at("batch").get<std::size_t>();
    if (unset("lr")) bc.lr = j.at("lr").get<double>();
    if (unset("seeds")) bc.seeds = j.at("seeds").get<std::size_t>();
    if (unset("seed")) bc.first_seed = j.at("seed").get<std::uint64_t>();
    if (unset("tau")) bc.tau = j.at("tau").get<double>();
    if (unset("estimators")) estimators = j.at("estimators").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

int cmd_bench(const bench::BenchConfig& bc, std::size_t every, const std::string& out_dir, std::ostream& out) {
  fs::create_directories(out_dir);
  const auto runs = bench::run_all(bc);
  const auto summary = bench::summarize(runs);
  io::write_file_atomic(fs::path(out_dir) / "simple_bench_trajectory.tsv", bench::trajectory_table(runs, every));
  io::write_file_atomic(fs::path(out_dir) / "simple_bench_summary.tsv", bench::summary_table(summary));
  io::write_file_atomic(fs::path(out_dir) / "simple_bench_summary.json", bench::to_json(summary).dump(2) + "\n");
  out << bench::summary_table(summary);
  return 0;
}

int cmd_validate(const Common& c, const std::string& ckpt, std::ostream& out, std::ostream& err) {
  Circuit circuit;
  if (!ckpt.empty()) {
    io::Models m = io::load_checkpoint(ckpt);
    if (!m.circuit) throw FormatError("checkpoint holds no circuit");
    circuit = std::move(*m.circuit);
  } else {
    Run r = start(c, err);
    Rng rng(r.cfg.seed);
    circuit = rebuild(r.cfg.builder, builder_config_for(r.cfg, r.data.train), rng);
  }
  const ValidationReport rep = validate_structure(circuit);
  out << (rep.valid() ? "valid" : "invalid") << ": " << circuit.size() << " units, " << circuit.parameter_count() << " parameters\n";
  if (!rep.valid()) out << rep.summary() << "\n";
  return rep.valid() ? 0 : 2;
}

}  // namespace

int cli_dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Autoencoding probabilistic circuits: training, evaluation and benchmarks", "apc"};
  app.require_subcommand(1, 1);
  app.failure_message(CLI::FailureMessage::help);

  Common train_c, vae_c, distill_c, eval_c, sample_c, ood_c, validate_c;
  std::string teacher, ckpt, corruption = "sweep", pattern, ood_path;
  bool use_mpe = false;
  std::size_t n_samples = 16, cols = 8, family = 1, bins = 30, every = 10;

  auto* train = app.add_subcommand("train", "train an APC (circuit encoder + neural decoder)");
  add_common(train, train_c);
  auto* train_vae_cmd = app.add_subcommand("train-vae", "train the VAE baseline");
  add_common(train_vae_cmd, vae_c);
  auto* distill_cmd = app.add_subcommand("distill", "distill a VAE teacher into an APC student");
  add_common(distill_cmd, distill_c);
  distill_cmd->add_option("--teacher", teacher, "VAE checkpoint")->required()->check(CLI::ExistingFile);
  auto* eval_cmd = app.add_subcommand("eval", "robustness evaluation under missing data");
  add_common(eval_cmd, eval_c);
  eval_cmd->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--corruption", corruption, "mcar:<p> | mar:<pattern>:<severity> | sweep")
      ->capture_default_str();
  eval_cmd->add_option("--pattern", pattern, "with sweep: MAR pattern instead of MCAR");
  eval_cmd->add_flag("--mpe", use_mpe, "MPE embeddings instead of posterior samples");
  auto* sample_cmd = app.add_subcommand("sample", "draw z from the circuit and decode");
  add_common(sample_cmd, sample_c);
  sample_cmd->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  sample_cmd->add_option("-n,--num", n_samples)->capture_default_str();
  sample_cmd->add_option("--cols", cols, "images per grid row")->capture_default_str();
  auto* ood_cmd = app.add_subcommand("ood", "log p(z) histograms for in- vs out-of-distribution data");
  add_common(ood_cmd, ood_c);
  ood_cmd->add_option("--checkpoint", ckpt)->required()->check(CLI::ExistingFile);
  ood_cmd->add_option("--family", family, "synthetic family used as OOD data")->capture_default_str();
  ood_cmd->add_option("--ood-data", ood_path, "DEBD file used as OOD data")->check(CLI::ExistingFile);
  ood_cmd->add_option("--bins", bins)->capture_default_str();

  bench::BenchConfig bc;
  std::vector<std::string> estimators;
  std::string bench_out = ".";
  auto* bench_cmd = app.add_subcommand("simple-bench", "SIMPLE vs Gumbel-Softmax on a single sum unit");
  bench_cmd->add_option("--dims", bc.dims)->capture_default_str();
  bench_cmd->add_option("--iterations", bc.iterations)->capture_default_str();
  bench_cmd->add_option("--batch", bc.batch)->capture_default_str();
  bench_cmd->add_option("--lr", bc.lr)->capture_default_str();
  bench_cmd->add_option("--seeds", bc.seeds)->capture_default_str();
  bench_cmd->add_option("--tau", bc.tau, "Gumbel-Softmax temperature")->capture_default_str();
  bench_cmd->add_option("--estimators", estimators, "simple, gumbel-softmax");
  bench_cmd->add_option("--every", every, "trajectory row stride")->capture_default_str();
  bench_cmd->add_option("--out", bench_out)->capture_default_str();
  bench_cmd->add_option("--seed", bc.first_seed, "first seed")->capture_default_str();
  std::string bench_config;
  bench_cmd->add_option("--config", bench_config, "JSON with any of the flag names as keys")
      ->check(CLI::ExistingFile);

  auto* validate = app.add_subcommand("validate", "check smoothness/decomposability of a circuit");
  add_common(validate, validate_c);
  validate->add_option("--checkpoint", ckpt, "checkpoint (default: a fresh build from the config)")
      ->check(CLI::ExistingFile);

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }

  try {
    if (*train) return cmd_train(train_c, out, err);
    if (*train_vae_cmd) return cmd_train_vae(vae_c, out, err);
    if (*distill_cmd) return cmd_distill(distill_c, teacher, out, err);
    if (*eval_cmd) return cmd_eval(eval_c, ckpt, corruption, pattern, use_mpe, out, err);
    if (*sample_cmd) return cmd_sample(sample_c, ckpt, n_samples, cols, out, err);
    if (*ood_cmd) return cmd_ood(ood_c, ckpt, family, ood_path, bins, out, err);
    if (*bench_cmd) {
      if (!bench_config.empty()) apply_bench_config(bc, estimators, bench_config, bench_cmd);
      if (!estimators.empty()) {
        bc.estimators.clear();
        for (const auto& s : estimators) bc.estimators.push_back(bench::estimator_from_string(s));
      }
      return cmd_bench(bc, every, bench_out, out);
    }
    if (*validate) return cmd_validate(validate_c, ckpt, out, err);
  } catch (const NumericalError& e) {
    err << "apc: " << e.what() << "\n" << e.snapshot.dump() << "\n";
    return 3;
  } catch (const std::exception& e) {
    err << "apc: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

int cli_dispatch(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_dispatch(args, out, err);
}

}  // namespace apc::cli
