#include "quadra/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "quadra/autobuild.hpp"
#include "quadra/diagnostics.hpp"
#include "quadra/error.hpp"
#include "quadra/trainer.hpp"

namespace quadra {

namespace fs = std::filesystem;
using nlohmann::json;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const NumericError*>(&e)) return kExitDiverged;
  if (dynamic_cast<const IoError*>(&e) || dynamic_cast<const IngestionError*>(&e) ||
      dynamic_cast<const IntegrityError*>(&e) || dynamic_cast<const fs::filesystem_error*>(&e)) {
    return kExitIo;
  }
  return kExitUsage;
}

namespace {

std::string resolve_out(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("QUADRA_OUT"); env && *env) return env;
  return {};
}

void make_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir, "cannot create directory: " + ec.message());
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(path, "cannot open for writing");
  out << text;
  if (!out) throw IoError(path, "write failed");
}

struct TrainArgs {
  std::string config, data, out, mode = "hybrid";
  std::optional<std::uint64_t> seed;
  std::size_t epochs = 0, train_limit = 0, test_limit = 0;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  ModelConfig cfg = load_config(a.config);
  const BackpropMode mode = parse_mode(a.mode);
  if (a.seed) cfg.train.seed = *a.seed;
  if (a.epochs) cfg.train.epochs = a.epochs;
  check_mode_support(cfg, mode);
  const std::string dir = resolve_out(a.out);
  if (dir.empty()) throw ConfigError("no output directory: pass one or set QUADRA_OUT");
  DatasetPair data = load_dataset(cfg.train.dataset, a.data);
  if (a.train_limit) data.train = head(data.train, a.train_limit);
  if (a.test_limit) data.test = head(data.test, a.test_limit);

  make_dir(dir);
  json checksums = json::object();
  for (const auto& [file, sum] : data.checksums) {
    std::ostringstream hex;
    hex << std::hex << std::setw(16) << std::setfill('0') << sum;
    checksums[file] = hex.str();
  }
  const json manifest = {{"tool_version", kToolVersion},
                         {"config", serialize_config(cfg)},
                         {"seed", cfg.train.seed},
                         {"mode", mode_tag(mode)},
                         {"dataset", cfg.train.dataset},
                         {"dataset_checksums_fnv1a64", checksums},
                         {"standardization", {{"mean", data.norm.mean}, {"std", data.norm.std}}},
                         {"train_samples", data.train.size()},
                         {"test_samples", data.test.size()},
                         {"output_directory", dir}};
  write_file((fs::path(dir) / "manifest.json").string(), manifest.dump(2) + "\n");

  TrainOptions opt;
  opt.mode = mode;
  opt.on_epoch = [&out](const EpochRecord& r) {
    out << "epoch " << r.epoch << "  lr " << r.lr << "  loss " << r.train_loss << "  train_acc "
        << r.train_acc << "  test_acc " << r.test_acc << "  peak_cached " << r.peak_cached << "\n";
  };
  auto result = train(cfg, init_model(cfg, cfg.train.seed), data.train, &data.test, opt);

  emit_csv(history_table(result.history), (fs::path(dir) / "metrics.csv").string());
  save_checkpoint(cfg, result.params, (fs::path(dir) / "checkpoint.bin").string());
  const auto grad_dir = fs::path(dir) / "grad_stats";
  make_dir(grad_dir.string());
  for (const auto& s : result.gradient_stats) {
    emit_csv(gradient_stats_table({s}),
             (grad_dir / (std::to_string(s.epoch) + "_" + s.layer + "_" + s.role + ".csv")).string());
  }
  if (result.diverged) {
    out << "diverged: " << result.divergence << "; checkpoint holds the last good parameters\n";
    return kExitDiverged;
  }
  return kExitOk;
}

struct ConvertArgs {
  std::string config, family, data, out;
  bool reduce = false;
  double budget = 0.01;
  std::size_t finetune = 2, train_limit = 0, test_limit = 0;
  std::string mode = "hybrid";
};

int cmd_convert(const ConvertArgs& a, std::ostream& out) {
  const ModelConfig src = load_config(a.config);
  const ModelConfig converted = replace_layers(src, parse_family(a.family));
  out << "converted " << converted.layers.size() << " layers to " << a.family << "\n";
  std::string path = a.out;
  if (path.empty()) {
    const std::string dir = resolve_out("");
    if (dir.empty()) throw ConfigError("no output path: pass --out or set QUADRA_OUT");
    make_dir(dir);
    path = (fs::path(dir) / (converted.name + ".cfg")).string();
  } else if (fs::path(path).has_parent_path()) {
    make_dir(fs::path(path).parent_path().string());
  }
  if (!a.reduce) {
    save_config(converted, path);
    out << "wrote " << path << "\n";
    return kExitOk;
  }
  if (a.data.empty()) throw ConfigError("--reduce needs --data");
  const BackpropMode mode = parse_mode(a.mode);
  DatasetPair data = load_dataset(converted.train.dataset, a.data);
  if (a.train_limit) data.train = head(data.train, a.train_limit);
  if (a.test_limit) data.test = head(data.test, a.test_limit);
  TrainOptions opt;
  opt.mode = mode;
  opt.gradient_stats = false;
  auto trained = train(converted, init_model(converted, converted.train.seed), data.train, nullptr, opt);
  if (trained.diverged) {
    out << "training diverged: " << trained.divergence << "\n";
    return kExitDiverged;
  }
  RIOptions ri;
  ri.finetune_epochs = a.finetune;
  ri.mode = mode;
  auto r = reduce(converted, trained.params, EvalSets{&data.train, &data.test}, a.budget, ri);
  save_config(r.cfg, path);
  CsvTable report;
  for (std::size_t i = 0; i < r.reports.size(); ++i) {
    auto t = ri_table(r.reports[i], i + 1);
    report.header = t.header;
    report.rows.insert(report.rows.end(), t.rows.begin(), t.rows.end());
  }
  if (report.header.empty()) report = ri_table({}, 0);
  emit_csv(report, path + ".ri.csv");
  emit_csv(removal_table(r.log), path + ".removals.csv");
  out << "accuracy " << r.initial_acc << " -> " << r.final_acc << ", removed " << r.log.size()
      << " layer(s); " << r.stop_reason << "\n";
  for (const auto& s : r.log) out << "  removed layer " << s.layer << " (" << s.description << ")\n";
  out << "wrote " << path << "\n";
  return kExitOk;
}

struct ProfileArgs {
  std::string config, out;
  std::size_t batch = 256;
  std::uint64_t budget = 0;
};

int cmd_profile(const ProfileArgs& a, std::ostream& out) {
  const ModelConfig cfg = load_config(a.config);
  const auto p = profile_memory(cfg, a.batch, a.budget);
  out << "model " << cfg.name << ", batch " << a.batch << "\n";
  out << "auto   peak cached bytes " << p.auto_ledger.peak_cached() << "\n";
  out << "hybrid peak cached bytes " << p.hybrid_ledger.peak_cached() << "\n";
  out << std::fixed << std::setprecision(2) << "saving " << 100.0 * p.saving
      << "% (reference figure 26.7%)\n";
  out.unsetf(std::ios::fixed);
  if (a.budget) {
    out << "budget " << a.budget << " bytes: auto " << (p.auto_over_budget ? "EXCEEDS" : "fits")
        << ", hybrid " << (p.hybrid_over_budget ? "EXCEEDS" : "fits") << "\n";
  }
  const std::string dir = resolve_out(a.out);
  if (!dir.empty()) {
    make_dir(dir);
    CsvTable layers;
    layers.header = {"layer", "auto_cached_bytes", "hybrid_cached_bytes"};
    for (const auto& l : p.auto_ledger.layers()) {
      layers.rows.push_back({l.layer, std::to_string(l.cached),
                             std::to_string(p.hybrid_ledger.layer_cached(l.layer))});
    }
    emit_csv(layers, (fs::path(dir) / "profile_layers.csv").string());
    CsvTable curve;
    curve.header = {"mode", "step", "event", "cached_bytes", "resident_bytes"};
    for (const auto* m : {&p.auto_ledger, &p.hybrid_ledger}) {
      const std::string tag = m == &p.auto_ledger ? "auto" : "hybrid";
      for (std::size_t i = 0; i < m->timeline().size(); ++i) {
        const auto& e = m->timeline()[i];
        curve.rows.push_back({tag, std::to_string(i), e.label, std::to_string(e.cached),
                              std::to_string(e.resident)});
      }
    }
    emit_csv(curve, (fs::path(dir) / "profile_timeline.csv").string());
  }
  return kExitOk;
}

struct InspectArgs {
  std::string checkpoint, data, out;
  std::optional<std::size_t> attention;
  std::optional<double> constant;
  std::size_t layer = 0;
};

int cmd_inspect(const InspectArgs& a, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(a.checkpoint);
  const std::string dir = resolve_out(a.out);
  if (dir.empty()) throw ConfigError("no output directory: pass --out or set QUADRA_OUT");
  make_dir(dir);
  const auto weights = collect_gradient_stats(named_parameters(ck.params), 0);
  auto table = gradient_stats_table(weights);
  table.header[0] = "checkpoint";
  emit_csv(table, (fs::path(dir) / "weight_stats.csv").string());
  out << "model " << ck.cfg.name << ": " << ck.cfg.layers.size() << " layers, "
      << parameter_count(ck.cfg) << " parameters\n";
  if (!a.attention && !a.constant) return kExitOk;

  Tensor image;
  std::size_t id = a.attention.value_or(0);
  if (a.constant) {
    Shape s = dataset_input_shape(ck.cfg.train.dataset);
    image = Tensor::full(s, *a.constant);
  } else {
    if (a.data.empty()) throw ConfigError("--attention needs --data (or --constant)");
    const DatasetPair data = load_dataset(ck.cfg.train.dataset, a.data);
    if (id >= data.test.size()) {
      throw InputError("cli", "image index " + std::to_string(id) + " out of range");
    }
    const std::size_t idx[] = {id};
    image = gather_images(data.test, idx);
  }
  const auto map = activation_attention(ck.cfg, ck.params, image, a.layer, id);
  const std::string name = a.constant ? "attn_constant_" + std::to_string(a.layer) + ".pgm"
                                      : "attn_" + std::to_string(id) + "_" + std::to_string(a.layer) + ".pgm";
  emit_pgm(map, (fs::path(dir) / name).string());
  out << "wrote " << (fs::path(dir) / name).string() << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Quadratic neural network toolkit", "quadra"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model described by a config file");
  train_cmd->add_option("config", ta.config, "Config file")->required()->check(CLI::ExistingFile);
  train_cmd->add_option("data", ta.data, "Dataset directory")->required();
  train_cmd->add_option("out", ta.out, "Output directory (default: $QUADRA_OUT)");
  train_cmd->add_option("--mode", ta.mode, "auto | hybrid")->check(CLI::IsMember({"auto", "hybrid"}));
  train_cmd->add_option("--seed", ta.seed, "Override the config seed");
  train_cmd->add_option("--epochs", ta.epochs, "Override the config epochs");
  train_cmd->add_option("--train-limit", ta.train_limit, "Use only the first N training images");
  train_cmd->add_option("--test-limit", ta.test_limit, "Use only the first N test images");

  ConvertArgs ca;
  auto* convert_cmd = app.add_subcommand("convert", "Convert a first-order config to quadratic neurons");
  convert_cmd->add_option("config", ca.config, "First-order config file")->required()->check(CLI::ExistingFile);
  convert_cmd->add_option("--family", ca.family, "Target neuron family")->required();
  convert_cmd->add_flag("--reduce", ca.reduce, "Train, then prune layers greedily by RI");
  convert_cmd->add_option("--budget", ca.budget, "Accuracy budget for --reduce (fraction)");
  convert_cmd->add_option("--data", ca.data, "Dataset directory (for --reduce)");
  convert_cmd->add_option("--out", ca.out, "Converted config path (default: $QUADRA_OUT/<name>.cfg)");
  convert_cmd->add_option("--finetune-epochs", ca.finetune, "Fine-tune epochs per ablation");
  convert_cmd->add_option("--mode", ca.mode, "auto | hybrid")->check(CLI::IsMember({"auto", "hybrid"}));
  convert_cmd->add_option("--train-limit", ca.train_limit, "Use only the first N training images");
  convert_cmd->add_option("--test-limit", ca.test_limit, "Use only the first N test images");

  ProfileArgs pa;
  auto* profile_cmd = app.add_subcommand("profile", "Project cached-intermediate memory for both modes");
  profile_cmd->add_option("config", pa.config, "Config file")->required()->check(CLI::ExistingFile);
  profile_cmd->add_option("--batch", pa.batch, "Batch size");
  profile_cmd->add_option("--budget", pa.budget, "Flag projections above this many bytes");
  profile_cmd->add_option("--out", pa.out, "Write CSVs here (default: $QUADRA_OUT, optional)");

  InspectArgs ia;
  auto* inspect_cmd = app.add_subcommand("inspect", "Weight statistics and attention maps from a checkpoint");
  inspect_cmd->add_option("checkpoint", ia.checkpoint, "Checkpoint blob (manifest at <path>.json)")->required();
  inspect_cmd->add_option("--attention", ia.attention, "Test-set image index");
  inspect_cmd->add_option("--constant", ia.constant, "Use a constant image with this value instead");
  inspect_cmd->add_option("--layer", ia.layer, "Layer index for the attention map");
  inspect_cmd->add_option("--data", ia.data, "Dataset directory");
  inspect_cmd->add_option("--out", ia.out, "Output directory (default: $QUADRA_OUT)");

  try {
    std::vector<std::string> rev(args.rbegin(), args.rend());
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(ta, out);
    if (convert_cmd->parsed()) return cmd_convert(ca, out);
    if (profile_cmd->parsed()) return cmd_profile(pa, out);
    if (inspect_cmd->parsed()) return cmd_inspect(ia, out);
  } catch (const Error& e) {
    std::string msg = e.what();
    if (msg.rfind(e.component() + ": ", 0) == 0) msg.erase(0, e.component().size() + 2);
    err << "error [" << e.component() << "]: " << msg << "\n";
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    err << "error [io]: " << e.what() << "\n";
    return kExitIo;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace quadra
