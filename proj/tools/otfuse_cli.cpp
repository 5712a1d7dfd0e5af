// otfuse: train, fuse, prune and evaluate networks; run experiment presets.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "otfuse/checkpoint.hpp"
#include "otfuse/dataset.hpp"
#include "otfuse/experiments.hpp"
#include "otfuse/fusion.hpp"
#include "otfuse/pruning.hpp"
#include "otfuse/report.hpp"
#include "otfuse/training.hpp"

namespace fs = std::filesystem;
using namespace otfuse;
using nlohmann::json;

namespace {

/// A flag value that failed validation.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(s);
  while (std::getline(ss, cur, sep))
    if (!cur.empty()) out.push_back(cur);
  return out;
}

double to_double(const std::string& s, const std::string& flag) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size() && std::isfinite(v)) return v;
  } catch (const std::exception&) {
  }
  throw UsageError(flag + ": '" + s + "' is not a number");
}

Index to_index(const std::string& s, const std::string& flag) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(s, &used);
    if (used == s.size()) return static_cast<Index>(v);
  } catch (const std::exception&) {
  }
  throw UsageError(flag + ": '" + s + "' is not an integer");
}

std::vector<Index> index_list(const std::string& s, const std::string& flag, Index min_value = 1) {
  std::vector<Index> out;
  for (const auto& t : split(s, ',')) {
    out.push_back(to_index(t, flag));
    if (out.back() < min_value) throw UsageError(flag + ": values must be at least " + std::to_string(min_value));
  }
  if (out.empty()) throw UsageError(flag + ": empty list");
  return out;
}

std::vector<double> double_list(const std::string& s, const std::string& flag) {
  std::vector<double> out;
  for (const auto& t : split(s, ',')) out.push_back(to_double(t, flag));
  if (out.empty()) throw UsageError(flag + ": empty list");
  return out;
}

/// "lo:hi:step" or a comma list.
std::vector<double> wb_values(const std::string& s) {
  const auto parts = split(s, ':');
  if (parts.size() == 3) {
    const double lo = to_double(parts[0], "--sweep-wb"), hi = to_double(parts[1], "--sweep-wb"),
                 step = to_double(parts[2], "--sweep-wb");
    if (!(step > 0) || hi < lo) throw UsageError("--sweep-wb: need lo <= hi and step > 0");
    auto v = wb_grid(lo, hi, step);
    // Endpoints 0 and 1 reduce to a single model; the sweep keeps interior points.
    v.erase(std::remove_if(v.begin(), v.end(), [](double x) { return x <= 0.0 || x >= 1.0; }), v.end());
    if (v.empty()) throw UsageError("--sweep-wb: no values strictly between 0 and 1");
    return v;
  }
  auto v = double_list(s, "--sweep-wb");
  for (double x : v)
    if (!(x >= 0.0 && x <= 1.0)) throw UsageError("--sweep-wb: values must lie in [0, 1]");
  return v;
}

std::string fnv1a64(const std::string& bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void require_file(const std::string& path, const std::string& flag) {
  if (!fs::is_regular_file(path)) throw UsageError(flag + ": no such file '" + path + "'");
}

/// Collects output files under the output directory and writes the manifest.
class Outputs {
 public:
  Outputs(std::string dir, std::string command, json config)
      : dir_(std::move(dir)), command_(std::move(command)), config_(std::move(config)) {}

  std::string path(const std::string& name) const { return (fs::path(dir_) / name).string(); }

  void open_dir() const {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw Error("cannot create output directory '" + dir_ + "': " + ec.message());
  }

  void file(const std::string& name, const std::string& bytes) {
    std::ofstream f(path(name), std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + path(name));
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw Error("write failed for " + path(name));
    files_.push_back({{"path", name}, {"bytes", bytes.size()}, {"fnv1a64", fnv1a64(bytes)}});
  }

  void model(const std::string& name, const NetworkModel& m, const json& meta) { file(name, checkpoint_bytes(m, meta)); }
  void table(const std::string& name, const Table& t, ReportFormat f) { file(name, format_report(t, f)); }

  json& summary() { return summary_; }

  void finish() {
    json manifest{{"command", command_}, {"config", config_}, {"outputs", files_}, {"summary", summary_}};
    const std::string text = manifest.dump(2) + "\n";
    std::ofstream f(path("manifest.json"), std::ios::binary | std::ios::trunc);
    f << text;
    if (!f) throw Error("cannot write manifest");
  }

 private:
  std::string dir_, command_;
  json config_;
  json files_ = json::array();
  json summary_ = json::object();
};

struct Common {
  std::string data;
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  Index train_samples = 0;
  std::string format = "csv";
};

std::string report_ext(ReportFormat f) { return f == ReportFormat::csv ? ".csv" : ".jsonl"; }

DataSplit load(const Common& c) {
  DataSplit d = load_data(c.data);
  if (c.train_samples > 0) d.train = subsample(d.train, c.train_samples, c.seed);
  return d;
}

json data_json(const Common& c) {
  return {{"source", c.data.empty() ? std::string(std::getenv("OTFUSE_DATA_DIR") ? "$OTFUSE_DATA_DIR" : "synthetic")
                                    : c.data},
          {"train_samples", c.train_samples}};
}

struct TrainFlags {
  double lr = 0.01, momentum = 0.5;
  Index batch = 64;
  int epochs = 10;

  void add(CLI::App* app) {
    app->add_option("--lr", lr, "learning rate")->capture_default_str()->check(CLI::NonNegativeNumber);
    app->add_option("--momentum", momentum, "SGD momentum")->capture_default_str()->check(CLI::Range(0.0, 0.999999));
    app->add_option("--batch", batch, "mini-batch size")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--epochs", epochs, "training epochs")->capture_default_str()->check(CLI::PositiveNumber);
  }
  TrainConfig config(std::uint64_t seed) const {
    TrainConfig c;
    c.lr = lr;
    c.momentum = momentum;
    c.batch_size = batch;
    c.epochs = epochs;
    c.seed = seed;
    return c;
  }
  json to_json() const { return {{"lr", lr}, {"momentum", momentum}, {"batch", batch}, {"epochs", epochs}}; }
};

struct FusionFlags {
  std::string align = "acts", solver = "exact", histogram = "uniform";
  double reg = 0.05;
  Index samples = 200;
  int cost_exponent = 1;

  void add(CLI::App* app) {
    app->add_option("--align", align, "neuron support: acts or wts")
        ->capture_default_str()
        ->check(CLI::IsMember({"acts", "wts"}));
    app->add_option("--solver", solver, "OT solver: exact or sinkhorn")
        ->capture_default_str()
        ->check(CLI::IsMember({"exact", "sinkhorn"}));
    app->add_option("--reg", reg, "Sinkhorn regularization")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--samples", samples, "sample batch size for acts")->capture_default_str()->check(CLI::PositiveNumber);
    app->add_option("--histogram", histogram, "neuron masses: uniform or importance")
        ->capture_default_str()
        ->check(CLI::IsMember({"uniform", "importance"}));
    app->add_option("--cost-exponent", cost_exponent, "ground cost is Euclidean distance to this power")
        ->capture_default_str()
        ->check(CLI::Range(1, 8));
  }
  FusionConfig config() const {
    FusionConfig c;
    c.alignment = align == "acts" ? Alignment::acts : Alignment::wts;
    c.solver = solver == "exact" ? SolverKind::exact : SolverKind::sinkhorn;
    c.regularization = reg;
    c.histogram = histogram == "uniform" ? HistogramMode::uniform : HistogramMode::importance;
    c.ground_cost_exponent = cost_exponent;
    return c;
  }
  bool needs_data() const { return align == "acts" || histogram == "importance"; }
  json to_json() const {
    return {{"align", align}, {"solver", solver}, {"reg", reg}, {"samples", samples}, {"histogram", histogram},
            {"cost_exponent", cost_exponent}};
  }
};

json model_meta(const std::string& how, const json& config) { return {{"produced_by", how}, {"config", config}}; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optimal-transport fusion of feedforward networks"};
  app.require_subcommand(1);
  Common common;
  app.add_option("--data", common.data, "dataset: 'synthetic' or a directory (default $OTFUSE_DATA_DIR, else synthetic)");
  app.add_option("--out-dir", common.out_dir, "directory for all outputs")->capture_default_str();
  app.add_option("--seed", common.seed, "global seed")->capture_default_str();
  app.add_option("--train-samples", common.train_samples, "subsample the training set (0 = all)")
      ->check(CLI::NonNegativeNumber);
  app.add_option("--format", common.format, "report format: csv or json-lines")
      ->capture_default_str()
      ->check(CLI::IsMember({"csv", "json-lines"}));

  // train
  CLI::App* train_cmd = app.add_subcommand("train", "train an MLP");
  TrainFlags train_flags;
  std::string arch = "400,200,100", train_out = "model.otfm";
  train_cmd->add_option("--arch", arch, "hidden widths, comma separated")->capture_default_str();
  train_flags.add(train_cmd);
  train_cmd->add_option("--out", train_out, "checkpoint name")->capture_default_str();

  // fuse
  CLI::App* fuse_cmd = app.add_subcommand("fuse", "fuse models by OT alignment");
  std::string models_arg, estimate_arg, weights_arg, fuse_report = "fuse_report", fuse_out = "fused.otfm";
  FusionFlags fusion_flags;
  fuse_cmd->add_option("--models", models_arg, "checkpoints, comma separated")->required();
  fuse_cmd->add_option("--estimate", estimate_arg, "checkpoint path or model index (default: last model)");
  fuse_cmd->add_option("--weights", weights_arg, "model weights eta, comma separated (default uniform)");
  fusion_flags.add(fuse_cmd);
  fuse_cmd->add_option("--report", fuse_report, "per-layer distance report name")->capture_default_str();
  fuse_cmd->add_option("--out", fuse_out, "fused checkpoint name")->capture_default_str();

  // prune
  CLI::App* prune_cmd = app.add_subcommand("prune", "structured pruning, optionally fused with the dense model");
  std::string prune_model, prune_layers = "all", criterion = "l1", fuse_dense = "off", prune_out = "pruned.otfm";
  double ratio = 0.5, eta = 0.5;
  prune_cmd->add_option("--model", prune_model, "checkpoint")->required();
  prune_cmd->add_option("--layers", prune_layers, "hidden layer indices or 'all'")->capture_default_str();
  prune_cmd->add_option("--ratio", ratio, "fraction of neurons removed")->capture_default_str()->check(CLI::Range(0.0, 0.999999));
  prune_cmd->add_option("--criterion", criterion, "l1, l2 or random")
      ->capture_default_str()
      ->check(CLI::IsMember({"l1", "l2", "random"}));
  prune_cmd->add_option("--fuse-dense", fuse_dense, "fuse the dense model into the pruned one")
      ->capture_default_str()
      ->check(CLI::IsMember({"on", "off"}));
  prune_cmd->add_option("--eta", eta, "weight of the dense model when fusing")->capture_default_str()->check(CLI::Range(0.0, 1.0));
  prune_cmd->add_option("--out", prune_out, "checkpoint name")->capture_default_str();

  // eval
  CLI::App* eval_cmd = app.add_subcommand("eval", "test accuracy of a model or a prediction ensemble");
  std::string eval_model, ensemble_arg;
  eval_cmd->add_option("--model", eval_model, "checkpoint");
  eval_cmd->add_option("--ensemble", ensemble_arg, "checkpoints to ensemble, comma separated");

  // experiment
  CLI::App* exp_cmd = app.add_subcommand("experiment", "run an experiment preset");
  std::string exp_name, hidden = "400,200,100", special = "4", sweep = "0.05:0.95:0.05", widths = "40,20,10;200,100,50;400,200,100",
                        samples_list = "2,25,200", regs, ratios = "0.3,0.5,0.7,0.9", criteria = "l1,l2,random",
                        grid_layers, act_source = "receiver";
  double fraction = 0.1, grid_eta = 0.5, finetune_lr = 0.01;
  int repeats = 1, finetune_epochs = 0;
  bool same_init = false;
  TrainFlags exp_train;
  FusionFlags exp_fusion;
  exp_cmd->add_option("name", exp_name, "skill-transfer, iid-pair, width-sweep or prune-grid")
      ->required()
      ->check(CLI::IsMember({"skill-transfer", "iid-pair", "width-sweep", "prune-grid"}));
  exp_cmd->add_option("--hidden", hidden, "hidden widths")->capture_default_str();
  exp_cmd->add_option("--repeats", repeats, "seeds seed..seed+repeats-1")->capture_default_str()->check(CLI::PositiveNumber);
  exp_train.add(exp_cmd);
  exp_fusion.add(exp_cmd);
  exp_cmd->add_option("--special", special, "skill-transfer: special label or 'none'")->capture_default_str();
  exp_cmd->add_option("--fraction", fraction, "skill-transfer: receiver share of the remaining data")
      ->capture_default_str()
      ->check(CLI::Range(1e-9, 1.0 - 1e-9));
  exp_cmd->add_option("--sweep-wb", sweep, "skill-transfer: lo:hi:step or list of w_B")->capture_default_str();
  exp_cmd->add_flag("--same-init", same_init, "skill-transfer: share the initialization");
  exp_cmd->add_option("--act-source", act_source, "skill-transfer: activation batch from 'receiver' data or 'both'")
      ->capture_default_str()
      ->check(CLI::IsMember({"receiver", "both"}));
  exp_cmd->add_option("--samples-list", samples_list, "iid-pair: sample counts for acts")->capture_default_str();
  exp_cmd->add_option("--regs", regs, "iid-pair: Sinkhorn regularizations");
  exp_cmd->add_option("--finetune-epochs", finetune_epochs, "iid-pair: finetune the fused and averaged models")
      ->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  exp_cmd->add_option("--finetune-lr", finetune_lr, "iid-pair: finetuning rate")->capture_default_str()->check(CLI::PositiveNumber);
  exp_cmd->add_option("--widths", widths, "width-sweep: configurations separated by ';'")->capture_default_str();
  exp_cmd->add_option("--ratios", ratios, "prune-grid: pruning ratios")->capture_default_str();
  exp_cmd->add_option("--criteria", criteria, "prune-grid: criteria")->capture_default_str();
  exp_cmd->add_option("--layers", grid_layers, "prune-grid: layer indices and/or 'all' (default each hidden layer)");
  exp_cmd->add_option("--eta", grid_eta, "prune-grid: dense-model weight")->capture_default_str()->check(CLI::Range(0.0, 1.0));

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }

  const ReportFormat fmt = parse_report_format(common.format);
  try {
    // Validation: everything below either throws UsageError or prepares a job
    // that runs after the output directory exists.
    std::function<void(Outputs&)> job;
    std::string command;
    json config{{"seed", common.seed}, {"data", data_json(common)}, {"format", common.format}};

    if (*train_cmd) {
      command = "train";
      const auto widths_v = index_list(arch, "--arch");
      if (train_out.empty()) throw UsageError("--out: empty name");
      train_flags.config(common.seed).validate();
      config["arch"] = widths_v;
      config["train"] = train_flags.to_json();
      config["out"] = train_out;
      job = [&, widths_v](Outputs& out) {
        const DataSplit d = load(common);
        const NetworkModel archm = NetworkModel::mlp(d.train.dim(), widths_v, d.train.class_count);
        const TrainResult r = train(archm, d.train, train_flags.config(common.seed), &d.test);
        Table curve({"epoch", "train_loss", "test_accuracy"});
        for (const auto& e : r.curve) curve.add_row({static_cast<std::int64_t>(e.epoch), e.train_loss, *e.test_accuracy});
        out.model(train_out, r.model, model_meta("train", config));
        out.table("train_curve" + report_ext(fmt), curve, fmt);
        out.summary()["test_accuracy"] = r.curve.back().test_accuracy.value();
      };
    } else if (*fuse_cmd) {
      command = "fuse";
      const auto paths = split(models_arg, ',');
      if (paths.empty()) throw UsageError("--models: empty list");
      for (const auto& p : paths) require_file(p, "--models");
      std::optional<std::size_t> est_index;
      std::string est_path;
      if (estimate_arg.empty()) {
        est_index = paths.size() - 1;
      } else if (std::all_of(estimate_arg.begin(), estimate_arg.end(), ::isdigit)) {
        const auto i = static_cast<std::size_t>(to_index(estimate_arg, "--estimate"));
        if (i >= paths.size()) throw UsageError("--estimate: index " + estimate_arg + " out of range");
        est_index = i;
      } else {
        require_file(estimate_arg, "--estimate");
        est_path = estimate_arg;
      }
      std::vector<double> eta_v;
      if (!weights_arg.empty()) {
        eta_v = double_list(weights_arg, "--weights");
        if (eta_v.size() != paths.size()) throw UsageError("--weights: need one weight per model");
        double total = 0;
        for (double e : eta_v) {
          if (e < 0) throw UsageError("--weights: weights must be nonnegative");
          total += e;
        }
        if (total <= 0) throw UsageError("--weights: weights sum to zero");
      }
      config["models"] = paths;
      config["estimate"] = est_index ? json(*est_index) : json(est_path);
      config["weights"] = eta_v;
      config["fusion"] = fusion_flags.to_json();
      config["out"] = fuse_out;
      job = [&, paths, est_index, est_path, eta_v](Outputs& out) {
        std::vector<NetworkModel> models;
        for (const auto& p : paths) models.push_back(load_model(p));
        const NetworkModel estimate = est_index ? models[*est_index] : load_model(est_path);
        FusionConfig fc = fusion_flags.config();
        fc.model_weights = eta_v;
        if (fusion_flags.needs_data()) fc.sample_batch = sample_batch(load(common).train, fusion_flags.samples, common.seed);
        const FusionResult r = fuse(models, estimate, fc);
        out.model(fuse_out, r.model, model_meta("fuse", config));
        out.table(fuse_report + report_ext(fmt), layer_distance_report(r.report), fmt);
        out.summary()["last_layer_trace_ratio"] = r.report.last_layer_trace_ratio;
        out.summary()["layer_distance"] = r.report.layer_distance;
      };
    } else if (*prune_cmd) {
      command = "prune";
      require_file(prune_model, "--model");
      PruneSpec spec;
      spec.ratio = ratio;
      spec.criterion = parse_prune_criterion(criterion);
      spec.seed = common.seed;
      if (prune_layers != "all") spec.layers = index_list(prune_layers, "--layers", 0);
      config["model"] = prune_model;
      config["layers"] = prune_layers;
      config["ratio"] = ratio;
      config["criterion"] = criterion;
      config["fuse_dense"] = fuse_dense;
      config["eta"] = eta;
      config["out"] = prune_out;
      job = [&, spec](Outputs& out) {
        const NetworkModel dense = load_model(prune_model);
        NetworkModel pruned = prune_structured(dense, spec);
        if (fuse_dense == "on") pruned = fuse_dense_into_pruned(dense, pruned, eta).model;
        out.model(prune_out, pruned, model_meta("prune", config));
        out.summary()["widths"] = pruned.widths();
        out.summary()["net_sparsity"] = sparsity_vs(pruned, dense);
      };
    } else if (*eval_cmd) {
      command = "eval";
      if (eval_model.empty() == ensemble_arg.empty()) throw UsageError("eval: give exactly one of --model or --ensemble");
      const auto paths = eval_model.empty() ? split(ensemble_arg, ',') : std::vector<std::string>{eval_model};
      if (paths.empty()) throw UsageError("--ensemble: empty list");
      for (const auto& p : paths) require_file(p, eval_model.empty() ? "--ensemble" : "--model");
      config["models"] = paths;
      config["ensemble"] = eval_model.empty();
      job = [&, paths](Outputs& out) {
        std::vector<NetworkModel> models;
        for (const auto& p : paths) models.push_back(load_model(p));
        const DataSplit d = load(common);
        const EvalResult r = prediction_ensemble(models, d.test);
        std::vector<std::string> cols{"accuracy"};
        std::vector<Cell> row{r.accuracy};
        for (std::size_t c = 0; c < r.per_class.size(); ++c) {
          cols.push_back("class_" + std::to_string(c));
          row.emplace_back(r.per_class[c]);
        }
        Table t(cols);
        t.add_row(row);
        out.table("eval" + report_ext(fmt), t, fmt);
        out.summary()["accuracy"] = r.accuracy;
        std::cout << "accuracy " << format_number(r.accuracy) << "\n";
      };
    } else {
      command = "experiment";
      const auto hidden_v = index_list(hidden, "--hidden");
      exp_train.config(common.seed).validate();
      config["experiment"] = exp_name;
      config["hidden"] = hidden_v;
      config["repeats"] = repeats;
      config["train"] = exp_train.to_json();
      std::vector<std::uint64_t> seeds;
      for (int r = 0; r < repeats; ++r) seeds.push_back(common.seed + static_cast<std::uint64_t>(r));

      auto with_seed = [](Table& all, const Table& part, std::uint64_t seed) {
        if (all.columns.empty()) {
          all.columns = {"seed"};
          all.columns.insert(all.columns.end(), part.columns.begin(), part.columns.end());
        }
        for (const auto& row : part.rows) {
          std::vector<Cell> r{static_cast<std::int64_t>(seed)};
          r.insert(r.end(), row.begin(), row.end());
          all.add_row(std::move(r));
        }
      };

      if (exp_name == "skill-transfer") {
        SkillTransferSpec spec;
        spec.hidden = hidden_v;
        if (special != "none") spec.split.special_label = to_index(special, "--special");
        spec.split.receiver_fraction = fraction;
        spec.wb_values = wb_values(sweep);
        spec.same_init = same_init;
        spec.activation_source = parse_activation_source(act_source);
        spec.samples = exp_fusion.samples;
        spec.fusion = exp_fusion.config();
        spec.train = exp_train.config(0);
        config["special"] = special;
        config["fraction"] = fraction;
        config["sweep_wb"] = spec.wb_values;
        config["same_init"] = same_init;
        config["act_source"] = act_source;
        config["fusion"] = exp_fusion.to_json();
        job = [&, spec, seeds](Outputs& out) {
          const DataSplit d = load(common);
          if (spec.split.special_label && *spec.split.special_label >= d.train.class_count)
            throw UsageError("--special: label outside the dataset's classes");
          Table all;
          for (std::uint64_t s : seeds) {
            SkillTransferSpec run = spec;
            run.seed = s;
            with_seed(all, skill_transfer(d, run).sweep, s);
          }
          out.table("skill_transfer" + report_ext(fmt), all, fmt);
        };
      } else if (exp_name == "iid-pair") {
        IidPairSpec spec;
        spec.hidden = hidden_v;
        spec.train = exp_train.config(0);
        spec.samples = index_list(samples_list, "--samples-list");
        if (!regs.empty()) spec.regularizations = double_list(regs, "--regs");
        for (double r : spec.regularizations)
          if (!(r > 0)) throw UsageError("--regs: regularizations must be positive");
        spec.finetune_epochs = finetune_epochs;
        spec.finetune_lr = finetune_lr;
        config["samples_list"] = spec.samples;
        config["regs"] = spec.regularizations;
        config["finetune_epochs"] = finetune_epochs;
        config["finetune_lr"] = finetune_lr;
        job = [&, spec, seeds](Outputs& out) {
          const DataSplit d = load(common);
          Table all;
          for (std::uint64_t s : seeds) {
            IidPairSpec run = spec;
            run.seed = s;
            with_seed(all, iid_pair(d, run).table(), s);
          }
          out.table("iid_pair" + report_ext(fmt), all, fmt);
        };
      } else if (exp_name == "width-sweep") {
        WidthSweepSpec spec;
        spec.widths.clear();
        for (const auto& w : split(widths, ';')) spec.widths.push_back(index_list(w, "--widths"));
        if (spec.widths.size() < 2) throw UsageError("--widths: need at least two configurations");
        spec.train = exp_train.config(0);
        spec.samples = exp_fusion.samples;
        spec.fusion = exp_fusion.config();
        spec.seeds = seeds;
        config["widths"] = widths;
        config["fusion"] = exp_fusion.to_json();
        job = [&, spec](Outputs& out) {
          out.table("width_sweep" + report_ext(fmt), width_sweep(load(common), spec), fmt);
        };
      } else {
        PruneGridSpec spec;
        spec.hidden = hidden_v;
        spec.train = exp_train.config(0);
        for (const auto& r : double_list(ratios, "--ratios")) {
          if (!(r >= 0.0 && r < 1.0)) throw UsageError("--ratios: values must lie in [0, 1)");
          spec.grid.ratios.push_back(r);
        }
        for (const auto& c : split(criteria, ',')) {
          try {
            spec.grid.criteria.push_back(parse_prune_criterion(c));
          } catch (const DomainError& e) {
            throw UsageError(std::string("--criteria: ") + e.what());
          }
        }
        for (const auto& l : split(grid_layers, ',')) {
          if (l == "all") {
            spec.grid.layers.emplace_back(std::nullopt);
            continue;
          }
          const Index li = to_index(l, "--layers");
          if (li < 0 || li + 1 > static_cast<Index>(hidden_v.size()))
            throw UsageError("--layers: " + l + " is not a hidden layer");
          spec.grid.layers.emplace_back(li);
        }
        spec.grid.eta = grid_eta;
        config["ratios"] = spec.grid.ratios;
        config["criteria"] = criteria;
        config["layers"] = grid_layers.empty() ? "each" : grid_layers;
        config["eta"] = grid_eta;
        job = [&, spec, seeds](Outputs& out) {
          const DataSplit d = load(common);
          Table all;
          for (std::uint64_t s : seeds) {
            PruneGridSpec run = spec;
            run.seed = s;
            with_seed(all, prune_grid(d, run), s);
          }
          out.table("prune_grid" + report_ext(fmt), all, fmt);
        };
      }
    }

    std::cerr << "otfuse " << command << " " << config.dump() << "\n";
    Outputs out(common.out_dir, command, config);
    out.open_dir();
    job(out);
    out.finish();
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
