// cpmr command-line driver: preprocess, train, eval, sweep, ablate, gradcheck.

#include <spawn.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <Eigen/Core>
#include <json.hpp>

#include "cpmr/cpmr.hpp"

extern char** environ;

namespace fs = std::filesystem;
using namespace cpmr;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitUserError = 2;
constexpr int kExitNumerical = 3;

const char* kDatasetFile = "dataset.bin";
const char* kCheckpointFile = "checkpoint.bin";
const char* kTrainLog = "train.log";
const char* kMetricsFile = "metrics.jsonl";
const char* kSweepFile = "sweep.csv";

void apply_thread_cap() {
  const char* env = std::getenv("CPMR_THREADS");
  if (!env) return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || n < 1) throw ConfigError(std::string("CPMR_THREADS must be a positive integer, got '") + env + "'");
  Eigen::setNbThreads(static_cast<int>(n));
}

void append_line(const fs::path& path, const std::string& line) {
  std::ofstream os(path, std::ios::app);
  if (!os) throw ConfigError("cannot open '" + path.string() + "' for writing");
  os << line << '\n';
}

fs::path seed_dir(const RunConfig& rc, std::uint64_t seed) {
  fs::path dir = rc.output_dir;
  if (rc.seeds.size() > 1) dir /= "seed-" + std::to_string(seed);
  fs::create_directories(dir);
  return dir;
}

// Trains every configured seed, writes checkpoint, log and the report on
// the configured split.
int run_training(RunConfig rc, const std::string& variant) {
  rc.model = apply_variant(rc.model, variant);
  std::cout << render_config(rc) << std::flush;
  const Dataset ds = load_configured_dataset(rc);
  fs::create_directories(rc.output_dir);
  std::ofstream(fs::path(rc.output_dir) / "config.resolved") << render_config(rc);
  const fs::path metrics = fs::path(rc.output_dir) / kMetricsFile;
  fs::remove(metrics);

  double mrr_sum = 0.0, recall_sum = 0.0;
  for (std::uint64_t seed : rc.seeds) {
    RunConfig one = rc;
    one.seeds = {seed};
    one.train.seed = seed;
    const fs::path dir = seed_dir(rc, seed);
    const fs::path log = dir / kTrainLog;
    fs::remove(log);
    TrainHooks hooks;
    hooks.on_segment = [&](const SegmentLog& s) { append_line(log, segment_log_line(s)); };
    hooks.on_epoch = [&](const EpochLog& e) {
      std::cerr << "seed " << seed << " epoch " << e.epoch << " loss " << e.mean_loss << " val_mrr " << e.val_mrr
                << '\n';
    };
    const TrainResult tr = train(ds, one.model, one.train, hooks);
    if (tr.fallback_negatives > 0)
      std::cerr << "warning: " << tr.fallback_negatives
                << " negative draws fell back to sampling with replacement (candidate pool smaller than n_neg)\n";
    Checkpoint ck{tr.params, resolved_config(one)};
    ck.meta["checkpoint.best_epoch"] = std::to_string(tr.best_epoch);
    save_checkpoint((dir / kCheckpointFile).string(), ck);

    MetricsReport rep = incremental_eval(ds, one.eval_split, tr.params, one.model, {}, nullptr, one.eval_filter_seen);
    rep.seed = seed;
    for (const auto& [k, v] : resolved_config(one)) rep.config[k] = v;
    rep.config["variant"] = variant;
    rep.config["split"] = resolved_config(one)["eval.split"];
    rep.config["unit"] = "per_interaction";
    append_line(metrics, to_json(rep).dump());
    std::cout << to_json(rep).dump() << '\n';
    mrr_sum += rep.mrr;
    recall_sum += rep.recall_at_10;
  }
  if (rc.seeds.size() > 1) {
    const double n = static_cast<double>(rc.seeds.size());
    nlohmann::json agg{{"aggregate", "mean"}, {"n_seeds", rc.seeds.size()}, {"mrr", mrr_sum / n},
                       {"recall_at_10", recall_sum / n}, {"variant", variant}};
    append_line(metrics, agg.dump());
    std::cout << agg.dump() << '\n';
  }
  return kExitOk;
}

int cmd_preprocess(const std::string& input, const std::string& format, const std::string& output, int k_core) {
  const RawFormat fmt = parse_format(format);
  const Dataset ds = load_raw_dataset(input, fmt, k_core);
  fs::create_directories(output);
  save_dataset((fs::path(output) / kDatasetFile).string(), ds);
  const DatasetSummary s = summarize(ds);
  nlohmann::json j{{"users", s.n_users},    {"items", s.n_items},  {"interactions", s.n_interactions},
                   {"timestamps", s.n_days}, {"span_days", s.span_days}, {"val_begin", ds.val_begin},
                   {"test_begin", ds.test_begin}};
  std::cout << j.dump() << '\n';
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& split, const std::string& config_path) {
  Checkpoint ck = load_checkpoint(checkpoint);
  RunConfig rc = config_path.empty() ? run_config_from([&] {
    std::map<std::string, std::string> kv;
    for (const auto& [k, v] : ck.meta)
      if (k.rfind("checkpoint.", 0) != 0) kv[k] = v;
    if (kv.empty()) throw CheckpointError("checkpoint carries no run configuration; pass --config");
    return kv;
  }())
                                     : load_run_config(config_path);
  rc.eval_split = parse_split(split);
  const Dataset ds = load_configured_dataset(rc);
  const std::size_t expect = ds.n_nodes();
  const Tensor& e = ck.params.at(names::embeddings());
  if (e.rows() != expect || e.cols() != rc.model.d) {
    throw ShapeError("checkpoint embeddings " + e.shape_str() + " do not fit the dataset (" +
                     std::to_string(expect) + " nodes, d=" + std::to_string(rc.model.d) + ")");
  }
  MetricsReport rep = incremental_eval(ds, rc.eval_split, ck.params, rc.model, {}, nullptr, rc.eval_filter_seen);
  rep.seed = rc.train.seed;
  for (const auto& [k, v] : resolved_config(rc)) rep.config[k] = v;
  rep.config["split"] = split == "validation" ? "val" : split;
  rep.config["unit"] = "per_interaction";
  const fs::path out = fs::path(checkpoint).parent_path() / kMetricsFile;
  append_line(out, to_json(rep).dump());
  std::cout << to_json(rep).dump() << '\n';
  return kExitOk;
}

// Each sweep point runs as its own `train` process on a derived config.
int cmd_sweep(const std::string& config_path, const std::string& param, const std::vector<std::int64_t>& values) {
  if (param != "s_days" && param != "n_tbptt")
    throw ConfigError("unknown sweep parameter '" + param + "' (expected s_days or n_tbptt)");
  if (values.empty()) throw ConfigError("--values is empty");
  const RunConfig base = load_run_config(config_path);
  const std::string key = param == "s_days" ? "model.s_days" : "train.n_tbptt";
  const std::string self = fs::read_symlink("/proc/self/exe").string();
  std::vector<SweepRow> rows;
  for (std::int64_t v : values) {
    auto kv = resolved_config(base);
    kv[key] = std::to_string(v);
    const fs::path dir = fs::path(base.output_dir) / (param + "=" + std::to_string(v));
    kv["output.dir"] = dir.string();
    RunConfig point = run_config_from(kv);
    fs::create_directories(dir);
    const fs::path cfg = dir / "config.txt";
    std::ofstream(cfg) << render_config(point);

    std::vector<std::string> args{self, "train", "--config", cfg.string()};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    pid_t pid = 0;
    if (posix_spawn(&pid, self.c_str(), nullptr, nullptr, argv.data(), environ) != 0)
      throw Error("cannot launch sweep point " + param + "=" + std::to_string(v));
    int status = 0;
    waitpid(pid, &status, 0);
    if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
      std::cerr << "sweep point " << param << "=" << v << " failed\n";
      return WIFEXITED(status) ? WEXITSTATUS(status) : kExitFailed;
    }
    // The last line is the seed mean when several seeds ran.
    std::ifstream ms(dir / kMetricsFile);
    std::string line, last;
    while (std::getline(ms, line))
      if (!line.empty()) last = line;
    const auto j = nlohmann::json::parse(last);
    rows.push_back({param, v, j.at("mrr").get<double>(), j.at("recall_at_10").get<double>()});
    append_line(fs::path(base.output_dir) / kMetricsFile,
                nlohmann::json{{param, v}, {"mrr", rows.back().mrr}, {"recall_at_10", rows.back().recall_at_10}}.dump());
  }
  std::ofstream csv(fs::path(base.output_dir) / kSweepFile);
  write_sweep_csv(csv, rows);
  write_sweep_csv(std::cout, rows);
  return kExitOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  GradSuiteOptions opt;
  opt.seed = seed;
  const GradSuiteReport rep = run_grad_suite(opt);
  for (const auto& c : rep.cases) {
    std::cout << c.name << " max_rel_error=" << c.result.max_rel_error << " checked=" << c.result.checked
              << (c.result.max_rel_error <= rep.tolerance ? "" : "  FAIL at " + c.result.worst_param + "[" +
                                                                    std::to_string(c.result.worst_index) + "]")
              << '\n';
  }
  std::cout << "max_rel_error " << rep.max_rel_error() << (rep.passed() ? " PASS" : " FAIL") << '\n';
  return rep.passed() ? kExitOk : kExitFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cpmr: incremental sequential recommender"};
  app.require_subcommand(1);

  std::string input, format, output;
  int k_core = 5;
  auto* pre = app.add_subcommand("preprocess", "5-core filter, day coarsening and time split of a raw log");
  pre->add_option("--input", input, "raw interaction file")->required();
  pre->add_option("--format", format, "amazon_csv or movielens_tab")->required();
  pre->add_option("--output", output, "output directory")->required();
  pre->add_option("--k-core", k_core, "minimum interactions per user and item")->capture_default_str();

  std::string config;
  auto* tr = app.add_subcommand("train", "train and report the configured split");
  tr->add_option("--config", config, "run configuration")->required();

  std::string checkpoint, split = "test";
  auto* ev = app.add_subcommand("eval", "incremental evaluation of a checkpoint");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--split", split)->check(CLI::IsMember({"val", "validation", "test"}))->capture_default_str();
  std::string eval_config;
  ev->add_option("--config", eval_config, "override the configuration stored in the checkpoint");

  std::string param;
  std::vector<std::int64_t> values;
  auto* sw = app.add_subcommand("sweep", "one training run per parameter value");
  sw->add_option("--config", config)->required();
  sw->add_option("--param", param)->required()->check(CLI::IsMember({"s_days", "n_tbptt"}));
  sw->add_option("--values", values)->required()->delimiter(',');

  std::string variant;
  auto* ab = app.add_subcommand("ablate", "train one ablation variant");
  ab->add_option("--config", config)->required();
  ab->add_option("--variant", variant)->required()->check(CLI::IsMember(ablation_variants()));

  std::uint64_t seed = 0;
  auto* gc = app.add_subcommand("gradcheck", "reverse-mode gradients against central differences");
  gc->add_option("--seed", seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUserError;
  }

  try {
    apply_thread_cap();
    if (*pre) return cmd_preprocess(input, format, output, k_core);
    if (*tr) return run_training(load_run_config(config), "full");
    if (*ev) return cmd_eval(checkpoint, split, eval_config);
    if (*sw) return cmd_sweep(config, param, values);
    if (*ab) return run_training(load_run_config(config), variant);
    if (*gc) return cmd_gradcheck(seed);
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUserError;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUserError;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUserError;
  } catch (const CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUserError;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUserError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitFailed;
  }
  return kExitOk;
}
