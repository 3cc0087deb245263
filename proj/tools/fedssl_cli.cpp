// fedssl command line: run, sweep, compare, eval.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fedssl/config.hpp"
#include "fedssl/error.hpp"
#include "fedssl/runner.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kOutRootEnv = "FEDSSL_OUT_ROOT";

// Flags that mirror config fields. Each set flag overwrites the matching key
// of the config document before validation.
struct ConfigFlags {
  std::string config_path;
  std::optional<std::string> preset, strategy, tau, lambda;
  std::optional<std::string> clients, classes_per_client, clients_per_round, rounds;
  std::optional<std::string> local_epochs, batch_size, lr, momentum, seed, workers, spread;
  bool wire_mode = false;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("-c,--config", config_path, "JSON config file")->check(CLI::ExistingFile);
    app->add_option("--preset", preset, "byol, simsiam, simclr or moco");
    app->add_option("--strategy", strategy,
                    "fedema, replace, update_both, constant_mu or standalone");
    app->add_option("--tau", tau, "FedEMA autoscaler target in [0, 1)");
    app->add_option("--lambda", lambda, "FedEMA fixed scaler");
    app->add_option("--clients", clients, "number of clients K");
    app->add_option("--classes-per-client", classes_per_client, "classes per client l");
    app->add_option("--clients-per-round", clients_per_round, "participants per round (0 = all)");
    app->add_option("--rounds", rounds, "communication rounds R");
    app->add_option("--local-epochs", local_epochs, "local epochs E");
    app->add_option("--batch-size", batch_size, "batch size B");
    app->add_option("--lr", lr, "base learning rate");
    app->add_option("--momentum", momentum, "target EMA momentum");
    app->add_option("--seed", seed, "root seed");
    app->add_option("--workers", workers, "client training threads");
    app->add_option("--spread", spread, "blob spread");
    app->add_flag("--wire-mode", wire_mode, "route models through framed messages");
    app->add_option("--set", sets, "override any config key: dotted.key=value")->take_all();
  }

  json document() const {
    json doc = json::object();
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      fedssl::require(static_cast<bool>(in), fedssl::ErrorKind::kIo, "cannot open " + config_path);
      try {
        doc = json::parse(in);
      } catch (const json::exception& e) {
        fedssl::fail(fedssl::ErrorKind::kConfig, config_path + ": " + e.what());
      }
    }
    auto set = [&](const char* key, const std::optional<std::string>& v) {
      if (v) fedssl::set_config_value(doc, key, *v);
    };
    if (preset) doc["method"] = json{{"preset", *preset}};
    if (strategy) doc["strategy"] = json{{"kind", *strategy}};
    if (tau || lambda) {
      if (!doc.contains("strategy")) doc["strategy"] = json::object();
      doc["strategy"].erase("tau");
      doc["strategy"].erase("lambda");
    }
    set("strategy.tau", tau);
    set("strategy.lambda", lambda);
    set("clients", clients);
    set("classes_per_client", classes_per_client);
    set("clients_per_round", clients_per_round);
    set("rounds", rounds);
    set("local_epochs", local_epochs);
    set("batch_size", batch_size);
    set("lr", lr);
    set("method.momentum", momentum);
    set("seed", seed);
    set("workers", workers);
    set("dataset.spread", spread);
    if (wire_mode) doc["wire_mode"] = true;
    for (const auto& kv : sets) {
      const auto eq = kv.find('=');
      fedssl::require(eq != std::string::npos, fedssl::ErrorKind::kConfig,
                      "--set expects key=value, got '" + kv + "'");
      fedssl::set_config_value(doc, kv.substr(0, eq), kv.substr(eq + 1));
    }
    return doc;
  }
};

std::string out_dir(const std::string& explicit_dir, const std::string& name) {
  if (!explicit_dir.empty()) return explicit_dir;
  const char* root = std::getenv(kOutRootEnv);
  return (fs::path(root && *root ? root : "runs") / name).string();
}

std::string default_name(const fedssl::ExperimentConfig& cfg) {
  std::string strategy = cfg.standalone ? "standalone" : fedssl::describe(cfg.strategy);
  for (char& ch : strategy)
    if (ch == '(' || ch == ')' || ch == '=' || ch == ',') ch = '_';
  return cfg.preset + "-" + strategy + "-seed" + std::to_string(cfg.seed);
}

void print_report(const fedssl::EvalReport& r) {
  std::cout << "linear_acc " << r.linear_acc << "  knn_acc " << r.knn_acc << "  collapse "
            << r.collapse << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated self-supervised learning simulator"};
  app.require_subcommand(1);

  ConfigFlags run_flags;
  std::string run_out;
  bool print_config = false;
  CLI::App* run_cmd = app.add_subcommand("run", "run one experiment");
  run_flags.attach(run_cmd);
  run_cmd->add_option("-o,--out", run_out, "output directory");
  run_cmd->add_flag("--print-config", print_config, "print the resolved config and exit");

  ConfigFlags sweep_flags;
  std::string sweep_out, sweep_key;
  std::vector<std::string> sweep_values;
  CLI::App* sweep_cmd = app.add_subcommand("sweep", "run one experiment per value of a config key");
  sweep_flags.attach(sweep_cmd);
  sweep_cmd->add_option("-o,--out", sweep_out, "output directory");
  sweep_cmd->add_option("--key", sweep_key, "dotted config key, e.g. strategy.lambda")->required();
  sweep_cmd->add_option("--values", sweep_values, "values to try")
      ->required()
      ->delimiter(',');

  std::vector<std::string> compare_dirs;
  std::string compare_csv_path;
  CLI::App* compare_cmd = app.add_subcommand("compare", "tabulate final metrics over runs");
  compare_cmd->add_option("runs", compare_dirs, "run directories")->required();
  compare_cmd->add_option("--csv", compare_csv_path, "also write the table as CSV");

  std::string eval_run, eval_checkpoint;
  CLI::App* eval_cmd = app.add_subcommand("eval", "re-evaluate a checkpoint");
  eval_cmd->add_option("run", eval_run, "run directory (config.json, final.params)")->required();
  eval_cmd->add_option("--checkpoint", eval_checkpoint, "checkpoint to evaluate instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*run_cmd) {
      const fedssl::ExperimentConfig cfg = fedssl::parse_config(run_flags.document());
      if (print_config) {
        std::cout << fedssl::emit_config(cfg).dump(2) << "\n";
        return 0;
      }
      const std::string dir = out_dir(run_out, default_name(cfg));
      const fedssl::RunSummary s = fedssl::run(cfg, dir);
      std::cout << s.report.run_id << " -> " << dir << "\n";
      print_report(s.report);
    } else if (*sweep_cmd) {
      const json base = sweep_flags.document();
      const fedssl::ExperimentConfig cfg = fedssl::parse_config(base);
      const std::string dir = out_dir(sweep_out, "sweep-" + default_name(cfg));
      const auto runs = fedssl::sweep(base, sweep_key, sweep_values, dir);
      for (std::size_t i = 0; i < runs.size(); ++i) {
        std::cout << sweep_key << "=" << sweep_values[i] << "  ";
        print_report(runs[i].report);
      }
      std::cout << "wrote " << (fs::path(dir) / "sweep.csv").string() << "\n";
    } else if (*compare_cmd) {
      const auto rows = fedssl::compare(compare_dirs);
      std::cout << fedssl::compare_text(rows);
      if (!compare_csv_path.empty()) {
        std::ofstream out(compare_csv_path);
        fedssl::require(static_cast<bool>(out), fedssl::ErrorKind::kIo,
                        "cannot write " + compare_csv_path);
        out << fedssl::compare_csv(rows);
      }
    } else if (*eval_cmd) {
      const fedssl::ExperimentConfig cfg =
          fedssl::load_config((fs::path(eval_run) / "config.json").string());
      const std::string ckpt =
          eval_checkpoint.empty() ? (fs::path(eval_run) / "final.params").string() : eval_checkpoint;
      std::cout << fedssl::to_json_line(fedssl::evaluate_checkpoint(cfg, ckpt)) << "\n";
    }
  } catch (const fedssl::Error& e) {
    std::cerr << "error (" << fedssl::to_string(e.kind()) << "): " << e.what() << "\n";
    return static_cast<int>(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
