#include "fedssl/runner.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "fedssl/error.hpp"

namespace fedssl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorKind::kIo, "cannot write " + path.string());
  return out;
}

void close_checked(std::ofstream& out, const fs::path& path) {
  out.close();
  require(!out.fail(), ErrorKind::kIo, "write failed for " + path.string());
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::kIo, path.string() + ": " + e.what());
  }
}

struct Metrics {
  double knn = 0.0;
  double collapse = 0.0;
  double linear = 0.0;
};

// Standalone runs have no meaningful global model; report the mean over
// the clients' own encoders instead.
std::vector<Network> encoders_to_evaluate(const ExperimentConfig& cfg, const ServerState& server,
                                          const ArchSpec& arch) {
  std::vector<Network> out;
  if (cfg.standalone) {
    for (const auto& c : server.clients) out.push_back(c.nets.online_encoder);
  } else {
    out.emplace_back(arch.encoder, server.global.group(kEncoder));
  }
  return out;
}

Metrics monitor_metrics(const std::vector<Network>& encoders, const ExperimentData& data,
                        const ExperimentConfig& cfg) {
  Metrics m;
  const double n = static_cast<double>(encoders.size());
  for (const auto& enc : encoders) {
    m.knn += knn_eval(enc, data.train, data.test, cfg.monitor.knn_k) / n;
    m.collapse += collapse_stat(enc, data.test.samples) / n;
  }
  return m;
}

Metrics final_metrics(const std::vector<Network>& encoders, const ExperimentData& data,
                      const ExperimentConfig& cfg) {
  Metrics m = monitor_metrics(encoders, data, cfg);
  LinearEvalSpec spec;
  spec.epochs = cfg.monitor.linear_epochs;
  spec.lr = cfg.monitor.linear_lr;
  spec.batch_size = cfg.monitor.linear_batch;
  spec.seed = SeedPath(cfg.seed).key("linear").seed();
  for (const auto& enc : encoders)
    m.linear += linear_eval(enc, data.train, data.test, spec) / static_cast<double>(encoders.size());
  return m;
}

// The only writer of a run's metric files. Round records reach it one at a
// time from the round barrier.
class RunWriter {
 public:
  RunWriter(const fs::path& dir, int clients) : dir_(dir), clients_(clients) {
    rounds_csv_ = open_out(dir / "rounds.csv");
    rounds_jsonl_ = open_out(dir / "rounds.jsonl");
    losses_csv_ = open_out(dir / "losses.csv");
    plot_div_ = open_out(dir / "plot_divergence.csv");
    plot_knn_ = open_out(dir / "plot_knn.csv");
    rounds_csv_ << "round,client,reset,mu,lambda,divergence_pre,divergence,weight,loss_mean,knn_acc,"
                   "collapse\n";
    losses_csv_ << "round,client,epoch,batch,loss\n";
    plot_div_ << "round";
    for (int k = 0; k < clients; ++k) plot_div_ << ",client_" << k;
    plot_div_ << "\n";
    plot_knn_ << "round,knn_acc,collapse\n";
  }

  void write(const RoundRecord& rec) {
    const std::string knn = rec.knn_acc ? num(*rec.knn_acc) : "";
    const std::string col = rec.collapse ? num(*rec.collapse) : "";
    json j;
    j["round"] = rec.round;
    j["participants"] = rec.participants;
    j["clients"] = json::array();
    std::vector<std::string> div_row(static_cast<std::size_t>(clients_));
    for (const auto& c : rec.clients) {
      rounds_csv_ << rec.round << ',' << c.client << ',' << (c.update.reset ? 1 : 0) << ','
                  << num(c.update.mu) << ',' << (c.lambda ? num(*c.lambda) : "") << ','
                  << num(c.update.divergence) << ',' << num(c.divergence) << ',' << num(c.weight)
                  << ',' << num(c.loss_mean) << ',' << knn << ',' << col << '\n';
      for (const auto& l : c.losses)
        losses_csv_ << rec.round << ',' << c.client << ',' << l.epoch << ',' << l.batch << ','
                    << num(l.loss) << '\n';
      div_row.at(static_cast<std::size_t>(c.client)) = num(c.divergence);
      divergence_[c.client].push_back(c.divergence);
      json jc;
      jc["client"] = c.client;
      jc["reset"] = c.update.reset;
      jc["mu"] = c.update.mu;
      jc["lambda"] = c.lambda ? json(*c.lambda) : json(nullptr);
      jc["divergence_pre"] = c.update.divergence;
      jc["divergence"] = c.divergence;
      jc["weight"] = c.weight;
      jc["loss_mean"] = c.loss_mean;
      j["clients"].push_back(std::move(jc));
    }
    j["knn_acc"] = rec.knn_acc ? json(*rec.knn_acc) : json(nullptr);
    j["collapse"] = rec.collapse ? json(*rec.collapse) : json(nullptr);
    j["warnings"] = rec.warnings;
    rounds_jsonl_ << j.dump() << '\n';

    plot_div_ << rec.round;
    for (const auto& d : div_row) plot_div_ << ',' << d;
    plot_div_ << '\n';
    if (rec.knn_acc) plot_knn_ << rec.round << ',' << knn << ',' << col << '\n';
  }

  const std::map<int, std::vector<double>>& divergence() const { return divergence_; }

  void close() {
    close_checked(rounds_csv_, dir_ / "rounds.csv");
    close_checked(rounds_jsonl_, dir_ / "rounds.jsonl");
    close_checked(losses_csv_, dir_ / "losses.csv");
    close_checked(plot_div_, dir_ / "plot_divergence.csv");
    close_checked(plot_knn_, dir_ / "plot_knn.csv");
  }

 private:
  fs::path dir_;
  int clients_;
  std::ofstream rounds_csv_, rounds_jsonl_, losses_csv_, plot_div_, plot_knn_;
  std::map<int, std::vector<double>> divergence_;
};

std::string strategy_name(const ExperimentConfig& cfg) {
  return cfg.standalone ? std::string("standalone") : describe(cfg.strategy);
}

double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Sample standard deviation; 0 for fewer than two values.
double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

}  // namespace

ExperimentData prepare_data(const ExperimentConfig& cfg) {
  ExperimentData data;
  if (cfg.dataset_path.empty()) {
    BlobData blobs = make_blob_splits(cfg.dataset, cfg.seed);
    data.train = std::move(blobs.train);
    data.test = std::move(blobs.test);
  } else {
    data.train = load_dataset(cfg.dataset_path);
    data.test = cfg.test_dataset_path.empty() ? data.train : load_dataset(cfg.test_dataset_path);
  }
  data.partition = partition_non_iid(data.train, {cfg.clients, cfg.classes_per_client, cfg.seed});
  return data;
}

std::string run_label(const ExperimentConfig& cfg) {
  return cfg.preset + "/" + strategy_name(cfg);
}

RunSummary run(const ExperimentConfig& cfg, const std::string& dir) {
  const fs::path out(dir);
  std::error_code ec;
  fs::create_directories(out, ec);
  require(!ec, ErrorKind::kIo, "cannot create " + dir + ": " + ec.message());

  const ExperimentData data = prepare_data(cfg);
  const FederationConfig fc = to_federation_config(cfg, static_cast<int>(data.train.samples.cols()));

  {
    auto f = open_out(out / "config.json");
    f << emit_config(cfg).dump(2) << '\n';
    close_checked(f, out / "config.json");
  }
  write_partition((out / "partition.txt").string(), data.partition);

  RunWriter writer(out, cfg.clients);
  const RoundObserver observer = [&](const ServerState& server, RoundRecord& rec) {
    const bool last = rec.round + 1 == cfg.rounds;
    if (cfg.monitor.every > 0 && ((rec.round + 1) % cfg.monitor.every == 0 || last)) {
      const Metrics m = monitor_metrics(encoders_to_evaluate(cfg, server, fc.arch), data, cfg);
      rec.knn_acc = m.knn;
      rec.collapse = m.collapse;
    }
    writer.write(rec);
  };
  ExperimentResult result = run_experiment(fc, data.train, data.partition, observer);
  writer.close();

  save_params((out / "final.params").string(), result.global);

  const Metrics m = final_metrics(encoders_to_evaluate(cfg, result.final_state, fc.arch), data, cfg);
  RunSummary summary;
  summary.dir = dir;
  summary.report.run_id = run_label(cfg) + "/seed" + std::to_string(cfg.seed);
  summary.report.round = cfg.rounds;
  summary.report.knn_acc = m.knn;
  summary.report.linear_acc = m.linear;
  summary.report.collapse = m.collapse;
  summary.report.per_round_divergence = writer.divergence();
  auto f = open_out(out / "eval.jsonl");
  f << to_json_line(summary.report) << '\n';
  close_checked(f, out / "eval.jsonl");
  return summary;
}

std::vector<RunSummary> sweep(const json& base, const std::string& key,
                              const std::vector<std::string>& values, const std::string& dir) {
  require(!values.empty(), ErrorKind::kConfig, "sweep needs at least one value");
  // Validate every point before running any of them.
  std::vector<ExperimentConfig> configs;
  for (const auto& v : values) {
    json doc = base;
    set_config_value(doc, key, v);
    configs.push_back(parse_config(doc));
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorKind::kIo, "cannot create " + dir + ": " + ec.message());

  const fs::path csv_path = fs::path(dir) / "sweep.csv";
  auto csv = open_out(csv_path);
  csv << "key,value,linear_acc,knn_acc,collapse\n";
  std::vector<RunSummary> out;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    out.push_back(run(configs[i], (fs::path(dir) / std::to_string(i)).string()));
    const EvalReport& r = out.back().report;
    csv << key << ',' << values[i] << ',' << num(r.linear_acc) << ',' << num(r.knn_acc) << ','
        << num(r.collapse) << '\n';
  }
  close_checked(csv, csv_path);
  return out;
}

std::vector<CompareRow> compare(const std::vector<std::string>& run_dirs) {
  require(!run_dirs.empty(), ErrorKind::kConfig, "compare needs at least one run");
  struct Group {
    std::vector<std::uint64_t> seeds;
    std::vector<double> linear, knn, collapse;
  };
  std::map<std::string, Group> groups;
  std::vector<std::string> order;
  json dataset;
  for (const auto& d : run_dirs) {
    const ExperimentConfig cfg = parse_config(read_json_file(fs::path(d) / "config.json"));
    const json spec = emit_config(cfg)["dataset"];
    if (dataset.is_null()) dataset = spec;
    require(spec == dataset, ErrorKind::kConfig, "run " + d + " uses a different dataset spec");

    std::ifstream in(fs::path(d) / "eval.jsonl");
    require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + d + "/eval.jsonl");
    std::string line, last;
    while (std::getline(in, line))
      if (!line.empty()) last = line;
    require(!last.empty(), ErrorKind::kIo, d + "/eval.jsonl is empty");
    json rep;
    try {
      rep = json::parse(last);
      const std::string label = run_label(cfg);
      if (!groups.count(label)) order.push_back(label);
      Group& g = groups[label];
      g.seeds.push_back(cfg.seed);
      g.linear.push_back(rep.at("linear_acc").get<double>());
      g.knn.push_back(rep.at("knn_acc").get<double>());
      g.collapse.push_back(rep.at("collapse_stat").get<double>());
    } catch (const json::exception& e) {
      fail(ErrorKind::kIo, d + "/eval.jsonl: " + e.what());
    }
  }

  std::vector<CompareRow> rows;
  std::multiset<std::uint64_t> seeds0;
  for (const auto& label : order) {
    const Group& g = groups[label];
    std::multiset<std::uint64_t> seeds(g.seeds.begin(), g.seeds.end());
    if (rows.empty()) seeds0 = seeds;
    require(seeds == seeds0, ErrorKind::kConfig, "runs for " + label + " use a different seed set");
    CompareRow row;
    row.label = label;
    row.seeds = g.seeds;
    row.linear_mean = mean_of(g.linear);
    row.linear_std = sample_std(g.linear);
    row.knn_mean = mean_of(g.knn);
    row.knn_std = sample_std(g.knn);
    row.collapse_mean = mean_of(g.collapse);
    row.collapse_std = sample_std(g.collapse);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string compare_text(const std::vector<CompareRow>& rows) {
  std::size_t width = 5;
  for (const auto& r : rows) width = std::max(width, r.label.size());
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-*s  %5s  %-17s  %-17s  %-17s\n", static_cast<int>(width), "label",
                "runs", "linear", "knn", "collapse");
  os << buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %5zu  %.4f +- %.4f  %.4f +- %.4f  %.4f +- %.4f\n",
                  static_cast<int>(width), r.label.c_str(), r.seeds.size(), r.linear_mean,
                  r.linear_std, r.knn_mean, r.knn_std, r.collapse_mean, r.collapse_std);
    os << buf;
  }
  return os.str();
}

std::string compare_csv(const std::vector<CompareRow>& rows) {
  std::ostringstream os;
  os << "label,runs,linear_mean,linear_std,knn_mean,knn_std,collapse_mean,collapse_std\n";
  for (const auto& r : rows)
    os << r.label << ',' << r.seeds.size() << ',' << num(r.linear_mean) << ',' << num(r.linear_std)
       << ',' << num(r.knn_mean) << ',' << num(r.knn_std) << ',' << num(r.collapse_mean) << ','
       << num(r.collapse_std) << '\n';
  return os.str();
}

EvalReport evaluate_checkpoint(const ExperimentConfig& cfg, const std::string& checkpoint) {
  const ExperimentData data = prepare_data(cfg);
  const ArchSpec arch = cfg.arch.resolve(static_cast<int>(data.train.samples.cols()));
  const NamedParams params = load_params(checkpoint);
  require(params.has(std::string(kEncoder)), ErrorKind::kShapeMismatch,
          "checkpoint has no encoder group");
  const std::vector<Network> encoders{Network(arch.encoder, params.group(kEncoder))};
  const Metrics m = final_metrics(encoders, data, cfg);
  EvalReport r;
  r.run_id = run_label(cfg) + "/seed" + std::to_string(cfg.seed);
  r.round = cfg.rounds;
  r.knn_acc = m.knn;
  r.linear_acc = m.linear;
  r.collapse = m.collapse;
  return r;
}

}  // namespace fedssl
