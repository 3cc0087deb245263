#include "fedssl/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

#include "fedssl/error.hpp"

namespace fedssl {

using nlohmann::json;

namespace {

// Reads fields from one JSON object and rejects anything left unread.
class Section {
 public:
  Section(const json& doc, std::string path) : doc_(doc), path_(std::move(path)) {
    require(doc_.is_object(), ErrorKind::kConfig, where() + " must be an object");
  }

  bool has(const std::string& key) const { return doc_.contains(key); }

  const json* raw(const std::string& key) {
    seen_.insert(key);
    auto it = doc_.find(key);
    return it == doc_.end() ? nullptr : &*it;
  }

  void read(const std::string& key, int& out) {
    if (const json* v = raw(key)) {
      require(v->is_number_integer(), ErrorKind::kConfig, where(key) + " must be an integer");
      const auto x = v->get<std::int64_t>();
      require(x >= INT32_MIN && x <= INT32_MAX, ErrorKind::kConfig, where(key) + " out of range");
      out = static_cast<int>(x);
    }
  }
  void read(const std::string& key, std::uint64_t& out) {
    if (const json* v = raw(key)) {
      require(v->is_number_unsigned() || (v->is_number_integer() && v->get<std::int64_t>() >= 0),
              ErrorKind::kConfig, where(key) + " must be a nonnegative integer");
      out = v->get<std::uint64_t>();
    }
  }
  void read(const std::string& key, double& out) {
    if (const json* v = raw(key)) {
      require(v->is_number(), ErrorKind::kConfig, where(key) + " must be a number");
      out = v->get<double>();
      require(std::isfinite(out), ErrorKind::kConfig, where(key) + " must be finite");
    }
  }
  void read(const std::string& key, bool& out) {
    if (const json* v = raw(key)) {
      require(v->is_boolean(), ErrorKind::kConfig, where(key) + " must be a boolean");
      out = v->get<bool>();
    }
  }
  void read(const std::string& key, std::string& out) {
    if (const json* v = raw(key)) {
      require(v->is_string(), ErrorKind::kConfig, where(key) + " must be a string");
      out = v->get<std::string>();
    }
  }
  void read(const std::string& key, std::vector<int>& out) {
    if (const json* v = raw(key)) {
      require(v->is_array(), ErrorKind::kConfig, where(key) + " must be an array");
      out.clear();
      for (const auto& e : *v) {
        require(e.is_number_integer(), ErrorKind::kConfig, where(key) + " must hold integers");
        out.push_back(e.get<int>());
      }
    }
  }

  Section child(const std::string& key) {
    static const json kEmpty = json::object();
    const json* v = raw(key);
    return Section(v ? *v : kEmpty, where(key));
  }

  void finish() const {
    for (const auto& [key, _] : doc_.items())
      require(seen_.count(key) > 0, ErrorKind::kConfig, "unknown key " + where(key));
  }

  std::string where(const std::string& key = "") const {
    if (key.empty()) return path_.empty() ? "config" : path_;
    return path_.empty() ? key : path_ + "." + key;
  }

 private:
  const json& doc_;
  std::string path_;
  std::set<std::string> seen_;
};

void check(bool cond, const std::string& msg) { require(cond, ErrorKind::kConfig, msg); }

MethodConfig parse_method(Section s, std::string& preset) {
  s.read("preset", preset);
  MethodConfig m;
  try {
    m = MethodConfig::preset(preset);
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, e.what());
  }
  s.read("has_predictor", m.has_predictor);
  s.read("stop_gradient", m.stop_gradient);
  s.read("target_ema", m.target_ema);
  s.read("weight_sharing", m.weight_sharing);
  if (const json* v = s.raw("loss")) {
    check(v->is_string(), "method.loss must be a string");
    try {
      m.loss_kind = loss_kind_from_string(v->get<std::string>());
    } catch (const Error& e) {
      fail(ErrorKind::kConfig, e.what());
    }
  }
  s.read("temperature", m.temperature);
  s.read("queue_size", m.queue_size);
  s.read("momentum", m.momentum);
  s.read("symmetrize", m.symmetrize);
  s.finish();
  check(m.momentum >= 0.0 && m.momentum < 1.0, "method.momentum must lie in [0, 1)");
  check(m.temperature > 0.0, "method.temperature must be positive");
  check(m.queue_size >= 1, "method.queue_size must be positive");
  try {
    m.validate();
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, e.what());
  }
  return m;
}

void parse_strategy(Section s, ExperimentConfig& cfg) {
  std::string kind = "fedema";
  s.read("kind", kind);
  cfg.standalone = false;
  if (kind == "replace") {
    cfg.strategy = update::Replace{};
  } else if (kind == "update_both") {
    cfg.strategy = update::UpdateBoth{};
  } else if (kind == "standalone") {
    cfg.strategy = update::Replace{};
    cfg.standalone = true;
  } else if (kind == "constant_mu") {
    update::ConstantMu c;
    s.read("mu_encoder", c.mu_encoder);
    s.read("mu_predictor", c.mu_predictor);
    check(c.mu_encoder >= 0.0 && c.mu_encoder <= 1.0 && c.mu_predictor >= 0.0 &&
              c.mu_predictor <= 1.0,
          "strategy mu values must lie in [0, 1]");
    cfg.strategy = c;
  } else if (kind == "fedema") {
    update::FedEma f;
    check(!(s.has("tau") && s.has("lambda")), "strategy takes either tau or lambda, not both");
    if (s.has("lambda")) {
      update::FixedScaler fixed;
      s.read("lambda", fixed.lambda);
      check(fixed.lambda >= 0.0, "strategy.lambda must be nonnegative");
      f.scaler = fixed;
    } else {
      update::AutoScaler a;
      s.read("tau", a.tau);
      check(a.tau >= 0.0 && a.tau < 1.0, "strategy.tau must lie in [0, 1)");
      f.scaler = a;
    }
    s.read("allow_weight_sharing", f.allow_weight_sharing);
    s.read("divergence_with_predictor", f.divergence_with_predictor);
    cfg.strategy = f;
  } else {
    fail(ErrorKind::kConfig, "unknown strategy kind '" + kind + "'");
  }
  s.finish();
}

json emit_strategy(const ExperimentConfig& cfg) {
  if (cfg.standalone) return {{"kind", "standalone"}};
  json out;
  std::visit(
      [&](const auto& s) {
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, update::Replace>) {
          out = {{"kind", "replace"}};
        } else if constexpr (std::is_same_v<T, update::UpdateBoth>) {
          out = {{"kind", "update_both"}};
        } else if constexpr (std::is_same_v<T, update::ConstantMu>) {
          out = {{"kind", "constant_mu"}, {"mu_encoder", s.mu_encoder}, {"mu_predictor", s.mu_predictor}};
        } else {
          out = {{"kind", "fedema"},
                 {"allow_weight_sharing", s.allow_weight_sharing},
                 {"divergence_with_predictor", s.divergence_with_predictor}};
          if (const auto* f = std::get_if<update::FixedScaler>(&s.scaler))
            out["lambda"] = f->lambda;
          else
            out["tau"] = std::get<update::AutoScaler>(s.scaler).tau;
        }
      },
      cfg.strategy);
  return out;
}

}  // namespace

ArchSpec ArchConfig::resolve(int input_dim) const {
  ArchSpec arch;
  std::vector<int> widths{input_dim};
  widths.insert(widths.end(), encoder_hidden.begin(), encoder_hidden.end());
  widths.push_back(embedding_dim);
  arch.encoder = MlpSpec::relu_mlp(widths, encoder_standardize);
  arch.encoder.init_gain = encoder_init_gain;
  arch.predictor = MlpSpec::relu_mlp({embedding_dim, predictor_hidden, embedding_dim}, true);
  arch.predictor.init_gain = predictor_init_gain;
  return arch;
}

ExperimentConfig parse_config(const json& doc) {
  ExperimentConfig cfg;
  Section root(doc, "");
  int version = kConfigSchemaVersion;
  root.read("schema_version", version);
  check(version == kConfigSchemaVersion,
        "unsupported schema_version " + std::to_string(version));

  cfg.method = parse_method(root.child("method"), cfg.preset);
  parse_strategy(root.child("strategy"), cfg);

  root.read("clients", cfg.clients);
  root.read("classes_per_client", cfg.classes_per_client);
  root.read("clients_per_round", cfg.clients_per_round);
  root.read("rounds", cfg.rounds);
  root.read("local_epochs", cfg.local_epochs);
  root.read("batch_size", cfg.batch_size);
  root.read("lr", cfg.lr);
  root.read("seed", cfg.seed);
  root.read("workers", cfg.workers);
  root.read("wire_mode", cfg.wire_mode);

  {
    Section d = root.child("dataset");
    d.read("classes", cfg.dataset.classes);
    d.read("per_class", cfg.dataset.per_class);
    d.read("test_per_class", cfg.dataset.test_per_class);
    d.read("dim", cfg.dataset.dim);
    d.read("spread", cfg.dataset.spread);
    d.read("path", cfg.dataset_path);
    d.read("test_path", cfg.test_dataset_path);
    d.finish();
  }
  {
    Section a = root.child("augmentation");
    a.read("noise_sigma", cfg.aug.noise_sigma);
    a.read("mask_prob", cfg.aug.mask_prob);
    a.read("scale_lo", cfg.aug.scale_lo);
    a.read("scale_hi", cfg.aug.scale_hi);
    a.finish();
  }
  {
    Section a = root.child("arch");
    a.read("encoder_hidden", cfg.arch.encoder_hidden);
    a.read("embedding_dim", cfg.arch.embedding_dim);
    a.read("predictor_hidden", cfg.arch.predictor_hidden);
    a.read("encoder_standardize", cfg.arch.encoder_standardize);
    a.read("encoder_init_gain", cfg.arch.encoder_init_gain);
    a.read("predictor_init_gain", cfg.arch.predictor_init_gain);
    a.finish();
  }
  {
    Section m = root.child("monitor");
    m.read("every", cfg.monitor.every);
    m.read("knn_k", cfg.monitor.knn_k);
    m.read("linear_epochs", cfg.monitor.linear_epochs);
    m.read("linear_lr", cfg.monitor.linear_lr);
    m.read("linear_batch", cfg.monitor.linear_batch);
    m.finish();
  }
  root.finish();

  check(cfg.clients >= 1, "clients must be positive");
  check(cfg.classes_per_client >= 1 && cfg.classes_per_client <= cfg.dataset.classes,
        "classes_per_client must lie in [1, dataset.classes]");
  check(cfg.clients_per_round >= 0 && cfg.clients_per_round <= cfg.clients,
        "clients_per_round must lie in [0, clients]");
  check(cfg.rounds >= 0, "rounds must be nonnegative");
  check(cfg.local_epochs >= 1, "local_epochs must be positive");
  check(cfg.batch_size >= 2, "batch_size must be at least 2");
  check(cfg.lr > 0.0, "lr must be positive");
  check(cfg.workers >= 1, "workers must be positive");
  check(cfg.dataset.classes >= 2, "dataset.classes must be at least 2");
  check(cfg.dataset.per_class >= 1 && cfg.dataset.test_per_class >= 1,
        "dataset sizes must be positive");
  check(cfg.dataset.dim >= 1, "dataset.dim must be positive");
  check(cfg.dataset.spread > 0.0, "dataset.spread must be positive");
  check(cfg.test_dataset_path.empty() || !cfg.dataset_path.empty(),
        "dataset.test_path needs dataset.path");
  check(cfg.aug.noise_sigma >= 0.0, "augmentation.noise_sigma must be nonnegative");
  check(cfg.aug.mask_prob >= 0.0 && cfg.aug.mask_prob < 1.0,
        "augmentation.mask_prob must lie in [0, 1)");
  check(cfg.aug.scale_lo > 0.0 && cfg.aug.scale_lo <= cfg.aug.scale_hi,
        "augmentation scale range must satisfy 0 < scale_lo <= scale_hi");
  for (int w : cfg.arch.encoder_hidden) check(w >= 1, "arch.encoder_hidden widths must be positive");
  check(cfg.arch.embedding_dim >= 2, "arch.embedding_dim must be at least 2");
  check(cfg.arch.predictor_hidden >= 1, "arch.predictor_hidden must be positive");
  check(cfg.arch.encoder_init_gain > 0.0 && cfg.arch.predictor_init_gain > 0.0,
        "arch init gains must be positive");
  check(cfg.monitor.every >= 0, "monitor.every must be nonnegative");
  check(cfg.monitor.knn_k >= 1, "monitor.knn_k must be positive");
  check(cfg.monitor.linear_epochs >= 1 && cfg.monitor.linear_batch >= 1 && cfg.monitor.linear_lr > 0.0,
        "monitor linear-eval settings must be positive");
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open config " + path);
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::kConfig, "config " + path + ": " + e.what());
  }
  return parse_config(doc);
}

json emit_config(const ExperimentConfig& cfg) {
  const MethodConfig& m = cfg.method;
  json doc;
  doc["schema_version"] = kConfigSchemaVersion;
  doc["method"] = {{"preset", cfg.preset},
                   {"has_predictor", m.has_predictor},
                   {"stop_gradient", m.stop_gradient},
                   {"target_ema", m.target_ema},
                   {"weight_sharing", m.weight_sharing},
                   {"loss", to_string(m.loss_kind)},
                   {"temperature", m.temperature},
                   {"queue_size", m.queue_size},
                   {"momentum", m.momentum},
                   {"symmetrize", m.symmetrize}};
  doc["strategy"] = emit_strategy(cfg);
  doc["clients"] = cfg.clients;
  doc["classes_per_client"] = cfg.classes_per_client;
  doc["clients_per_round"] = cfg.clients_per_round;
  doc["rounds"] = cfg.rounds;
  doc["local_epochs"] = cfg.local_epochs;
  doc["batch_size"] = cfg.batch_size;
  doc["lr"] = cfg.lr;
  doc["seed"] = cfg.seed;
  doc["workers"] = cfg.workers;
  doc["wire_mode"] = cfg.wire_mode;
  doc["dataset"] = {{"classes", cfg.dataset.classes},
                    {"per_class", cfg.dataset.per_class},
                    {"test_per_class", cfg.dataset.test_per_class},
                    {"dim", cfg.dataset.dim},
                    {"spread", cfg.dataset.spread},
                    {"path", cfg.dataset_path},
                    {"test_path", cfg.test_dataset_path}};
  doc["augmentation"] = {{"noise_sigma", cfg.aug.noise_sigma},
                         {"mask_prob", cfg.aug.mask_prob},
                         {"scale_lo", cfg.aug.scale_lo},
                         {"scale_hi", cfg.aug.scale_hi}};
  doc["arch"] = {{"encoder_hidden", cfg.arch.encoder_hidden},
                 {"embedding_dim", cfg.arch.embedding_dim},
                 {"predictor_hidden", cfg.arch.predictor_hidden},
                 {"encoder_standardize", cfg.arch.encoder_standardize},
                 {"encoder_init_gain", cfg.arch.encoder_init_gain},
                 {"predictor_init_gain", cfg.arch.predictor_init_gain}};
  doc["monitor"] = {{"every", cfg.monitor.every},
                    {"knn_k", cfg.monitor.knn_k},
                    {"linear_epochs", cfg.monitor.linear_epochs},
                    {"linear_lr", cfg.monitor.linear_lr},
                    {"linear_batch", cfg.monitor.linear_batch}};
  return doc;
}

void set_config_value(json& doc, const std::string& dotted_key, const std::string& value) {
  require(!dotted_key.empty(), ErrorKind::kConfig, "empty config key");
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = dotted_key.find('.', start);
    const std::string part = dotted_key.substr(start, dot - start);
    require(!part.empty(), ErrorKind::kConfig, "malformed config key '" + dotted_key + "'");
    if (!node->is_object()) *node = json::object();
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
      (*node)[part] = parsed.is_discarded() ? json(value) : parsed;
      return;
    }
    node = &(*node)[part];
    start = dot + 1;
  }
}

FederationConfig to_federation_config(const ExperimentConfig& cfg, int input_dim) {
  FederationConfig fc;
  fc.method = cfg.method;
  fc.arch = cfg.arch.resolve(input_dim);
  fc.strategy = cfg.strategy;
  fc.train.epochs = cfg.local_epochs;
  fc.train.batch_size = cfg.batch_size;
  fc.train.aug = cfg.aug;
  fc.base_lr = cfg.lr;
  fc.rounds = cfg.rounds;
  fc.clients_per_round = cfg.clients_per_round;
  fc.seed = cfg.seed;
  fc.workers = cfg.workers;
  fc.standalone = cfg.standalone;
  fc.wire_mode = cfg.wire_mode;
  return fc;
}

}  // namespace fedssl
