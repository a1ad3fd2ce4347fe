#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmcm/federation.hpp"
#include "pmcm/matching.hpp"

namespace pmcm {

namespace fs = std::filesystem;

inline constexpr int kConfigSchemaVersion = 1;

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
      throw std::invalid_argument(where + ": unknown key '" + key + "'");
  }
}

// --- named configurations ---

inline const std::vector<std::string>& named_configs() {
  static const std::vector<std::string> names = {"FedAvg+Ignore", "FedMultimodal", "FedMultimodal+RM", "FedProx+Mask",
                                                 "FedIoT+Mask",   "FedPAC+Mask",   "PmmFL+FA",         "PmcmFL",
                                                 "PC-only",       "PM-only"};
  return names;
}

// Knobs shared by every named configuration of one experiment.
struct MethodKnobs {
  double gamma = 0.1;  // prototype contrast weight for PmcmFL and PC-only
  double tau = 0.07;
  double prox_mu = 1.0;
  double fa_lambda = 1.0;
  double random_std = 1.0;
  double fediot_pair_weight = 100.0;
};

// Maps a configuration name to its (mask, loss weights, aggregation).
inline void apply_named_config(const std::string& name, const MethodKnobs& k, FederationConfig& fc) {
  fc.name = name;
  fc.weights = LossWeights{};
  fc.weights.tau = k.tau;
  fc.aggregation = Aggregation::FedAvg;
  fc.mask = MaskStrategy{};
  fc.mask.random_std = k.random_std;
  fc.fediot_pair_weight = k.fediot_pair_weight;
  if (name == "FedAvg+Ignore") {
    fc.mask.kind = MaskKind::Ignore;
  } else if (name == "FedMultimodal") {
    fc.mask.kind = MaskKind::Zero;
  } else if (name == "FedMultimodal+RM") {
    fc.mask.kind = MaskKind::Random;
  } else if (name == "FedProx+Mask") {
    fc.mask.kind = MaskKind::Random;
    fc.weights.prox_mu = k.prox_mu;
  } else if (name == "FedIoT+Mask") {
    fc.mask.kind = MaskKind::Random;
    fc.aggregation = Aggregation::FedIoT;
  } else if (name == "FedPAC+Mask") {
    fc.mask.kind = MaskKind::Random;
    fc.weights.fa_lambda = k.fa_lambda;
  } else if (name == "PmmFL+FA") {
    fc.mask.kind = MaskKind::Prototype;
    fc.weights.fa_lambda = k.fa_lambda;
  } else if (name == "PmcmFL") {
    fc.mask.kind = MaskKind::Prototype;
    fc.weights.gamma = k.gamma;
  } else if (name == "PC-only") {
    fc.mask.kind = MaskKind::Random;
    fc.weights.gamma = k.gamma;
  } else if (name == "PM-only") {
    fc.mask.kind = MaskKind::Prototype;
  } else {
    throw std::invalid_argument("unknown configuration '" + name + "'");
  }
}

// --- run settings ---

struct RunSettings {
  MultiwayConfig model;
  std::size_t rounds = 20;
  std::size_t clients = 8;
  double fraction = 0.5;
  std::size_t epochs = 2;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  double alpha = 0.1;
  MethodKnobs knobs;
  bool train_matchers = false;
  MatcherTrainConfig matcher;
};

inline void settings_to_json(nlohmann::json& j, const RunSettings& s) {
  j["model"] = s.model;
  j["federation"] = {{"rounds", s.rounds}, {"clients", s.clients}, {"fraction", s.fraction}, {"epochs", s.epochs},
                     {"lr", s.lr},         {"batch_size", s.batch_size}, {"alpha", s.alpha}};
  j["method"] = {{"gamma", s.knobs.gamma},       {"tau", s.knobs.tau},
                 {"prox_mu", s.knobs.prox_mu},   {"fa_lambda", s.knobs.fa_lambda},
                 {"random_std", s.knobs.random_std}, {"fediot_pair_weight", s.knobs.fediot_pair_weight}};
  j["matchers"] = {{"train", s.train_matchers},
                   {"classifier_epochs", s.matcher.classifier_epochs},
                   {"prior_contrastive_epochs", s.matcher.prior_contrastive_epochs},
                   {"prior_mse_epochs", s.matcher.prior_mse_epochs},
                   {"lr", s.matcher.lr}};
}

inline void settings_from_json(const nlohmann::json& j, RunSettings& s) {
  if (j.contains("model")) s.model = j.at("model").get<MultiwayConfig>();
  if (j.contains("federation")) {
    const auto& f = j.at("federation");
    reject_unknown_keys(f, {"rounds", "clients", "fraction", "epochs", "lr", "batch_size", "alpha"}, "federation");
    s.rounds = f.value("rounds", s.rounds);
    s.clients = f.value("clients", s.clients);
    s.fraction = f.value("fraction", s.fraction);
    s.epochs = f.value("epochs", s.epochs);
    s.lr = f.value("lr", s.lr);
    s.batch_size = f.value("batch_size", s.batch_size);
    s.alpha = f.value("alpha", s.alpha);
  }
  if (j.contains("method")) {
    const auto& m = j.at("method");
    reject_unknown_keys(m, {"gamma", "tau", "prox_mu", "fa_lambda", "random_std", "fediot_pair_weight"}, "method");
    s.knobs.gamma = m.value("gamma", s.knobs.gamma);
    s.knobs.tau = m.value("tau", s.knobs.tau);
    s.knobs.prox_mu = m.value("prox_mu", s.knobs.prox_mu);
    s.knobs.fa_lambda = m.value("fa_lambda", s.knobs.fa_lambda);
    s.knobs.random_std = m.value("random_std", s.knobs.random_std);
    s.knobs.fediot_pair_weight = m.value("fediot_pair_weight", s.knobs.fediot_pair_weight);
  }
  if (j.contains("matchers")) {
    const auto& m = j.at("matchers");
    reject_unknown_keys(m, {"train", "classifier_epochs", "prior_contrastive_epochs", "prior_mse_epochs", "lr"}, "matchers");
    s.train_matchers = m.value("train", s.train_matchers);
    s.matcher.classifier_epochs = m.value("classifier_epochs", s.matcher.classifier_epochs);
    s.matcher.prior_contrastive_epochs = m.value("prior_contrastive_epochs", s.matcher.prior_contrastive_epochs);
    s.matcher.prior_mse_epochs = m.value("prior_mse_epochs", s.matcher.prior_mse_epochs);
    s.matcher.lr = m.value("lr", s.matcher.lr);
  }
}

inline void check_schema_version(const nlohmann::json& j, const std::string& where) {
  if (!j.contains("schema_version")) throw std::invalid_argument(where + ": missing schema_version");
  if (j.at("schema_version").get<int>() != kConfigSchemaVersion)
    throw std::invalid_argument(where + ": unsupported schema_version " + j.at("schema_version").dump());
}

// One federated run (the `train` subcommand).
struct RunConfig {
  std::string name = "PmcmFL";
  double rho_train = 0.5;
  std::uint64_t seed = 1;
  RunSettings settings;

  FederationConfig federation(std::size_t workers = 1) const {
    FederationConfig fc;
    fc.rounds = settings.rounds;
    fc.clients = settings.clients;
    fc.fraction = settings.fraction;
    fc.epochs = settings.epochs;
    fc.lr = settings.lr;
    fc.batch_size = settings.batch_size;
    fc.seed = seed;
    fc.workers = workers;
    apply_named_config(name, settings.knobs, fc);
    fc.validate();
    return fc;
  }

  PartitionSpec partition() const {
    PartitionSpec ps;
    ps.num_clients = settings.clients;
    ps.alpha = settings.alpha;
    ps.rho_train = rho_train;
    ps.seed = seed;
    return ps;
  }
};

inline nlohmann::json run_config_json(const RunConfig& c) {
  nlohmann::json j = {{"schema_version", kConfigSchemaVersion}, {"name", c.name}, {"rho_train", c.rho_train}, {"seed", c.seed}};
  settings_to_json(j, c.settings);
  return j;
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  reject_unknown_keys(j, {"schema_version", "name", "rho_train", "seed", "model", "federation", "method", "matchers"}, "run config");
  check_schema_version(j, "run config");
  RunConfig c;
  c.name = j.value("name", c.name);
  c.rho_train = j.value("rho_train", c.rho_train);
  c.seed = j.value("seed", c.seed);
  settings_from_json(j, c.settings);
  c.federation();  // validates name and numbers
  c.partition().validate();
  return c;
}

// The baseline x missing-rate matrix (the `matrix` subcommand).
struct ExperimentSpec {
  std::vector<std::string> configs = {"FedMultimodal", "PmcmFL"};
  std::vector<double> rho_train = {0.5};
  std::vector<double> rho_test;  // extra test-time missingness evaluations
  std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
  std::optional<CorpusSpec> data;     // generated in memory
  std::optional<std::string> data_file;  // or read from a corpus file
  RunSettings settings;

  void validate() const {
    if (configs.empty()) throw std::invalid_argument("experiment: configs must be non-empty");
    if (seeds.empty()) throw std::invalid_argument("experiment: seeds must be non-empty");
    if (rho_train.empty()) throw std::invalid_argument("experiment: rho_train must be non-empty");
    std::set<std::string> seen;
    for (const auto& c : configs) {
      FederationConfig probe;
      apply_named_config(c, settings.knobs, probe);
      if (!seen.insert(c).second) throw std::invalid_argument("experiment: duplicate config '" + c + "'");
    }
    for (double r : rho_train)
      if (!(r >= 0.0 && r < 1.0)) throw std::invalid_argument("experiment: rho_train values must be in [0, 1)");
    for (double r : rho_test)
      if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("experiment: rho_test values must be in [0, 1]");
    if (data && data_file) throw std::invalid_argument("experiment: give either data or data_file");
    if (!data && !data_file) throw std::invalid_argument("experiment: data or data_file required");
  }
};

inline nlohmann::json experiment_json(const ExperimentSpec& e) {
  nlohmann::json j = {{"schema_version", kConfigSchemaVersion},
                      {"configs", e.configs},
                      {"rho_train", e.rho_train},
                      {"rho_test", e.rho_test},
                      {"seeds", e.seeds}};
  if (e.data) j["data"] = *e.data;
  if (e.data_file) j["data_file"] = *e.data_file;
  settings_to_json(j, e.settings);
  return j;
}

inline ExperimentSpec parse_experiment(const nlohmann::json& j) {
  reject_unknown_keys(j, {"schema_version", "configs", "rho_train", "rho_test", "seeds", "data", "data_file", "model",
                          "federation", "method", "matchers"},
                      "experiment");
  check_schema_version(j, "experiment");
  ExperimentSpec e;
  e.configs = j.value("configs", e.configs);
  e.rho_train = j.value("rho_train", e.rho_train);
  e.rho_test = j.value("rho_test", e.rho_test);
  e.seeds = j.value("seeds", e.seeds);
  if (j.contains("data")) e.data = j.at("data").get<CorpusSpec>();
  if (j.contains("data_file")) e.data_file = j.at("data_file").get<std::string>();
  settings_from_json(j, e.settings);
  e.validate();
  return e;
}

inline nlohmann::json read_json_file(const fs::path& p) {
  try {
    return nlohmann::json::parse(bytes::read_text(p));
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(p.string() + ": " + e.what());
  }
}

// --- corpus files ---

inline std::vector<CorpusRecord> corpus_records(const Corpus& c) {
  std::vector<CorpusRecord> out;
  for (const auto& s : c.train) out.push_back({s, "train", std::nullopt});
  for (const auto& s : c.test) out.push_back({s, "test", std::nullopt});
  return out;
}

inline Corpus corpus_from_records(const std::vector<CorpusRecord>& records) {
  Corpus c;
  for (const auto& r : records) {
    if (r.split == "train") c.train.push_back(r.sample);
    else if (r.split == "test") c.test.push_back(r.sample);
    else throw std::invalid_argument("corpus: unknown split '" + r.split + "'");
  }
  if (c.train.empty()) throw std::invalid_argument("corpus: no training samples");
  return c;
}

inline Corpus load_corpus(const fs::path& p) { return corpus_from_records(read_corpus_jsonl(p)); }

// --- single runs ---

struct RunOutcome {
  RunConfig config;
  FederationResult result;
  MissingnessStats missingness;
  std::map<double, double> rho_test_accuracy;
  std::vector<Matcher> matchers;
};

// Test-time missingness evaluation with the stand-in the method trains with;
// prototype methods use top-1 L2 matching.
inline double evaluate_with_missing(const ModelParams& params, const MultiwayConfig& mc, const std::vector<MultimodalSample>& test,
                                    const PrototypeLibrary& lib, const FederationConfig& fc, double rho, std::uint64_t seed) {
  auto samples = test;
  if (rho >= 1.0) {
    // Every sample loses one modality; which one is a fair coin.
    Rng coin(derive_seed(seed, "test-missing-full"));
    for (auto& s : samples) {
      if (coin.bernoulli(0.5)) {
        s.has_text = false;
        s.text = Tensor();
      } else {
        s.has_image = false;
        s.image = Tensor();
      }
    }
  } else {
    inject_missingness(samples, rho, derive_seed(seed, "test-missing"));
  }
  InferenceSpec spec;
  spec.seed = seed;
  spec.random_std = fc.mask.random_std;
  switch (fc.mask.kind) {
    case MaskKind::Ignore:
    case MaskKind::Zero: spec.mask = InferenceMask::Zero; break;
    case MaskKind::Random: spec.mask = InferenceMask::Random; break;
    case MaskKind::Prototype:
      spec.mask = InferenceMask::Prototype;
      spec.image_matcher = model_free_matcher(MatcherKind::L2, Family::Image);
      spec.text_matcher = model_free_matcher(MatcherKind::L2, Family::Text);
      break;
  }
  return infer_batch(params, mc, samples, lib, spec).accuracy;
}

// All nine matcher variants reading `family`.
inline std::vector<Matcher> build_matchers(const ModelParams& params, const MultiwayConfig& mc,
                                           const std::vector<ClientDataset>& datasets, const PrototypeLibrary& lib,
                                           Family family, const MatcherTrainConfig& tc, std::uint64_t seed,
                                           std::size_t workers = 1) {
  std::vector<Matcher> out;
  for (auto k : {MatcherKind::L1, MatcherKind::L2, MatcherKind::Cosine}) out.push_back(model_free_matcher(k, family));
  for (auto kind : {MatcherKind::Classifier, MatcherKind::Prior}) {
    const auto per_client = train_client_matchers(params, mc, datasets, lib, family, kind, tc, seed, workers);
    if (per_client.empty()) continue;
    for (auto mode : {MatcherMode::MaxSamples, MatcherMode::ParamAvg, MatcherMode::Ensemble})
      out.push_back(combine_matchers(kind, family, mode, per_client));
  }
  return out;
}

inline RunOutcome execute_run(const RunConfig& rc, const Corpus& corpus, const std::vector<double>& rho_test = {},
                              std::size_t workers = 1, bool keep_client_models = false) {
  RunOutcome out;
  out.config = rc;
  FederationConfig fc = rc.federation(workers);
  fc.keep_client_models = keep_client_models;
  const MultiwayConfig& mc = rc.settings.model;
  const auto datasets = make_federated_data(corpus.train, rc.partition(), &out.missingness);
  out.result = run_federation(fc, mc, datasets, corpus.test);
  for (double r : rho_test)
    out.rho_test_accuracy[r] = evaluate_with_missing(out.result.final_params, mc, corpus.test, out.result.library, fc, r, rc.seed);
  if (rc.settings.train_matchers) {
    for (Family f : {Family::Image, Family::Text}) {
      auto ms = build_matchers(out.result.final_params, mc, datasets, out.result.library, f, rc.settings.matcher, rc.seed, workers);
      out.matchers.insert(out.matchers.end(), ms.begin(), ms.end());
    }
  }
  return out;
}

inline std::string rho_key(double r) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", r);
  return buf;
}

// Run directory layout:
//   run.json  config.json  metrics.csv  client_metrics.csv  timing.csv
//   checkpoint.{json,bin}  library.bin  [matchers.json]  [clients/client_<n>.{json,bin}]
inline void write_run(const fs::path& dir, const RunOutcome& o) {
  fs::create_directories(dir);
  const auto& r = o.result;
  bytes::write_text(dir / "config.json", run_config_json(o.config).dump(2) + "\n");
  bytes::write_text(dir / "metrics.csv", metrics_csv(r));
  bytes::write_text(dir / "client_metrics.csv", client_metrics_csv(r));
  bytes::write_text(dir / "timing.csv", timing_csv(r));
  save_checkpoint(dir / "checkpoint", r.final_params, o.config.settings.model);
  save_library(dir / "library.bin", r.library);
  if (!o.matchers.empty()) save_matchers(dir / "matchers.json", o.matchers);
  for (std::size_t i = 0; i < r.last_client_models.size(); ++i)
    save_checkpoint(dir / "clients" / ("client_" + std::to_string(r.last_clients[i])), r.last_client_models[i],
                    o.config.settings.model);
  nlohmann::json rt = nlohmann::json::object();
  for (const auto& [rho, acc] : o.rho_test_accuracy) rt[rho_key(rho)] = acc;
  nlohmann::json summary = {
      {"status", "ok"},
      {"name", o.config.name},
      {"rho_train", o.config.rho_train},
      {"seed", o.config.seed},
      {"rounds", r.rounds.size()},
      {"final_accuracy", r.final_accuracy()},
      {"last_round_accuracy", r.rounds.empty() ? 0.0 : r.rounds.back().accuracy},
      {"client_drift", r.rounds.empty() || !r.rounds.back().client_drift ? nlohmann::json() : nlohmann::json(*r.rounds.back().client_drift)},
      {"param_count", param_count(r.final_params)},
      {"model_bytes", r.model_blob_bytes},
      {"library_bytes", r.library_blob_bytes},
      {"rho_test_accuracy", rt},
      {"missingness",
       {{"samples", o.missingness.samples},
        {"complete", o.missingness.complete},
        {"image_only", o.missingness.image_only},
        {"text_only", o.missingness.text_only}}}};
  bytes::write_text(dir / "run.json", summary.dump(2) + "\n");
}

// --- summary tables ---

struct SummaryCell {
  std::vector<double> values;
  double mean() const {
    if (values.empty()) return 0.0;
    double s = 0.0;
    for (double v : values) s += v;
    return s / static_cast<double>(values.size());
  }
  // Sample standard deviation; 0 with fewer than two values.
  double stddev() const {
    if (values.size() < 2) return 0.0;
    const double m = mean();
    double s = 0.0;
    for (double v : values) s += (v - m) * (v - m);
    return std::sqrt(s / static_cast<double>(values.size() - 1));
  }
};

struct SummaryTable {
  std::vector<std::string> rows;  // configurations
  std::vector<double> columns;    // missing rates
  std::vector<std::vector<SummaryCell>> cells;

  double acc_sum(std::size_t r) const {
    double s = 0.0;
    for (const auto& c : cells[r]) s += c.mean();
    return s;
  }
};

struct RunSummary {
  fs::path dir;
  std::string name;
  double rho_train = 0.0;
  std::uint64_t seed = 0;
  double final_accuracy = 0.0;
  std::optional<double> client_drift;
  std::size_t param_count = 0;
  std::uint64_t model_bytes = 0;
  std::uint64_t library_bytes = 0;
  std::map<std::string, double> rho_test_accuracy;
  std::vector<double> curve;  // accuracy per round
};

inline std::vector<double> read_accuracy_curve(const fs::path& metrics) {
  std::ifstream in(metrics);
  if (!in) throw std::runtime_error("missing metrics file " + metrics.string());
  std::string header, line;
  if (!std::getline(in, header) || header.rfind("round,", 0) != 0)
    throw std::runtime_error(metrics.string() + ": empty or malformed curve file");
  std::vector<double> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string round, selected, acc;
    std::getline(ss, round, ',');
    std::getline(ss, selected, ',');
    std::getline(ss, acc, ',');
    try {
      out.push_back(std::stod(acc));
    } catch (const std::exception&) {
      throw std::runtime_error(metrics.string() + ": bad accuracy field '" + acc + "'");
    }
  }
  if (out.empty()) throw std::runtime_error(metrics.string() + ": curve file has no rounds");
  return out;
}

inline RunSummary read_run(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("run directory not found: " + dir.string());
  const auto j = read_json_file(dir / "run.json");
  if (j.value("status", "") != "ok") throw std::runtime_error(dir.string() + ": run did not complete");
  RunSummary r;
  r.dir = dir;
  r.name = j.at("name").get<std::string>();
  r.rho_train = j.at("rho_train").get<double>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.final_accuracy = j.at("final_accuracy").get<double>();
  if (j.contains("client_drift") && !j.at("client_drift").is_null()) r.client_drift = j.at("client_drift").get<double>();
  r.param_count = j.at("param_count").get<std::size_t>();
  r.model_bytes = j.at("model_bytes").get<std::uint64_t>();
  r.library_bytes = j.at("library_bytes").get<std::uint64_t>();
  const auto rho_test = j.value("rho_test_accuracy", nlohmann::json::object());
  for (const auto& [k, v] : rho_test.items()) r.rho_test_accuracy[k] = v.get<double>();
  r.curve = read_accuracy_curve(dir / "metrics.csv");
  return r;
}

// Rows follow `order` when given (names not in it are appended sorted);
// columns are the sorted distinct missing rates.
inline SummaryTable summarize(const std::vector<RunSummary>& runs, const std::vector<std::string>& order = {}) {
  SummaryTable t;
  std::set<std::string> names;
  std::set<double> rhos;
  for (const auto& r : runs) {
    names.insert(r.name);
    rhos.insert(r.rho_train);
  }
  for (const auto& n : order)
    if (names.count(n)) t.rows.push_back(n);
  for (const auto& n : names)
    if (std::find(t.rows.begin(), t.rows.end(), n) == t.rows.end()) t.rows.push_back(n);
  t.columns.assign(rhos.begin(), rhos.end());
  t.cells.assign(t.rows.size(), std::vector<SummaryCell>(t.columns.size()));
  std::vector<const RunSummary*> sorted;
  for (const auto& r : runs) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->seed < b->seed; });
  for (const auto* r : sorted) {
    const auto row = static_cast<std::size_t>(std::find(t.rows.begin(), t.rows.end(), r->name) - t.rows.begin());
    const auto col = static_cast<std::size_t>(std::find(t.columns.begin(), t.columns.end(), r->rho_train) - t.columns.begin());
    t.cells[row][col].values.push_back(r->final_accuracy);
  }
  return t;
}

inline std::string pct(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", 100.0 * v);
  return buf;
}

inline std::string summary_markdown(const SummaryTable& t) {
  std::ostringstream os;
  os << "| Configuration |";
  for (double c : t.columns) os << " rho=" << rho_key(c) << " |";
  os << " Acc@sum |\n|---|";
  for (std::size_t i = 0; i < t.columns.size(); ++i) os << "---|";
  os << "---|\n";
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    os << "| " << t.rows[r] << " |";
    for (const auto& c : t.cells[r]) os << ' ' << pct(c.mean()) << " ± " << pct(c.stddev()) << " |";
    os << ' ' << pct(t.acc_sum(r)) << " |\n";
  }
  return os.str();
}

inline nlohmann::json summary_json(const SummaryTable& t) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    nlohmann::json cells = nlohmann::json::array();
    for (std::size_t c = 0; c < t.columns.size(); ++c) {
      const auto& cell = t.cells[r][c];
      cells.push_back({{"rho_train", t.columns[c]}, {"mean", cell.mean()}, {"std", cell.stddev()}, {"values", cell.values}});
    }
    rows.push_back({{"config", t.rows[r]}, {"cells", cells}, {"acc_sum", t.acc_sum(r)}});
  }
  return {{"columns", t.columns}, {"rows", rows}};
}

struct Report {
  std::string markdown;
  nlohmann::json json;
  std::string curves_csv;
};

// Tables, per-round curves and transfer overhead for a set of completed runs.
// Output depends only on the runs' contents, not on argument order.
inline Report build_report(std::vector<RunSummary> runs, const std::vector<std::string>& order = {}) {
  if (runs.empty()) throw std::invalid_argument("report: no runs");
  std::sort(runs.begin(), runs.end(), [](const RunSummary& a, const RunSummary& b) {
    return std::tie(a.name, a.rho_train, a.seed) < std::tie(b.name, b.rho_train, b.seed);
  });
  Report rep;
  const SummaryTable t = summarize(runs, order);
  std::ostringstream md;
  md << "# Experiment summary\n\n";
  md << "Final accuracy (%) is the best test accuracy over the last 10 rounds, mean ± std over seeds.\n\n";
  md << summary_markdown(t) << '\n';

  std::set<std::string> rho_test_keys;
  for (const auto& r : runs)
    for (const auto& [k, _] : r.rho_test_accuracy) rho_test_keys.insert(k);
  nlohmann::json rho_test_json = nlohmann::json::array();
  if (!rho_test_keys.empty()) {
    md << "## Accuracy under test-time missingness (%)\n\n| Configuration | rho_train |";
    for (const auto& k : rho_test_keys) md << " rho_test=" << k << " |";
    md << "\n|---|---|";
    for (std::size_t i = 0; i < rho_test_keys.size(); ++i) md << "---|";
    md << '\n';
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      for (double col : t.columns) {
        md << "| " << t.rows[r] << " | " << rho_key(col) << " |";
        for (const auto& k : rho_test_keys) {
          SummaryCell cell;
          for (const auto& run : runs)
            if (run.name == t.rows[r] && run.rho_train == col && run.rho_test_accuracy.count(k))
              cell.values.push_back(run.rho_test_accuracy.at(k));
          md << ' ' << pct(cell.mean()) << " |";
          rho_test_json.push_back({{"config", t.rows[r]}, {"rho_train", col}, {"rho_test", k}, {"mean", cell.mean()}, {"std", cell.stddev()}});
        }
        md << '\n';
      }
    }
    md << '\n';
  }

  md << "## Client drift\n\nMean pairwise distance between participating clients' fused class centroids in the last round.\n\n";
  md << "| Configuration | rho_train | drift |\n|---|---|---|\n";
  nlohmann::json drift_json = nlohmann::json::array();
  for (const auto& name : t.rows) {
    for (double col : t.columns) {
      SummaryCell cell;
      for (const auto& run : runs)
        if (run.name == name && run.rho_train == col && run.client_drift) cell.values.push_back(*run.client_drift);
      if (cell.values.empty()) continue;
      md << "| " << name << " | " << rho_key(col) << " | " << fmt_double(cell.mean()) << " |\n";
      drift_json.push_back({{"config", name}, {"rho_train", col}, {"mean", cell.mean()}, {"values", cell.values}});
    }
  }

  md << "\n## Communication overhead\n\n| Model parameters | Model blob (bytes) | Library blob (bytes) | Library / model |\n|---|---|---|---|\n";
  std::set<std::tuple<std::size_t, std::uint64_t, std::uint64_t>> sizes;
  for (const auto& r : runs) sizes.insert({r.param_count, r.model_bytes, r.library_bytes});
  nlohmann::json overhead = nlohmann::json::array();
  for (const auto& [pc, mb, lb] : sizes) {
    const double ratio = static_cast<double>(lb) / static_cast<double>(mb);
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f%%", 100.0 * ratio);
    md << "| " << pc << " | " << mb << " | " << lb << " | " << buf << " |\n";
    overhead.push_back({{"param_count", pc}, {"model_bytes", mb}, {"library_bytes", lb}, {"ratio", ratio}});
  }

  std::ostringstream curves;
  curves << "config,rho_train,seed,round,accuracy\n";
  for (const auto& r : runs)
    for (std::size_t i = 0; i < r.curve.size(); ++i)
      curves << r.name << ',' << fmt_double(r.rho_train) << ',' << r.seed << ',' << i + 1 << ',' << fmt_double(r.curve[i]) << '\n';

  nlohmann::json runs_json = nlohmann::json::array();
  for (const auto& r : runs)
    runs_json.push_back({{"config", r.name}, {"rho_train", r.rho_train}, {"seed", r.seed}, {"final_accuracy", r.final_accuracy}});
  rep.markdown = md.str();
  rep.json = {{"summary", summary_json(t)}, {"rho_test", rho_test_json}, {"client_drift", drift_json}, {"overhead", overhead}, {"runs", runs_json}};
  rep.curves_csv = curves.str();
  return rep;
}

// Run directories below `root` (any directory holding a run.json), sorted.
inline std::vector<fs::path> find_run_dirs(const fs::path& root) {
  if (!fs::is_directory(root)) throw std::runtime_error("run directory not found: " + root.string());
  std::vector<fs::path> out;
  if (fs::exists(root / "run.json")) out.push_back(root);
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && e.path().filename() == "run.json" && e.path().parent_path() != root) out.push_back(e.path().parent_path());
  std::sort(out.begin(), out.end());
  return out;
}

inline void write_report(const fs::path& out, const Report& rep) {
  fs::create_directories(out);
  bytes::write_text(out / "summary.md", rep.markdown);
  bytes::write_text(out / "summary.json", rep.json.dump(2) + "\n");
  bytes::write_text(out / "curves.csv", rep.curves_csv);
}

// --- matrix ---

struct CellFailure {
  std::string config;
  double rho_train;
  std::uint64_t seed;
  std::string error;
};

struct MatrixResult {
  SummaryTable table;
  std::vector<RunSummary> runs;
  std::vector<CellFailure> failures;
  bool complete() const { return failures.empty(); }
};

inline fs::path run_dir_for(const fs::path& root, const std::string& config, double rho, std::uint64_t seed) {
  return root / "runs" / config / ("rho" + rho_key(rho)) / ("seed" + std::to_string(seed));
}

// Every (config, rho, seed) cell: configurations within one (rho, seed) see
// the same client datasets because partition and missingness derive only
// from the seed. Cells run on up to `workers` threads; a failing cell is
// recorded and the rest continue.
inline MatrixResult run_matrix(const ExperimentSpec& spec, const fs::path& out, std::size_t workers = 1) {
  spec.validate();
  const Corpus corpus = spec.data ? generate_corpus(*spec.data) : load_corpus(*spec.data_file);
  fs::create_directories(out);
  bytes::write_text(out / "experiment.json", experiment_json(spec).dump(2) + "\n");

  struct Job {
    std::string config;
    double rho;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (double rho : spec.rho_train)
    for (std::uint64_t seed : spec.seeds)
      for (const auto& c : spec.configs) jobs.push_back({c, rho, seed});

  std::vector<std::optional<RunSummary>> done(jobs.size());
  std::vector<std::optional<std::string>> errors(jobs.size());
  parallel_for(jobs.size(), workers, [&](std::size_t i) {
    const auto& job = jobs[i];
    try {
      RunConfig rc;
      rc.name = job.config;
      rc.rho_train = job.rho;
      rc.seed = job.seed;
      rc.settings = spec.settings;
      const auto outcome = execute_run(rc, corpus, spec.rho_test);
      const auto dir = run_dir_for(out, job.config, job.rho, job.seed);
      write_run(dir, outcome);
      done[i] = read_run(dir);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });

  MatrixResult res;
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (done[i]) res.runs.push_back(*done[i]);
    if (errors[i]) res.failures.push_back({jobs[i].config, jobs[i].rho, jobs[i].seed, *errors[i]});
  }
  nlohmann::json failed = nlohmann::json::array();
  for (const auto& f : res.failures) failed.push_back({{"config", f.config}, {"rho_train", f.rho_train}, {"seed", f.seed}, {"error", f.error}});
  bytes::write_text(out / "failures.json", failed.dump(2) + "\n");
  if (!res.runs.empty()) {
    res.table = summarize(res.runs, spec.configs);
    write_report(out / "report", build_report(res.runs, spec.configs));
  }
  return res;
}

// --- representation dumps ---

struct DumpRow {
  std::size_t sample_id = 0;
  std::optional<std::size_t> client;
  std::size_t label = 0;
  std::vector<double> fused;
};

// Fused representations of the complete test samples.
inline std::vector<DumpRow> dump_representations(const ModelParams& params, const MultiwayConfig& cfg,
                                                 const std::vector<MultimodalSample>& test,
                                                 std::optional<std::size_t> client = std::nullopt) {
  const auto reps = encode_samples(params, cfg, test, EncodeMode::Natural);
  std::vector<DumpRow> out;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (!reps[i].fused) throw std::invalid_argument("dump: sample " + std::to_string(test[i].id) + " is not a complete pair");
    out.push_back({test[i].id, client, test[i].label, reps[i].fused->values()});
  }
  return out;
}

inline std::string dump_csv(const std::vector<DumpRow>& rows) {
  std::ostringstream os;
  os << "sample_id,client,label";
  const std::size_t d = rows.empty() ? 0 : rows.front().fused.size();
  for (std::size_t c = 0; c < d; ++c) os << ",h" << c;
  os << '\n';
  for (const auto& r : rows) {
    os << r.sample_id << ',' << (r.client ? std::to_string(*r.client) : "") << ',' << r.label;
    for (double v : r.fused) os << ',' << fmt_double(v);
    os << '\n';
  }
  return os.str();
}

inline std::vector<DumpRow> parse_dump_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line.rfind("sample_id,client,label", 0) != 0) throw FormatError("dump: bad header");
  std::vector<DumpRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    DumpRow r;
    std::getline(ss, field, ',');
    r.sample_id = std::stoull(field);
    std::getline(ss, field, ',');
    if (!field.empty()) r.client = std::stoull(field);
    std::getline(ss, field, ',');
    r.label = std::stoull(field);
    while (std::getline(ss, field, ',')) r.fused.push_back(std::stod(field));
    rows.push_back(std::move(r));
  }
  return rows;
}

// Client drift from dumped rows: per-client class centroids, then the mean
// pairwise distance over client pairs that both hold the class.
inline double client_drift_from_dumps(const std::vector<DumpRow>& rows, std::size_t classes) {
  std::map<std::size_t, LocalPrototypes> per_client;
  for (const auto& r : rows) {
    if (!r.client) throw std::invalid_argument("drift: dump rows need a client id");
    auto& lp = per_client[*r.client];
    if (lp.families[2].counts.empty()) {
      lp.client = *r.client;
      lp.classes = classes;
      lp.dim = r.fused.size();
      for (auto& f : lp.families) {
        f.centroids = Tensor::matrix(classes, lp.dim);
        f.counts.assign(classes, 0);
      }
    }
    auto& f = lp.family(Family::Fused);
    auto row = f.centroids.row(r.label);
    for (std::size_t c = 0; c < lp.dim; ++c) row[c] += r.fused[c];
    ++f.counts[r.label];
  }
  std::vector<LocalPrototypes> list;
  for (auto& [_, lp] : per_client) {
    auto& f = lp.family(Family::Fused);
    for (std::size_t j = 0; j < classes; ++j)
      if (f.counts[j]) {
        const double inv = 1.0 / static_cast<double>(f.counts[j]);
        for (double& v : f.centroids.row(j)) v *= inv;
      }
    list.push_back(std::move(lp));
  }
  return client_drift(list);
}

}  // namespace pmcm
