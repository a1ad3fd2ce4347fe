#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "pmcm/parallel.hpp"
#include "pmcm/prototypes.hpp"
#include "pmcm/training.hpp"

namespace pmcm {

enum class Aggregation { FedAvg, FedIoT };

inline const char* aggregation_name(Aggregation a) { return a == Aggregation::FedAvg ? "fedavg" : "fediot"; }

inline Aggregation parse_aggregation(const std::string& s) {
  if (s == "fedavg") return Aggregation::FedAvg;
  if (s == "fediot") return Aggregation::FedIoT;
  throw std::invalid_argument("unknown aggregation '" + s + "'");
}

struct FederationConfig {
  std::string name = "PmcmFL";
  std::size_t rounds = 20;
  std::size_t clients = 8;
  double fraction = 0.5;
  std::size_t epochs = 2;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  MaskStrategy mask;
  LossWeights weights;
  Aggregation aggregation = Aggregation::FedAvg;
  double fediot_pair_weight = 100.0;
  PrototypeWeighting prototype_weighting = PrototypeWeighting::Normalized;
  std::size_t workers = 1;
  // Last round only: per-client fused centroids on the test set (drift
  // metric) and copies of the client models.
  bool measure_client_drift = true;
  bool keep_client_models = false;
  bool record_steps = false;

  std::size_t selected_count() const {
    const double k = std::ceil(fraction * static_cast<double>(clients) - 1e-12);
    return std::max<std::size_t>(1, static_cast<std::size_t>(k));
  }

  void validate() const {
    if (rounds < 1) throw std::invalid_argument("federation: rounds must be >= 1");
    if (clients < 1) throw std::invalid_argument("federation: clients must be >= 1");
    if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("federation: fraction must be in (0, 1]");
    if (batch_size == 0) throw std::invalid_argument("federation: batch_size must be > 0");
    if (lr < 0.0) throw std::invalid_argument("federation: lr must be >= 0");
    weights.validate();
  }

  LocalTrainConfig local() const {
    LocalTrainConfig tc;
    tc.epochs = epochs;
    tc.batch_size = batch_size;
    tc.optimizer.lr = lr;
    tc.mask = mask;
    tc.weights = weights;
    return tc;
  }
};

// Uniform sample of k = max(1, ceil(s*N)) clients without replacement from a
// per-round stream; returned sorted.
inline std::vector<std::size_t> select_clients(std::size_t round, std::size_t num_clients, double fraction,
                                               std::uint64_t seed) {
  FederationConfig probe;
  probe.clients = num_clients;
  probe.fraction = fraction;
  const std::size_t k = std::min(num_clients, probe.selected_count());
  std::vector<std::size_t> ids(num_clients);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "select", {round}));
  // Partial Fisher-Yates: the first k slots are the sample.
  for (std::size_t i = 0; i < k; ++i) std::swap(ids[i], ids[i + rng.below(num_clients - i)]);
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline std::vector<double> normalize_weights(std::span<const double> raw) {
  double total = 0.0;
  for (double w : raw) {
    if (!(w > 0.0)) throw std::invalid_argument("aggregation weights must be > 0");
    total += w;
  }
  std::vector<double> out(raw.begin(), raw.end());
  for (double& w : out) w /= total;
  return out;
}

// Coordinate-wise weighted mean; weights are normalized to sum to 1.
inline ModelParams aggregate_models(std::span<const ModelParams> locals, std::span<const double> weights) {
  if (locals.empty() || locals.size() != weights.size()) throw std::invalid_argument("aggregate_models: need one weight per model");
  const auto w = normalize_weights(weights);
  ModelParams out = locals.front();
  auto dst = param_leaves(out);
  for (Tensor* t : dst) t->fill(0.0);
  for (std::size_t n = 0; n < locals.size(); ++n) {
    auto src = param_leaves(locals[n]);
    if (src.size() != dst.size()) throw ShapeError("aggregate_models: parameter trees differ");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      dst[i]->require_same_shape(*src[i], "aggregate_models");
      dst[i]->axpy(w[n], *src[i]);
    }
  }
  return out;
}

inline double aggregation_weight(const ClientDataset& d, Aggregation a, double pair_multiplier) {
  const auto total = static_cast<double>(d.size());
  if (a == Aggregation::FedAvg) return total;
  const auto pairs = static_cast<double>(d.pair_count());
  return (total - pairs) + pair_multiplier * pairs;
}

// Index of the largest value, lowest index on ties.
inline std::size_t argmax(std::span<const double> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

// Accuracy of the full model on modality-complete samples.
inline double evaluate_complete(const ModelParams& params, const MultiwayConfig& cfg,
                                const std::vector<MultimodalSample>& samples, std::size_t chunk = 256) {
  if (samples.empty()) return 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t n = std::min(chunk, samples.size() - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    for (std::size_t i : idx)
      if (!samples[i].complete()) throw std::invalid_argument("evaluate_complete: test sample missing a modality");
    Graph g(false);
    ModelVars v = bind_params(g, params);
    Tensor img = stack_tokens(samples, idx, true);
    Tensor txt = stack_tokens(samples, idx, false);
    auto eb = encode_batch(g, v, cfg, &img, &txt, n);
    const Tensor& logits = g.value(head(v, fuse(v, eb.image_cls, eb.text_cls)));
    for (std::size_t k = 0; k < n; ++k) correct += argmax(logits.row(k)) == samples[idx[k]].label;
  }
  return static_cast<double>(correct) / static_cast<double>(samples.size());
}

// Mean L2 distance between different clients' fused centroids of the same
// class, over classes and client pairs where both hold the class.
inline double client_drift(std::span<const LocalPrototypes> per_client) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t a = 0; a < per_client.size(); ++a) {
    for (std::size_t b = a + 1; b < per_client.size(); ++b) {
      const auto& fa = per_client[a].family(Family::Fused);
      const auto& fb = per_client[b].family(Family::Fused);
      for (std::size_t j = 0; j < per_client[a].classes; ++j) {
        auto ca = fa.centroid(j);
        auto cb = fb.centroid(j);
        if (!ca || !cb) continue;
        total += std::sqrt(squared_distance(*ca, *cb));
        ++count;
      }
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

// Mean distance between clients' local fused centroids and the global fused
// prototypes of the same class.
inline double prototype_distance(std::span<const LocalPrototypes> locals, const PrototypeLibrary& lib) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& lp : locals) {
    for (std::size_t j = 0; j < lp.classes; ++j) {
      auto c = lp.family(Family::Fused).centroid(j);
      if (!c || !lib.is_present(Family::Fused, j)) continue;
      total += std::sqrt(squared_distance(*c, lib.get(Family::Fused, j)));
      ++count;
    }
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

struct ClientRoundStats {
  std::size_t client = 0;
  std::size_t samples = 0;
  std::size_t pairs = 0;
  double weight = 0.0;  // normalized aggregation weight
  std::vector<EpochLosses> epochs;
  std::vector<LossComponents> steps;  // only with record_steps
  std::size_t skipped_steps = 0;
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<std::size_t> selected;
  std::vector<ClientRoundStats> clients;
  double accuracy = 0.0;
  LossComponents mean_losses;  // over participants' epoch means
  std::size_t skipped_steps = 0;
  double prototype_distance = 0.0;
  std::optional<double> client_drift;
  std::uint64_t library_version = 0;
  std::uint64_t bytes_transferred = 0;
  double wall_seconds = 0.0;
};

struct FederationResult {
  std::vector<RoundRecord> rounds;
  ModelParams final_params;
  PrototypeLibrary library;
  std::vector<std::size_t> last_clients;
  std::vector<ModelParams> last_client_models;  // with keep_client_models
  std::uint64_t model_blob_bytes = 0;
  std::uint64_t library_blob_bytes = 0;

  // Best accuracy over the last `window` rounds.
  double final_accuracy(std::size_t window = 10) const {
    double best = 0.0;
    const std::size_t from = rounds.size() > window ? rounds.size() - window : 0;
    for (std::size_t i = from; i < rounds.size(); ++i) best = std::max(best, rounds[i].accuracy);
    return best;
  }
};

// Runs the training protocol: each round the server broadcasts the global
// model and the library, the selected clients train locally and compute
// their prototypes, and the server aggregates models and prototypes. The
// library a round trains against is the one aggregated at the end of the
// previous round (zero library in round 1).
inline FederationResult run_federation(const FederationConfig& fc, const MultiwayConfig& mc,
                                       const std::vector<ClientDataset>& datasets,
                                       const std::vector<MultimodalSample>& test,
                                       std::optional<ModelParams> initial = std::nullopt) {
  fc.validate();
  mc.validate();
  if (datasets.size() != fc.clients) throw std::invalid_argument("federation: dataset count != clients");
  FederationResult res;
  if (initial) {
    res.final_params = std::move(*initial);
  } else {
    Rng init_rng(derive_seed(fc.seed, "model-init"));
    res.final_params = init_params(mc, init_rng);
  }
  res.library = initialize_library(mc.num_classes, mc.dim);
  res.model_blob_bytes = 8 * param_count(res.final_params);
  res.library_blob_bytes = library_byte_size(mc.num_classes, mc.dim);
  const LocalTrainConfig tc = fc.local();

  for (std::size_t t = 1; t <= fc.rounds; ++t) {
    const auto started = std::chrono::steady_clock::now();
    RoundRecord rec;
    rec.round = t;
    rec.selected = select_clients(t, fc.clients, fc.fraction, fc.seed);
    const std::size_t k = rec.selected.size();
    const ModelParams& global = res.final_params;
    const PrototypeLibrary& lib = res.library;

    std::vector<LocalTrainResult> trained(k);
    std::vector<LocalPrototypes> locals(k);
    parallel_for(k, fc.workers, [&](std::size_t i) {
      const std::size_t n = rec.selected[i];
      trained[i] = local_train(global, mc, datasets[n], lib, tc, derive_seed(fc.seed, "client-train", {t, n}));
      locals[i] = compute_local(trained[i].params, mc, datasets[n]);
    });

    std::vector<ModelParams> models(k);
    std::vector<double> raw_weights(k);
    // A client without samples has weight zero and drops out of the average.
    std::vector<ModelParams> contributing;
    std::vector<double> contributing_weights;
    double weight_total = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      models[i] = trained[i].params;
      raw_weights[i] = aggregation_weight(datasets[rec.selected[i]], fc.aggregation, fc.fediot_pair_weight);
      weight_total += raw_weights[i];
      if (raw_weights[i] > 0.0) {
        contributing.push_back(models[i]);
        contributing_weights.push_back(raw_weights[i]);
      }
    }
    std::vector<double> weights(k, 0.0);
    for (std::size_t i = 0; i < k && weight_total > 0.0; ++i) weights[i] = raw_weights[i] / weight_total;

    const bool last = t == fc.rounds;
    if (last && fc.measure_client_drift && !test.empty()) {
      std::vector<LocalPrototypes> on_test(k);
      ClientDataset test_set;
      test_set.samples = test;
      parallel_for(k, fc.workers, [&](std::size_t i) { on_test[i] = compute_local(models[i], mc, test_set); });
      rec.client_drift = client_drift(on_test);
    }

    if (!contributing.empty()) res.final_params = aggregate_models(contributing, contributing_weights);
    res.library = aggregate_prototypes(locals, res.library, fc.prototype_weighting);
    rec.library_version = res.library.version;
    rec.prototype_distance = prototype_distance(locals, res.library);
    rec.accuracy = evaluate_complete(res.final_params, mc, test);
    rec.bytes_transferred = static_cast<std::uint64_t>(k) * (res.model_blob_bytes + res.library_blob_bytes);

    for (std::size_t i = 0; i < k; ++i) {
      ClientRoundStats cs;
      cs.client = rec.selected[i];
      cs.samples = datasets[cs.client].size();
      cs.pairs = datasets[cs.client].pair_count();
      cs.weight = weights[i];
      cs.epochs = trained[i].epochs;
      cs.skipped_steps = trained[i].skipped_steps;
      if (fc.record_steps) cs.steps = trained[i].steps;
      rec.skipped_steps += cs.skipped_steps;
      LossComponents m;
      for (const auto& e : cs.epochs) {
        m.task += e.mean.task;
        m.contrast += e.mean.contrast;
        m.prox += e.mean.prox;
        m.alignment += e.mean.alignment;
        m.total += e.mean.total;
      }
      const double inv = cs.epochs.empty() ? 0.0 : 1.0 / static_cast<double>(cs.epochs.size() * k);
      rec.mean_losses.task += m.task * inv;
      rec.mean_losses.contrast += m.contrast * inv;
      rec.mean_losses.prox += m.prox * inv;
      rec.mean_losses.alignment += m.alignment * inv;
      rec.mean_losses.total += m.total * inv;
      rec.clients.push_back(std::move(cs));
    }
    if (last) {
      res.last_clients = rec.selected;
      if (fc.keep_client_models) res.last_client_models = std::move(models);
    }
    rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    res.rounds.push_back(std::move(rec));
  }
  return res;
}

// --- metrics files ---

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Round-level metrics. Wall time is kept out so reruns compare byte-for-byte.
inline std::string metrics_csv(const FederationResult& r) {
  std::ostringstream os;
  os << "round,selected,accuracy,task_loss,contrast_loss,prox_loss,alignment_loss,total_loss,skipped_steps,"
        "prototype_distance,client_drift,library_version,bytes_transferred\n";
  for (const auto& rec : r.rounds) {
    std::string sel;
    for (std::size_t i = 0; i < rec.selected.size(); ++i) sel += (i ? ";" : "") + std::to_string(rec.selected[i]);
    os << rec.round << ',' << sel << ',' << fmt_double(rec.accuracy) << ',' << fmt_double(rec.mean_losses.task) << ','
       << fmt_double(rec.mean_losses.contrast) << ',' << fmt_double(rec.mean_losses.prox) << ','
       << fmt_double(rec.mean_losses.alignment) << ',' << fmt_double(rec.mean_losses.total) << ',' << rec.skipped_steps
       << ',' << fmt_double(rec.prototype_distance) << ',' << (rec.client_drift ? fmt_double(*rec.client_drift) : "")
       << ',' << rec.library_version << ',' << rec.bytes_transferred << '\n';
  }
  return os.str();
}

// Per-round, per-client, per-epoch loss components.
inline std::string client_metrics_csv(const FederationResult& r) {
  std::ostringstream os;
  os << "round,client,samples,pairs,weight,epoch,task_loss,contrast_loss,prox_loss,alignment_loss,total_loss,steps,"
        "skipped_steps\n";
  for (const auto& rec : r.rounds) {
    for (const auto& c : rec.clients) {
      for (std::size_t e = 0; e < c.epochs.size(); ++e) {
        const auto& el = c.epochs[e];
        os << rec.round << ',' << c.client << ',' << c.samples << ',' << c.pairs << ',' << fmt_double(c.weight) << ','
           << e + 1 << ',' << fmt_double(el.mean.task) << ',' << fmt_double(el.mean.contrast) << ','
           << fmt_double(el.mean.prox) << ',' << fmt_double(el.mean.alignment) << ',' << fmt_double(el.mean.total) << ','
           << el.steps << ',' << el.skipped << '\n';
      }
    }
  }
  return os.str();
}

inline std::string timing_csv(const FederationResult& r) {
  std::ostringstream os;
  os << "round,wall_seconds\n";
  for (const auto& rec : r.rounds) os << rec.round << ',' << fmt_double(rec.wall_seconds) << '\n';
  return os.str();
}

}  // namespace pmcm
