#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "pmcm/federation.hpp"
#include "pmcm/optim.hpp"
#include "pmcm/parallel.hpp"
#include "pmcm/prototypes.hpp"

namespace pmcm {

// Oracle is an evaluation device: it is handed the true label and scores it
// highest, bounding what any matcher can achieve.
enum class MatcherKind { L1, L2, Cosine, Classifier, Prior, Oracle };
enum class MatcherMode { None, MaxSamples, ParamAvg, Ensemble };

inline const char* matcher_kind_name(MatcherKind k) {
  switch (k) {
    case MatcherKind::L1: return "l1";
    case MatcherKind::L2: return "l2";
    case MatcherKind::Cosine: return "cosine";
    case MatcherKind::Classifier: return "classifier";
    case MatcherKind::Prior: return "prior";
    case MatcherKind::Oracle: return "oracle";
  }
  return "?";
}

inline const char* matcher_mode_name(MatcherMode m) {
  switch (m) {
    case MatcherMode::None: return "none";
    case MatcherMode::MaxSamples: return "maxsamples";
    case MatcherMode::ParamAvg: return "paramavg";
    case MatcherMode::Ensemble: return "ensemble";
  }
  return "?";
}

inline MatcherKind parse_matcher_kind(const std::string& s) {
  for (auto k : {MatcherKind::L1, MatcherKind::L2, MatcherKind::Cosine, MatcherKind::Classifier, MatcherKind::Prior,
                 MatcherKind::Oracle})
    if (s == matcher_kind_name(k)) return k;
  throw std::invalid_argument("unknown matcher kind '" + s + "'");
}

inline MatcherMode parse_matcher_mode(const std::string& s) {
  for (auto m : {MatcherMode::None, MatcherMode::MaxSamples, MatcherMode::ParamAvg, MatcherMode::Ensemble})
    if (s == matcher_mode_name(m)) return m;
  throw std::invalid_argument("unknown matcher mode '" + s + "'");
}

inline bool model_based(MatcherKind k) { return k == MatcherKind::Classifier || k == MatcherKind::Prior; }

// --- small MLP used by the model-based matchers ---

template <class T>
struct MlpT {
  LinearT<T> hidden;
  LinearT<T> out;
};
using Mlp = MlpT<Tensor>;

template <class T>
std::vector<T*> mlp_leaves(MlpT<T>& m) {
  return {&m.hidden.weight, &m.hidden.bias, &m.out.weight, &m.out.bias};
}
template <class T>
std::vector<const T*> mlp_leaves(const MlpT<T>& m) {
  return {&m.hidden.weight, &m.hidden.bias, &m.out.weight, &m.out.bias};
}

inline Mlp init_mlp(std::size_t in, std::size_t hidden, std::size_t out, Rng& rng) {
  return {detail::init_linear(in, hidden, rng), detail::init_linear(hidden, out, rng)};
}

inline std::size_t mlp_param_count(const Mlp& m) {
  std::size_t n = 0;
  for (const Tensor* t : mlp_leaves(m)) n += t->size();
  return n;
}

inline Var mlp_forward(Var x, const MlpT<Var>& m) { return linear(gelu(linear(x, m.hidden)), m.out); }

inline MlpT<Var> bind_mlp(Graph& g, const Mlp& m) {
  return {{g.parameter(m.hidden.weight), g.parameter(m.hidden.bias)}, {g.parameter(m.out.weight), g.parameter(m.out.bias)}};
}

inline Tensor mlp_predict(const Mlp& m, const Tensor& x) {
  Graph g(false);
  return g.value(mlp_forward(g.constant(x), bind_mlp(g, m)));
}

// --- matcher ---

struct Matcher {
  MatcherKind kind = MatcherKind::L2;
  MatcherMode mode = MatcherMode::None;
  Family family = Family::Image;  // family of the present modality it reads
  std::vector<Mlp> members;
  std::vector<double> weights;          // sum to 1
  std::vector<std::size_t> clients;     // contributing client ids

  void validate() const {
    if (family == Family::Fused) throw std::invalid_argument("matcher: family must be image or text");
    if (!model_based(kind)) {
      if (!members.empty()) throw std::invalid_argument("matcher: model-free kinds carry no parameters");
      return;
    }
    if (members.empty() || members.size() != weights.size()) throw std::invalid_argument("matcher: needs one weight per member");
    double s = 0.0;
    for (double w : weights) s += w;
    if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("matcher: member weights must sum to 1");
  }

  std::string label() const {
    std::string s = matcher_kind_name(kind);
    if (mode != MatcherMode::None) s += std::string(":") + matcher_mode_name(mode);
    return s;
  }
};

inline Matcher model_free_matcher(MatcherKind kind, Family family) {
  if (model_based(kind)) throw std::invalid_argument("model_free_matcher: kind needs trained members");
  Matcher m;
  m.kind = kind;
  m.family = family;
  return m;
}

struct MatchScores {
  std::vector<double> scores;  // one per class; -inf for classes unavailable to the matcher
  bool zero_norm = false;      // Cosine met a zero-length vector
};

inline constexpr double kNoScore = -std::numeric_limits<double>::infinity();

// Scores per class for representations `h` (rows). Distance kinds compare
// to the matcher family's prototypes; classes without a prototype get -inf.
// Classifier scores are log of the weighted mean member probability.
// Prior scores are the weighted mean over members of the negated L2
// distance from the member's prediction to each prototype.
inline std::vector<MatchScores> match_scores_batch(const Matcher& m, const Tensor& h, const PrototypeLibrary& lib,
                                                   std::span<const std::size_t> true_labels = {}) {
  m.validate();
  const std::size_t n = h.rows(), C = lib.classes;
  if (h.cols() != lib.dim) throw ShapeError("match_scores: representation dim does not match library");
  const Tensor& protos = lib.family(m.family);
  std::vector<MatchScores> out(n);
  for (auto& r : out) r.scores.assign(C, kNoScore);
  auto present = [&](std::size_t j) { return lib.is_present(m.family, j); };

  switch (m.kind) {
    case MatcherKind::L1:
    case MatcherKind::L2:
    case MatcherKind::Cosine:
      for (std::size_t i = 0; i < n; ++i) {
        const auto x = h.row(i);
        const double xn = std::sqrt(dot(x, x));
        for (std::size_t j = 0; j < C; ++j) {
          if (!present(j)) continue;
          const auto p = protos.row(j);
          double s = 0.0;
          if (m.kind == MatcherKind::L1) {
            for (std::size_t c = 0; c < x.size(); ++c) s -= std::abs(x[c] - p[c]);
          } else if (m.kind == MatcherKind::L2) {
            s = -std::sqrt(squared_distance(x, p));
          } else {
            const double pn = std::sqrt(dot(p, p));
            if (xn == 0.0 || pn == 0.0) {
              out[i].zero_norm = true;
            } else {
              s = dot(x, p) / (xn * pn);
            }
          }
          out[i].scores[j] = s;
        }
      }
      break;
    case MatcherKind::Classifier: {
      std::vector<std::vector<double>> mix(n, std::vector<double>(C, 0.0));
      for (std::size_t k = 0; k < m.members.size(); ++k) {
        const Tensor logits = mlp_predict(m.members[k], h);
        if (logits.cols() != C) throw ShapeError("classifier matcher: output width does not match class count");
        for (std::size_t i = 0; i < n; ++i) {
          const auto p = softmax(logits.row(i));
          for (std::size_t j = 0; j < C; ++j) mix[i][j] += m.weights[k] * p[j];
        }
      }
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < C; ++j) out[i].scores[j] = mix[i][j] > 0.0 ? std::log(mix[i][j]) : kNoScore;
      break;
    }
    case MatcherKind::Prior: {
      for (auto& r : out)
        for (std::size_t j = 0; j < C; ++j)
          if (present(j)) r.scores[j] = 0.0;
      for (std::size_t k = 0; k < m.members.size(); ++k) {
        const Tensor pred = mlp_predict(m.members[k], h);
        if (pred.cols() != lib.dim) throw ShapeError("prior matcher: output width does not match library dim");
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < C; ++j)
            if (present(j)) out[i].scores[j] -= m.weights[k] * std::sqrt(squared_distance(pred.row(i), protos.row(j)));
      }
      break;
    }
    case MatcherKind::Oracle:
      if (true_labels.size() != n) throw std::invalid_argument("oracle matcher needs the true label of every row");
      for (std::size_t i = 0; i < n; ++i) {
        std::fill(out[i].scores.begin(), out[i].scores.end(), -1.0);
        out[i].scores.at(true_labels[i]) = 0.0;
      }
      break;
  }
  return out;
}

inline MatchScores match_scores(const Matcher& m, std::span<const double> h, const PrototypeLibrary& lib,
                                std::optional<std::size_t> true_label = std::nullopt) {
  Tensor row({1, h.size()}, std::vector<double>(h.begin(), h.end()));
  std::vector<std::size_t> lab;
  if (true_label) lab.push_back(*true_label);
  return std::move(match_scores_batch(m, row, lib, lab).front());
}

// Classes ordered by descending score; equal scores keep the lower index
// first.
inline std::vector<std::size_t> rank_classes(std::span<const double> scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return order;
}

struct MixConfig {
  std::size_t k = 1;
  double temperature = 1.0;
};

// Softmax(score / temperature) over the k best classes, then the weighted sum
// of those classes' prototypes from `target` (the missing modality's family).
// Classes scored -inf are never mixed in; with none left the mask is zero.
inline Tensor protomix(std::span<const double> scores, const PrototypeLibrary& lib, Family target, const MixConfig& mix) {
  if (mix.k < 1 || mix.k > lib.classes) throw std::invalid_argument("protomix: k must be in [1, C]");
  if (!(mix.temperature > 0.0)) throw std::invalid_argument("protomix: temperature must be > 0");
  if (scores.size() != lib.classes) throw ShapeError("protomix: one score per class expected");
  const auto order = rank_classes(scores);
  std::vector<std::size_t> top;
  for (std::size_t r = 0; r < mix.k; ++r)
    if (std::isfinite(scores[order[r]])) top.push_back(order[r]);
  Tensor out({lib.dim});
  if (top.empty()) return out;
  if (top.size() == 1) {
    const auto p = lib.get(target, top.front());
    std::copy(p.begin(), p.end(), out.values().begin());
    return out;
  }
  std::vector<double> z(top.size());
  for (std::size_t i = 0; i < top.size(); ++i) z[i] = scores[top[i]] / mix.temperature;
  const auto w = softmax(z);
  for (std::size_t i = 0; i < top.size(); ++i) {
    const auto p = lib.get(target, top[i]);
    for (std::size_t c = 0; c < lib.dim; ++c) out[c] += w[i] * p[c];
  }
  return out;
}

// Fraction of rows whose true class ranks within the top k, for each k
// (clamped to C).
inline std::vector<double> topk_accuracy(const std::vector<MatchScores>& scores, std::span<const std::size_t> labels,
                                         std::span<const std::size_t> ks) {
  std::vector<double> acc(ks.size(), 0.0);
  if (scores.empty()) return acc;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    const auto order = rank_classes(scores[i].scores);
    const std::size_t rank = static_cast<std::size_t>(std::find(order.begin(), order.end(), labels[i]) - order.begin());
    for (std::size_t q = 0; q < ks.size(); ++q) acc[q] += rank < std::min(ks[q], order.size());
  }
  for (double& a : acc) a /= static_cast<double>(scores.size());
  return acc;
}

inline constexpr std::size_t kDefaultTopK[] = {1, 5, 10, 20};

// Representations of the present modality of test samples that carry it.
struct FamilyRepresentations {
  Tensor h;  // n x d
  std::vector<std::size_t> labels;
  std::vector<std::size_t> sample_index;
};

inline FamilyRepresentations family_representations(const ModelParams& params, const MultiwayConfig& cfg,
                                                    const std::vector<MultimodalSample>& samples, Family family) {
  const auto reps = encode_samples(params, cfg, samples, family == Family::Image ? EncodeMode::ImageOnly : EncodeMode::TextOnly);
  FamilyRepresentations out;
  std::vector<std::vector<double>> rows;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& r = family == Family::Image ? reps[i].image : reps[i].text;
    if (!r) continue;
    rows.emplace_back(r->values());
    out.labels.push_back(samples[i].label);
    out.sample_index.push_back(i);
  }
  out.h = rows.empty() ? Tensor::matrix(0, cfg.dim) : Tensor::from_rows(rows);
  return out;
}

struct MatchingReport {
  std::vector<std::size_t> ks;
  std::vector<double> accuracy;  // per k
  bool zero_norm = false;
};

inline MatchingReport evaluate_matching(const Matcher& m, const FamilyRepresentations& reps, const PrototypeLibrary& lib,
                                        std::span<const std::size_t> ks = kDefaultTopK) {
  MatchingReport rep;
  for (std::size_t k : ks) rep.ks.push_back(std::min(k, lib.classes));
  const auto scores = reps.labels.empty() ? std::vector<MatchScores>{} : match_scores_batch(m, reps.h, lib, reps.labels);
  for (const auto& s : scores) rep.zero_norm = rep.zero_norm || s.zero_norm;
  rep.accuracy = topk_accuracy(scores, reps.labels, rep.ks);
  return rep;
}

// --- matcher training ---

struct MatcherTrainConfig {
  std::size_t classifier_epochs = 100;
  std::size_t prior_contrastive_epochs = 200;
  std::size_t prior_mse_epochs = 500;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  double tau = 0.07;
  std::size_t hidden_multiplier = 2;  // hidden width = multiplier * input dim
};

namespace detail {

template <class LossFn>
void train_mlp(Mlp& mlp, std::size_t n, std::size_t epochs, const MatcherTrainConfig& tc, Rng& shuffle, AdamWState& opt,
               LossFn&& loss_fn) {
  AdamWConfig oc;
  oc.lr = tc.lr;
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (std::size_t e = 0; e < epochs; ++e) {
    shuffle.shuffle(order);
    for (std::size_t start = 0; start < n; start += tc.batch_size) {
      const std::size_t b = std::min(tc.batch_size, n - start);
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(start + b));
      Graph g;
      MlpT<Var> v = bind_mlp(g, mlp);
      Var loss = loss_fn(g, v, idx);
      g.backward(loss);
      std::vector<Tensor> grads;
      for (const Var* leaf : mlp_leaves(std::as_const(v))) grads.push_back(g.grad(*leaf));
      auto targets = mlp_leaves(mlp);
      adamw_step(targets, grads, opt, oc);
    }
  }
}

inline Tensor select_rows(const Tensor& x, std::span<const std::size_t> idx) {
  Tensor out = Tensor::matrix(idx.size(), x.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) std::copy(x.row(idx[i]).begin(), x.row(idx[i]).end(), out.row(i).begin());
  return out;
}

}  // namespace detail

// Cross-entropy MLP from representations to class labels.
inline Mlp train_classifier_mlp(const Tensor& h, std::span<const std::size_t> labels, std::size_t classes,
                                const MatcherTrainConfig& tc, std::uint64_t seed) {
  if (h.rows() == 0 || h.rows() != labels.size()) throw std::invalid_argument("classifier matcher: needs labelled representations");
  Rng init(derive_seed(seed, "matcher-init"));
  Mlp mlp = init_mlp(h.cols(), tc.hidden_multiplier * h.cols(), classes, init);
  Rng shuffle(derive_seed(seed, "matcher-shuffle"));
  AdamWState opt;
  detail::train_mlp(mlp, h.rows(), tc.classifier_epochs, tc, shuffle, opt, [&](Graph& g, const MlpT<Var>& v, const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> y;
    for (std::size_t i : idx) y.push_back(labels[i]);
    return cross_entropy(mlp_forward(g.constant(detail::select_rows(h, idx)), v), y);
  });
  return mlp;
}

// Two phases: a symmetric contrastive loss between L2-normalized predictions
// and their targets' prototypes, then MSE to the label's prototype.
inline Mlp train_prior_mlp(const Tensor& h, std::span<const std::size_t> labels, const Tensor& prototypes,
                           const MatcherTrainConfig& tc, std::uint64_t seed) {
  if (h.rows() == 0 || h.rows() != labels.size()) throw std::invalid_argument("prior matcher: needs labelled representations");
  if (prototypes.cols() != h.cols()) throw ShapeError("prior matcher: prototype dim differs from representation dim");
  Rng init(derive_seed(seed, "matcher-init"));
  Mlp mlp = init_mlp(h.cols(), tc.hidden_multiplier * h.cols(), prototypes.cols(), init);
  Rng shuffle(derive_seed(seed, "matcher-shuffle"));
  auto targets_of = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::size_t> y;
    for (std::size_t i : idx) y.push_back(labels[i]);
    return detail::select_rows(prototypes, y);
  };
  AdamWState opt;
  detail::train_mlp(mlp, h.rows(), tc.prior_contrastive_epochs, tc, shuffle, opt,
                    [&](Graph& g, const MlpT<Var>& v, const std::vector<std::size_t>& idx) {
                      Var pred = l2_normalize_rows(mlp_forward(g.constant(detail::select_rows(h, idx)), v));
                      Var tgt = l2_normalize_rows(g.constant(targets_of(idx)));
                      Var logits = scale(matmul(pred, transpose(tgt)), 1.0 / tc.tau);
                      std::vector<std::size_t> diag(idx.size());
                      std::iota(diag.begin(), diag.end(), std::size_t{0});
                      return scale(add(cross_entropy(logits, diag), cross_entropy(transpose(logits), diag)), 0.5);
                    });
  AdamWState opt2;
  detail::train_mlp(mlp, h.rows(), tc.prior_mse_epochs, tc, shuffle, opt2,
                    [&](Graph& g, const MlpT<Var>& v, const std::vector<std::size_t>& idx) {
                      Var d = sub(mlp_forward(g.constant(detail::select_rows(h, idx)), v), g.constant(targets_of(idx)));
                      return mean(mul(d, d));
                    });
  return mlp;
}

inline double mlp_mse(const Mlp& m, const Tensor& h, std::span<const std::size_t> labels, const Tensor& prototypes) {
  const Tensor pred = mlp_predict(m, h);
  double s = 0.0;
  for (std::size_t i = 0; i < h.rows(); ++i) s += squared_distance(pred.row(i), prototypes.row(labels[i]));
  return s / static_cast<double>(h.rows() * prototypes.cols());
}

struct ClientMatcher {
  std::size_t client = 0;
  std::size_t samples = 0;
  Mlp mlp;
};

// One matcher per client on the frozen model's unimodal representations of
// its own `family`-bearing samples. Clients without such samples are skipped.
// Each client initializes its own matcher from its own seed stream.
inline std::vector<ClientMatcher> train_client_matchers(const ModelParams& params, const MultiwayConfig& cfg,
                                                        const std::vector<ClientDataset>& datasets,
                                                        const PrototypeLibrary& lib, Family family, MatcherKind kind,
                                                        const MatcherTrainConfig& tc, std::uint64_t seed,
                                                        std::size_t workers = 1) {
  if (!model_based(kind)) throw std::invalid_argument("train_client_matchers: kind has no parameters");
  std::vector<std::optional<ClientMatcher>> slots(datasets.size());
  parallel_for(datasets.size(), workers, [&](std::size_t n) {
    const auto reps = family_representations(params, cfg, datasets[n].samples, family);
    if (reps.labels.empty()) return;
    const std::uint64_t s = derive_seed(seed, kind == MatcherKind::Classifier ? "classifier-matcher" : "prior-matcher",
                                        {datasets[n].client, static_cast<std::size_t>(family)});
    ClientMatcher cm;
    cm.client = datasets[n].client;
    cm.samples = reps.labels.size();
    cm.mlp = kind == MatcherKind::Classifier ? train_classifier_mlp(reps.h, reps.labels, cfg.num_classes, tc, s)
                                             : train_prior_mlp(reps.h, reps.labels, lib.family(family), tc, s);
    slots[n] = std::move(cm);
  });
  std::vector<ClientMatcher> out;
  for (auto& s : slots)
    if (s) out.push_back(std::move(*s));
  return out;
}

// Combines per-client matchers: the one trained on most samples (lower
// client id on ties), the sample-weighted parameter average, or the
// sample-weighted ensemble of all of them.
inline Matcher combine_matchers(MatcherKind kind, Family family, MatcherMode mode, const std::vector<ClientMatcher>& per_client) {
  if (!model_based(kind)) throw std::invalid_argument("combine_matchers: kind has no parameters");
  if (per_client.empty()) throw std::invalid_argument("combine_matchers: no client matchers");
  Matcher m;
  m.kind = kind;
  m.family = family;
  m.mode = mode;
  double total = 0.0;
  for (const auto& c : per_client) total += static_cast<double>(c.samples);
  switch (mode) {
    case MatcherMode::MaxSamples: {
      std::size_t best = 0;
      for (std::size_t i = 1; i < per_client.size(); ++i)
        if (per_client[i].samples > per_client[best].samples) best = i;
      m.members = {per_client[best].mlp};
      m.weights = {1.0};
      m.clients = {per_client[best].client};
      break;
    }
    case MatcherMode::ParamAvg: {
      Mlp avg = per_client.front().mlp;
      auto dst = mlp_leaves(avg);
      for (Tensor* t : dst) t->fill(0.0);
      for (const auto& c : per_client) {
        auto src = mlp_leaves(c.mlp);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->axpy(static_cast<double>(c.samples) / total, *src[i]);
        m.clients.push_back(c.client);
      }
      m.members = {std::move(avg)};
      m.weights = {1.0};
      break;
    }
    case MatcherMode::Ensemble:
      for (const auto& c : per_client) {
        m.members.push_back(c.mlp);
        m.weights.push_back(static_cast<double>(c.samples) / total);
        m.clients.push_back(c.client);
      }
      break;
    case MatcherMode::None:
      throw std::invalid_argument("combine_matchers: model-based matchers need an aggregation mode");
  }
  return m;
}

// --- matcher persistence ---

inline nlohmann::json tensor_json(const Tensor& t) { return {{"shape", t.shape()}, {"data", t.values()}}; }

inline Tensor tensor_from_json(const nlohmann::json& j) {
  return Tensor(j.at("shape").get<Shape>(), j.at("data").get<std::vector<double>>());
}

inline nlohmann::json matcher_json(const Matcher& m) {
  nlohmann::json members = nlohmann::json::array();
  for (std::size_t i = 0; i < m.members.size(); ++i) {
    const auto& mlp = m.members[i];
    members.push_back({{"weight", m.weights[i]},
                       {"hidden_weight", tensor_json(mlp.hidden.weight)},
                       {"hidden_bias", tensor_json(mlp.hidden.bias)},
                       {"out_weight", tensor_json(mlp.out.weight)},
                       {"out_bias", tensor_json(mlp.out.bias)}});
  }
  return {{"kind", matcher_kind_name(m.kind)},
          {"mode", matcher_mode_name(m.mode)},
          {"family", family_name(m.family)},
          {"clients", m.clients},
          {"members", members}};
}

inline Matcher matcher_from_json(const nlohmann::json& j) {
  Matcher m;
  m.kind = parse_matcher_kind(j.at("kind").get<std::string>());
  m.mode = parse_matcher_mode(j.at("mode").get<std::string>());
  const auto fam = j.at("family").get<std::string>();
  if (fam == "image") m.family = Family::Image;
  else if (fam == "text") m.family = Family::Text;
  else throw FormatError("matcher: family must be image or text");
  m.clients = j.value("clients", std::vector<std::size_t>{});
  for (const auto& mj : j.at("members")) {
    Mlp mlp{{tensor_from_json(mj.at("hidden_weight")), tensor_from_json(mj.at("hidden_bias"))},
            {tensor_from_json(mj.at("out_weight")), tensor_from_json(mj.at("out_bias"))}};
    m.members.push_back(std::move(mlp));
    m.weights.push_back(mj.at("weight").get<double>());
  }
  m.validate();
  return m;
}

inline void save_matchers(const std::filesystem::path& path, const std::vector<Matcher>& ms) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& m : ms) arr.push_back(matcher_json(m));
  bytes::write_text(path, nlohmann::json{{"format", "pmcm-matchers"}, {"version", 1}, {"matchers", arr}}.dump() + "\n");
}

inline std::vector<Matcher> load_matchers(const std::filesystem::path& path) {
  const auto j = nlohmann::json::parse(bytes::read_text(path));
  if (j.value("format", "") != "pmcm-matchers" || j.value("version", 0) != 1) throw FormatError("matchers: unsupported file format");
  std::vector<Matcher> out;
  for (const auto& mj : j.at("matchers")) out.push_back(matcher_from_json(mj));
  return out;
}

// --- inference with a missing modality ---

enum class InferenceMask { Zero, Random, Prototype, Oracle };

inline const char* inference_mask_name(InferenceMask m) {
  switch (m) {
    case InferenceMask::Zero: return "zero";
    case InferenceMask::Random: return "random";
    case InferenceMask::Prototype: return "prototype";
    case InferenceMask::Oracle: return "oracle";
  }
  return "?";
}

inline InferenceMask parse_inference_mask(const std::string& s) {
  for (auto m : {InferenceMask::Zero, InferenceMask::Random, InferenceMask::Prototype, InferenceMask::Oracle})
    if (s == inference_mask_name(m)) return m;
  throw std::invalid_argument("unknown inference mask '" + s + "'");
}

struct InferenceSpec {
  InferenceMask mask = InferenceMask::Prototype;
  // Used for image-only and text-only samples respectively; they read the
  // present modality's family.
  std::optional<Matcher> image_matcher;
  std::optional<Matcher> text_matcher;
  MixConfig mix;
  double random_mean = 0.0;
  double random_std = 1.0;
  std::uint64_t seed = 1;
};

struct InferenceReport {
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<std::size_t> predictions;
  std::size_t complete = 0, image_only = 0, text_only = 0;
  std::size_t matcher_calls = 0;
};

// Predicts every sample. Complete pairs go straight through encoder, fusion
// and head. A single-modality sample gets a stand-in for its missing side:
// zeros, a N(mean, std) draw, the ProtoMix of the matcher's top-k classes'
// prototypes of the missing family, or the true class's prototype (oracle).
inline InferenceReport infer_batch(const ModelParams& params, const MultiwayConfig& cfg,
                                   const std::vector<MultimodalSample>& samples, const PrototypeLibrary& lib,
                                   const InferenceSpec& spec) {
  InferenceReport rep;
  rep.predictions.assign(samples.size(), 0);
  const auto reps = encode_samples(params, cfg, samples, EncodeMode::Natural);
  Rng rng(derive_seed(spec.seed, "inference-random-mask"));

  std::vector<std::size_t> idx_image_only, idx_text_only;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].complete()) ++rep.complete;
    else if (samples[i].has_image) idx_image_only.push_back(i);
    else if (samples[i].has_text) idx_text_only.push_back(i);
    else throw std::invalid_argument("infer: sample without any modality");
  }
  rep.image_only = idx_image_only.size();
  rep.text_only = idx_text_only.size();

  // Stand-ins for the missing side of each single-modality group.
  auto stand_ins = [&](const std::vector<std::size_t>& group, Family present) {
    const Family missing = opposite(present);
    Tensor h = Tensor::matrix(group.size(), cfg.dim);
    for (std::size_t k = 0; k < group.size(); ++k) {
      const Tensor& r = present == Family::Image ? *reps[group[k]].image : *reps[group[k]].text;
      std::copy(r.values().begin(), r.values().end(), h.row(k).begin());
    }
    Tensor masks = Tensor::matrix(group.size(), cfg.dim);
    switch (spec.mask) {
      case InferenceMask::Zero: break;
      case InferenceMask::Random:
        for (double& v : masks.values()) v = rng.normal(spec.random_mean, spec.random_std);
        break;
      case InferenceMask::Oracle:
        for (std::size_t k = 0; k < group.size(); ++k) {
          const auto p = lib.get(missing, samples[group[k]].label);
          std::copy(p.begin(), p.end(), masks.row(k).begin());
        }
        break;
      case InferenceMask::Prototype: {
        const auto& mm = present == Family::Image ? spec.image_matcher : spec.text_matcher;
        if (!mm) throw std::invalid_argument("infer: prototype mask needs a matcher for the present modality");
        if (mm->family != present) throw std::invalid_argument("infer: matcher reads the wrong family");
        std::vector<std::size_t> labels;
        for (std::size_t i : group) labels.push_back(samples[i].label);
        const auto scores = match_scores_batch(*mm, h, lib, mm->kind == MatcherKind::Oracle ? std::span<const std::size_t>(labels) : std::span<const std::size_t>{});
        rep.matcher_calls += group.size();
        for (std::size_t k = 0; k < group.size(); ++k) {
          const Tensor m = protomix(scores[k].scores, lib, missing, spec.mix);
          std::copy(m.values().begin(), m.values().end(), masks.row(k).begin());
        }
        break;
      }
    }
    return std::pair{std::move(h), std::move(masks)};
  };

  auto predict_rows = [&](const std::vector<std::size_t>& group, const Tensor& hi, const Tensor& ht) {
    Graph g(false);
    ModelVars v = bind_params(g, params);
    const Tensor& logits = g.value(head(v, fuse(v, g.constant(hi), g.constant(ht))));
    for (std::size_t k = 0; k < group.size(); ++k) rep.predictions[group[k]] = argmax(logits.row(k));
  };

  std::vector<std::size_t> idx_pairs;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].complete()) idx_pairs.push_back(i);
  if (!idx_pairs.empty()) {
    Tensor fused = Tensor::matrix(idx_pairs.size(), cfg.dim);
    for (std::size_t k = 0; k < idx_pairs.size(); ++k) {
      const Tensor& f = *reps[idx_pairs[k]].fused;
      std::copy(f.values().begin(), f.values().end(), fused.row(k).begin());
    }
    Graph g(false);
    ModelVars v = bind_params(g, params);
    const Tensor& logits = g.value(head(v, g.constant(fused)));
    for (std::size_t k = 0; k < idx_pairs.size(); ++k) rep.predictions[idx_pairs[k]] = argmax(logits.row(k));
  }
  if (!idx_image_only.empty()) {
    auto [h, m] = stand_ins(idx_image_only, Family::Image);
    predict_rows(idx_image_only, h, m);
  }
  if (!idx_text_only.empty()) {
    auto [h, m] = stand_ins(idx_text_only, Family::Text);
    predict_rows(idx_text_only, m, h);
  }

  std::vector<std::size_t> hits(cfg.num_classes, 0), totals(cfg.num_classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const bool ok = rep.predictions[i] == samples[i].label;
    correct += ok;
    hits.at(samples[i].label) += ok;
    ++totals[samples[i].label];
  }
  rep.accuracy = samples.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(samples.size());
  rep.per_class_accuracy.resize(cfg.num_classes);
  for (std::size_t j = 0; j < cfg.num_classes; ++j)
    rep.per_class_accuracy[j] = totals[j] ? static_cast<double>(hits[j]) / static_cast<double>(totals[j]) : 0.0;
  return rep;
}

inline std::size_t infer(const ModelParams& params, const MultiwayConfig& cfg, const MultimodalSample& sample,
                         const PrototypeLibrary& lib, const InferenceSpec& spec) {
  return infer_batch(params, cfg, {sample}, lib, spec).predictions.front();
}

enum class Modality { Image, Text };

// Copy of `samples` with one modality removed from every sample.
inline std::vector<MultimodalSample> drop_modality(std::vector<MultimodalSample> samples, Modality which) {
  for (auto& s : samples) {
    if (which == Modality::Image) {
      s.has_image = false;
      s.image = Tensor();
    } else {
      s.has_text = false;
      s.text = Tensor();
    }
  }
  return samples;
}

}  // namespace pmcm
