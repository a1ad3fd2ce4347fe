#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pmcm/autodiff.hpp"
#include "pmcm/data.hpp"
#include "pmcm/model.hpp"
#include "pmcm/prototypes.hpp"
#include "pmcm/rng.hpp"

namespace pmcm {

enum class MaskKind { Ignore, Zero, Random, Prototype };

inline const char* mask_name(MaskKind k) {
  switch (k) {
    case MaskKind::Ignore: return "ignore";
    case MaskKind::Zero: return "zero";
    case MaskKind::Random: return "random";
    case MaskKind::Prototype: return "prototype";
  }
  return "?";
}

inline MaskKind parse_mask(const std::string& s) {
  if (s == "ignore") return MaskKind::Ignore;
  if (s == "zero") return MaskKind::Zero;
  if (s == "random") return MaskKind::Random;
  if (s == "prototype") return MaskKind::Prototype;
  throw std::invalid_argument("unknown mask strategy '" + s + "'");
}

struct MaskStrategy {
  MaskKind kind = MaskKind::Prototype;
  double random_mean = 0.0;
  double random_std = 1.0;
};

struct LossWeights {
  double gamma = 0.0;      // prototype contrast
  double tau = 0.07;
  double prox_mu = 0.0;    // FedProx
  double fa_lambda = 0.0;  // feature alignment

  void validate() const {
    if (!(tau > 0.0)) throw std::invalid_argument("loss weights: tau must be > 0");
    if (gamma < 0.0 || prox_mu < 0.0 || fa_lambda < 0.0) throw std::invalid_argument("loss weights: weights must be >= 0");
    const int active = (gamma > 0.0) + (prox_mu > 0.0) + (fa_lambda > 0.0);
    if (active > 1) throw std::invalid_argument("loss weights: at most one of contrast/prox/alignment may be active");
  }
};

// Fused representations and logits for one minibatch, rows grouped as
// [complete pairs | image-only | text-only].
struct BatchForward {
  Var fused;
  Var logits;
  std::vector<std::size_t> labels;
  std::size_t complete = 0;
  std::size_t image_only = 0;
  std::size_t text_only = 0;
};

namespace detail {

inline Tensor mask_rows(MaskKind kind, const std::vector<MultimodalSample>& samples, std::span<const std::size_t> idx,
                        const PrototypeLibrary& lib, Family family, const MaskStrategy& strategy, Rng& rng) {
  Tensor out = Tensor::matrix(idx.size(), lib.dim);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    auto row = out.row(k);
    switch (kind) {
      case MaskKind::Prototype: {
        const auto proto = lib.get(family, samples[idx[k]].label);
        std::copy(proto.begin(), proto.end(), row.begin());
        break;
      }
      case MaskKind::Random:
        for (double& v : row) v = rng.normal(strategy.random_mean, strategy.random_std);
        break;
      case MaskKind::Zero:
      case MaskKind::Ignore:
        break;
    }
  }
  return out;
}

}  // namespace detail

// Encodes and fuses a minibatch. Missing modalities are replaced per the
// strategy: label-indexed prototype, zeros, a fresh N(mean, std) draw, or the
// sample is dropped (Ignore). Returns nullopt when nothing is left.
inline std::optional<BatchForward> forward_batch(Graph& g, const ModelVars& v, const MultiwayConfig& cfg,
                                                 const std::vector<MultimodalSample>& samples,
                                                 std::span<const std::size_t> batch, const PrototypeLibrary& lib,
                                                 const MaskStrategy& strategy, Rng& mask_rng) {
  std::vector<std::size_t> pairs, image_only, text_only;
  for (std::size_t i : batch) {
    const auto& s = samples[i];
    if (!s.has_image && !s.has_text) throw std::invalid_argument("batch sample without any modality");
    if (s.complete()) pairs.push_back(i);
    else if (strategy.kind == MaskKind::Ignore) continue;
    else if (s.has_image) image_only.push_back(i);
    else text_only.push_back(i);
  }
  if (pairs.empty() && image_only.empty() && text_only.empty()) return std::nullopt;

  std::vector<Var> image_parts, text_parts;
  BatchForward out;
  if (!pairs.empty()) {
    Tensor img = stack_tokens(samples, pairs, true);
    Tensor txt = stack_tokens(samples, pairs, false);
    auto eb = encode_batch(g, v, cfg, &img, &txt, pairs.size());
    image_parts.push_back(eb.image_cls);
    text_parts.push_back(eb.text_cls);
  }
  if (!image_only.empty()) {
    Tensor img = stack_tokens(samples, image_only, true);
    auto eb = encode_batch(g, v, cfg, &img, nullptr, image_only.size());
    image_parts.push_back(eb.image_cls);
    text_parts.push_back(g.constant(detail::mask_rows(strategy.kind, samples, image_only, lib, Family::Text, strategy, mask_rng)));
  }
  if (!text_only.empty()) {
    Tensor txt = stack_tokens(samples, text_only, false);
    auto eb = encode_batch(g, v, cfg, nullptr, &txt, text_only.size());
    image_parts.push_back(g.constant(detail::mask_rows(strategy.kind, samples, text_only, lib, Family::Image, strategy, mask_rng)));
    text_parts.push_back(eb.text_cls);
  }
  Var hi = image_parts.size() == 1 ? image_parts.front() : concat_rows(image_parts);
  Var ht = text_parts.size() == 1 ? text_parts.front() : concat_rows(text_parts);
  out.fused = fuse(v, hi, ht);
  out.logits = head(v, out.fused);
  for (auto* group : {&pairs, &image_only, &text_only})
    for (std::size_t i : *group) out.labels.push_back(samples[i].label);
  out.complete = pairs.size();
  out.image_only = image_only.size();
  out.text_only = text_only.size();
  return out;
}

inline Var task_loss(const BatchForward& fb) { return cross_entropy(fb.logits, fb.labels); }

// Unidirectional CLIP-style term: each fused representation against the
// fused prototypes of every (kept) batch sample, duplicates included; the
// positive is the sample's own class prototype. Samples whose class has no
// fused prototype yet are left out. Zero when nothing is kept.
inline Var contrast_loss(Var fused, std::span<const std::size_t> labels, const PrototypeLibrary& lib, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("contrast_loss: tau must be > 0");
  Graph& g = *fused.graph;
  std::vector<std::size_t> kept;
  for (std::size_t s = 0; s < labels.size(); ++s)
    if (lib.is_present(Family::Fused, labels[s])) kept.push_back(s);
  if (kept.empty()) return g.constant(Tensor::scalar(0.0));
  Tensor protos_t = Tensor::matrix(lib.dim, kept.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto p = lib.get(Family::Fused, labels[kept[i]]);
    for (std::size_t c = 0; c < lib.dim; ++c) protos_t.at(c, i) = p[c];
  }
  Var h = kept.size() == labels.size() ? fused : gather_rows(fused, kept);
  Var logits = scale(matmul(h, g.constant(std::move(protos_t))), 1.0 / tau);
  std::vector<std::size_t> diag(kept.size());
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = i;
  return cross_entropy(logits, diag);
}

// (mu / 2) * ||w - w_global||^2 over every parameter.
inline Var fedprox_term(const ModelVars& v, const ModelParams& global, double mu) {
  auto leaves = param_leaves(v);
  auto ref = param_leaves(global);
  if (leaves.size() != ref.size()) throw ShapeError("fedprox: parameter trees differ");
  Graph& g = *leaves.front()->graph;
  std::vector<Var> parts;
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    g.value(*leaves[i]).require_same_shape(*ref[i], "fedprox");
    Var d = sub(*leaves[i], g.constant(*ref[i]));
    parts.push_back(sum(mul(d, d)));
  }
  Var total = parts.front();
  for (std::size_t i = 1; i < parts.size(); ++i) total = add(total, parts[i]);
  return scale(total, 0.5 * mu);
}

// lambda * mean over samples and coordinates of (h_f - P_F^y)^2, for samples
// whose class has a fused prototype.
inline Var feature_alignment_term(Var fused, std::span<const std::size_t> labels, const PrototypeLibrary& lib, double lambda) {
  Graph& g = *fused.graph;
  std::vector<std::size_t> kept;
  for (std::size_t s = 0; s < labels.size(); ++s)
    if (lib.is_present(Family::Fused, labels[s])) kept.push_back(s);
  if (kept.empty()) return g.constant(Tensor::scalar(0.0));
  Tensor targets = Tensor::matrix(kept.size(), lib.dim);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto p = lib.get(Family::Fused, labels[kept[i]]);
    std::copy(p.begin(), p.end(), targets.row(i).begin());
  }
  Var h = kept.size() == labels.size() ? fused : gather_rows(fused, kept);
  Var d = sub(h, g.constant(std::move(targets)));
  return scale(mean(mul(d, d)), lambda);
}

}  // namespace pmcm
