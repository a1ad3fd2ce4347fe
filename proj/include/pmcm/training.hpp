#pragma once

#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "pmcm/losses.hpp"
#include "pmcm/optim.hpp"

namespace pmcm {

struct LocalTrainConfig {
  std::size_t epochs = 2;
  std::size_t batch_size = 32;
  AdamWConfig optimizer;
  MaskStrategy mask;
  LossWeights weights;
};

struct LossComponents {
  double task = 0.0;
  double contrast = 0.0;
  double prox = 0.0;
  double alignment = 0.0;
  double total = 0.0;
};

struct EpochLosses {
  LossComponents mean;
  std::size_t steps = 0;
  std::size_t skipped = 0;
};

struct LocalTrainResult {
  ModelParams params;
  std::vector<EpochLosses> epochs;
  std::vector<LossComponents> steps;  // every optimizer step, in order
  std::size_t skipped_steps = 0;
};

// E epochs of shuffled minibatch AdamW on
//   L = L_task + gamma * L_contrast + prox + alignment
// starting from `global`. The shuffle and random-mask streams derive from
// `seed`, so a client's result does not depend on scheduling.
inline LocalTrainResult local_train(const ModelParams& global, const MultiwayConfig& cfg, const ClientDataset& data,
                                    const PrototypeLibrary& lib, const LocalTrainConfig& tc, std::uint64_t seed) {
  tc.weights.validate();
  if (tc.batch_size == 0) throw std::invalid_argument("local_train: batch_size must be > 0");
  LocalTrainResult res;
  res.params = global;
  AdamWState opt;
  Rng shuffle_rng(derive_seed(seed, "shuffle"));
  Rng mask_rng(derive_seed(seed, "random-mask"));
  std::vector<std::size_t> order(data.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    EpochLosses el;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::size_t n = std::min(tc.batch_size, order.size() - start);
      std::span<const std::size_t> batch(order.data() + start, n);
      Graph g;
      ModelVars v = bind_params(g, res.params);
      auto fb = forward_batch(g, v, cfg, data.samples, batch, lib, tc.mask, mask_rng);
      if (!fb) {
        ++el.skipped;
        continue;
      }
      LossComponents lc;
      Var loss = task_loss(*fb);
      lc.task = g.value(loss).item();
      if (tc.weights.gamma > 0.0) {
        Var c = contrast_loss(fb->fused, fb->labels, lib, tc.weights.tau);
        lc.contrast = g.value(c).item();
        loss = add(loss, scale(c, tc.weights.gamma));
      }
      if (tc.weights.prox_mu > 0.0) {
        Var p = fedprox_term(v, global, tc.weights.prox_mu);
        lc.prox = g.value(p).item();
        loss = add(loss, p);
      }
      if (tc.weights.fa_lambda > 0.0) {
        Var a = feature_alignment_term(fb->fused, fb->labels, lib, tc.weights.fa_lambda);
        lc.alignment = g.value(a).item();
        loss = add(loss, a);
      }
      lc.total = g.value(loss).item();
      g.backward(loss);
      auto targets = param_leaves(res.params);
      std::vector<Tensor> gvec;
      gvec.reserve(targets.size());
      for (const Var* leaf : param_leaves(std::as_const(v))) gvec.push_back(g.grad(*leaf));
      adamw_step(targets, gvec, opt, tc.optimizer);

      el.mean.task += lc.task;
      el.mean.contrast += lc.contrast;
      el.mean.prox += lc.prox;
      el.mean.alignment += lc.alignment;
      el.mean.total += lc.total;
      ++el.steps;
      res.steps.push_back(lc);
    }
    if (el.steps > 0) {
      const double inv = 1.0 / static_cast<double>(el.steps);
      el.mean.task *= inv;
      el.mean.contrast *= inv;
      el.mean.prox *= inv;
      el.mean.alignment *= inv;
      el.mean.total *= inv;
    }
    res.skipped_steps += el.skipped;
    res.epochs.push_back(el);
  }
  return res;
}

}  // namespace pmcm
