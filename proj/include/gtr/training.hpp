#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "gtr/common.hpp"
#include "gtr/model.hpp"
#include "gtr/params.hpp"
#include "gtr/table.hpp"
#include "gtr/tensor.hpp"

namespace gtr {

enum class Objective { MSE, NLL };

inline Objective objective_from_string(const std::string& s) {
  if (s == "mse") return Objective::MSE;
  if (s == "nll") return Objective::NLL;
  throw ConfigError(str_cat("unknown objective '", s, "' (use mse or nll)"));
}

struct TrainConfig {
  Objective objective = Objective::MSE;
  double lr = 1e-4;
  double dropout = 0.1;
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
  std::size_t warmup_steps = 100;
  std::uint64_t seed = 0;
  // When a dataset supplies only the positive table per query, NLL pools are
  // formed by sampling this many random negatives per query per epoch.
  std::size_t nll_negatives = 9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  // Graph-context pre-training.
  std::size_t pretrain_epochs = 20;
  std::size_t pretrain_batch = 16;
};

// ---------------------------------------------------------------------------
// Ranking objectives (value-level forms; the train loop assembles the same
// quantities on the tape).
// ---------------------------------------------------------------------------

/// Mean over queries of the mean over candidates of (s_k - y_k)^2. Queries
/// with no candidates are skipped and counted in `skipped` when provided.
inline double mse_loss(const std::vector<std::vector<double>>& scores,
                       const std::vector<std::vector<double>>& labels,
                       std::size_t* skipped = nullptr) {
  if (scores.size() != labels.size()) {
    throw DimensionError(str_cat("mse_loss: ", scores.size(),
                                 " score lists vs ", labels.size(),
                                 " label lists"));
  }
  double total = 0;
  std::size_t used = 0, skip = 0;
  for (std::size_t q = 0; q < scores.size(); ++q) {
    if (scores[q].size() != labels[q].size()) {
      throw DimensionError(str_cat("mse_loss: query ", q, " has ",
                                   scores[q].size(), " scores vs ",
                                   labels[q].size(), " labels"));
    }
    if (scores[q].empty()) {
      ++skip;
      continue;
    }
    double acc = 0;
    for (std::size_t k = 0; k < scores[q].size(); ++k) {
      const double d = scores[q][k] - labels[q][k];
      acc += d * d;
    }
    total += acc / static_cast<double>(scores[q].size());
    ++used;
  }
  if (skipped) *skipped = skip;
  return used == 0 ? 0.0 : total / static_cast<double>(used);
}

/// Mean over queries of -log softmax probability of the gold candidate.
inline double nll_loss(const std::vector<std::vector<double>>& scores,
                       const std::vector<std::size_t>& gold) {
  if (scores.size() != gold.size()) {
    throw DimensionError(str_cat("nll_loss: ", scores.size(),
                                 " score lists vs ", gold.size(),
                                 " gold indices"));
  }
  double total = 0;
  for (std::size_t q = 0; q < scores.size(); ++q) {
    const auto& s = scores[q];
    if (s.empty() || gold[q] >= s.size()) {
      throw DimensionError(str_cat("nll_loss: query ", q,
                                   " gold index out of range"));
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double denom = 0;
    for (double v : s) denom += std::exp(v - mx);
    total += (mx + std::log(denom)) - s[gold[q]];
  }
  return scores.empty() ? 0.0 : total / static_cast<double>(scores.size());
}

/// Linear warmup to the base rate, then linear decay to zero at total_steps.
/// `step` is 1-based.
inline double lr_schedule(std::size_t step, double base,
                          std::size_t warmup_steps, std::size_t total_steps) {
  if (step == 0) throw ConfigError("lr_schedule: step is 1-based");
  if (warmup_steps > 0 && step <= warmup_steps) {
    return base * static_cast<double>(step) /
           static_cast<double>(warmup_steps);
  }
  if (total_steps <= warmup_steps) return base;
  const double remaining = static_cast<double>(total_steps) -
                           static_cast<double>(std::min(step, total_steps));
  return base * remaining /
         static_cast<double>(total_steps - warmup_steps);
}

// ---------------------------------------------------------------------------
// Graph-context pre-training
// ---------------------------------------------------------------------------

template <typename Real>
struct PretrainSample {
  const PreparedTable<Real>* table = nullptr;
  const TableContext* positive = nullptr;  // the table's own context
  const TableContext* negative = nullptr;  // another table's context
};

/// Uniform draw of another table's non-empty context. The candidate list
/// holds (table id, context) of every context-bearing table in the corpus.
inline const TableContext* sample_negative_context(
    const std::vector<std::pair<std::string, const TableContext*>>& pool,
    const std::string& table_id, Rng& rng) {
  std::size_t others = 0;
  for (const auto& [id, _] : pool) {
    if (id != table_id) ++others;
  }
  if (others == 0) {
    throw DataError("sample_negative_context: no other table with context");
  }
  std::size_t pick = rng.next_below(others);
  for (const auto& [id, ctx] : pool) {
    if (id == table_id) continue;
    if (pick == 0) return ctx;
    --pick;
  }
  throw Error("sample_negative_context: unreachable");
}

namespace detail {

template <typename Real>
void check_param_grads_finite(ParameterStore<Real>& store) {
  for (auto& [name, p] : store.all()) {
    if (!p.tensor.has_grad()) continue;
    for (Real g : p.tensor.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError(str_cat("non-finite gradient in parameter '", name,
                                   "'"));
      }
    }
  }
}

}  // namespace detail

/// One pre-training batch: each sample runs the graph branch against its
/// positive and negative context with MSE targets 1 and 0, then a scoped
/// Adam step updates the graph branch and pre-training head only.
/// Returns the batch loss.
template <typename Real>
double pretrain_step(const std::vector<PretrainSample<Real>>& batch,
                     GtrModel<Real>& model, const EmbeddingTable<Real>& emb,
                     const TrainConfig& cfg, double lr, std::uint64_t step,
                     Rng& drop_rng) {
  if (batch.empty()) throw ConfigError("pretrain_step: empty batch");
  model.store.zero_grad();
  const Real unit_weight = Real(1) / static_cast<Real>(batch.size());
  double batch_loss = 0;
  for (const PretrainSample<Real>& sample : batch) {
    const PreparedTable<Real>& pt = *sample.table;
    Tensor<Real> encoded = encode_graph(pt.features, pt.idx, model.store,
                                        model.enc, /*training=*/true,
                                        &drop_rng);
    Tensor<Real> projected = project_nodes(encoded, model.store, model.match);
    Tensor<Real> s_pos = graph_context_score(model, projected,
                                             sample.positive->joined(), emb);
    Tensor<Real> s_neg = graph_context_score(model, projected,
                                             sample.negative->joined(), emb);
    Tensor<Real> scores = stack_scalars<Real>(
        {s_pos, s_neg});
    Tensor<Real> targets = Tensor<Real>::vector({Real(1), Real(0)});
    Tensor<Real> diff = sub(scores, targets);
    Tensor<Real> loss = mean_all(hadamard(diff, diff));
    batch_loss += static_cast<double>(loss.scalar_value());
    backward(scale(loss, unit_weight));
  }
  detail::check_param_grads_finite(model.store);
  adam_step_subset(model.store, lr, cfg.adam_beta1, cfg.adam_beta2,
                   cfg.adam_eps, step, is_pretrain_param);
  model.store.set_adam_step_count(step);
  return batch_loss / static_cast<double>(batch.size());
}

struct StepLogEntry {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
};

using StepLogger = std::function<void(const StepLogEntry&)>;
/// Return false to stop after the current epoch.
using EpochCallback = std::function<bool(std::size_t epoch, double mean_loss)>;

struct PretrainResult {
  bool ran = false;
  std::string disabled_reason;
  std::vector<double> epoch_losses;
};

/// Graph-context matching over every context-bearing prepared table. One
/// negative context per table per epoch, resampled each epoch. Requires at
/// least two tables with non-empty contexts; otherwise pre-training is
/// disabled with a message instead of failing.
template <typename Real>
PretrainResult pretrain(GtrModel<Real>& model,
                        const std::map<std::string, PreparedTable<Real>>& tables,
                        const EmbeddingTable<Real>& emb, const TrainConfig& cfg,
                        const StepLogger& log = {},
                        const EpochCallback& on_epoch = {}) {
  PretrainResult result;
  std::vector<const PreparedTable<Real>*> eligible;
  std::vector<std::pair<std::string, const TableContext*>> ctx_pool;
  for (const auto& [id, pt] : tables) {
    if (pt.context.empty()) continue;
    eligible.push_back(&pt);
    ctx_pool.emplace_back(id, &pt.context);
  }
  if (eligible.size() < 2) {
    result.disabled_reason =
        str_cat("pre-training disabled: needs >= 2 tables with non-empty "
                "context, found ", eligible.size());
    return result;
  }
  result.ran = true;
  model.enc.dropout = cfg.dropout;

  Rng master(cfg.seed);
  Rng shuffle_rng = master.fork(1);
  Rng neg_rng = master.fork(2);
  Rng drop_rng = master.fork(3);

  const std::size_t batches_per_epoch =
      (eligible.size() + cfg.pretrain_batch - 1) / cfg.pretrain_batch;
  const std::size_t total_steps = cfg.pretrain_epochs * batches_per_epoch;
  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
    std::vector<PretrainSample<Real>> samples;
    samples.reserve(eligible.size());
    for (const PreparedTable<Real>* pt : eligible) {
      samples.push_back({pt, &pt->context,
                         sample_negative_context(ctx_pool, pt->id, neg_rng)});
    }
    // Fisher-Yates with the portable rng.
    for (std::size_t i = samples.size(); i > 1; --i) {
      std::swap(samples[i - 1], samples[shuffle_rng.next_below(i)]);
    }
    double epoch_loss = 0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < samples.size(); b0 += cfg.pretrain_batch) {
      const std::size_t b1 = std::min(b0 + cfg.pretrain_batch, samples.size());
      std::vector<PretrainSample<Real>> batch(samples.begin() + b0,
                                              samples.begin() + b1);
      ++step;
      const double lr = lr_schedule(step, cfg.lr, cfg.warmup_steps, total_steps);
      const double loss = pretrain_step(batch, model, emb, cfg, lr, step,
                                        drop_rng);
      epoch_loss += loss;
      ++batches;
      if (log) log({epoch, step, lr, loss});
    }
    const double mean_loss = epoch_loss / static_cast<double>(batches);
    result.epoch_losses.push_back(mean_loss);
    if (on_epoch && !on_epoch(epoch, mean_loss)) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Main training loop
// ---------------------------------------------------------------------------

namespace detail {

template <typename Real>
struct MseUnit {
  const RetrievalInstance* instance = nullptr;
  const PreparedTable<Real>* table = nullptr;
  double grade = 0;
};

template <typename Real>
struct NllUnit {
  const RetrievalInstance* instance = nullptr;
  std::vector<const PreparedTable<Real>*> pool;
  std::size_t gold = 0;
};

template <typename Real>
const PreparedTable<Real>* lookup_table(
    const std::map<std::string, PreparedTable<Real>>& tables,
    const std::string& id) {
  auto it = tables.find(id);
  if (it == tables.end()) {
    throw DataError(str_cat("no prepared table for candidate '", id, "'"));
  }
  return &it->second;
}

}  // namespace detail

struct TrainResult {
  std::vector<double> epoch_losses;
  std::size_t steps = 0;
};

/// Trains the full model. MSE shuffles (query, candidate) units; NLL
/// shuffles queries, forming each query's softmax over its provided
/// candidate list, or over the positive plus `nll_negatives` sampled
/// negatives when only the positive is supplied. Deterministic per seed.
template <typename Real>
TrainResult train(GtrModel<Real>& model,
                  const std::vector<RetrievalInstance>& instances,
                  const std::map<std::string, PreparedTable<Real>>& tables,
                  const EmbeddingTable<Real>& emb, const TrainConfig& cfg,
                  const StepLogger& log = {},
                  const EpochCallback& on_epoch = {}) {
  TrainResult result;
  if (cfg.batch_size == 0) throw ConfigError("train: batch_size must be >= 1");
  model.enc.dropout = cfg.dropout;

  Rng master(cfg.seed);
  Rng shuffle_rng = master.fork(1);
  Rng neg_rng = master.fork(2);
  Rng drop_rng = master.fork(3);

  // Assemble static unit skeletons; NLL pools with sampled negatives are
  // refreshed per epoch.
  std::vector<detail::MseUnit<Real>> mse_units;
  std::vector<detail::NllUnit<Real>> nll_units;
  std::vector<const PreparedTable<Real>*> universe;
  for (const auto& [_, pt] : tables) universe.push_back(&pt);

  for (const RetrievalInstance& inst : instances) {
    if (inst.candidates.empty()) continue;  // flagged at load time
    if (cfg.objective == Objective::MSE) {
      for (const auto& [tid, grade] : inst.candidates) {
        mse_units.push_back({&inst, detail::lookup_table(tables, tid),
                             static_cast<double>(grade)});
      }
    } else {
      detail::NllUnit<Real> unit;
      unit.instance = &inst;
      std::size_t gold_count = 0;
      for (const auto& [tid, grade] : inst.candidates) {
        if (grade >= 1) {
          unit.gold = unit.pool.size();
          ++gold_count;
        }
        unit.pool.push_back(detail::lookup_table(tables, tid));
      }
      if (gold_count != 1) {
        throw ConfigError(str_cat("NLL objective requires exactly one "
                                  "relevant table per query; query '",
                                  inst.query_id, "' has ", gold_count,
                                  " (use the MSE objective instead)"));
      }
      nll_units.push_back(std::move(unit));
    }
  }

  const std::size_t unit_count = cfg.objective == Objective::MSE
                                     ? mse_units.size()
                                     : nll_units.size();
  if (unit_count == 0) {
    throw DataError("train: no usable (query, candidate) units");
  }
  const std::size_t batches_per_epoch =
      (unit_count + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches_per_epoch;

  std::vector<std::size_t> order(unit_count);
  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    // Refresh sampled negatives: uniform over tables outside the provided
    // candidate list, without replacement.
    if (cfg.objective == Objective::NLL) {
      for (auto& unit : nll_units) {
        if (unit.instance->candidates.size() != 1) continue;
        unit.pool.resize(1);
        unit.gold = 0;
        std::vector<const PreparedTable<Real>*> others;
        others.reserve(universe.size());
        for (const PreparedTable<Real>* pt : universe) {
          if (pt != unit.pool[0]) others.push_back(pt);
        }
        const std::size_t take = std::min(cfg.nll_negatives, others.size());
        for (std::size_t k = 0; k < take; ++k) {
          const std::size_t pick = k + neg_rng.next_below(others.size() - k);
          std::swap(others[k], others[pick]);
          unit.pool.push_back(others[k]);
        }
      }
    }

    for (std::size_t i = 0; i < unit_count; ++i) order[i] = i;
    for (std::size_t i = unit_count; i > 1; --i) {
      std::swap(order[i - 1], order[shuffle_rng.next_below(i)]);
    }

    double epoch_loss = 0;
    std::size_t batch_count = 0;
    for (std::size_t b0 = 0; b0 < unit_count; b0 += cfg.batch_size) {
      const std::size_t b1 = std::min(b0 + cfg.batch_size, unit_count);
      model.store.zero_grad();
      const Real unit_weight = Real(1) / static_cast<Real>(b1 - b0);
      double batch_loss = 0;
      for (std::size_t u = b0; u < b1; ++u) {
        Tensor<Real> unit_loss;
        if (cfg.objective == Objective::MSE) {
          const auto& unit = mse_units[order[u]];
          PairForward<Real> fwd =
              score_pair(model, *unit.table, unit.instance->query_text, emb,
                         /*training=*/true, &drop_rng);
          Tensor<Real> diff = sub(
              fwd.score, Tensor<Real>::matrix(1, 1,
                                              {static_cast<Real>(unit.grade)}));
          unit_loss = mean_all(hadamard(diff, diff));
        } else {
          const auto& unit = nll_units[order[u]];
          std::vector<Tensor<Real>> scores;
          scores.reserve(unit.pool.size());
          for (const PreparedTable<Real>* pt : unit.pool) {
            scores.push_back(score_pair(model, *pt,
                                        unit.instance->query_text, emb,
                                        /*training=*/true, &drop_rng)
                                 .score);
          }
          unit_loss = nll_from_scores(stack_scalars(scores), unit.gold);
        }
        batch_loss += static_cast<double>(unit_loss.scalar_value());
        backward(scale(unit_loss, unit_weight));
      }
      detail::check_param_grads_finite(model.store);
      ++step;
      const double lr = lr_schedule(step, cfg.lr, cfg.warmup_steps,
                                    total_steps);
      adam_step(model.store, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                step);
      model.store.set_adam_step_count(step);
      const double mean_batch_loss =
          batch_loss / static_cast<double>(b1 - b0);
      epoch_loss += mean_batch_loss;
      ++batch_count;
      if (log) log({epoch, step, lr, mean_batch_loss});
    }
    const double mean_loss = epoch_loss / static_cast<double>(batch_count);
    result.epoch_losses.push_back(mean_loss);
    result.steps = step;
    if (on_epoch && !on_epoch(epoch, mean_loss)) break;
  }
  return result;
}

}  // namespace gtr
