#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xrag/fusion.hpp"
#include "xrag/retrieval.hpp"
#include "xrag/tensor.hpp"

namespace xrag {

// --- Losses -----------------------------------------------------------------

// Mean over (row, l, q) of the pinball loss. `pred` is [B, L*Q] with quantile
// q of step l at column l*Q + q; `target` is [B, L].
Var pinball_loss(Tape& t, Var pred, const Tensor& target, std::span<const double> levels);
Var mse_loss(Tape& t, Var pred, const Tensor& target);
// Pinball over kQuantileLevels for quantile heads, MSE otherwise.
Var forecast_loss(Tape& t, Var pred, const Tensor& target, HeadMode mode);

// Plain forms. `pred` for pinball is L*Q values laid out as above.
double pinball_loss(std::span<const double> pred, std::span<const double> target, std::span<const double> levels);
double mse_loss(std::span<const double> pred, std::span<const double> target);
double mae_loss(std::span<const double> pred, std::span<const double> target);

// --- Optimizer --------------------------------------------------------------

struct TrainConfig {
  double lr = 3e-4;
  double weight_decay = 0.01;
  std::size_t batch_size = 32;
  std::size_t steps = 2000;
  std::uint64_t seed = 0;
  HeadMode loss_mode = HeadMode::Quantile;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // 0 disables clipping
  std::size_t log_every = 10;
};

struct OptimizerState {
  struct Moments {
    Tensor m;
    Tensor v;
  };
  std::map<std::string, Moments> moments;
  std::uint64_t step = 0;
};

// Decoupled AdamW with bias correction. `grads` must name exactly the
// trainable tensors of `params`.
void adamw_step(ParameterSet& params, const GradientMap& grads, OptimizerState& state, const TrainConfig& config);

// Scales `grads` in place so their global L2 norm is at most max_norm.
// Returns the norm before scaling.
double clip_grad_norm(GradientMap& grads, double max_norm);

// Process-wide count of optimizer updates, for auditing evaluation code.
std::uint64_t optimizer_step_count();

// --- Retrieval tables -------------------------------------------------------

// Knowledge-base indices per query, in rank order.
using RetrievalTable = std::vector<std::vector<std::size_t>>;

RetrievalTable retrieve_topk(const Retriever& retriever, std::span<const WindowPair> queries, std::size_t k,
                             const ExclusionRule& exclusion);

// k admissible entries per query drawn uniformly without replacement; the
// draw for query i depends only on (seed, i).
RetrievalTable retrieve_random(const KnowledgeBase& kb, std::span<const WindowPair> queries, std::size_t k,
                               const ExclusionRule& exclusion, std::uint64_t seed);

// The n_same most similar entries of the query's own family followed by the
// n_other most similar entries whose family satisfies `other`.
RetrievalTable retrieve_composed(const Retriever& retriever, std::span<const WindowPair> queries, std::size_t n_same,
                                 std::size_t n_other, const ExclusionRule& exclusion,
                                 const std::function<bool(int)>& other);

// --- Training ---------------------------------------------------------------

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LossPoint> curve;
  std::size_t steps_run = 0;
};

// Fits a fresh backbone with MSE in the scaled space, then freezes it.
FrozenBackbone pretrain_backbone(std::span<const WindowPair> corpus, const BackboneConfig& backbone,
                                 const TrainConfig& config, TrainResult* result = nullptr);

// Trains the fusion tensors of `model`; `table[i]` holds the retrieved set of
// corpus[i]. The table is ignored by masks that use no retrieval.
TrainResult train_fusion(CrossRagModel& model, const KnowledgeBase& kb, std::span<const WindowPair> corpus,
                         const RetrievalTable& table, const TrainConfig& config);

// Same, retrieving the top model.k with `metric` and same-source exclusion.
TrainResult train_fusion(CrossRagModel& model, const KnowledgeBase& kb, std::span<const WindowPair> corpus,
                         const SimilarityMetric& metric, const TrainConfig& config);

// CSV with header "step,loss".
void write_loss_csv(const TrainResult& result, const std::filesystem::path& path);

}  // namespace xrag
