#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xrag/retrieval.hpp"
#include "xrag/series.hpp"
#include "xrag/tensor.hpp"

namespace xrag {

enum class GateMode { Fixed, Learnable };
enum class HeadMode { Quantile, Mse };

inline constexpr std::array<double, 9> kQuantileLevels = {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
inline constexpr std::size_t kMedianQuantile = 4;

// Which fusion components take part in the forward pass:
//   query  - the skip connection carrying the backbone representation h
//   self   - retrieval self-attention over projected horizons
//   cross  - query-retrieval cross-attention
struct AblationMask {
  bool query = true;
  bool self = true;
  bool cross = true;

  static AblationMask full() { return {}; }
  static AblationMask query_only() { return {true, false, false}; }
  bool empty() const { return !query && !self && !cross; }
  bool uses_retrieval() const { return self || cross; }
  // "Q+R+QxR" style label; parse accepts the same format.
  std::string label() const;
  static AblationMask parse(const std::string& label);
  static std::array<AblationMask, 7> all();

  friend bool operator==(const AblationMask&, const AblationMask&) = default;
};

struct FusionConfig {
  std::size_t T = 64;
  std::size_t L = 16;
  std::size_t d = 64;
  std::size_t n_heads = 4;
  std::size_t k = 15;
  std::size_t ffn_mult = 4;
  double lambda = 0.7;
  double dropout_p = 0.2;
  GateMode gate_mode = GateMode::Fixed;
  HeadMode head_mode = HeadMode::Quantile;
  AblationMask mask = AblationMask::full();
  bool head_trainable = true;

  void validate() const;
  std::size_t head_width() const { return head_mode == HeadMode::Quantile ? L * kQuantileLevels.size() : L; }
};

struct BackboneConfig {
  std::size_t T = 64;
  std::size_t L = 16;
  std::size_t hidden = 64;
  std::size_t d = 64;
};

// Desk-scale stand-in for a pretrained forecasting model: an MLP encoder
// producing the query representation h and a linear predictor from h.
class FrozenBackbone : public Encoder {
 public:
  FrozenBackbone(const BackboneConfig& config, std::uint64_t seed);
  // Adopts tensors named backbone/...; the result is frozen.
  static FrozenBackbone from_params(const ParameterSet& params);

  const BackboneConfig& config() const { return config_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }
  bool frozen() const { return frozen_; }
  void freeze();
  std::uint64_t hash() const { return fingerprint(params_); }

  std::size_t input_dim() const override { return config_.T; }
  std::size_t output_dim() const override { return config_.d; }
  std::vector<double> encode(std::span<const double> scaled_x) const override;
  std::vector<double> encode_rows(std::span<const double> rows, std::size_t n) const override;

  // Plain evaluation on a batch of scaled inputs [B, T] -> [B, d] / [B, L].
  Tensor encode_batch(const Tensor& scaled_x) const;
  Tensor predict_batch(const Tensor& h) const;

  // Differentiable forms used while pretraining.
  Var encode(Tape& t, Var scaled_x, const ParameterSet& params) const;
  Var predict(Tape& t, Var h, const ParameterSet& params) const;

 private:
  FrozenBackbone() = default;
  BackboneConfig config_;
  ParameterSet params_;
  bool frozen_ = false;
};

// Query and retrieved windows for a batch, already in the scaled space.
struct FusionBatch {
  std::size_t batch = 0;
  std::size_t k = 0;
  Tensor query_x;      // [B, T]
  Tensor retrieved_x;  // [B*k, T], each row scaled by its own input stats
  Tensor retrieved_y;  // [B*k, L], scaled with the stats of its own input
  Tensor target_y;     // [B, L], scaled with the query's input stats
  std::vector<double> query_min;
  std::vector<double> query_range;
};

// Builds a batch; `retrieved[b]` lists knowledge-base indices for query b.
// Pass an empty `retrieved` for masks that use no retrieval.
FusionBatch make_batch(std::span<const WindowPair* const> queries, const KnowledgeBase* kb,
                       std::span<const std::vector<std::size_t>> retrieved);

struct ForwardOptions {
  bool train = false;
  DropoutStream dropout{};
};

struct FusionOutput {
  Var prediction;   // [B, head_width] in the scaled space
  Tensor attention;  // [B, n_heads, k] cross-attention weights before dropout
  Var h;
  Var cross;     // c~ (or the residual-free variant)
  Var self;      // s~
  Var fused;     // z
};

struct Forecast {
  std::vector<double> point;      // [L], original units
  std::vector<double> quantiles;  // [L * Q] when the head is quantile, original units
  Tensor attention;               // [n_heads, k]
};

struct ParamGroup {
  std::string group;
  std::string component;
  std::size_t count = 0;
  bool trainable = false;
};

struct ParamCount {
  std::size_t trainable = 0;
  std::size_t frozen = 0;
  std::vector<ParamGroup> breakdown;
  double trainable_fraction() const {
    return trainable + frozen == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(trainable + frozen);
  }
};

struct FlopCount {
  std::uint64_t backbone = 0;
  std::uint64_t projectors = 0;
  std::uint64_t cross_branch = 0;
  std::uint64_t self_branch = 0;
  std::uint64_t gate = 0;
  std::uint64_t head = 0;
  std::uint64_t total() const { return backbone + projectors + cross_branch + self_branch + gate + head; }
};

class CrossRagModel {
 public:
  CrossRagModel(const FusionConfig& config, std::shared_ptr<const FrozenBackbone> backbone, std::uint64_t seed);

  const FusionConfig& config() const { return config_; }
  // Gate weight and mask may change between runs; shapes may not.
  void set_lambda(double lambda);
  void set_mask(const AblationMask& mask);
  // Retrieval size expected by forward; no parameter depends on it.
  void set_k(std::size_t k);

  const FrozenBackbone& backbone() const { return *backbone_; }
  std::shared_ptr<const FrozenBackbone> shared_backbone() const { return backbone_; }
  ParameterSet& params() { return params_; }
  const ParameterSet& params() const { return params_; }

  FusionOutput forward(Tape& t, const FusionBatch& batch, const ParameterSet& params,
                       const ForwardOptions& opt = {}) const;
  FusionOutput forward(Tape& t, const FusionBatch& batch, const ForwardOptions& opt = {}) const {
    return forward(t, batch, params_, opt);
  }

  // Inference for one query; `retrieved` may be empty for retrieval-free masks.
  Forecast predict(const WindowPair& query, const KnowledgeBase* kb, std::span<const std::size_t> retrieved) const;
  // Batched inference, one Forecast per query.
  std::vector<Forecast> predict_batch(std::span<const WindowPair* const> queries, const KnowledgeBase* kb,
                                      std::span<const std::vector<std::size_t>> retrieved) const;

  // Backbone tensors under backbone/, fusion tensors under fusion/.
  ParameterSet checkpoint_params() const;
  static CrossRagModel from_checkpoint(const ParameterSet& params, const FusionConfig& config);

  ParamCount count_params() const;
  FlopCount flops(const AblationMask& mask) const;

 private:
  void init_params(std::uint64_t seed);
  // Tensors of components the mask leaves out are not trained.
  void refresh_trainable();

  FusionConfig config_;
  std::shared_ptr<const FrozenBackbone> backbone_;
  ParameterSet params_;
};

ParamCount count_params(const CrossRagModel& model);

}  // namespace xrag
