#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "xrag/fusion.hpp"
#include "xrag/retrieval.hpp"
#include "xrag/trainer.hpp"

namespace xrag {

// Knowledge-base windows and test queries of one target.
struct Dataset {
  std::string name;
  std::size_t T = 0;
  std::size_t L = 0;
  std::vector<WindowPair> train;     // knowledge-base source
  std::vector<WindowPair> test;      // zero-shot queries
  std::vector<WindowPair> pretrain;  // toy only: backbone and fusion training corpus
};

Dataset toy_dataset(const ToyCorpus& corpus, const std::string& name = "toy");

struct CsvSplit {
  double train_fraction = 0.7;
  double test_fraction = 0.2;
  std::size_t train_stride = 1;
};

// Channel-independent windows of every numeric column. Each channel is
// standardised with its train-segment mean and deviation; train windows come
// from the first train_fraction of the rows, test queries (stride L, so
// horizons tile the segment) from the last test_fraction.
Dataset load_csv_dataset(const std::filesystem::path& path, std::size_t T, std::size_t L,
                         const CsvSplit& split = {});

enum class RetrievalMode { TopK, Random };

struct EvalSpec {
  std::size_t k = 15;
  MetricKind metric = MetricKind::CosineData;
  double lambda = 0.7;
  AblationMask mask = AblationMask::full();
  RetrievalMode mode = RetrievalMode::TopK;
  std::uint64_t retrieval_seed = 0;
  ExclusionRule exclusion = ExclusionRule::same_source();
  bool keep_forecasts = false;
  std::size_t batch = 128;
};

struct EvalResult {
  double mse = 0.0;
  double mae = 0.0;
  std::size_t n_queries = 0;
  // Filled when keep_forecasts is set.
  std::vector<std::string> query_ids;
  std::vector<Forecast> forecasts;
  RetrievalTable retrieved;
  std::vector<std::vector<double>> scores;  // similarity of each retrieved item
};

// Retrieval for `queries` as set by `spec` (metric, k, mode). The latent metric
// uses the model's backbone encoder.
RetrievalTable plan_retrieval(const CrossRagModel& model, const KnowledgeBase& kb, std::span<const WindowPair> queries,
                              const EvalSpec& spec);

// Forecasts every query with frozen weights and scores de-scaled predictions.
// `table` overrides the retrieval set by `spec` when given.
EvalResult zero_shot_eval(const CrossRagModel& model, const KnowledgeBase& kb, std::span<const WindowPair> queries,
                          const EvalSpec& spec, const RetrievalTable* table = nullptr);

// The frozen backbone alone, without any fusion module.
EvalResult backbone_eval(const FrozenBackbone& backbone, std::span<const WindowPair> queries);

struct SweepRow {
  double x = 0.0;  // k, fraction or lambda
  std::string label;
  std::uint64_t seed = 0;
  double mse = 0.0;
  double mae = 0.0;
};

std::vector<SweepRow> run_k_sweep(const CrossRagModel& model, const KnowledgeBase& kb,
                                  std::span<const WindowPair> queries, const EvalSpec& spec,
                                  std::span<const std::size_t> k_values);

// Uniform random retrieved sets; one row per k with metrics averaged over
// seeds retrieval_seed .. retrieval_seed + n_seeds - 1.
std::vector<SweepRow> run_random_retrieval(const CrossRagModel& model, const KnowledgeBase& kb,
                                           std::span<const WindowPair> queries, const EvalSpec& spec,
                                           std::span<const std::size_t> k_values, std::size_t n_seeds);

// Keeps the most recent `fraction` of each source's windows (by start index).
std::vector<WindowPair> most_recent_fraction(std::span<const WindowPair> windows, double fraction);

std::vector<SweepRow> run_small_kb(const CrossRagModel& model, std::span<const WindowPair> train_windows,
                                   std::span<const WindowPair> queries, const EvalSpec& spec,
                                   std::span<const double> fractions);

struct CrossDatasetResult {
  std::string kb_name;
  std::string target_name;
  double mse = 0.0;
  double mae = 0.0;
  double baseline_mse = 0.0;  // frozen backbone without retrieval
  double baseline_mae = 0.0;
};

CrossDatasetResult run_cross_dataset(const CrossRagModel& model, const Dataset& kb_source, const Dataset& target,
                                     const EvalSpec& spec);

// Everything needed to train and score one fusion model.
struct FusionRecipe {
  FusionConfig model;
  TrainConfig train;
  MetricKind metric = MetricKind::CosineData;
};

struct Workbench {
  std::shared_ptr<const FrozenBackbone> backbone;
  const KnowledgeBase* kb = nullptr;
  std::span<const WindowPair> train_corpus;
  std::span<const WindowPair> queries;
};

// Trains with top-k retrieval from the workbench KB (same-source exclusion).
CrossRagModel train_recipe(const Workbench& wb, const FusionRecipe& recipe, std::uint64_t seed,
                           const RetrievalTable* train_table = nullptr, TrainResult* result = nullptr);

// One trained model per (mask, seed); rows carry the mask label.
std::vector<SweepRow> run_ablation_grid(const Workbench& wb, const FusionRecipe& recipe,
                                        std::span<const AblationMask> masks, std::span<const std::uint64_t> seeds);

// One trained model per (lambda, seed), plus a learnable-gate model per seed
// (label "learnable", x = -1) when requested.
std::vector<SweepRow> run_lambda_sweep(const Workbench& wb, const FusionRecipe& recipe,
                                       std::span<const double> lambdas, bool include_learnable,
                                       std::span<const std::uint64_t> seeds);

// Relevance study: each query sees its n_same most similar same-family windows
// and the n_other most similar windows of families flagged by `other`.
struct RelevanceRow {
  std::uint64_t seed = 0;
  double full_mse = 0.0;
  double self_only_mse = 0.0;  // {Q,R}
  double relevant_mass = 0.0;  // mean cross-attention mass per query
  double other_mass = 0.0;
};

std::vector<RelevanceRow> run_relevance_study(const Workbench& wb, const FusionRecipe& recipe, std::size_t n_same,
                                              std::size_t n_other, const std::function<bool(int)>& other,
                                              std::span<const std::uint64_t> seeds);

// Averages rows sharing a label (in first-seen order); seed is set to 0.
std::vector<SweepRow> mean_by_label(std::span<const SweepRow> rows);

// --- Efficiency -------------------------------------------------------------

struct InferenceTiming {
  std::string mask;
  double seconds_per_instance = 0.0;
  FlopCount flops;
};

struct EfficiencyReport {
  std::vector<TimingReport> retrieval;
  std::vector<InferenceTiming> inference;
  ParamCount params;
};

// Retrieval timing for every data metric and the latent metric, inference
// time of the full and {Q}-only masks averaged over `runs` single-query
// forecasts, FLOPs of all seven masks, and the parameter table.
EfficiencyReport report_efficiency(const CrossRagModel& model, const KnowledgeBase& kb,
                                   std::span<const WindowPair> queries, std::size_t runs = 1000);

// --- Export -----------------------------------------------------------------

// Header "<x_name>,mse,mae" (plus label/seed columns when `full` is set).
void write_sweep_csv(std::span<const SweepRow> rows, const std::string& x_name, const std::filesystem::path& path,
                     bool full = false);
void write_relevance_csv(std::span<const RelevanceRow> rows, const std::filesystem::path& path);
// One row per (query, head, rank): query_id,head,rank,kb_index,weight,similarity_score.
void write_attention_csv(const EvalResult& result, const std::filesystem::path& path);
void write_efficiency_csv(const EfficiencyReport& report, const std::filesystem::path& dir);

struct SvgSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
};

void write_line_svg(std::span<const SvgSeries> series, const std::string& title, const std::filesystem::path& path);
void write_bar_svg(std::span<const std::string> labels, std::span<const double> values, const std::string& title,
                   const std::filesystem::path& path);
// Three series: input, truth and prediction, on one time axis.
void write_forecast_svg(const WindowPair& query, std::span<const double> prediction, const std::filesystem::path& path);

// Formats a double so that it round-trips exactly.
std::string fmt_double(double v);

}  // namespace xrag
