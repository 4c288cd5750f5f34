#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "xrag/series.hpp"

namespace xrag {

class RetrievalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IndexFormatError : public RetrievalError {
 public:
  using RetrievalError::RetrievalError;
};

class IndexVersionError : public IndexFormatError {
 public:
  using IndexFormatError::IndexFormatError;
};

// A frozen map from a scaled input window to a latent vector.
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual std::size_t input_dim() const = 0;
  virtual std::size_t output_dim() const = 0;
  virtual std::vector<double> encode(std::span<const double> scaled_x) const = 0;
  // Batched variant; rows are row-major `n x input_dim`.
  virtual std::vector<double> encode_rows(std::span<const double> rows, std::size_t n) const;
};

enum class MetricKind { CosineData, EuclideanData, CorrelationData, EuclideanLatent };

std::string to_string(MetricKind kind);
MetricKind metric_from_string(const std::string& s);

class SimilarityMetric {
 public:
  static SimilarityMetric cosine() { return SimilarityMetric(MetricKind::CosineData, nullptr); }
  static SimilarityMetric euclidean() { return SimilarityMetric(MetricKind::EuclideanData, nullptr); }
  static SimilarityMetric correlation() { return SimilarityMetric(MetricKind::CorrelationData, nullptr); }
  static SimilarityMetric latent(std::shared_ptr<const Encoder> encoder);
  // Throws for EuclideanLatent, which needs an encoder.
  static SimilarityMetric data(MetricKind kind);

  MetricKind kind() const { return kind_; }
  const Encoder* encoder() const { return encoder_.get(); }
  std::shared_ptr<const Encoder> shared_encoder() const { return encoder_; }
  bool is_latent() const { return kind_ == MetricKind::EuclideanLatent; }

 private:
  SimilarityMetric(MetricKind kind, std::shared_ptr<const Encoder> encoder)
      : kind_(kind), encoder_(std::move(encoder)) {}

  MetricKind kind_;
  std::shared_ptr<const Encoder> encoder_;
};

// Larger is more similar for every metric. For data metrics `a` and `b` are
// already min-max scaled; for the latent metric they are embeddings.
double similarity(const SimilarityMetric& metric, std::span<const double> a, std::span<const double> b);

struct EntryMeta {
  std::string source_id;
  std::int64_t start_index = 0;
  int family = -1;
};

class KnowledgeBase {
 public:
  KnowledgeBase() = default;

  std::size_t size() const { return entries_.size(); }
  std::size_t input_len() const { return T_; }
  std::size_t horizon_len() const { return L_; }
  const std::vector<WindowPair>& entries() const { return entries_; }
  const WindowPair& entry(std::size_t j) const { return entries_[j]; }
  EntryMeta meta(std::size_t j) const;
  std::span<const double> scaled_input(std::size_t j) const {
    return std::span<const double>(scaled_inputs_).subspan(j * T_, T_);
  }
  std::span<const double> scaled_inputs() const { return scaled_inputs_; }

  friend KnowledgeBase build_kb(std::vector<WindowPair> pairs);
  friend KnowledgeBase load_index(const std::filesystem::path& path);
  friend bool operator==(const KnowledgeBase& a, const KnowledgeBase& b);

 private:
  std::size_t T_ = 0;
  std::size_t L_ = 0;
  std::vector<WindowPair> entries_;
  std::vector<double> scaled_inputs_;
};

bool operator==(const KnowledgeBase& a, const KnowledgeBase& b);

KnowledgeBase build_kb(std::vector<WindowPair> pairs);

// Leakage exclusion: an entry is dropped when it shares the query's source and
// its input window overlaps [q - radius, q + radius).
struct ExclusionRule {
  bool enabled = true;
  std::size_t radius = 0;  // 0 means T + L of the knowledge base

  static ExclusionRule none() { return {false, 0}; }
  static ExclusionRule same_source(std::size_t radius = 0) { return {true, radius}; }
  bool excludes(const KnowledgeBase& kb, std::size_t j, const WindowPair& query) const;
};

struct RetrievedItem {
  std::size_t kb_index = 0;
  double score = 0.0;
};

struct RetrievedSet {
  std::string query_id;
  std::vector<RetrievedItem> items;

  std::vector<std::size_t> indices() const;
};

// Precomputed search matrix (scaled inputs or their embeddings) for one metric.
class Retriever {
 public:
  Retriever(const KnowledgeBase& kb, SimilarityMetric metric);

  const KnowledgeBase& kb() const { return *kb_; }
  const SimilarityMetric& metric() const { return metric_; }

  // Representation of a query window in the search space.
  std::vector<double> represent(const WindowPair& query) const;
  // Similarity of the query to every entry, in entry order.
  std::vector<double> scores(const WindowPair& query) const;
  std::vector<double> scores_from(std::span<const double> represented) const;

  RetrievedSet topk(const WindowPair& query, std::size_t k, const ExclusionRule& exclusion) const;
  // Top-k restricted to entries accepted by `admit` (after exclusion).
  template <typename Admit>
  RetrievedSet topk_where(const WindowPair& query, std::size_t k, const ExclusionRule& exclusion,
                          Admit&& admit) const;

  std::size_t dim() const { return dim_; }

 private:
  RetrievedSet select(const WindowPair& query, std::span<const double> scores, std::size_t k,
                      const ExclusionRule& exclusion, const std::vector<char>* admit) const;

  const KnowledgeBase* kb_;
  SimilarityMetric metric_;
  std::size_t dim_ = 0;
  std::vector<double> matrix_;
};

RetrievedSet topk(const KnowledgeBase& kb, const WindowPair& query, std::size_t k, const SimilarityMetric& metric,
                  const ExclusionRule& exclusion);

std::string query_id(const WindowPair& query);

std::vector<double> encode_for_retrieval(const Encoder& encoder, std::span<const double> x);

void save_index(const KnowledgeBase& kb, const std::filesystem::path& path);
KnowledgeBase load_index(const std::filesystem::path& path);

inline constexpr std::uint32_t kIndexFormatVersion = 1;

struct TimingReport {
  std::string metric;
  double embedding_seconds = 0.0;
  double search_seconds = 0.0;
  double total() const { return embedding_seconds + search_seconds; }
};

TimingReport time_retrieval(const KnowledgeBase& kb, std::span<const WindowPair> queries,
                            const SimilarityMetric& metric, std::size_t k = 15);

// CSV with header "metric,phase,seconds".
void write_timing_csv(std::span<const TimingReport> reports, const std::filesystem::path& path);

template <typename Admit>
RetrievedSet Retriever::topk_where(const WindowPair& query, std::size_t k, const ExclusionRule& exclusion,
                                   Admit&& admit) const {
  std::vector<char> mask(kb_->size());
  for (std::size_t j = 0; j < mask.size(); ++j) mask[j] = admit(j) ? 1 : 0;
  const auto s = scores(query);
  return select(query, s, k, exclusion, &mask);
}

}  // namespace xrag
