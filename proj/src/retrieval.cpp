#include "xrag/retrieval.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "binary_io.hpp"
#include "xrag/kernels.hpp"

namespace xrag {

std::vector<double> Encoder::encode_rows(std::span<const double> rows, std::size_t n) const {
  const std::size_t in = input_dim();
  const std::size_t out = output_dim();
  std::vector<double> result(n * out);
  for (std::size_t r = 0; r < n; ++r) {
    auto e = encode(rows.subspan(r * in, in));
    std::copy(e.begin(), e.end(), result.begin() + static_cast<std::ptrdiff_t>(r * out));
  }
  return result;
}

std::string to_string(MetricKind kind) {
  switch (kind) {
    case MetricKind::CosineData: return "cosine";
    case MetricKind::EuclideanData: return "euclidean";
    case MetricKind::CorrelationData: return "correlation";
    case MetricKind::EuclideanLatent: return "latent";
  }
  return "unknown";
}

MetricKind metric_from_string(const std::string& s) {
  if (s == "cosine") return MetricKind::CosineData;
  if (s == "euclidean") return MetricKind::EuclideanData;
  if (s == "correlation") return MetricKind::CorrelationData;
  if (s == "latent") return MetricKind::EuclideanLatent;
  throw std::invalid_argument("unknown similarity metric '" + s + "'");
}

SimilarityMetric SimilarityMetric::latent(std::shared_ptr<const Encoder> encoder) {
  if (!encoder) throw std::invalid_argument("latent metric requires an encoder");
  return SimilarityMetric(MetricKind::EuclideanLatent, std::move(encoder));
}

SimilarityMetric SimilarityMetric::data(MetricKind kind) {
  if (kind == MetricKind::EuclideanLatent) throw std::invalid_argument("latent metric requires an encoder");
  return SimilarityMetric(kind, nullptr);
}

double similarity(const SimilarityMetric& metric, std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("similarity: length mismatch (" + std::to_string(a.size()) + " vs " +
                                std::to_string(b.size()) + ")");
  }
  switch (metric.kind()) {
    case MetricKind::CosineData: return kernels::cosine(a, b);
    case MetricKind::CorrelationData: return kernels::pearson(a, b);
    case MetricKind::EuclideanData:
    case MetricKind::EuclideanLatent: return kernels::neg_l2(a, b);
  }
  return 0.0;
}

EntryMeta KnowledgeBase::meta(std::size_t j) const {
  const auto& e = entries_[j];
  return {e.source_id, e.start_index, e.family};
}

bool operator==(const KnowledgeBase& a, const KnowledgeBase& b) {
  if (a.T_ != b.T_ || a.L_ != b.L_ || a.size() != b.size()) return false;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const auto& x = a.entries_[j];
    const auto& y = b.entries_[j];
    if (x.x != y.x || x.y != y.y || x.source_id != y.source_id || x.start_index != y.start_index ||
        x.family != y.family) {
      return false;
    }
  }
  return a.scaled_inputs_ == b.scaled_inputs_;
}

KnowledgeBase build_kb(std::vector<WindowPair> pairs) {
  if (pairs.empty()) throw RetrievalError("build_kb: no window pairs");
  KnowledgeBase kb;
  kb.T_ = pairs.front().x.size();
  kb.L_ = pairs.front().y.size();
  if (kb.T_ == 0 || kb.L_ == 0) throw RetrievalError("build_kb: empty input or horizon window");
  for (std::size_t j = 0; j < pairs.size(); ++j) {
    if (pairs[j].x.size() != kb.T_ || pairs[j].y.size() != kb.L_) {
      throw RetrievalError("build_kb: pair " + std::to_string(j) + " has (T, L) = (" +
                           std::to_string(pairs[j].x.size()) + ", " + std::to_string(pairs[j].y.size()) +
                           "), expected (" + std::to_string(kb.T_) + ", " + std::to_string(kb.L_) + ")");
    }
  }
  kb.scaled_inputs_.resize(pairs.size() * kb.T_);
  for (std::size_t j = 0; j < pairs.size(); ++j) {
    const auto s = minmax_scale(pairs[j].x);
    std::copy(s.values.begin(), s.values.end(), kb.scaled_inputs_.begin() + static_cast<std::ptrdiff_t>(j * kb.T_));
  }
  kb.entries_ = std::move(pairs);
  return kb;
}

bool ExclusionRule::excludes(const KnowledgeBase& kb, std::size_t j, const WindowPair& query) const {
  if (!enabled) return false;
  const auto& e = kb.entry(j);
  if (e.source_id != query.source_id) return false;
  const auto r = static_cast<std::int64_t>(radius == 0 ? kb.input_len() + kb.horizon_len() : radius);
  const auto T = static_cast<std::int64_t>(kb.input_len());
  const std::int64_t lo = query.start_index - r;
  const std::int64_t hi = query.start_index + r;
  return e.start_index < hi && e.start_index + T > lo;
}

std::vector<std::size_t> RetrievedSet::indices() const {
  std::vector<std::size_t> out;
  out.reserve(items.size());
  for (const auto& it : items) out.push_back(it.kb_index);
  return out;
}

std::string query_id(const WindowPair& query) {
  return query.source_id + "@" + std::to_string(query.start_index);
}

Retriever::Retriever(const KnowledgeBase& kb, SimilarityMetric metric) : kb_(&kb), metric_(std::move(metric)) {
  if (kb.size() == 0) throw RetrievalError("retrieval over an empty knowledge base");
  if (metric_.is_latent()) {
    const auto* enc = metric_.encoder();
    if (enc->input_dim() != kb.input_len()) {
      throw RetrievalError("encoder input dimension " + std::to_string(enc->input_dim()) +
                           " does not match knowledge-base T = " + std::to_string(kb.input_len()));
    }
    dim_ = enc->output_dim();
    matrix_ = enc->encode_rows(kb.scaled_inputs(), kb.size());
  } else {
    dim_ = kb.input_len();
  }
}

std::vector<double> Retriever::represent(const WindowPair& query) const {
  if (query.x.size() != kb_->input_len()) {
    throw RetrievalError("query length " + std::to_string(query.x.size()) + " does not match T = " +
                         std::to_string(kb_->input_len()));
  }
  auto scaled = minmax_scale(query.x).values;
  if (metric_.is_latent()) return encode_for_retrieval(*metric_.encoder(), scaled);
  return scaled;
}

std::vector<double> Retriever::scores_from(std::span<const double> q) const {
  const std::span<const double> rows = metric_.is_latent() ? std::span<const double>(matrix_) : kb_->scaled_inputs();
  std::vector<double> out(kb_->size());
  switch (metric_.kind()) {
    case MetricKind::CosineData: kernels::cosine_scan(q, rows, dim_, out); break;
    case MetricKind::CorrelationData: kernels::pearson_scan(q, rows, dim_, out); break;
    case MetricKind::EuclideanData:
    case MetricKind::EuclideanLatent: kernels::neg_l2_scan(q, rows, dim_, out); break;
  }
  return out;
}

std::vector<double> Retriever::scores(const WindowPair& query) const { return scores_from(represent(query)); }

RetrievedSet Retriever::select(const WindowPair& query, std::span<const double> scores, std::size_t k,
                               const ExclusionRule& exclusion, const std::vector<char>* admit) const {
  if (k == 0) throw RetrievalError("topk: k must be >= 1");
  std::vector<std::size_t> candidates;
  candidates.reserve(kb_->size());
  for (std::size_t j = 0; j < kb_->size(); ++j) {
    if (admit && !(*admit)[j]) continue;
    if (exclusion.excludes(*kb_, j, query)) continue;
    candidates.push_back(j);
  }
  if (k > candidates.size()) {
    throw RetrievalError("topk: k = " + std::to_string(k) + " exceeds the " + std::to_string(candidates.size()) +
                         " admissible knowledge-base entries");
  }
  auto better = [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  };
  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k), candidates.end(), better);
  RetrievedSet out;
  out.query_id = query_id(query);
  out.items.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.items.push_back({candidates[i], scores[candidates[i]]});
  return out;
}

RetrievedSet Retriever::topk(const WindowPair& query, std::size_t k, const ExclusionRule& exclusion) const {
  const auto s = scores(query);
  return select(query, s, k, exclusion, nullptr);
}

RetrievedSet topk(const KnowledgeBase& kb, const WindowPair& query, std::size_t k, const SimilarityMetric& metric,
                  const ExclusionRule& exclusion) {
  return Retriever(kb, metric).topk(query, k, exclusion);
}

std::vector<double> encode_for_retrieval(const Encoder& encoder, std::span<const double> x) {
  if (x.size() != encoder.input_dim()) {
    throw RetrievalError("encoder expects length " + std::to_string(encoder.input_dim()) + ", got " +
                         std::to_string(x.size()));
  }
  auto out = encoder.encode(x);
  if (out.size() != encoder.output_dim()) throw RetrievalError("encoder produced an embedding of the wrong size");
  return out;
}

void save_index(const KnowledgeBase& kb, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RetrievalError("cannot open index file for writing: " + path.string());
  out.write("XRAG", 4);
  binio::put<std::uint32_t>(out, kIndexFormatVersion);
  binio::put<std::uint64_t>(out, kb.size());
  binio::put<std::uint64_t>(out, kb.input_len());
  binio::put<std::uint64_t>(out, kb.horizon_len());
  for (const auto& e : kb.entries()) binio::put_doubles(out, e.x);
  for (const auto& e : kb.entries()) binio::put_doubles(out, e.y);
  binio::put_doubles(out, std::vector<double>(kb.scaled_inputs().begin(), kb.scaled_inputs().end()));
  for (const auto& e : kb.entries()) {
    binio::put<std::int64_t>(out, e.start_index);
    binio::put<std::int32_t>(out, e.family);
    binio::put_string(out, e.source_id);
  }
  out.flush();
  if (!out) throw RetrievalError("write failed: " + path.string());
}

KnowledgeBase load_index(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RetrievalError("cannot open index file: " + path.string());
  const auto file_bytes = static_cast<std::size_t>(std::filesystem::file_size(path));
  binio::Reader<IndexFormatError> rd(in);
  rd.expect_magic("XRAG");
  const auto version = rd.get<std::uint32_t>();
  if (version != kIndexFormatVersion) {
    throw IndexVersionError("index format version " + std::to_string(version) + " is not supported (expected " +
                            std::to_string(kIndexFormatVersion) + ")");
  }
  const auto n = rd.get<std::uint64_t>();
  const auto T = rd.get<std::uint64_t>();
  const auto L = rd.get<std::uint64_t>();
  const std::size_t limit = file_bytes / sizeof(double);
  if (n == 0 || T == 0 || L == 0 || n > limit || T > limit || L > limit || n * (2 * T + L) > limit) {
    throw IndexFormatError("corrupt index dimensions");
  }
  KnowledgeBase kb;
  kb.T_ = T;
  kb.L_ = L;
  kb.entries_.resize(n);
  for (auto& e : kb.entries_) e.x = rd.get_doubles(T, limit);
  for (auto& e : kb.entries_) e.y = rd.get_doubles(L, limit);
  kb.scaled_inputs_ = rd.get_doubles(n * T, limit);
  for (auto& e : kb.entries_) {
    e.start_index = rd.get<std::int64_t>();
    e.family = rd.get<std::int32_t>();
    e.source_id = rd.get_string();
  }
  if (!rd.at_end()) throw IndexFormatError("trailing bytes after index payload");
  return kb;
}

TimingReport time_retrieval(const KnowledgeBase& kb, std::span<const WindowPair> queries,
                            const SimilarityMetric& metric, std::size_t k) {
  using clock = std::chrono::steady_clock;
  TimingReport report;
  report.metric = to_string(metric.kind());
  if (queries.empty()) return report;
  k = std::min(k, kb.size());

  const auto t0 = clock::now();
  Retriever retriever(kb, metric);
  std::vector<std::vector<double>> represented;
  represented.reserve(queries.size());
  for (const auto& q : queries) represented.push_back(retriever.represent(q));
  const auto t1 = clock::now();

  std::size_t checksum = 0;
  for (std::size_t i = 0; i < queries.size(); ++i) {
    auto s = retriever.scores_from(represented[i]);
    std::vector<std::size_t> order(s.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t a, std::size_t b) { return s[a] != s[b] ? s[a] > s[b] : a < b; });
    checksum += order.front();
  }
  const auto t2 = clock::now();
  (void)checksum;

  // Scaling the query is shared by both spaces; only the encoder pass counts
  // as embedding.
  if (metric.is_latent()) report.embedding_seconds = std::chrono::duration<double>(t1 - t0).count();
  report.search_seconds = std::chrono::duration<double>(t2 - t1).count();
  return report;
}

void write_timing_csv(std::span<const TimingReport> reports, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw RetrievalError("cannot write " + path.string());
  out << "metric,phase,seconds\n";
  char buf[64];
  for (const auto& r : reports) {
    std::snprintf(buf, sizeof buf, "%.9f", r.embedding_seconds);
    out << r.metric << ",embedding," << buf << '\n';
    std::snprintf(buf, sizeof buf, "%.9f", r.search_seconds);
    out << r.metric << ",search," << buf << '\n';
    std::snprintf(buf, sizeof buf, "%.9f", r.total());
    out << r.metric << ",total," << buf << '\n';
  }
}

}  // namespace xrag
