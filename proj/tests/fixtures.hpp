#pragma once

#include <memory>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "xrag/fusion.hpp"
#include "xrag/retrieval.hpp"
#include "xrag/series.hpp"
#include "xrag/trainer.hpp"

namespace fixtures {

inline xrag::ToyCorpus small_toy(std::size_t per_family = 20, std::uint64_t seed = 7, std::size_t T = 32,
                                 std::size_t L = 8) {
  xrag::ToyCorpusSpec spec;
  spec.samples_per_family = per_family;
  spec.seed = seed;
  spec.T = T;
  spec.L = L;
  return xrag::gen_toy_corpus(spec);
}

inline std::shared_ptr<xrag::FrozenBackbone> random_backbone(std::size_t T, std::size_t L, std::size_t d,
                                                             std::uint64_t seed, std::size_t hidden = 16) {
  auto bb = std::make_shared<xrag::FrozenBackbone>(xrag::BackboneConfig{T, L, hidden, d}, seed);
  // Non-zero biases so every path is exercised.
  std::mt19937_64 rng(seed + 1);
  for (auto& p : bb->params().items()) {
    if (p.value.rank() == 1) p.value.vec() = oracle::random_vec(rng, p.value.size(), -0.2, 0.2);
  }
  bb->freeze();
  return bb;
}

// Overwrites every fusion tensor with random values so no zero-init identity
// hides a bug.
inline void randomize(xrag::CrossRagModel& m, std::uint64_t seed, double scale = 0.4) {
  std::mt19937_64 rng(seed);
  for (auto& p : m.params().items()) {
    if (p.name.rfind("fusion/", 0) == 0) p.value.vec() = oracle::random_vec(rng, p.value.size(), -scale, scale);
  }
}

inline xrag::FusionConfig small_config(std::size_t k = 4, std::size_t d = 16) {
  xrag::FusionConfig c;
  c.T = 32;
  c.L = 8;
  c.d = d;
  c.n_heads = 4;
  c.k = k;
  c.dropout_p = 0.0;
  return c;
}

// Top-k cosine tables for `queries` against `kb`.
inline xrag::RetrievalTable table(const xrag::KnowledgeBase& kb, std::span<const xrag::WindowPair> queries,
                                  std::size_t k) {
  xrag::Retriever r(kb, xrag::SimilarityMetric::cosine());
  return xrag::retrieve_topk(r, queries, k, xrag::ExclusionRule::same_source());
}

inline xrag::FusionBatch batch_of(std::span<const xrag::WindowPair> queries, const xrag::KnowledgeBase& kb,
                                  const xrag::RetrievalTable& tab) {
  std::vector<const xrag::WindowPair*> ptrs;
  for (const auto& q : queries) ptrs.push_back(&q);
  return xrag::make_batch(ptrs, &kb, tab);
}

}  // namespace fixtures
