#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "doctest.h"
#include "instances.hpp"
#include "oracles.hpp"
#include "test_util.hpp"
#include "xrag/kernels.hpp"
#include "xrag/retrieval.hpp"
#include "xrag/series.hpp"

using namespace xrag;

namespace {

WindowPair pair_of(std::vector<double> x, std::vector<double> y, std::string src, std::int64_t start) {
  WindowPair w;
  w.x = std::move(x);
  w.y = std::move(y);
  w.source_id = std::move(src);
  w.start_index = start;
  return w;
}

}  // namespace

TEST_SUITE("retrieval") {
  TEST_CASE("similarity examples") {
    std::mt19937_64 rng(1);
    const auto v = oracle::random_vec(rng, 20);
    const auto cos = SimilarityMetric::cosine();
    CHECK(std::abs(similarity(cos, v, v) - 1.0) <= 1e-9);
    auto scaled = v;
    for (auto& e : scaled) e *= 3.7;
    const auto a = oracle::random_vec(rng, 20);
    CHECK(std::abs(similarity(cos, a, scaled) - similarity(cos, a, v)) <= 1e-9);
    const auto corr = SimilarityMetric::correlation();
    CHECK(std::abs(similarity(corr, std::vector<double>{1, 2, 3}, std::vector<double>{2, 4, 6}) - 1.0) <= 1e-9);
    CHECK(similarity(corr, std::vector<double>{1, 2, 3}, std::vector<double>{5, 5, 5}) == 0.0);
    CHECK(similarity(SimilarityMetric::euclidean(), std::vector<double>{0, 0}, std::vector<double>{3, 4}) == -5.0);
  }

  TEST_CASE("metric symmetry") {
    std::mt19937_64 rng(2);
    auto enc = std::make_shared<instances::TanhEncoder>(12, 4, 3);
    const SimilarityMetric ms[] = {SimilarityMetric::cosine(), SimilarityMetric::euclidean(),
                                   SimilarityMetric::correlation(), SimilarityMetric::latent(enc)};
    for (int trial = 0; trial < 100; ++trial) {
      const auto a = oracle::random_vec(rng, 12), b = oracle::random_vec(rng, 12);
      for (const auto& m : ms) {
        const auto ea = m.is_latent() ? enc->encode(a) : a;
        const auto eb = m.is_latent() ? enc->encode(b) : b;
        CHECK(std::abs(similarity(m, ea, eb) - similarity(m, eb, ea)) <= 1e-12);
      }
    }
  }

  TEST_CASE("knowledge base construction") {
    std::vector<WindowPair> ps = {pair_of({0, 5, 10}, {1}, "a", 0), pair_of({3, 3, 3}, {1}, "a", 1),
                                  pair_of({-1, 1, 0}, {2}, "b", 0)};
    const auto kb = build_kb(ps);
    REQUIRE(kb.size() == 3);
    for (std::size_t j = 0; j < 3; ++j) {
      const auto s = minmax_scale(ps[j].x).values;
      CHECK(std::equal(s.begin(), s.end(), kb.scaled_input(j).begin()));
    }
    ps.push_back(pair_of({1, 2}, {1}, "c", 0));
    CHECK_THROWS(build_kb(ps));
    CHECK_THROWS(build_kb({}));

    ToyCorpusSpec spec;
    spec.samples_per_family = 7;
    spec.T = 16;
    spec.L = 4;
    CHECK(build_kb(gen_toy_corpus(spec).kb).size() == 7 * 6);
  }

  TEST_CASE("an exact copy ranks first") {
    std::mt19937_64 rng(4);
    std::vector<WindowPair> ps;
    for (int i = 0; i < 50; ++i) ps.push_back(pair_of(oracle::random_vec(rng, 16), {0.0}, "kb", i * 100));
    const auto q = pair_of(ps[17].x, {0.0}, "query", 0);
    const auto kb = build_kb(ps);
    const auto r = topk(kb, q, 3, SimilarityMetric::cosine(), ExclusionRule::same_source());
    CHECK(r.items[0].kb_index == 17);
    CHECK(std::abs(r.items[0].score - 1.0) <= 1e-9);
  }

  TEST_CASE("toy relevant entries outrank irrelevant ones") {
    ToyCorpusSpec spec;
    spec.n_relevant_families = 1;
    spec.n_irrelevant_families = 1;
    spec.samples_per_family = 5;
    spec.noise_sigma = 0.0;
    spec.phase_grid = 1;
    spec.T = 32;
    spec.L = 8;
    const auto c = gen_toy_corpus(spec);
    const auto kb = build_kb(c.kb);
    const auto r = topk(kb, c.test[0], 10, SimilarityMetric::cosine(), ExclusionRule::same_source());
    for (std::size_t i = 0; i < 5; ++i) CHECK(kb.entry(r.items[i].kb_index).family == 0);
    for (std::size_t i = 5; i < 10; ++i) CHECK(kb.entry(r.items[i].kb_index).family == 1);
    CHECK(r.indices() == instances::Instance{c.kb, c.test[0], 10, MetricKind::CosineData, true, nullptr}.oracle_topk());
  }

  TEST_CASE("top-k equals the brute-force oracle") {
    int checked = 0;
    for (std::uint64_t seed = 0; seed < 48; ++seed) {
      const auto metric = instances::kMetrics[seed % 4];
      const auto k = instances::kKs[(seed / 4) % 3];
      const auto inst = instances::make(1000 + seed, 600, metric, k);
      const auto kb = build_kb(inst.entries);
      const auto ex = inst.exclude ? ExclusionRule::same_source() : ExclusionRule::none();
      const auto got = topk(kb, inst.query, k, inst.similarity(), ex).indices();
      CHECK(got == inst.oracle_topk());
      ++checked;
    }
    CHECK(checked == 48);
  }

  TEST_CASE("top-k is nested in k") {
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
      const auto inst = instances::make(2000 + seed, 400, instances::kMetrics[seed % 4], 1);
      const auto kb = build_kb(inst.entries);
      const Retriever r(kb, inst.similarity());
      auto prev = r.topk(inst.query, 1, ExclusionRule::same_source()).indices();
      for (std::size_t k = 2; k <= 20; ++k) {
        const auto cur = r.topk(inst.query, k, ExclusionRule::same_source()).indices();
        REQUIRE(cur.size() == k);
        CHECK(std::equal(prev.begin(), prev.end(), cur.begin()));
        prev = cur;
      }
    }
  }

  TEST_CASE("exclusion soundness") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      auto inst = instances::make(3000 + seed, 300, instances::kMetrics[seed % 4], 15);
      const auto kb = build_kb(inst.entries);
      const auto T = static_cast<std::int64_t>(kb.input_len());
      const auto radius = T + static_cast<std::int64_t>(kb.horizon_len());
      const auto got = topk(kb, inst.query, 15, inst.similarity(), ExclusionRule::same_source());
      for (const auto& it : got.items) {
        const auto& e = kb.entry(it.kb_index);
        CHECK_FALSE(oracle::overlaps(e, inst.query, T, radius));
      }
    }
  }

  TEST_CASE("k beyond the admissible entries is an error") {
    std::vector<WindowPair> ps;
    for (int i = 0; i < 5; ++i) ps.push_back(pair_of({double(i), 1.0, 2.0}, {0.0}, "s", i));
    const auto kb = build_kb(ps);
    const auto q = pair_of({0.0, 1.0, 2.0}, {0.0}, "s", 0);
    // Entries 0..3 overlap the query's span [-4, 4).
    CHECK(topk(kb, q, 1, SimilarityMetric::cosine(), ExclusionRule::same_source()).items[0].kb_index == 4);
    CHECK_THROWS_AS(topk(kb, q, 2, SimilarityMetric::cosine(), ExclusionRule::same_source()), RetrievalError);
    CHECK_THROWS_AS(topk(kb, q, 0, SimilarityMetric::cosine(), ExclusionRule::none()), RetrievalError);
  }

  TEST_CASE("latent retrieval checks the encoder shape") {
    std::vector<WindowPair> ps = {pair_of({0, 1, 2, 3}, {0}, "a", 0), pair_of({3, 1, 2, 0}, {0}, "a", 9)};
    const auto kb = build_kb(ps);
    auto good = std::make_shared<instances::TanhEncoder>(4, 3, 1);
    auto bad = std::make_shared<instances::TanhEncoder>(5, 3, 1);
    CHECK_NOTHROW(Retriever(kb, SimilarityMetric::latent(good)));
    CHECK_THROWS_AS(Retriever(kb, SimilarityMetric::latent(bad)), RetrievalError);
    const auto x = std::vector<double>{0.0, 0.5, 1.0, 0.2};
    CHECK(encode_for_retrieval(*good, x) == encode_for_retrieval(*good, x));
    CHECK(encode_for_retrieval(*good, x).size() == 3);
  }

  TEST_CASE("index persistence") {
    TempDir dir;
    const auto inst = instances::make(77, 300, MetricKind::CosineData, 5);
    auto entries = inst.entries;
    entries[3].family = 2;
    const auto kb = build_kb(entries);
    save_index(kb, dir.path / "kb.xrag");
    const auto back = load_index(dir.path / "kb.xrag");
    CHECK(back == kb);
    CHECK(back.meta(3).family == 2);
    CHECK(back.meta(3).source_id == kb.meta(3).source_id);

    SUBCASE("truncated file") {
      const auto bytes = slurp(dir.path / "kb.xrag");
      for (std::size_t cut : {std::size_t{2}, std::size_t{10}, bytes.size() / 2, bytes.size() - 1}) {
        std::ofstream(dir.path / "cut.xrag", std::ios::binary) << bytes.substr(0, cut);
        CHECK_THROWS_AS(load_index(dir.path / "cut.xrag"), IndexFormatError);
      }
    }
    SUBCASE("future version") {
      auto bytes = slurp(dir.path / "kb.xrag");
      bytes[4] = static_cast<char>(kIndexFormatVersion + 1);
      std::ofstream(dir.path / "v2.xrag", std::ios::binary) << bytes;
      CHECK_THROWS_AS(load_index(dir.path / "v2.xrag"), IndexVersionError);
    }
    SUBCASE("not an index") {
      std::ofstream(dir.path / "junk.xrag", std::ios::binary) << "hello world, not an index";
      CHECK_THROWS_AS(load_index(dir.path / "junk.xrag"), IndexFormatError);
    }
  }

  TEST_CASE("timing reports split embedding and search") {
    ToyCorpusSpec spec;
    spec.samples_per_family = 30;
    spec.T = 32;
    spec.L = 8;
    const auto c = gen_toy_corpus(spec);
    const auto kb = build_kb(c.kb);
    const auto data = time_retrieval(kb, c.test, SimilarityMetric::cosine());
    CHECK(data.embedding_seconds == 0.0);
    CHECK(data.search_seconds > 0.0);
    auto enc = std::make_shared<instances::TanhEncoder>(32, 8, 1);
    const auto lat = time_retrieval(kb, c.test, SimilarityMetric::latent(enc));
    CHECK(lat.embedding_seconds > 0.0);
  }

  TEST_CASE("parallel scans match the serial reference bitwise") {
    std::mt19937_64 rng(9);
    const std::size_t dim = 37, n = 1500;
    const auto rows = oracle::random_vec(rng, dim * n);
    const auto q = oracle::random_vec(rng, dim);
    std::vector<double> a(n), b(n);
    kernels::cosine_scan(q, rows, dim, a);
    kernels::serial::cosine_scan(q, rows, dim, b);
    CHECK(a == b);
    kernels::neg_l2_scan(q, rows, dim, a);
    kernels::serial::neg_l2_scan(q, rows, dim, b);
    CHECK(a == b);
    kernels::pearson_scan(q, rows, dim, a);
    kernels::serial::pearson_scan(q, rows, dim, b);
    CHECK(a == b);
  }
}
