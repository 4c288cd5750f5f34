#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "oracles.hpp"
#include "test_util.hpp"
#include "xrag/series.hpp"

using namespace xrag;

TEST_SUITE("series") {
  TEST_CASE("csv column by name") {
    TempDir dir;
    const auto path = dir.write("a.csv", "date,OT\n2020-01-01,1.0\n2020-01-02,2.0\n2020-01-03,3.0\n2020-01-04,4.0\n");
    const auto s = load_csv(path, std::string("OT"));
    CHECK(s.values == std::vector<double>{1, 2, 3, 4});
    CHECK(s.name == "OT");
    const auto by_index = load_csv(path, std::size_t{1});
    CHECK(by_index.values == s.values);
  }

  TEST_CASE("csv errors") {
    TempDir dir;
    SUBCASE("blank cell names the row") {
      const auto path = dir.write("b.csv", "a,b\n1,2\n3,\n5,6\n");
      try {
        load_csv(path, std::string("b"));
        FAIL("expected an error");
      } catch (const SeriesError& e) {
        CHECK(std::string(e.what()).find("row 3") != std::string::npos);
      }
    }
    SUBCASE("NaN is rejected") {
      const auto path = dir.write("n.csv", "a\n1\nnan\n3\n");
      CHECK_THROWS_AS(load_csv(path, std::size_t{0}), SeriesError);
    }
    SUBCASE("missing file and column") {
      CHECK_THROWS_AS(load_csv(dir.path / "none.csv", std::size_t{0}), SeriesError);
      const auto path = dir.write("c.csv", "a\n1\n");
      CHECK_THROWS_AS(load_csv(path, std::string("zz")), SeriesError);
      CHECK_THROWS_AS(load_csv(path, std::size_t{4}), SeriesError);
    }
  }

  TEST_CASE("csv channels skip the timestamp column") {
    TempDir dir;
    std::string body = "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT\n";
    for (int r = 0; r < 50; ++r) {
      body += "2016-07-01 " + std::to_string(r) + ":00";
      for (int c = 0; c < 7; ++c) body += "," + std::to_string(r * 7 + c);
      body += "\n";
    }
    const auto ch = load_csv_channels(dir.write("ett.csv", body));
    REQUIRE(ch.size() == 7);
    for (const auto& s : ch) CHECK(s.values.size() == 50);
    CHECK(ch[6].name == "OT");
    CHECK(ch[6].values[2] == 20.0);
  }

  TEST_CASE("window counts and contents") {
    Series s{{0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, "src", "v"};
    const auto w = make_windows(s, 4, 2);
    REQUIRE(w.size() == 5);
    CHECK(w[0].x == std::vector<double>{0, 1, 2, 3});
    CHECK(w[0].y == std::vector<double>{4, 5});
    CHECK(w[4].start_index == 4);

    Series six{{0, 1, 2, 3, 4, 5}, "src", "v"};
    CHECK(make_windows(six, 4, 2).size() == 1);
    Series five{{0, 1, 2, 3, 4}, "src", "v"};
    CHECK_THROWS_AS(make_windows(five, 4, 2), SeriesTooShortError);
    CHECK_THROWS_AS(make_windows(Series{{}, "e", "e"}, 4, 2), EmptySeriesError);
    CHECK(make_windows(s, 4, 2, 3).size() == 2);
  }

  TEST_CASE("window reconstruction") {
    std::mt19937_64 rng(3);
    Series s{oracle::random_vec(rng, 200), "src", "v"};
    for (std::size_t stride : {1, 3, 7}) {
      for (const auto& w : make_windows(s, 24, 6, stride)) {
        std::vector<double> joined = w.x;
        joined.insert(joined.end(), w.y.begin(), w.y.end());
        const auto begin = s.values.begin() + w.start_index;
        CHECK(std::equal(joined.begin(), joined.end(), begin));
      }
    }
  }

  TEST_CASE("minmax scaling") {
    auto a = minmax_scale(std::vector<double>{0, 5, 10});
    CHECK(a.values[0] == 0.0);
    CHECK(std::abs(a.values[1] - 0.5) <= 1e-6);
    CHECK(std::abs(a.values[2] - 1.0) <= 1e-6);
    auto b = minmax_scale(std::vector<double>{3, 3, 3});
    CHECK(b.values == std::vector<double>{0, 0, 0});
    auto c = minmax_scale(std::vector<double>{-1, 1});
    CHECK(std::abs(c.values[0]) <= 1e-6);
    CHECK(std::abs(c.values[1] - 1.0) <= 1e-6);
    CHECK_THROWS(minmax_scale(std::vector<double>{}));
  }

  TEST_CASE("scaling is idempotent on unit data and invertible") {
    std::mt19937_64 rng(5);
    auto v = oracle::random_vec(rng, 50, 0.0, 1.0);
    v[3] = 0.0;
    v[7] = 1.0;
    const auto s = minmax_scale(v);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(s.values[i] - v[i]) <= 1e-7);

    auto w = oracle::random_vec(rng, 50, -30.0, 80.0);
    const auto sw = minmax_scale(w);
    const auto back = sw.invert(sw.values);
    for (std::size_t i = 0; i < w.size(); ++i) CHECK(std::abs(back[i] - w[i]) <= 1e-9);
  }

  TEST_CASE("toy corpus shape and determinism") {
    ToyCorpusSpec spec;
    spec.samples_per_family = 12;
    spec.T = 32;
    spec.L = 8;
    const auto a = gen_toy_corpus(spec);
    const auto b = gen_toy_corpus(spec);
    CHECK(a.kb.size() == 12 * 6);
    CHECK(a.pretrain.size() == 12 * 6);
    CHECK(a.test.size() == 12 * 3);
    REQUIRE(a.kb.size() == b.kb.size());
    for (std::size_t i = 0; i < a.kb.size(); ++i) {
      CHECK(a.kb[i].x == b.kb[i].x);
      CHECK(a.kb[i].y == b.kb[i].y);
    }
    for (const auto& w : a.test) CHECK(w.family < 3);
    spec.seed = 8;
    CHECK(gen_toy_corpus(spec).kb[0].x != a.kb[0].x);
  }

  TEST_CASE("one noiseless family with equal phases is self-similar") {
    ToyCorpusSpec spec;
    spec.n_relevant_families = 1;
    spec.n_irrelevant_families = 0;
    spec.samples_per_family = 10;
    spec.noise_sigma = 0.0;
    spec.phase_grid = 1;
    spec.T = 32;
    spec.L = 8;
    const auto c = gen_toy_corpus(spec);
    for (const auto& a : c.kb) {
      for (const auto& b : c.kb) CHECK(oracle::cosine(oracle::minmax(a.x), oracle::minmax(b.x)) >= 0.99);
    }
  }

  TEST_CASE("noiseless grid phases give an exact nearest neighbour") {
    ToyCorpusSpec spec;
    spec.noise_sigma = 0.0;
    spec.phase_grid = 4;
    spec.samples_per_family = 20;
    spec.T = 32;
    spec.L = 8;
    const auto c = gen_toy_corpus(spec);
    for (std::size_t i = 0; i < 5; ++i) {
      double best = -2.0;
      const auto q = oracle::minmax(c.test[i].x);
      for (const auto& e : c.kb) best = std::max(best, oracle::cosine(q, oracle::minmax(e.x)));
      CHECK(std::abs(best - 1.0) <= 1e-9);
    }
  }

  TEST_CASE("toy export has one row per window") {
    TempDir dir;
    ToyCorpusSpec spec;
    spec.samples_per_family = 4;
    spec.T = 8;
    spec.L = 2;
    const auto c = gen_toy_corpus(spec);
    export_toy_csv(c, dir.path / "toy.csv");
    std::ifstream in(dir.path / "toy.csv");
    std::string line;
    std::size_t rows = 0;
    while (std::getline(in, line)) ++rows;
    CHECK(rows == 1 + c.pretrain.size() + c.kb.size() + c.test.size());
  }
}
