#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"
#include "xrag/cli.hpp"

using namespace xrag;

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "xrag");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  Run r;
  r.code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::size_t lines(const std::string& s) {
  std::size_t n = 0;
  for (char c : s) n += c == '\n';
  return n;
}

const std::vector<std::string> kSmall = {"--T", "32", "--L", "8", "--samples-per-family", "10"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("config files") {
    TempDir dir;
    const auto p = dir.write("c.cfg", "# comment\n  T = 32  \nL=8 # trailing\n\nname = a b\nT = 48\n");
    const auto kv = read_config(p);
    CHECK(kv.at("T") == "48");
    CHECK(kv.at("L") == "8");
    CHECK(kv.at("name") == "a b");
    CHECK(kv.size() == 3);
    CHECK_THROWS_AS(read_config(dir.write("bad.cfg", "T 32\n")), UsageError);
    CHECK_THROWS_AS(read_config(dir.write("bad2.cfg", "= 32\n")), UsageError);
    CHECK_THROWS_AS(read_config(dir.path / "missing.cfg"), UsageError);
  }

  TEST_CASE("usage errors exit with 1 and print help") {
    TempDir dir;
    const auto out = (dir.path / "o").string();
    auto r = cli({"eval", "--out", out});
    CHECK(r.code == 1);
    CHECK(r.err.find("requires --model") != std::string::npos);
    CHECK(r.err.find("Usage") != std::string::npos);
    CHECK(cli({}).code == 1);
    CHECK(cli({"frobnicate"}).code == 1);
    CHECK(cli({"gen-toy", "--nonsense", "1"}).code == 1);
    CHECK(cli({"gen-toy", "--out", out, "--T", "abc"}).code == 1);
    CHECK(cli({"train", "--out", out, "--gate", "sometimes"}).code == 1);
    CHECK(cli({"gen-toy", "--help"}).code == 0);
  }

  TEST_CASE("runtime errors exit with 2") {
    TempDir dir;
    const auto r = cli({"build-index", "--out", (dir.path / "o").string(), "--data", (dir.path / "none.csv").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("error") != std::string::npos);
  }

  TEST_CASE("gen-toy is deterministic") {
    TempDir dir;
    const auto a = (dir.path / "t1").string(), b = (dir.path / "t2").string();
    REQUIRE(cli({"gen-toy", "--seed", "7", "--out", a}).code == 0);
    REQUIRE(cli({"gen-toy", "--seed", "7", "--out", b}).code == 0);
    CHECK(slurp(dir.path / "t1" / "toy.csv") == slurp(dir.path / "t2" / "toy.csv"));
    CHECK(slurp(dir.path / "t1" / "manifest.txt").rfind("# xrag gen-toy\n", 0) == 0);
    const auto c = (dir.path / "t3").string();
    REQUIRE(cli({"gen-toy", "--config", a + "/manifest.txt", "--out", c}).code == 0);
    CHECK(slurp(dir.path / "t1" / "toy.csv") == slurp(dir.path / "t3" / "toy.csv"));
    auto m1 = read_config(dir.path / "t1" / "manifest.txt"), m3 = read_config(dir.path / "t3" / "manifest.txt");
    m1.erase("out");
    m3.erase("out");
    CHECK(m1 == m3);
  }

  TEST_CASE("flags beat config values which beat defaults") {
    TempDir dir;
    const auto cfg = dir.write("c.cfg", "T = 16\nL = 4\nsamples-per-family = 3\n");
    const auto out = (dir.path / "o").string();
    REQUIRE(cli({"gen-toy", "--config", cfg.string(), "--L", "2", "--out", out}).code == 0);
    const auto m = read_config(dir.path / "o" / "manifest.txt");
    CHECK(m.at("T") == "16");
    CHECK(m.at("L") == "2");
    CHECK(m.at("noise") == "0.05");
    CHECK(m.at("verb") == "gen-toy");
    CHECK(cli({"gen-toy", "--config", dir.write("u.cfg", "bogus = 1\n").string(), "--out", out}).code == 1);
    CHECK(cli({"build-index", "--config", (dir.path / "o" / "manifest.txt").string(), "--out", out}).code == 1);
  }

  TEST_CASE("train, evaluate, sweep and rerun from manifests") {
    TempDir dir;
    auto p = [&](const char* s) { return (dir.path / s).string(); };
    const auto train = with({"train", "--out", p("m"), "--bb-steps", "20", "--steps", "10", "--d", "8", "--hidden",
                             "8", "--k", "3", "--batch", "8"},
                            kSmall);
    REQUIRE(cli(train).code == 0);
    CHECK(std::filesystem::exists(dir.path / "m" / "model.ckpt"));
    CHECK(std::filesystem::exists(dir.path / "m" / "model.ckpt.cfg"));
    CHECK(slurp(dir.path / "m" / "loss.csv").rfind("step,loss\n", 0) == 0);

    const auto model = p("m") + "/model.ckpt";
    REQUIRE(cli(with({"eval", "--out", p("e"), "--model", model, "--k", "3"}, kSmall)).code == 0);
    CHECK(slurp(dir.path / "e" / "metrics.csv").rfind("dataset,mse,mae,n_queries\ntoy,", 0) == 0);

    REQUIRE(cli(with({"scenario", "--kind", "k-sweep", "--k", "1..15", "--out", p("k"), "--model", model}, kSmall))
                .code == 0);
    const auto ks = slurp(dir.path / "k" / "k_sweep.csv");
    CHECK(ks.rfind("k,mse,mae\n", 0) == 0);
    CHECK(lines(ks) == 16);

    // Reruns from each manifest into a fresh directory reproduce the CSVs.
    for (const char* run : {"m", "e", "k"}) {
      const auto again = p(run) + "_again";
      REQUIRE(cli({run == std::string("m") ? "train" : run == std::string("e") ? "eval" : "scenario", "--config",
                   p(run) + "/manifest.txt", "--out", again})
                  .code == 0);
      for (const auto& f : std::filesystem::directory_iterator(dir.path / run)) {
        if (f.path().extension() != ".csv") continue;
        CHECK_MESSAGE(slurp(f.path()) == slurp(std::filesystem::path(again) / f.path().filename()),
                      f.path().string());
      }
    }
  }
}
