#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"
#include "xrag/fusion.hpp"

using namespace xrag;

namespace {

struct Setup {
  ToyCorpus corpus = fixtures::small_toy();
  KnowledgeBase kb = build_kb(corpus.kb);
  std::vector<WindowPair> queries{corpus.test.begin(), corpus.test.begin() + 6};
};

double max_abs_diff(const oracle::Vec& a, const Tensor& t, std::size_t row) {
  double m = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) m = std::max(m, std::abs(a[j] - t.at(row, j)));
  return m;
}

}  // namespace

TEST_SUITE("fusion") {
  TEST_CASE("mask labels") {
    std::set<std::string> labels;
    for (const auto& m : AblationMask::all()) {
      labels.insert(m.label());
      CHECK(AblationMask::parse(m.label()) == m);
    }
    CHECK(labels.size() == 7);
    CHECK(AblationMask::full().label() == "Q+R+QxR");
    CHECK(AblationMask::parse("full") == AblationMask::full());
    CHECK(AblationMask::parse("QxR+Q") == AblationMask{true, false, true});
    CHECK_THROWS(AblationMask::parse("Q+X"));
    FusionConfig c;
    c.mask = AblationMask{false, false, false};
    CHECK_THROWS(c.validate());
    c = FusionConfig{};
    c.n_heads = 5;
    CHECK_THROWS(c.validate());
  }

  TEST_CASE("forward matches the loop oracle for every mask and gate") {
    Setup s;
    auto bb = fixtures::random_backbone(32, 8, 16, 3);
    const auto tab = fixtures::table(s.kb, s.queries, 4);
    const auto batch = fixtures::batch_of(s.queries, s.kb, tab);
    for (auto gate : {GateMode::Fixed, GateMode::Learnable}) {
      for (auto head : {HeadMode::Quantile, HeadMode::Mse}) {
        for (const auto& mask : AblationMask::all()) {
          auto cfg = fixtures::small_config();
          cfg.gate_mode = gate;
          cfg.head_mode = head;
          cfg.mask = mask;
          CrossRagModel m(cfg, bb, 11);
          fixtures::randomize(m, 12);
          Tape t;
          const auto out = m.forward(t, batch);
          const auto& pred = t.value(out.prediction);
          const auto ref = oracle::forward(m, batch);
          REQUIRE(pred.cols() == cfg.head_width());
          for (std::size_t b = 0; b < batch.batch; ++b) CHECK(max_abs_diff(ref.prediction[b], pred, b) <= 1e-10);
          if (mask.cross) {
            for (std::size_t b = 0; b < batch.batch; ++b) {
              for (std::size_t h = 0; h < cfg.n_heads; ++h) {
                for (std::size_t j = 0; j < 4; ++j) {
                  CHECK(std::abs(out.attention[(b * cfg.n_heads + h) * 4 + j] - ref.attn[b][h][j]) <= 1e-12);
                }
              }
            }
          }
        }
      }
    }
  }

  TEST_CASE("the attention oracle agrees with a hand computation") {
    // d = 2, one head, identity projections: weights softmax([q.k1, q.k2] / sqrt 2).
    oracle::AttentionWeights w;
    Tensor I({2, 2}, std::vector<double>{1, 0, 0, 1});
    Tensor z({2}, 0.0);
    w = {I, z, I, z, I, z, I, z};
    const oracle::Vec q{1.0, 2.0}, k1{0.5, -1.0}, k2{2.0, 1.0}, v1{3.0, 0.0}, v2{-1.0, 4.0};
    const double l1 = (0.5 - 2.0) / std::sqrt(2.0), l2 = (2.0 + 2.0) / std::sqrt(2.0);
    const double p1 = std::exp(l1) / (std::exp(l1) + std::exp(l2)), p2 = 1.0 - p1;
    const auto r = oracle::attention({q}, {k1, k2}, {v1, v2}, w, 1);
    CHECK(std::abs(r.probs[0][0][0] - p1) <= 1e-12);
    CHECK(std::abs(r.out[0][0] - (p1 * 3.0 - p2)) <= 1e-12);
    CHECK(std::abs(r.out[0][1] - p2 * 4.0) <= 1e-12);
  }

  TEST_CASE("attention rows are distributions and invariant to order") {
    Setup s;
    auto bb = fixtures::random_backbone(32, 8, 16, 4);
    auto cfg = fixtures::small_config(6);
    CrossRagModel m(cfg, bb, 5);
    fixtures::randomize(m, 6);
    auto tab = fixtures::table(s.kb, s.queries, 6);
    Tape t0;
    const auto base = m.forward(t0, fixtures::batch_of(s.queries, s.kb, tab));
    const Tensor pred0 = t0.value(base.prediction);
    for (std::size_t r = 0; r < base.attention.size() / 6; ++r) {
      double sum = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        CHECK(base.attention[r * 6 + j] >= 0.0);
        sum += base.attention[r * 6 + j];
      }
      CHECK(std::abs(sum - 1.0) <= 1e-9);
    }
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 20; ++trial) {
      for (auto& row : tab) std::shuffle(row.begin(), row.end(), rng);
      Tape t;
      const auto out = m.forward(t, fixtures::batch_of(s.queries, s.kb, tab));
      const auto& pred = t.value(out.prediction);
      for (std::size_t i = 0; i < pred.size(); ++i) CHECK(std::abs(pred[i] - pred0[i]) <= 1e-9);
    }
  }

  TEST_CASE("with one retrieved item the keys do not matter") {
    Setup s;
    auto bb = fixtures::random_backbone(32, 8, 16, 5);
    auto cfg = fixtures::small_config(1);
    CrossRagModel m(cfg, bb, 7);
    fixtures::randomize(m, 8);
    const auto tab = fixtures::table(s.kb, s.queries, 1);
    auto batch = fixtures::batch_of(s.queries, s.kb, tab);
    Tape t0;
    const auto a = m.forward(t0, batch);
    const Tensor c0 = t0.value(a.cross);
    for (double w : a.attention.data()) CHECK(w == 1.0);
    std::mt19937_64 rng(2);
    batch.retrieved_x.vec() = oracle::random_vec(rng, batch.retrieved_x.size(), -5, 5);
    Tape t1;
    const auto b = m.forward(t1, batch);
    const auto& c1 = t1.value(b.cross);
    for (std::size_t i = 0; i < c0.size(); ++i) CHECK(std::abs(c0[i] - c1[i]) <= 1e-12);
  }

  TEST_CASE("zero-residual initialisation") {
    Setup s;
    auto bb = fixtures::random_backbone(32, 8, 16, 6);
    auto cfg = fixtures::small_config();
    cfg.lambda = 1.0;
    CrossRagModel m(cfg, bb, 9);
    const auto tab = fixtures::table(s.kb, s.queries, 4);
    const auto batch = fixtures::batch_of(s.queries, s.kb, tab);
    Tape t;
    const auto out = m.forward(t, batch);
    CHECK(t.value(out.cross) == t.value(out.h));
    CHECK(t.value(out.fused) == t.value(out.h));
    // The head replicates the predictor, so every quantile equals the backbone forecast.
    const auto& pred = t.value(out.prediction);
    const auto bp = bb->predict_batch(t.value(out.h));
    for (std::size_t b = 0; b < batch.batch; ++b) {
      for (std::size_t l = 0; l < 8; ++l) {
        for (std::size_t q = 0; q < kQuantileLevels.size(); ++q) {
          CHECK(pred.at(b, l * kQuantileLevels.size() + q) == bp.at(b, l));
        }
      }
    }
  }

  TEST_CASE("identical retrieved horizons pool to themselves at init") {
    Setup s;
    auto bb = fixtures::random_backbone(32, 8, 16, 7);
    auto cfg = fixtures::small_config(5);
    cfg.mask = AblationMask{false, true, false};
    CrossRagModel m(cfg, bb, 10);
    RetrievalTable tab(s.queries.size(), std::vector<std::size_t>(5, 3));
    const auto batch = fixtures::batch_of(s.queries, s.kb, tab);
    Tape t;
    const auto out = m.forward(t, batch);
    const auto& self = t.value(out.self);
    // The projected horizon of entry 3.
    const auto& P = m.params();
    auto proj = [&](const oracle::Vec& y) {
      auto g = [&](const char* n) { return P.at(std::string("fusion/proj_y.") + n).value; };
      return oracle::affine(oracle::relu(oracle::affine(y, g("w1"), g("b1"))), g("w2"), g("b2"));
    };
    const auto r = proj(oracle::row_of(batch.retrieved_y, 0));
    for (std::size_t b = 0; b < batch.batch; ++b) CHECK(max_abs_diff(r, self, b) <= 1e-14);
  }

  TEST_CASE("gate endpoints and arithmetic") {
    Setup s;
    auto bb = fixtures::random_backbone(32, 8, 16, 8);
    const auto tab = fixtures::table(s.kb, s.queries, 4);
    const auto batch = fixtures::batch_of(s.queries, s.kb, tab);
    auto cfg = fixtures::small_config();
    CrossRagModel m(cfg, bb, 13);
    fixtures::randomize(m, 14);
    for (double lambda : {1.0, 0.0, 0.7}) {
      m.set_lambda(lambda);
      Tape t;
      const auto out = m.forward(t, batch);
      const auto& z = t.value(out.fused);
      const auto& c = t.value(out.cross);
      const auto& sv = t.value(out.self);
      for (std::size_t i = 0; i < z.size(); ++i) {
        if (lambda == 1.0) CHECK(z[i] == c[i]);
        if (lambda == 0.0) CHECK(z[i] == sv[i]);
        CHECK(std::abs(z[i] - (lambda * c[i] + (1 - lambda) * sv[i])) <= 1e-15);
      }
    }
    CHECK_THROWS(m.set_lambda(1.5));

    cfg.gate_mode = GateMode::Learnable;
    CrossRagModel g(cfg, bb, 15);
    Tape t;
    const auto out = g.forward(t, batch);
    const auto& z = t.value(out.fused);
    const auto& c = t.value(out.cross);
    const auto& sv = t.value(out.self);
    for (std::size_t i = 0; i < z.size(); ++i) CHECK(std::abs(z[i] - 0.5 * (c[i] + sv[i])) <= 1e-15);
  }

  TEST_CASE("query-only mask is the backbone through the head") {
    Setup s;
    auto bb = fixtures::random_backbone(32, 8, 16, 9);
    auto cfg = fixtures::small_config();
    cfg.mask = AblationMask::query_only();
    CrossRagModel m(cfg, bb, 16);
    std::vector<const WindowPair*> ptrs;
    for (const auto& q : s.queries) ptrs.push_back(&q);
    const auto batch = make_batch(ptrs, nullptr, {});
    Tape t;
    const auto out = m.forward(t, batch);
    CHECK(t.value(out.fused) == t.value(out.h));
    const auto fc = m.predict(s.queries[0], nullptr, {});
    const auto ref = oracle::backbone_predict(*bb, minmax_scale(s.queries[0].x).values);
    const auto stats = minmax_scale(s.queries[0].x);
    for (std::size_t l = 0; l < 8; ++l) CHECK(std::abs(fc.point[l] - stats.invert(ref[l])) <= 1e-12);
  }

  TEST_CASE("batch and model guards") {
    Setup s;
    auto bb = fixtures::random_backbone(32, 8, 16, 10);
    CrossRagModel m(fixtures::small_config(4), bb, 1);
    const auto tab = fixtures::table(s.kb, s.queries, 3);
    Tape t;
    CHECK_THROWS(m.forward(t, fixtures::batch_of(s.queries, s.kb, tab)));
    RetrievalTable ragged = fixtures::table(s.kb, s.queries, 4);
    ragged[1].pop_back();
    CHECK_THROWS(fixtures::batch_of(s.queries, s.kb, ragged));
    auto bad = fixtures::small_config();
    bad.d = 8;
    CHECK_THROWS(CrossRagModel(bad, bb, 1));
  }

  TEST_CASE("single and batched prediction agree; checkpoints round-trip") {
    Setup s;
    auto bb = fixtures::random_backbone(32, 8, 16, 11);
    CrossRagModel m(fixtures::small_config(), bb, 2);
    fixtures::randomize(m, 3);
    const auto tab = fixtures::table(s.kb, s.queries, 4);
    std::vector<const WindowPair*> ptrs;
    for (const auto& q : s.queries) ptrs.push_back(&q);
    const auto many = m.predict_batch(ptrs, &s.kb, tab);
    const auto back = CrossRagModel::from_checkpoint(m.checkpoint_params(), m.config());
    CHECK(back.backbone().hash() == bb->hash());
    for (std::size_t i = 0; i < s.queries.size(); ++i) {
      const auto one = m.predict(s.queries[i], &s.kb, tab[i]);
      const auto again = back.predict(s.queries[i], &s.kb, tab[i]);
      CHECK(one.quantiles.size() == 8 * kQuantileLevels.size());
      for (std::size_t l = 0; l < 8; ++l) {
        CHECK(std::abs(one.point[l] - many[i].point[l]) <= 1e-12);
        CHECK(one.point[l] == again.point[l]);
        CHECK(one.point[l] == one.quantiles[l * kQuantileLevels.size() + kMedianQuantile]);
      }
    }
    auto wrong = m.config();
    wrong.ffn_mult = 2;
    CHECK_THROWS(CrossRagModel::from_checkpoint(m.checkpoint_params(), wrong));
  }

  TEST_CASE("parameter counts") {
    auto bb = fixtures::random_backbone(64, 16, 64, 12, 64);
    FusionConfig cfg;
    cfg.T = 64;
    cfg.L = 16;
    CrossRagModel m(cfg, bb, 1);
    CHECK(m.params().subset("fusion/proj_x.").scalar_count() == 64 * 64 + 64 + 64 * 64 + 64);
    const auto pc = m.count_params();
    std::size_t tr = 0, fr = 0;
    std::set<std::string> rows;
    for (const auto& g : pc.breakdown) {
      (g.trainable ? tr : fr) += g.count;
      rows.insert(g.group + "/" + g.component);
      if (g.group == "Backbone") CHECK_FALSE(g.trainable);
      if (g.group == "Attention" || g.group == "Projector") CHECK(g.trainable);
    }
    CHECK(rows == std::set<std::string>{"Backbone/Encoder", "Backbone/Predictor", "Attention/Self",
                                        "Attention/Cross", "Projector/Input", "Projector/Output", "Head/Forecast"});
    CHECK(tr == pc.trainable);
    CHECK(fr == pc.frozen);
    CHECK(pc.frozen == bb->params().scalar_count());
    CHECK(pc.trainable == m.params().subset("fusion/").scalar_count());
  }

  TEST_CASE("flop accounting is additive") {
    auto bb = fixtures::random_backbone(32, 8, 16, 13);
    CrossRagModel m(fixtures::small_config(), bb, 1);
    const auto full = m.flops(AblationMask::full());
    const auto q = m.flops(AblationMask::query_only());
    CHECK(q.projectors == 0);
    CHECK(q.cross_branch == 0);
    CHECK(q.self_branch == 0);
    CHECK(q.gate == 0);
    CHECK(full.backbone == q.backbone);
    CHECK(full.head == q.head);
    CHECK(full.total() - q.total() == full.projectors + full.cross_branch + full.self_branch + full.gate);
    for (const auto& mask : AblationMask::all()) CHECK(m.flops(mask).total() <= full.total());
  }
}
