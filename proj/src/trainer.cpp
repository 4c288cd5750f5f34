#include "xrag/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace xrag {

// --- Losses -----------------------------------------------------------------

namespace {

void check_levels(std::span<const double> levels) {
  if (levels.empty()) throw std::invalid_argument("pinball loss: no quantile levels");
  for (std::size_t q = 0; q < levels.size(); ++q) {
    if (!(levels[q] > 0.0 && levels[q] < 1.0) || (q > 0 && levels[q] <= levels[q - 1])) {
      throw std::invalid_argument("pinball loss: levels must be strictly increasing in (0, 1)");
    }
  }
}

double pinball(double tau, double e) { return std::max(tau * e, (tau - 1.0) * e); }

}  // namespace

Var pinball_loss(Tape& t, Var pred, const Tensor& target, std::span<const double> levels) {
  check_levels(levels);
  const auto& p = t.value(pred);
  const std::size_t Q = levels.size();
  const std::size_t L = target.cols(), B = target.rows();
  if (p.rows() != B || p.cols() != L * Q) {
    throw ShapeError("pinball loss: prediction " + shape_str(p.shape()) + " vs target " + shape_str(target.shape()) +
                     " with " + std::to_string(Q) + " levels");
  }
  std::vector<double> residual(p.size());
  // Extended-precision accumulation keeps the loss smooth enough for finite
  // differences on small gradients.
  long double sum = 0.0L;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t l = 0; l < L; ++l) {
      for (std::size_t q = 0; q < Q; ++q) {
        const std::size_t i = b * L * Q + l * Q + q;
        residual[i] = target[b * L + l] - p[i];
        sum += pinball(levels[q], residual[i]);
      }
    }
  }
  t.note_kinks(residual);
  const double n = static_cast<double>(p.size());
  std::vector<double> taus(levels.begin(), levels.end());
  return t.record(
      Tensor::scalar(static_cast<double>(sum / n)), {pred},
      [residual = std::move(residual), taus = std::move(taus), n](BackwardContext& ctx) {
        const double g = ctx.grad_out()[0] / n;
        auto& gp = ctx.grad(0);
        const std::size_t Q = taus.size();
        for (std::size_t i = 0; i < residual.size(); ++i) {
          const double tau = taus[i % Q];
          gp[i] += residual[i] >= 0.0 ? -tau * g : (1.0 - tau) * g;
        }
      },
      "pinball");
}

Var mse_loss(Tape& t, Var pred, const Tensor& target) {
  const auto& p = t.value(pred);
  if (p.size() != target.size()) {
    throw ShapeError("mse loss: prediction " + shape_str(p.shape()) + " vs target " + shape_str(target.shape()));
  }
  long double sum = 0.0L;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double e = p[i] - target[i];
    sum += e * e;
  }
  const double n = static_cast<double>(p.size());
  return t.record(
      Tensor::scalar(static_cast<double>(sum / n)), {pred},
      [target, n](BackwardContext& ctx) {
        const double g = 2.0 * ctx.grad_out()[0] / n;
        const auto& p = ctx.input(0);
        auto& gp = ctx.grad(0);
        for (std::size_t i = 0; i < p.size(); ++i) gp[i] += g * (p[i] - target[i]);
      },
      "mse");
}

Var forecast_loss(Tape& t, Var pred, const Tensor& target, HeadMode mode) {
  if (mode == HeadMode::Quantile) return pinball_loss(t, pred, target, kQuantileLevels);
  return mse_loss(t, pred, target);
}

double pinball_loss(std::span<const double> pred, std::span<const double> target, std::span<const double> levels) {
  check_levels(levels);
  const std::size_t Q = levels.size();
  if (pred.size() != target.size() * Q) throw ShapeError("pinball loss: prediction/target length mismatch");
  if (target.empty()) throw ShapeError("pinball loss: empty input");
  double sum = 0.0;
  for (std::size_t l = 0; l < target.size(); ++l) {
    for (std::size_t q = 0; q < Q; ++q) sum += pinball(levels[q], target[l] - pred[l * Q + q]);
  }
  return sum / static_cast<double>(pred.size());
}

double mse_loss(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw ShapeError("mse loss: length mismatch");
  if (pred.empty()) throw ShapeError("mse loss: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += (pred[i] - target[i]) * (pred[i] - target[i]);
  return sum / static_cast<double>(pred.size());
}

double mae_loss(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw ShapeError("mae loss: length mismatch");
  if (pred.empty()) throw ShapeError("mae loss: empty input");
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) sum += std::abs(pred[i] - target[i]);
  return sum / static_cast<double>(pred.size());
}

// --- Optimizer --------------------------------------------------------------

namespace {
std::atomic<std::uint64_t> g_optimizer_steps{0};
}

std::uint64_t optimizer_step_count() { return g_optimizer_steps.load(); }

void adamw_step(ParameterSet& params, const GradientMap& grads, OptimizerState& state, const TrainConfig& config) {
  std::size_t n_trainable = 0;
  for (const auto& p : params.items()) {
    if (!p.trainable) continue;
    ++n_trainable;
    auto it = grads.find(p.name);
    if (it == grads.end()) throw std::invalid_argument("adamw: no gradient for trainable tensor " + p.name);
    if (it->second.shape() != p.value.shape()) {
      throw ShapeError("adamw: gradient of " + p.name + " has shape " + shape_str(it->second.shape()) +
                       ", parameter has " + shape_str(p.value.shape()));
    }
  }
  if (grads.size() != n_trainable) {
    for (const auto& [name, g] : grads) {
      if (!params.contains(name) || !params.at(name).trainable) {
        throw std::invalid_argument("adamw: gradient for non-trainable or unknown tensor " + name);
      }
    }
  }
  state.step += 1;
  g_optimizer_steps.fetch_add(1);
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(config.beta1, t);
  const double c2 = 1.0 - std::pow(config.beta2, t);
  const double decay = 1.0 - config.lr * config.weight_decay;
  for (auto& p : params.items()) {
    if (!p.trainable) continue;
    const auto& g = grads.at(p.name);
    auto& mom = state.moments[p.name];
    if (mom.m.shape() != p.value.shape()) {
      mom.m = Tensor(p.value.shape(), 0.0);
      mom.v = Tensor(p.value.shape(), 0.0);
    }
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      mom.m[i] = config.beta1 * mom.m[i] + (1.0 - config.beta1) * g[i];
      mom.v[i] = config.beta2 * mom.v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double mhat = mom.m[i] / c1;
      const double vhat = mom.v[i] / c2;
      p.value[i] = p.value[i] * decay - config.lr * mhat / (std::sqrt(vhat) + config.eps);
    }
  }
}

double clip_grad_norm(GradientMap& grads, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    for (double v : g.data()) sq += v * v;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-6);
    for (auto& [name, g] : grads) {
      for (auto& v : g.data()) v *= s;
    }
  }
  return norm;
}

// --- Retrieval tables -------------------------------------------------------

RetrievalTable retrieve_topk(const Retriever& retriever, std::span<const WindowPair> queries, std::size_t k,
                             const ExclusionRule& exclusion) {
  RetrievalTable table(queries.size());
  std::exception_ptr failure;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < queries.size(); ++i) {
    try {
      table[i] = retriever.topk(queries[i], k, exclusion).indices();
    } catch (...) {
#pragma omp critical
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  return table;
}

RetrievalTable retrieve_random(const KnowledgeBase& kb, std::span<const WindowPair> queries, std::size_t k,
                               const ExclusionRule& exclusion, std::uint64_t seed) {
  RetrievalTable table(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    std::vector<std::size_t> pool;
    pool.reserve(kb.size());
    for (std::size_t j = 0; j < kb.size(); ++j) {
      if (!exclusion.excludes(kb, j, queries[i])) pool.push_back(j);
    }
    if (k > pool.size()) {
      throw RetrievalError("k = " + std::to_string(k) + " exceeds the " + std::to_string(pool.size()) +
                           " admissible entries for query " + query_id(queries[i]));
    }
    std::mt19937_64 rng(mix64(seed ^ mix64(i)));
    for (std::size_t r = 0; r < k; ++r) {
      std::uniform_int_distribution<std::size_t> pick(r, pool.size() - 1);
      std::swap(pool[r], pool[pick(rng)]);
    }
    table[i].assign(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  }
  return table;
}

RetrievalTable retrieve_composed(const Retriever& retriever, std::span<const WindowPair> queries, std::size_t n_same,
                                 std::size_t n_other, const ExclusionRule& exclusion,
                                 const std::function<bool(int)>& other) {
  const auto& kb = retriever.kb();
  RetrievalTable table(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) {
    const int fam = queries[i].family;
    auto& row = table[i];
    if (n_same > 0) {
      row = retriever.topk_where(queries[i], n_same, exclusion, [&](std::size_t j) { return kb.entry(j).family == fam; })
                .indices();
    }
    if (n_other > 0) {
      auto rest = retriever
                      .topk_where(queries[i], n_other, exclusion,
                                  [&](std::size_t j) {
                                    const int f = kb.entry(j).family;
                                    return f != fam && other(f);
                                  })
                      .indices();
      row.insert(row.end(), rest.begin(), rest.end());
    }
  }
  return table;
}

// --- Training ---------------------------------------------------------------

namespace {

// Epoch-wise shuffled batches, fully determined by the seed.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::size_t batch, std::uint64_t seed) : order_(n), batch_(std::min(batch, n)), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
  }

  std::vector<std::size_t> next() {
    std::vector<std::size_t> out;
    out.reserve(batch_);
    while (out.size() < batch_) {
      if (pos_ == order_.size()) {
        std::shuffle(order_.begin(), order_.end(), rng_);
        pos_ = 0;
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

void validate(const TrainConfig& c) {
  if (c.batch_size == 0) throw std::invalid_argument("train config: batch_size must be >= 1");
  if (!(c.lr > 0.0)) throw std::invalid_argument("train config: lr must be > 0");
  if (c.weight_decay < 0.0) throw std::invalid_argument("train config: weight_decay must be >= 0");
  if (c.log_every == 0) throw std::invalid_argument("train config: log_every must be >= 1");
}

void check_finite(double loss, std::size_t step) {
  if (!std::isfinite(loss)) throw std::runtime_error("non-finite loss at step " + std::to_string(step));
}

bool should_log(std::size_t step, const TrainConfig& c) { return step % c.log_every == 0 || step + 1 == c.steps; }

}  // namespace

FrozenBackbone pretrain_backbone(std::span<const WindowPair> corpus, const BackboneConfig& backbone,
                                 const TrainConfig& config, TrainResult* result) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_backbone: empty corpus");
  validate(config);
  FrozenBackbone model(backbone, config.seed);
  auto& params = model.params();
  OptimizerState state;
  BatchSampler sampler(corpus.size(), config.batch_size, mix64(config.seed ^ 0x5eedULL));
  TrainResult local;
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto idx = sampler.next();
    std::vector<const WindowPair*> qs;
    for (auto i : idx) qs.push_back(&corpus[i]);
    const auto batch = make_batch(qs, nullptr, {});
    Tape t;
    auto h = model.encode(t, t.constant(batch.query_x), params);
    auto loss = mse_loss(t, model.predict(t, h, params), batch.target_y);
    const double lv = t.value(loss)[0];
    check_finite(lv, step);
    if (should_log(step, config)) local.curve.push_back({step, lv});
    auto grads = t.backward(loss);
    clip_grad_norm(grads, config.clip_norm);
    adamw_step(params, grads, state, config);
    local.steps_run = step + 1;
  }
  model.freeze();
  if (result) *result = std::move(local);
  return model;
}

TrainResult train_fusion(CrossRagModel& model, const KnowledgeBase& kb, std::span<const WindowPair> corpus,
                         const RetrievalTable& table, const TrainConfig& config) {
  if (corpus.empty()) throw std::invalid_argument("train_fusion: empty corpus");
  validate(config);
  if (!model.backbone().frozen()) throw std::invalid_argument("train_fusion: backbone must be frozen first");
  if (config.loss_mode != model.config().head_mode) {
    throw std::invalid_argument("train_fusion: loss mode does not match the model's head");
  }
  const bool retrieval = model.config().mask.uses_retrieval();
  if (retrieval && table.size() != corpus.size()) {
    throw std::invalid_argument("train_fusion: retrieval table has " + std::to_string(table.size()) +
                                " rows for " + std::to_string(corpus.size()) + " queries");
  }
  TrainResult result;
  auto& params = model.params();
  if (params.scalar_count(true) == 0) return result;
  OptimizerState state;
  BatchSampler sampler(corpus.size(), config.batch_size, mix64(config.seed ^ 0xf05eULL));
  for (std::size_t step = 0; step < config.steps; ++step) {
    const auto idx = sampler.next();
    std::vector<const WindowPair*> qs;
    RetrievalTable rows;
    for (auto i : idx) {
      qs.push_back(&corpus[i]);
      if (retrieval) rows.push_back(table[i]);
    }
    const auto batch = make_batch(qs, retrieval ? &kb : nullptr, rows);
    Tape t;
    ForwardOptions opt{true, DropoutStream{config.seed, step, 0}};
    auto out = model.forward(t, batch, params, opt);
    auto loss = forecast_loss(t, out.prediction, batch.target_y, config.loss_mode);
    const double lv = t.value(loss)[0];
    check_finite(lv, step);
    if (should_log(step, config)) result.curve.push_back({step, lv});
    auto grads = t.backward(loss);
    clip_grad_norm(grads, config.clip_norm);
    adamw_step(params, grads, state, config);
    result.steps_run = step + 1;
  }
  return result;
}

TrainResult train_fusion(CrossRagModel& model, const KnowledgeBase& kb, std::span<const WindowPair> corpus,
                         const SimilarityMetric& metric, const TrainConfig& config) {
  RetrievalTable table;
  if (model.config().mask.uses_retrieval()) {
    Retriever r(kb, metric);
    table = retrieve_topk(r, corpus, model.config().k, ExclusionRule::same_source());
  }
  return train_fusion(model, kb, corpus, table, config);
}

void write_loss_csv(const TrainResult& result, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,loss\n";
  char buf[64];
  for (const auto& p : result.curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g\n", p.step, p.loss);
    out << buf;
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace xrag
