#include "xrag/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

namespace xrag {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

void finish(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

SimilarityMetric metric_for(const CrossRagModel& model, MetricKind kind) {
  if (kind == MetricKind::EuclideanLatent) return SimilarityMetric::latent(model.shared_backbone());
  return SimilarityMetric::data(kind);
}

std::vector<const WindowPair*> pointers(std::span<const WindowPair> ws) {
  std::vector<const WindowPair*> out;
  out.reserve(ws.size());
  for (const auto& w : ws) out.push_back(&w);
  return out;
}

}  // namespace

// --- Datasets ---------------------------------------------------------------

Dataset toy_dataset(const ToyCorpus& corpus, const std::string& name) {
  Dataset d;
  d.name = name;
  const auto& any = corpus.kb.empty() ? corpus.test : corpus.kb;
  if (!any.empty()) {
    d.T = any.front().x.size();
    d.L = any.front().y.size();
  }
  d.train = corpus.kb;
  d.test = corpus.test;
  d.pretrain = corpus.pretrain;
  return d;
}

Dataset load_csv_dataset(const std::filesystem::path& path, std::size_t T, std::size_t L, const CsvSplit& split) {
  if (!(split.train_fraction > 0.0 && split.test_fraction > 0.0 && split.train_fraction + split.test_fraction <= 1.0)) {
    throw std::invalid_argument("csv split fractions must be positive and sum to at most 1");
  }
  Dataset d;
  d.name = path.stem().string();
  d.T = T;
  d.L = L;
  for (const auto& ch : load_csv_channels(path)) {
    const std::size_t n = ch.values.size();
    const auto n_train = static_cast<std::size_t>(std::floor(split.train_fraction * static_cast<double>(n)));
    const auto n_test = static_cast<std::size_t>(std::floor(split.test_fraction * static_cast<double>(n)));
    const std::size_t test_start = n - n_test;
    if (n_train == 0) throw SeriesTooShortError(ch.source_id + ": empty train segment");
    double mean = 0.0;
    for (std::size_t i = 0; i < n_train; ++i) mean += ch.values[i];
    mean /= static_cast<double>(n_train);
    double var = 0.0;
    for (std::size_t i = 0; i < n_train; ++i) var += (ch.values[i] - mean) * (ch.values[i] - mean);
    double sd = std::sqrt(var / static_cast<double>(n_train));
    if (sd == 0.0) sd = 1.0;
    Series z{std::vector<double>(n), ch.source_id, ch.name};
    for (std::size_t i = 0; i < n; ++i) z.values[i] = (ch.values[i] - mean) / sd;

    auto segment = [&](std::size_t begin, std::size_t end, std::size_t stride, std::vector<WindowPair>& dst) {
      Series part{std::vector<double>(z.values.begin() + static_cast<std::ptrdiff_t>(begin),
                                      z.values.begin() + static_cast<std::ptrdiff_t>(end)),
                  z.source_id, z.name};
      for (auto& w : make_windows(part, T, L, stride)) {
        w.start_index += static_cast<std::int64_t>(begin);
        dst.push_back(std::move(w));
      }
    };
    segment(0, n_train, split.train_stride, d.train);
    segment(test_start, n, L, d.test);
  }
  return d;
}

// --- Evaluation -------------------------------------------------------------

RetrievalTable plan_retrieval(const CrossRagModel& model, const KnowledgeBase& kb, std::span<const WindowPair> queries,
                              const EvalSpec& spec) {
  if (spec.mode == RetrievalMode::Random) return retrieve_random(kb, queries, spec.k, spec.exclusion, spec.retrieval_seed);
  Retriever r(kb, metric_for(model, spec.metric));
  return retrieve_topk(r, queries, spec.k, spec.exclusion);
}

EvalResult zero_shot_eval(const CrossRagModel& model, const KnowledgeBase& kb, std::span<const WindowPair> queries,
                          const EvalSpec& spec, const RetrievalTable* table) {
  if (queries.empty()) throw std::invalid_argument("zero_shot_eval: no test queries");
  if (spec.batch == 0) throw std::invalid_argument("zero_shot_eval: batch must be >= 1");
  const auto steps_before = optimizer_step_count();
  CrossRagModel m = model;
  m.set_lambda(spec.lambda);
  m.set_mask(spec.mask);
  m.set_k(spec.k);
  const bool retrieval = spec.mask.uses_retrieval();

  RetrievalTable planned;
  if (retrieval && !table) {
    planned = plan_retrieval(m, kb, queries, spec);
    table = &planned;
  }
  if (retrieval && table->size() != queries.size()) {
    throw std::invalid_argument("zero_shot_eval: retrieval table does not match the queries");
  }

  EvalResult res;
  res.n_queries = queries.size();
  std::vector<double> pred, truth;
  pred.reserve(queries.size() * m.config().L);
  truth.reserve(pred.capacity());
  const auto ptrs = pointers(queries);
  for (std::size_t start = 0; start < queries.size(); start += spec.batch) {
    const std::size_t end = std::min(queries.size(), start + spec.batch);
    std::span<const WindowPair* const> qs(ptrs.data() + start, end - start);
    std::span<const std::vector<std::size_t>> rows;
    if (retrieval) rows = std::span<const std::vector<std::size_t>>(table->data() + start, end - start);
    auto fc = m.predict_batch(qs, retrieval ? &kb : nullptr, rows);
    for (std::size_t i = 0; i < fc.size(); ++i) {
      pred.insert(pred.end(), fc[i].point.begin(), fc[i].point.end());
      truth.insert(truth.end(), qs[i]->y.begin(), qs[i]->y.end());
    }
    if (spec.keep_forecasts) {
      for (auto& f : fc) res.forecasts.push_back(std::move(f));
    }
  }
  res.mse = mse_loss(pred, truth);
  res.mae = mae_loss(pred, truth);

  if (spec.keep_forecasts) {
    for (const auto& q : queries) res.query_ids.push_back(query_id(q));
    if (retrieval) {
      res.retrieved = *table;
      Retriever r(kb, metric_for(m, spec.metric));
      for (std::size_t i = 0; i < queries.size(); ++i) {
        const auto s = r.scores(queries[i]);
        std::vector<double> row;
        for (auto j : res.retrieved[i]) row.push_back(s[j]);
        res.scores.push_back(std::move(row));
      }
    }
  }
  if (optimizer_step_count() != steps_before) throw std::logic_error("zero_shot_eval: optimizer stepped during evaluation");
  return res;
}

EvalResult backbone_eval(const FrozenBackbone& backbone, std::span<const WindowPair> queries) {
  if (queries.empty()) throw std::invalid_argument("backbone_eval: no test queries");
  const auto batch = make_batch(pointers(queries), nullptr, {});
  const auto pred = backbone.predict_batch(backbone.encode_batch(batch.query_x));
  const std::size_t L = pred.cols();
  std::vector<double> p, truth;
  for (std::size_t b = 0; b < batch.batch; ++b) {
    ScaledWindow stats;
    stats.min_val = batch.query_min[b];
    stats.range_val = batch.query_range[b];
    for (std::size_t l = 0; l < L; ++l) p.push_back(stats.invert(pred[b * L + l]));
    truth.insert(truth.end(), queries[b].y.begin(), queries[b].y.end());
  }
  EvalResult res;
  res.n_queries = queries.size();
  res.mse = mse_loss(p, truth);
  res.mae = mae_loss(p, truth);
  return res;
}

// --- Scenario runners -------------------------------------------------------

std::vector<SweepRow> run_k_sweep(const CrossRagModel& model, const KnowledgeBase& kb,
                                  std::span<const WindowPair> queries, const EvalSpec& spec,
                                  std::span<const std::size_t> k_values) {
  if (k_values.empty()) return {};
  // Top-k sets nest, so one search at the largest k serves every row.
  EvalSpec wide = spec;
  wide.k = *std::max_element(k_values.begin(), k_values.end());
  RetrievalTable full;
  if (spec.mask.uses_retrieval()) full = plan_retrieval(model, kb, queries, wide);
  std::vector<SweepRow> rows;
  for (auto k : k_values) {
    if (k == 0) throw std::invalid_argument("k-sweep: k must be >= 1");
    EvalSpec s = spec;
    s.k = k;
    RetrievalTable cut;
    for (const auto& r : full) cut.emplace_back(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(k));
    const auto res = zero_shot_eval(model, kb, queries, s, spec.mask.uses_retrieval() ? &cut : nullptr);
    rows.push_back({static_cast<double>(k), std::to_string(k), 0, res.mse, res.mae});
  }
  return rows;
}

std::vector<SweepRow> run_random_retrieval(const CrossRagModel& model, const KnowledgeBase& kb,
                                           std::span<const WindowPair> queries, const EvalSpec& spec,
                                           std::span<const std::size_t> k_values, std::size_t n_seeds) {
  if (n_seeds == 0) throw std::invalid_argument("random retrieval: n_seeds must be >= 1");
  std::vector<SweepRow> rows;
  for (auto k : k_values) {
    SweepRow row{static_cast<double>(k), std::to_string(k), 0, 0.0, 0.0};
    for (std::size_t s = 0; s < n_seeds; ++s) {
      EvalSpec e = spec;
      e.k = k;
      e.mode = RetrievalMode::Random;
      e.retrieval_seed = spec.retrieval_seed + s;
      const auto res = zero_shot_eval(model, kb, queries, e);
      row.mse += res.mse / static_cast<double>(n_seeds);
      row.mae += res.mae / static_cast<double>(n_seeds);
    }
    rows.push_back(row);
  }
  return rows;
}

std::vector<WindowPair> most_recent_fraction(std::span<const WindowPair> windows, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw std::invalid_argument("fraction must lie in (0, 1]");
  std::map<std::string, std::vector<std::size_t>> by_source;
  for (std::size_t i = 0; i < windows.size(); ++i) by_source[windows[i].source_id].push_back(i);
  std::vector<char> keep(windows.size(), 0);
  for (auto& [src, idx] : by_source) {
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return windows[a].start_index < windows[b].start_index; });
    const auto n = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(idx.size()) - 1e-9));
    for (std::size_t j = idx.size() - std::max<std::size_t>(n, 1); j < idx.size(); ++j) keep[idx[j]] = 1;
  }
  std::vector<WindowPair> out;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    if (keep[i]) out.push_back(windows[i]);
  }
  return out;
}

std::vector<SweepRow> run_small_kb(const CrossRagModel& model, std::span<const WindowPair> train_windows,
                                   std::span<const WindowPair> queries, const EvalSpec& spec,
                                   std::span<const double> fractions) {
  std::vector<SweepRow> rows;
  for (double q : fractions) {
    const auto kb = build_kb(most_recent_fraction(train_windows, q));
    if (spec.mask.uses_retrieval() && kb.size() < spec.k) {
      throw RetrievalError("fraction " + fmt_double(q) + " leaves " + std::to_string(kb.size()) +
                           " entries, fewer than k = " + std::to_string(spec.k));
    }
    const auto res = zero_shot_eval(model, kb, queries, spec);
    rows.push_back({q, fmt_double(q), 0, res.mse, res.mae});
  }
  return rows;
}

CrossDatasetResult run_cross_dataset(const CrossRagModel& model, const Dataset& kb_source, const Dataset& target,
                                     const EvalSpec& spec) {
  if (kb_source.T != target.T || kb_source.L != target.L) {
    throw std::invalid_argument("cross-dataset: (T, L) of " + kb_source.name + " and " + target.name + " differ");
  }
  if (target.T != model.config().T || target.L != model.config().L) {
    throw std::invalid_argument("cross-dataset: dataset (T, L) does not match the model");
  }
  const auto kb = build_kb(kb_source.train);
  const auto res = zero_shot_eval(model, kb, target.test, spec);
  const auto base = backbone_eval(model.backbone(), target.test);
  return {kb_source.name, target.name, res.mse, res.mae, base.mse, base.mae};
}

CrossRagModel train_recipe(const Workbench& wb, const FusionRecipe& recipe, std::uint64_t seed,
                           const RetrievalTable* train_table, TrainResult* result) {
  if (!wb.backbone || !wb.kb) throw std::invalid_argument("workbench needs a backbone and a knowledge base");
  CrossRagModel m(recipe.model, wb.backbone, seed);
  TrainConfig tc = recipe.train;
  tc.seed = seed;
  tc.loss_mode = recipe.model.head_mode;
  RetrievalTable table;
  if (recipe.model.mask.uses_retrieval() && !train_table) {
    Retriever r(*wb.kb, metric_for(m, recipe.metric));
    table = retrieve_topk(r, wb.train_corpus, recipe.model.k, ExclusionRule::same_source());
    train_table = &table;
  }
  static const RetrievalTable kEmpty;
  auto res = train_fusion(m, *wb.kb, wb.train_corpus, train_table ? *train_table : kEmpty, tc);
  if (result) *result = std::move(res);
  return m;
}

namespace {

EvalSpec spec_for(const FusionRecipe& recipe) {
  EvalSpec s;
  s.k = recipe.model.k;
  s.metric = recipe.metric;
  s.lambda = recipe.model.lambda;
  s.mask = recipe.model.mask;
  return s;
}

struct Tables {
  RetrievalTable train;
  RetrievalTable eval;
};

Tables topk_tables(const Workbench& wb, const FusionRecipe& recipe) {
  Tables t;
  const auto metric = recipe.metric == MetricKind::EuclideanLatent ? SimilarityMetric::latent(wb.backbone)
                                                                   : SimilarityMetric::data(recipe.metric);
  Retriever r(*wb.kb, metric);
  t.train = retrieve_topk(r, wb.train_corpus, recipe.model.k, ExclusionRule::same_source());
  t.eval = retrieve_topk(r, wb.queries, recipe.model.k, ExclusionRule::same_source());
  return t;
}

}  // namespace

std::vector<SweepRow> run_ablation_grid(const Workbench& wb, const FusionRecipe& recipe,
                                        std::span<const AblationMask> masks, std::span<const std::uint64_t> seeds) {
  for (const auto& m : masks) {
    if (m.empty()) throw std::invalid_argument("ablation grid: empty mask");
  }
  const auto tables = topk_tables(wb, recipe);
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    for (auto seed : seeds) {
      FusionRecipe r = recipe;
      r.model.mask = masks[i];
      const auto model = train_recipe(wb, r, seed, &tables.train);
      const auto res = zero_shot_eval(model, *wb.kb, wb.queries, spec_for(r), &tables.eval);
      rows.push_back({static_cast<double>(i), masks[i].label(), seed, res.mse, res.mae});
    }
  }
  return rows;
}

std::vector<SweepRow> run_lambda_sweep(const Workbench& wb, const FusionRecipe& recipe,
                                       std::span<const double> lambdas, bool include_learnable,
                                       std::span<const std::uint64_t> seeds) {
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) throw std::invalid_argument("lambda sweep: " + fmt_double(l) + " is outside [0, 1]");
  }
  const auto tables = topk_tables(wb, recipe);
  std::vector<SweepRow> rows;
  auto run = [&](FusionRecipe r, double x, const std::string& label) {
    for (auto seed : seeds) {
      const auto model = train_recipe(wb, r, seed, &tables.train);
      const auto res = zero_shot_eval(model, *wb.kb, wb.queries, spec_for(r), &tables.eval);
      rows.push_back({x, label, seed, res.mse, res.mae});
    }
  };
  for (double l : lambdas) {
    FusionRecipe r = recipe;
    r.model.lambda = l;
    r.model.gate_mode = GateMode::Fixed;
    run(r, l, fmt_double(l));
  }
  if (include_learnable) {
    FusionRecipe r = recipe;
    r.model.gate_mode = GateMode::Learnable;
    run(r, -1.0, "learnable");
  }
  return rows;
}

std::vector<RelevanceRow> run_relevance_study(const Workbench& wb, const FusionRecipe& recipe, std::size_t n_same,
                                              std::size_t n_other, const std::function<bool(int)>& other,
                                              std::span<const std::uint64_t> seeds) {
  if (n_same + n_other == 0) throw std::invalid_argument("relevance study: empty retrieved set");
  std::vector<WindowPair> train;
  for (const auto& w : wb.train_corpus) {
    if (!other(w.family)) train.push_back(w);
  }
  const auto metric = recipe.metric == MetricKind::EuclideanLatent ? SimilarityMetric::latent(wb.backbone)
                                                                   : SimilarityMetric::data(recipe.metric);
  Retriever r(*wb.kb, metric);
  const auto train_table = retrieve_composed(r, train, n_same, n_other, ExclusionRule::same_source(), other);
  const auto eval_table = retrieve_composed(r, wb.queries, n_same, n_other, ExclusionRule::same_source(), other);

  FusionRecipe full = recipe;
  full.model.k = n_same + n_other;
  full.model.mask = AblationMask::full();
  FusionRecipe self_only = full;
  self_only.model.mask = AblationMask{true, true, false};
  Workbench local = wb;
  local.train_corpus = train;

  std::vector<RelevanceRow> rows;
  for (auto seed : seeds) {
    RelevanceRow row;
    row.seed = seed;
    auto spec = spec_for(full);
    spec.keep_forecasts = true;
    const auto a = zero_shot_eval(train_recipe(local, full, seed, &train_table), *wb.kb, wb.queries, spec, &eval_table);
    const auto b = zero_shot_eval(train_recipe(local, self_only, seed, &train_table), *wb.kb, wb.queries,
                                  spec_for(self_only), &eval_table);
    row.full_mse = a.mse;
    row.self_only_mse = b.mse;
    for (const auto& f : a.forecasts) {
      const std::size_t H = f.attention.dim(0), k = f.attention.dim(1);
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t j = 0; j < k; ++j) (j < n_same ? row.relevant_mass : row.other_mass) += f.attention.at(h, j) / H;
      }
    }
    row.relevant_mass /= static_cast<double>(a.forecasts.size());
    row.other_mass /= static_cast<double>(a.forecasts.size());
    rows.push_back(row);
  }
  return rows;
}

std::vector<SweepRow> mean_by_label(std::span<const SweepRow> rows) {
  std::vector<SweepRow> out;
  std::vector<std::size_t> counts;
  for (const auto& r : rows) {
    auto it = std::find_if(out.begin(), out.end(), [&](const SweepRow& o) { return o.label == r.label; });
    if (it == out.end()) {
      out.push_back({r.x, r.label, 0, 0.0, 0.0});
      counts.push_back(0);
      it = out.end() - 1;
    }
    const auto i = static_cast<std::size_t>(it - out.begin());
    it->mse += r.mse;
    it->mae += r.mae;
    ++counts[i];
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].mse /= static_cast<double>(counts[i]);
    out[i].mae /= static_cast<double>(counts[i]);
  }
  return out;
}

// --- Efficiency -------------------------------------------------------------

EfficiencyReport report_efficiency(const CrossRagModel& model, const KnowledgeBase& kb,
                                   std::span<const WindowPair> queries, std::size_t runs) {
  if (queries.empty()) throw std::invalid_argument("report_efficiency: no queries");
  EfficiencyReport rep;
  const std::size_t k = model.config().k;
  for (auto kind : {MetricKind::CosineData, MetricKind::EuclideanData, MetricKind::CorrelationData,
                    MetricKind::EuclideanLatent}) {
    rep.retrieval.push_back(time_retrieval(kb, queries, metric_for(model, kind), k));
  }
  Retriever r(kb, SimilarityMetric::cosine());
  const auto table = retrieve_topk(r, queries, k, ExclusionRule::same_source());
  // Masks are timed in interleaved rounds and each keeps its fastest round,
  // so drift and preemption do not favour whichever mask ran first.
  const auto masks = AblationMask::all();
  std::vector<CrossRagModel> models;
  for (const auto& mask : masks) {
    models.push_back(model);
    models.back().set_mask(mask);
  }
  const std::vector<std::size_t> none;
  auto once = [&](const CrossRagModel& m, std::size_t i) {
    const std::size_t q = i % queries.size();
    const bool uses = m.config().mask.uses_retrieval();
    return m.predict(queries[q], uses ? &kb : nullptr,
                     uses ? std::span<const std::size_t>(table[q]) : std::span<const std::size_t>(none));
  };
  constexpr std::size_t kRounds = 5;
  const std::size_t per_round = std::max<std::size_t>(1, (runs + kRounds - 1) / kRounds);
  std::vector<double> best(masks.size(), std::numeric_limits<double>::infinity());
  double sink = 0.0;
  for (const auto& m : models) {
    for (std::size_t i = 0; i < std::min<std::size_t>(runs, 20); ++i) sink += once(m, i).point[0];
  }
  for (std::size_t round = 0; round < kRounds; ++round) {
    for (std::size_t j = 0; j < models.size(); ++j) {
      const auto t0 = std::chrono::steady_clock::now();
      for (std::size_t i = 0; i < per_round; ++i) sink += once(models[j], round * per_round + i).point[0];
      const auto t1 = std::chrono::steady_clock::now();
      best[j] = std::min(best[j], std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(per_round));
    }
  }
  if (!std::isfinite(sink)) throw std::runtime_error("report_efficiency: non-finite forecast");
  for (std::size_t j = 0; j < masks.size(); ++j) {
    InferenceTiming it;
    it.mask = masks[j].label();
    it.flops = models[j].flops(masks[j]);
    it.seconds_per_instance = best[j];
    rep.inference.push_back(it);
  }
  rep.params = model.count_params();
  return rep;
}

// --- Export -----------------------------------------------------------------

void write_sweep_csv(std::span<const SweepRow> rows, const std::string& x_name, const std::filesystem::path& path,
                     bool full) {
  auto out = open_out(path);
  if (full) {
    out << "label," << x_name << ",seed,mse,mae\n";
  } else {
    out << x_name << ",mse,mae\n";
  }
  for (const auto& r : rows) {
    if (full) out << r.label << ',' << fmt_double(r.x) << ',' << r.seed << ',';
    else out << (r.label.empty() ? fmt_double(r.x) : r.label) << ',';
    out << fmt_double(r.mse) << ',' << fmt_double(r.mae) << '\n';
  }
  finish(out, path);
}

void write_relevance_csv(std::span<const RelevanceRow> rows, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "seed,full_mse,self_only_mse,relevant_mass,other_mass\n";
  for (const auto& r : rows) {
    out << r.seed << ',' << fmt_double(r.full_mse) << ',' << fmt_double(r.self_only_mse) << ','
        << fmt_double(r.relevant_mass) << ',' << fmt_double(r.other_mass) << '\n';
  }
  finish(out, path);
}

void write_attention_csv(const EvalResult& result, const std::filesystem::path& path) {
  if (result.forecasts.size() != result.query_ids.size()) {
    throw std::invalid_argument("attention export needs an evaluation run with keep_forecasts");
  }
  auto out = open_out(path);
  out << "query_id,head,rank,kb_index,weight,similarity_score\n";
  for (std::size_t i = 0; i < result.forecasts.size(); ++i) {
    const auto& a = result.forecasts[i].attention;
    if (a.size() == 0) continue;
    for (std::size_t h = 0; h < a.dim(0); ++h) {
      for (std::size_t r = 0; r < a.dim(1); ++r) {
        out << result.query_ids[i] << ',' << h << ',' << r + 1 << ',' << result.retrieved[i][r] << ','
            << fmt_double(a.at(h, r)) << ',' << fmt_double(result.scores[i][r]) << '\n';
      }
    }
  }
  finish(out, path);
}

void write_efficiency_csv(const EfficiencyReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_timing_csv(report.retrieval, dir / "retrieval_timing.csv");
  {
    const auto path = dir / "inference_timing.csv";
    auto out = open_out(path);
    out << "mask,seconds_per_instance\n";
    for (const auto& it : report.inference) out << it.mask << ',' << fmt_double(it.seconds_per_instance) << '\n';
    finish(out, path);
  }
  {
    const auto path = dir / "flops.csv";
    auto out = open_out(path);
    out << "mask,backbone,projectors,cross_branch,self_branch,gate,head,total\n";
    for (const auto& it : report.inference) {
      const auto& f = it.flops;
      out << it.mask << ',' << f.backbone << ',' << f.projectors << ',' << f.cross_branch << ',' << f.self_branch << ','
          << f.gate << ',' << f.head << ',' << f.total() << '\n';
    }
    finish(out, path);
  }
  {
    const auto path = dir / "parameters.csv";
    auto out = open_out(path);
    out << "group,component,count,trainable\n";
    for (const auto& g : report.params.breakdown) {
      out << g.group << ',' << g.component << ',' << g.count << ',' << (g.trainable ? 1 : 0) << '\n';
    }
    out << "Total,Trainable," << report.params.trainable << ",1\n";
    out << "Total,Frozen," << report.params.frozen << ",0\n";
    finish(out, path);
  }
}

namespace {

const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string svg_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      default: out += c;
    }
  }
  return out;
}

}  // namespace

void write_line_svg(std::span<const SvgSeries> series, const std::string& title, const std::filesystem::path& path) {
  const double W = 640, H = 400, m = 50;
  double x0 = 1e300, x1 = -1e300, y0 = 1e300, y1 = -1e300;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw std::invalid_argument("svg series " + s.name + ": x/y length mismatch");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      x0 = std::min(x0, s.x[i]);
      x1 = std::max(x1, s.x[i]);
      y0 = std::min(y0, s.y[i]);
      y1 = std::max(y1, s.y[i]);
    }
  }
  if (x0 > x1) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  if (x1 == x0) x1 = x0 + 1;
  if (y1 == y0) y1 = y0 + 1;
  auto px = [&](double x) { return m + (x - x0) / (x1 - x0) * (W - 2 * m); };
  auto py = [&](double y) { return H - m - (y - y0) / (y1 - y0) * (H - 2 * m); };
  auto out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\">" << escape(title) << "</text>\n";
  out << "<line x1=\"" << m << "\" y1=\"" << H - m << "\" x2=\"" << W - m << "\" y2=\"" << H - m << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << m << "\" y1=\"" << m << "\" x2=\"" << m << "\" y2=\"" << H - m << "\" stroke=\"black\"/>\n";
  out << "<text x=\"" << m << "\" y=\"" << H - m + 16 << "\">" << svg_num(x0) << "</text>\n";
  out << "<text x=\"" << W - m << "\" y=\"" << H - m + 16 << "\" text-anchor=\"end\">" << svg_num(x1) << "</text>\n";
  out << "<text x=\"" << m - 4 << "\" y=\"" << H - m << "\" text-anchor=\"end\">" << svg_num(y0) << "</text>\n";
  out << "<text x=\"" << m - 4 << "\" y=\"" << m + 4 << "\" text-anchor=\"end\">" << svg_num(y1) << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = kColors[s % std::size(kColors)];
    out << "<polyline class=\"series\" data-name=\"" << escape(series[s].name) << "\" fill=\"none\" stroke=\"" << color
        << "\" points=\"";
    for (std::size_t i = 0; i < series[s].x.size(); ++i) {
      out << (i ? " " : "") << svg_num(px(series[s].x[i])) << ',' << svg_num(py(series[s].y[i]));
    }
    out << "\"/>\n";
    out << "<text x=\"" << W - m - 100 << "\" y=\"" << m + 16 * static_cast<double>(s) << "\" fill=\"" << color << "\">"
        << escape(series[s].name) << "</text>\n";
  }
  out << "</svg>\n";
  finish(out, path);
}

void write_bar_svg(std::span<const std::string> labels, std::span<const double> values, const std::string& title,
                   const std::filesystem::path& path) {
  if (labels.size() != values.size()) throw std::invalid_argument("bar chart: labels/values length mismatch");
  const double W = 640, H = 400, m = 50;
  double vmax = 0.0;
  for (double v : values) vmax = std::max(vmax, v);
  if (vmax <= 0.0) vmax = 1.0;
  const double slot = values.empty() ? 0.0 : (W - 2 * m) / static_cast<double>(values.size());
  auto out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<text x=\"" << W / 2 << "\" y=\"20\" text-anchor=\"middle\">" << escape(title) << "</text>\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    const double h = std::max(0.0, values[i]) / vmax * (H - 2 * m);
    const double x = m + slot * static_cast<double>(i);
    out << "<rect x=\"" << svg_num(x + slot * 0.1) << "\" y=\"" << svg_num(H - m - h) << "\" width=\""
        << svg_num(slot * 0.8) << "\" height=\"" << svg_num(h) << "\" fill=\"" << kColors[0] << "\"/>\n";
    out << "<text x=\"" << svg_num(x + slot / 2) << "\" y=\"" << H - m + 16 << "\" text-anchor=\"middle\">"
        << escape(labels[i]) << "</text>\n";
  }
  out << "</svg>\n";
  finish(out, path);
}

void write_forecast_svg(const WindowPair& query, std::span<const double> prediction, const std::filesystem::path& path) {
  if (prediction.size() != query.y.size()) throw std::invalid_argument("forecast overlay: prediction length mismatch");
  const std::size_t T = query.x.size(), L = query.y.size();
  SvgSeries input{"input", {}, query.x};
  SvgSeries truth{"truth", {}, query.y};
  SvgSeries pred{"prediction", {}, std::vector<double>(prediction.begin(), prediction.end())};
  for (std::size_t t = 0; t < T; ++t) input.x.push_back(static_cast<double>(t));
  for (std::size_t l = 0; l < L; ++l) {
    truth.x.push_back(static_cast<double>(T + l));
    pred.x.push_back(static_cast<double>(T + l));
  }
  const SvgSeries all[] = {input, truth, pred};
  write_line_svg(all, query_id(query), path);
}

}  // namespace xrag
