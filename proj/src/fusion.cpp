#include "xrag/fusion.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "xrag/kernels.hpp"

namespace xrag {

// --- AblationMask -----------------------------------------------------------

std::string AblationMask::label() const {
  std::string out;
  auto push = [&](const char* s) {
    if (!out.empty()) out += '+';
    out += s;
  };
  if (query) push("Q");
  if (self) push("R");
  if (cross) push("QxR");
  return out.empty() ? "none" : out;
}

AblationMask AblationMask::parse(const std::string& label) {
  AblationMask m{false, false, false};
  std::stringstream in(label);
  std::string part;
  while (std::getline(in, part, '+')) {
    if (part == "Q") {
      m.query = true;
    } else if (part == "R") {
      m.self = true;
    } else if (part == "QxR") {
      m.cross = true;
    } else if (part == "full") {
      m = full();
    } else {
      throw std::invalid_argument("invalid ablation mask component '" + part + "' in '" + label + "'");
    }
  }
  if (m.empty()) throw std::invalid_argument("ablation mask '" + label + "' selects no component");
  return m;
}

std::array<AblationMask, 7> AblationMask::all() {
  return {AblationMask{true, false, false}, AblationMask{false, true, false}, AblationMask{false, false, true},
          AblationMask{true, true, false},  AblationMask{true, false, true},  AblationMask{false, true, true},
          AblationMask{true, true, true}};
}

void FusionConfig::validate() const {
  if (d == 0 || n_heads == 0 || d % n_heads != 0) {
    throw std::invalid_argument("fusion config: d = " + std::to_string(d) + " must be divisible by n_heads = " +
                                std::to_string(n_heads));
  }
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("fusion config: lambda must lie in [0, 1]");
  if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw std::invalid_argument("fusion config: dropout must lie in [0, 1)");
  if (k == 0) throw std::invalid_argument("fusion config: k must be >= 1");
  if (T == 0 || L == 0 || ffn_mult == 0) throw std::invalid_argument("fusion config: T, L and ffn_mult must be >= 1");
  if (mask.empty()) throw std::invalid_argument("fusion config: empty ablation mask");
}

namespace {

Tensor xavier(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Tensor w({in, out});
  for (auto& v : w.data()) v = dist(rng);
  return w;
}

// y = x W + b (optionally ReLU) outside any tape.
Tensor dense(const Tensor& x, const Tensor& w, const Tensor& b, bool relu) {
  const std::size_t m = x.rows(), n = x.cols(), p = w.dim(1);
  if (w.dim(0) != n) throw ShapeError("dense: input width " + std::to_string(n) + " vs weight " + shape_str(w.shape()));
  Tensor y({m, p});
  kernels::gemm(x.data(), w.data(), y.data(), {1, m, n, p});
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t j = 0; j < p; ++j) {
      double v = y[r * p + j] + b[j];
      y[r * p + j] = relu && v < 0.0 ? 0.0 : v;
    }
  }
  return y;
}

}  // namespace

// --- FrozenBackbone ---------------------------------------------------------

FrozenBackbone::FrozenBackbone(const BackboneConfig& config, std::uint64_t seed) : config_(config) {
  if (config.T == 0 || config.L == 0 || config.hidden == 0 || config.d == 0) {
    throw std::invalid_argument("backbone config: all dimensions must be >= 1");
  }
  std::mt19937_64 rng(seed);
  params_.add("backbone/encoder.w1", xavier(config.T, config.hidden, rng));
  params_.add("backbone/encoder.b1", Tensor({config.hidden}, 0.0));
  params_.add("backbone/encoder.w2", xavier(config.hidden, config.d, rng));
  params_.add("backbone/encoder.b2", Tensor({config.d}, 0.0));
  params_.add("backbone/predictor.w", xavier(config.d, config.L, rng));
  params_.add("backbone/predictor.b", Tensor({config.L}, 0.0));
}

FrozenBackbone FrozenBackbone::from_params(const ParameterSet& params) {
  FrozenBackbone b;
  const auto& w1 = params.at("backbone/encoder.w1").value;
  const auto& w2 = params.at("backbone/encoder.w2").value;
  const auto& wp = params.at("backbone/predictor.w").value;
  b.config_ = {w1.dim(0), wp.dim(1), w1.dim(1), w2.dim(1)};
  for (const char* name : {"backbone/encoder.w1", "backbone/encoder.b1", "backbone/encoder.w2", "backbone/encoder.b2",
                           "backbone/predictor.w", "backbone/predictor.b"}) {
    b.params_.add(name, params.at(name).value, false);
  }
  if (b.params_.at("backbone/encoder.w2").value.dim(0) != b.config_.hidden || wp.dim(0) != b.config_.d) {
    throw ShapeError("backbone checkpoint has inconsistent shapes");
  }
  b.frozen_ = true;
  return b;
}

void FrozenBackbone::freeze() {
  frozen_ = true;
  params_.set_trainable_prefix("backbone/", false);
}

Tensor FrozenBackbone::encode_batch(const Tensor& scaled_x) const {
  if (scaled_x.cols() != config_.T) {
    throw ShapeError("backbone: expected inputs of length " + std::to_string(config_.T) + ", got " +
                     shape_str(scaled_x.shape()));
  }
  auto hidden = dense(scaled_x, params_.at("backbone/encoder.w1").value, params_.at("backbone/encoder.b1").value, true);
  return dense(hidden, params_.at("backbone/encoder.w2").value, params_.at("backbone/encoder.b2").value, false);
}

Tensor FrozenBackbone::predict_batch(const Tensor& h) const {
  return dense(h, params_.at("backbone/predictor.w").value, params_.at("backbone/predictor.b").value, false);
}

std::vector<double> FrozenBackbone::encode(std::span<const double> scaled_x) const {
  Tensor x({1, scaled_x.size()}, std::vector<double>(scaled_x.begin(), scaled_x.end()));
  return encode_batch(x).vec();
}

std::vector<double> FrozenBackbone::encode_rows(std::span<const double> rows, std::size_t n) const {
  Tensor x({n, config_.T}, std::vector<double>(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(n * config_.T)));
  return encode_batch(x).vec();
}

Var FrozenBackbone::encode(Tape& t, Var scaled_x, const ParameterSet& params) const {
  auto hidden = ops::relu(t, ops::linear(t, scaled_x, t.param(params.at("backbone/encoder.w1")),
                                         t.param(params.at("backbone/encoder.b1"))));
  return ops::linear(t, hidden, t.param(params.at("backbone/encoder.w2")), t.param(params.at("backbone/encoder.b2")));
}

Var FrozenBackbone::predict(Tape& t, Var h, const ParameterSet& params) const {
  return ops::linear(t, h, t.param(params.at("backbone/predictor.w")), t.param(params.at("backbone/predictor.b")));
}

// --- Batches ----------------------------------------------------------------

FusionBatch make_batch(std::span<const WindowPair* const> queries, const KnowledgeBase* kb,
                       std::span<const std::vector<std::size_t>> retrieved) {
  if (queries.empty()) throw std::invalid_argument("make_batch: no queries");
  FusionBatch b;
  b.batch = queries.size();
  const std::size_t T = queries.front()->x.size();
  const std::size_t L = queries.front()->y.size();
  b.query_x = Tensor({b.batch, T});
  b.target_y = Tensor({b.batch, L});
  b.query_min.resize(b.batch);
  b.query_range.resize(b.batch);
  for (std::size_t i = 0; i < b.batch; ++i) {
    const auto& q = *queries[i];
    if (q.x.size() != T || q.y.size() != L) throw ShapeError("make_batch: queries have inconsistent (T, L)");
    const auto s = minmax_scale(q.x);
    std::copy(s.values.begin(), s.values.end(), b.query_x.data().begin() + static_cast<std::ptrdiff_t>(i * T));
    const auto ty = s.apply(q.y);
    std::copy(ty.begin(), ty.end(), b.target_y.data().begin() + static_cast<std::ptrdiff_t>(i * L));
    b.query_min[i] = s.min_val;
    b.query_range[i] = s.range_val;
  }
  if (retrieved.empty()) return b;
  if (!kb) throw std::invalid_argument("make_batch: retrieved indices given without a knowledge base");
  if (retrieved.size() != b.batch) throw std::invalid_argument("make_batch: one retrieved set per query required");
  if (kb->input_len() != T || kb->horizon_len() != L) {
    throw ShapeError("make_batch: knowledge base (T, L) differs from the queries");
  }
  b.k = retrieved.front().size();
  if (b.k == 0) throw std::invalid_argument("make_batch: empty retrieved set");
  b.retrieved_x = Tensor({b.batch * b.k, T});
  b.retrieved_y = Tensor({b.batch * b.k, L});
  for (std::size_t i = 0; i < b.batch; ++i) {
    if (retrieved[i].size() != b.k) throw std::invalid_argument("make_batch: retrieved-size mismatch within batch");
    for (std::size_t j = 0; j < b.k; ++j) {
      const std::size_t idx = retrieved[i][j];
      if (idx >= kb->size()) throw std::out_of_range("make_batch: knowledge-base index out of range");
      const auto row = i * b.k + j;
      const auto sx = kb->scaled_input(idx);
      std::copy(sx.begin(), sx.end(), b.retrieved_x.data().begin() + static_cast<std::ptrdiff_t>(row * T));
      const auto stats = minmax_scale(kb->entry(idx).x);
      const auto sy = stats.apply(kb->entry(idx).y);
      std::copy(sy.begin(), sy.end(), b.retrieved_y.data().begin() + static_cast<std::ptrdiff_t>(row * L));
    }
  }
  return b;
}

// --- CrossRagModel ----------------------------------------------------------

CrossRagModel::CrossRagModel(const FusionConfig& config, std::shared_ptr<const FrozenBackbone> backbone,
                             std::uint64_t seed)
    : config_(config), backbone_(std::move(backbone)) {
  config_.validate();
  if (!backbone_) throw std::invalid_argument("CrossRagModel: missing backbone");
  const auto& bc = backbone_->config();
  if (bc.T != config_.T || bc.L != config_.L || bc.d != config_.d) {
    throw ShapeError("CrossRagModel: backbone (T, L, d) = (" + std::to_string(bc.T) + ", " + std::to_string(bc.L) +
                     ", " + std::to_string(bc.d) + ") does not match the fusion config");
  }
  init_params(seed);
}

void CrossRagModel::set_lambda(double lambda) {
  auto c = config_;
  c.lambda = lambda;
  c.validate();
  config_ = c;
}

void CrossRagModel::set_mask(const AblationMask& mask) {
  auto c = config_;
  c.mask = mask;
  c.validate();
  config_ = c;
  refresh_trainable();
}

void CrossRagModel::refresh_trainable() {
  const auto& m = config_.mask;
  const bool gate = config_.gate_mode == GateMode::Learnable && (m.query || m.cross) && m.self;
  params_.set_trainable_prefix("fusion/proj_x.", m.cross);
  params_.set_trainable_prefix("fusion/proj_y.", m.uses_retrieval());
  params_.set_trainable_prefix("fusion/cross.", m.cross);
  params_.set_trainable_prefix("fusion/ffn_cross.", m.cross);
  params_.set_trainable_prefix("fusion/self.", m.self);
  params_.set_trainable_prefix("fusion/ffn_self.", m.self);
  params_.set_trainable_prefix("fusion/gate.", gate);
  params_.set_trainable_prefix("fusion/head.", config_.head_trainable);
}

void CrossRagModel::set_k(std::size_t k) {
  auto c = config_;
  c.k = k;
  c.validate();
  config_ = c;
}

void CrossRagModel::init_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.d, T = config_.T, L = config_.L, hid = config_.ffn_mult * d;
  auto& P = params_;
  auto mlp = [&](const std::string& name, std::size_t in) {
    P.add("fusion/" + name + ".w1", xavier(in, d, rng));
    P.add("fusion/" + name + ".b1", Tensor({d}, 0.0));
    P.add("fusion/" + name + ".w2", xavier(d, d, rng));
    P.add("fusion/" + name + ".b2", Tensor({d}, 0.0));
  };
  // Output layers of residual blocks start at zero so each block is the
  // identity. Without the query residual the cross branch has nothing to pass
  // through, so it starts random instead.
  auto attention = [&](const std::string& name, bool zero_out) {
    for (const char* w : {"q", "k", "v"}) {
      P.add("fusion/" + name + ".w" + w, xavier(d, d, rng));
      P.add("fusion/" + name + ".b" + w, Tensor({d}, 0.0));
    }
    P.add("fusion/" + name + ".wo", zero_out ? Tensor({d, d}, 0.0) : xavier(d, d, rng));
    P.add("fusion/" + name + ".bo", Tensor({d}, 0.0));
  };
  auto ffn = [&](const std::string& name, bool zero_out) {
    P.add("fusion/" + name + ".w1", xavier(d, hid, rng));
    P.add("fusion/" + name + ".b1", Tensor({hid}, 0.0));
    P.add("fusion/" + name + ".w2", zero_out ? Tensor({hid, d}, 0.0) : xavier(hid, d, rng));
    P.add("fusion/" + name + ".b2", Tensor({d}, 0.0));
  };
  const bool cross_residual = config_.mask.query;
  mlp("proj_x", T);
  mlp("proj_y", L);
  attention("cross", cross_residual);
  ffn("ffn_cross", cross_residual);
  attention("self", true);
  ffn("ffn_self", true);

  // The head starts as the backbone predictor, replicated per quantile.
  const auto& wp = backbone_->params().at("backbone/predictor.w").value;
  const auto& bp = backbone_->params().at("backbone/predictor.b").value;
  const std::size_t width = config_.head_width();
  const std::size_t reps = width / L;
  Tensor hw({d, width});
  Tensor hb({width});
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t q = 0; q < reps; ++q) {
      for (std::size_t i = 0; i < d; ++i) hw[i * width + l * reps + q] = wp[i * L + l];
      hb[l * reps + q] = bp[l];
    }
  }
  P.add("fusion/head.w", std::move(hw), config_.head_trainable);
  P.add("fusion/head.b", std::move(hb), config_.head_trainable);

  if (config_.gate_mode == GateMode::Learnable) {
    P.add("fusion/gate.w1", xavier(2 * d, d, rng));
    P.add("fusion/gate.b1", Tensor({d}, 0.0));
    P.add("fusion/gate.w2", Tensor({d, 1}, 0.0));
    P.add("fusion/gate.b2", Tensor({1}, 0.0));
  }
  refresh_trainable();
}

namespace {

struct AttentionResult {
  Var out;
  Var probs;
};

enum DropoutLayer : std::uint32_t { kCrossAttn = 1, kCrossFfn = 2, kSelfAttn = 3, kSelfFfn = 4, kGate = 5 };

class Builder {
 public:
  Builder(Tape& t, const ParameterSet& P, const FusionConfig& c, const ForwardOptions& opt)
      : t_(t), P_(P), c_(c), opt_(opt) {}

  Var p(const std::string& name) { return t_.param(P_.at("fusion/" + name)); }

  Var linear(Var x, const std::string& w, const std::string& b) { return ops::linear(t_, x, p(w), p(b)); }

  Var projector(Var x, const std::string& name) {
    auto hidden = ops::relu(t_, linear(x, name + ".w1", name + ".b1"));
    return linear(hidden, name + ".w2", name + ".b2");
  }

  Var dropout(Var x, std::uint32_t layer) {
    DropoutStream s = opt_.dropout;
    s.layer = layer;
    return ops::dropout(t_, x, c_.dropout_p, opt_.train, s);
  }

  // Multi-head scaled dot-product attention of `batch` groups: queries
  // [batch*mq, d] against keys/values [batch*k, d].
  AttentionResult attend(Var queries, Var keys, Var values, const std::string& name, std::size_t batch,
                         std::uint32_t layer) {
    const std::size_t H = c_.n_heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(c_.d / H));
    auto q = ops::split_heads(t_, linear(queries, name + ".wq", name + ".bq"), batch, H);
    auto k = ops::split_heads(t_, linear(keys, name + ".wk", name + ".bk"), batch, H);
    auto v = ops::split_heads(t_, linear(values, name + ".wv", name + ".bv"), batch, H);
    auto logits = ops::scale(t_, ops::bmm_bt(t_, q, k), inv_sqrt);
    auto probs = ops::softmax_lastdim(t_, logits);
    auto mixed = ops::bmm(t_, dropout(probs, layer), v);
    auto merged = ops::merge_heads(t_, mixed, batch, H);
    return {linear(merged, name + ".wo", name + ".bo"), probs};
  }

  Var ffn(Var x, const std::string& name, std::uint32_t layer) {
    auto hidden = dropout(ops::relu(t_, linear(x, name + ".w1", name + ".b1")), layer);
    return linear(hidden, name + ".w2", name + ".b2");
  }

  Tape& tape() { return t_; }

 private:
  Tape& t_;
  const ParameterSet& P_;
  const FusionConfig& c_;
  const ForwardOptions& opt_;
};

}  // namespace

FusionOutput CrossRagModel::forward(Tape& t, const FusionBatch& batch, const ParameterSet& params,
                                    const ForwardOptions& opt) const {
  const auto& c = config_;
  const auto& m = c.mask;
  const std::size_t B = batch.batch;
  if (batch.query_x.cols() != c.T || batch.target_y.cols() != c.L) {
    throw ShapeError("forward: batch windows do not match the model's (T, L)");
  }
  Builder nb(t, params, c, opt);
  FusionOutput out;
  out.h = t.constant(backbone_->encode_batch(batch.query_x));

  Var a_side;  // query-side representation: c~ or h
  Var b_side;  // retrieval summary s~
  if (m.uses_retrieval()) {
    if (batch.k != c.k) {
      throw std::invalid_argument("forward: retrieved-size mismatch (batch has k = " + std::to_string(batch.k) +
                                  ", model expects k = " + std::to_string(c.k) + ")");
    }
    const std::size_t k = batch.k;
    Var ry = nb.projector(t.constant(batch.retrieved_y), "proj_y");
    if (m.cross) {
      Var rx = nb.projector(t.constant(batch.retrieved_x), "proj_x");
      auto att = nb.attend(out.h, rx, ry, "cross", B, kCrossAttn);
      Var cvec = m.query ? ops::add(t, att.out, out.h) : att.out;
      out.cross = ops::add(t, nb.ffn(cvec, "ffn_cross", kCrossFfn), cvec);
      a_side = out.cross;
      const auto& probs = t.value(att.probs);
      out.attention = probs.reshaped({B, c.n_heads, k});
    }
    if (m.self) {
      auto att = nb.attend(ry, ry, ry, "self", B, kSelfAttn);
      Var s = ops::add(t, att.out, ry);
      Var s2 = ops::add(t, nb.ffn(s, "ffn_self", kSelfFfn), s);
      out.self = ops::mean_axis(t, ops::reshape(t, s2, {B, k, c.d}), 1);
      b_side = out.self;
    }
  }
  if (!a_side.valid() && m.query) a_side = out.h;

  if (a_side.valid() && b_side.valid()) {
    if (c.gate_mode == GateMode::Fixed) {
      out.fused = ops::add(t, ops::scale(t, a_side, c.lambda), ops::scale(t, b_side, 1.0 - c.lambda));
    } else {
      auto joined = ops::concat_lastdim(t, a_side, b_side);
      auto hidden = nb.dropout(ops::relu(t, nb.linear(joined, "gate.w1", "gate.b1")), kGate);
      auto g = ops::sigmoid(t, nb.linear(hidden, "gate.w2", "gate.b2"));
      out.fused = ops::add(t, ops::mul_rows(t, a_side, g), ops::mul_rows(t, b_side, ops::affine(t, g, -1.0, 1.0)));
    }
  } else {
    out.fused = a_side.valid() ? a_side : b_side;
  }
  out.prediction = nb.linear(out.fused, "head.w", "head.b");
  return out;
}

std::vector<Forecast> CrossRagModel::predict_batch(std::span<const WindowPair* const> queries, const KnowledgeBase* kb,
                                                   std::span<const std::vector<std::size_t>> retrieved) const {
  const bool need = config_.mask.uses_retrieval();
  auto batch = make_batch(queries, need ? kb : nullptr,
                          need ? retrieved : std::span<const std::vector<std::size_t>>{});
  Tape t;
  t.inference = true;
  auto out = forward(t, batch);
  const auto& pred = t.value(out.prediction);
  const std::size_t L = config_.L, width = config_.head_width(), reps = width / L;
  const std::size_t point_col = config_.head_mode == HeadMode::Quantile ? kMedianQuantile : 0;
  std::vector<Forecast> result(batch.batch);
  for (std::size_t b = 0; b < batch.batch; ++b) {
    ScaledWindow stats;
    stats.min_val = batch.query_min[b];
    stats.range_val = batch.query_range[b];
    auto& f = result[b];
    f.point.resize(L);
    for (std::size_t l = 0; l < L; ++l) f.point[l] = stats.invert(pred[b * width + l * reps + point_col]);
    if (config_.head_mode == HeadMode::Quantile) {
      f.quantiles.resize(width);
      for (std::size_t j = 0; j < width; ++j) f.quantiles[j] = stats.invert(pred[b * width + j]);
    }
    if (out.attention.size() > 0) {
      const std::size_t per = config_.n_heads * batch.k;
      f.attention = Tensor({config_.n_heads, batch.k},
                           std::vector<double>(out.attention.data().begin() + static_cast<std::ptrdiff_t>(b * per),
                                               out.attention.data().begin() + static_cast<std::ptrdiff_t>((b + 1) * per)));
    }
  }
  return result;
}

Forecast CrossRagModel::predict(const WindowPair& query, const KnowledgeBase* kb,
                                std::span<const std::size_t> retrieved) const {
  const WindowPair* q[] = {&query};
  std::vector<std::vector<std::size_t>> r;
  if (config_.mask.uses_retrieval()) r.emplace_back(retrieved.begin(), retrieved.end());
  return predict_batch(q, kb, r).front();
}

ParameterSet CrossRagModel::checkpoint_params() const {
  ParameterSet out;
  for (const auto& p : backbone_->params().items()) out.add(p.name, p.value, false);
  for (const auto& p : params_.items()) out.add(p.name, p.value, p.trainable);
  return out;
}

CrossRagModel CrossRagModel::from_checkpoint(const ParameterSet& params, const FusionConfig& config) {
  auto backbone = std::make_shared<FrozenBackbone>(FrozenBackbone::from_params(params));
  CrossRagModel model(config, backbone, 0);
  for (auto& p : model.params_.items()) {
    const auto& src = params.at(p.name).value;
    if (src.shape() != p.value.shape()) {
      throw ShapeError("checkpoint tensor " + p.name + " has shape " + shape_str(src.shape()) + ", expected " +
                       shape_str(p.value.shape()));
    }
    p.value = src;
  }
  return model;
}

ParamCount CrossRagModel::count_params() const {
  ParamCount out;
  auto sum_prefix = [](const ParameterSet& ps, std::initializer_list<const char*> prefixes) {
    std::size_t n = 0;
    for (const auto& p : ps.items()) {
      for (const char* pre : prefixes) {
        if (p.name.rfind(pre, 0) == 0) n += p.value.size();
      }
    }
    return n;
  };
  auto live = [&](const char* prefix) {
    for (const auto& p : params_.items()) {
      if (p.name.rfind(prefix, 0) == 0) return p.trainable;
    }
    return false;
  };
  const auto& bp = backbone_->params();
  out.breakdown.push_back({"Backbone", "Encoder", sum_prefix(bp, {"backbone/encoder."}), false});
  out.breakdown.push_back({"Backbone", "Predictor", sum_prefix(bp, {"backbone/predictor."}), false});
  out.breakdown.push_back({"Attention", "Self", sum_prefix(params_, {"fusion/self.", "fusion/ffn_self."}), live("fusion/self.")});
  out.breakdown.push_back({"Attention", "Cross", sum_prefix(params_, {"fusion/cross.", "fusion/ffn_cross."}), live("fusion/cross.")});
  out.breakdown.push_back({"Projector", "Input", sum_prefix(params_, {"fusion/proj_x."}), live("fusion/proj_x.")});
  out.breakdown.push_back({"Projector", "Output", sum_prefix(params_, {"fusion/proj_y."}), live("fusion/proj_y.")});
  out.breakdown.push_back({"Head", "Forecast", sum_prefix(params_, {"fusion/head."}), config_.head_trainable});
  if (config_.gate_mode == GateMode::Learnable) {
    out.breakdown.push_back({"Gate", "Learnable", sum_prefix(params_, {"fusion/gate."}), live("fusion/gate.")});
  }
  for (const auto& g : out.breakdown) (g.trainable ? out.trainable : out.frozen) += g.count;
  return out;
}

ParamCount count_params(const CrossRagModel& model) { return model.count_params(); }

FlopCount CrossRagModel::flops(const AblationMask& m) const {
  using u64 = std::uint64_t;
  const u64 T = config_.T, L = config_.L, d = config_.d, H = config_.n_heads, k = config_.k;
  const u64 hid = config_.ffn_mult * d;
  const u64 bh = backbone_->config().hidden;
  auto linear = [](u64 rows, u64 in, u64 out) { return 2 * rows * in * out + rows * out; };
  auto attention = [&](u64 mq) {
    return linear(mq, d, d) + 2 * linear(k, d, d)  // projections
           + 2 * mq * k * d + mq * k * H             // logits and scaling
           + 3 * H * mq * k                          // softmax
           + 2 * mq * k * d                          // weighted values
           + linear(mq, d, d);                       // output projection
  };
  auto ffn = [&](u64 rows) { return linear(rows, d, hid) + rows * hid + linear(rows, hid, d); };

  FlopCount f;
  f.backbone = linear(1, T, bh) + bh + linear(1, bh, d);
  f.head = linear(1, d, config_.head_width());
  if (m.uses_retrieval()) {
    f.projectors += linear(k, L, d) + k * d + linear(k, d, d);
    if (m.cross) f.projectors += linear(k, T, d) + k * d + linear(k, d, d);
  }
  if (m.cross) f.cross_branch = attention(1) + (m.query ? d : 0) + ffn(1) + d;
  if (m.self) f.self_branch = attention(k) + k * d + ffn(k) + k * d + k * d;
  const bool has_a = m.cross || m.query;
  if (has_a && m.self) {
    f.gate = config_.gate_mode == GateMode::Fixed ? 3 * d : linear(1, 2 * d, d) + d + linear(1, d, 1) + 4 + 4 * d;
  }
  return f;
}

}  // namespace xrag
