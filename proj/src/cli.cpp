#include "xrag/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <memory>
#include <set>
#include <sstream>
#include <vector>

#include "CLI11.hpp"
#include "xrag/eval.hpp"
#include "xrag/fusion.hpp"
#include "xrag/retrieval.hpp"
#include "xrag/series.hpp"
#include "xrag/tensor.hpp"
#include "xrag/trainer.hpp"

namespace xrag {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::map<std::string, std::string> read_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file " + path.string());
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError(path.string() + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw UsageError(path.string() + ":" + std::to_string(lineno) + ": empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

namespace {

struct Opt {
  std::string name;
  std::string def;
  std::string help;
};

using OptList = std::vector<Opt>;

OptList data_opts() {
  return {
      {"data", "toy", "'toy' or a CSV file (numeric columns, optional leading timestamp)"},
      {"T", "64", "input window length"},
      {"L", "16", "forecast horizon"},
      {"n-relevant", "3", "toy: relevant sine families"},
      {"n-irrelevant", "3", "toy: irrelevant families"},
      {"samples-per-family", "100", "toy: windows per family and split"},
      {"noise", "0.05", "toy: Gaussian noise std"},
      {"toy-seed", "7", "toy: generator seed"},
      {"phase-grid", "0", "toy: 0 for uniform phases, n for an n-point grid"},
      {"train-fraction", "0.7", "csv: leading fraction used as knowledge base"},
      {"test-fraction", "0.2", "csv: trailing fraction used for queries"},
      {"train-stride", "1", "csv: stride of knowledge-base windows"},
  };
}

OptList backbone_opts() {
  return {
      {"backbone", "", "backbone checkpoint; empty pretrains one with the bb-* options"},
      {"hidden", "64", "backbone hidden width"},
      {"d", "64", "latent width shared by backbone and fusion"},
      {"bb-steps", "2000", "backbone pretraining steps"},
      {"bb-batch", "32", "backbone batch size"},
      {"bb-lr", "0.001", "backbone learning rate"},
  };
}

OptList fusion_opts() {
  return {
      {"heads", "4", "attention heads"},
      {"k", "15", "retrieved samples per query"},
      {"ffn-mult", "4", "feed-forward width as a multiple of d"},
      {"lambda", "0.7", "gate weight of the query side"},
      {"dropout", "0.2", "dropout probability"},
      {"gate", "fixed", "fixed or learnable"},
      {"head", "quantile", "quantile or mse"},
      {"mask", "Q+R+QxR", "fusion components, '+'-joined subset of Q, R, QxR"},
      {"head-trainable", "1", "train the forecast head"},
  };
}

OptList train_opts() {
  return {
      {"steps", "2000", "optimizer steps"},
      {"batch", "32", "batch size"},
      {"lr", "0.0003", "learning rate"},
      {"weight-decay", "0.01", "decoupled weight decay"},
      {"clip", "1", "global gradient-norm clip, 0 disables"},
      {"log-every", "10", "loss curve interval"},
      {"seed", "0", "training seed"},
      {"metric", "cosine", "cosine, euclidean, correlation or latent"},
  };
}

OptList eval_opts() {
  return {
      {"k", "15", "retrieved samples per query"},
      {"metric", "cosine", "cosine, euclidean, correlation or latent"},
      {"lambda", "0.7", "gate weight of the query side"},
      {"mask", "Q+R+QxR", "fusion components"},
      {"retrieval", "topk", "topk or random"},
      {"retrieval-seed", "0", "seed of random retrieval"},
  };
}

OptList join(std::initializer_list<OptList> parts) {
  OptList out;
  std::set<std::string> seen;
  for (const auto& p : parts) {
    for (const auto& o : p) {
      if (seen.insert(o.name).second) out.push_back(o);
    }
  }
  return out;
}

struct Verb {
  std::string name;
  std::string help;
  OptList opts;
};

std::vector<Verb> verbs() {
  const Opt out{"out", "out", "output directory"};
  const Opt model{"model", "", "fusion model checkpoint (required)"};
  return {
      {"gen-toy", "generate the toy corpus as CSV",
       {out,
        {"n-relevant", "3", "relevant sine families"},
        {"n-irrelevant", "3", "irrelevant families"},
        {"samples-per-family", "100", "windows per family and split"},
        {"noise", "0.05", "Gaussian noise std"},
        {"seed", "7", "generator seed"},
        {"phase-grid", "0", "0 for uniform phases, n for an n-point grid"},
        {"T", "64", "input window length"},
        {"L", "16", "forecast horizon"}}},
      {"build-index", "build and save the knowledge-base index", join({{out}, data_opts()})},
      {"pretrain-backbone", "pretrain and freeze the backbone",
       join({{out}, data_opts(), backbone_opts(), {{"seed", "0", "training seed"}}})},
      {"train", "train the fusion modules", join({{out}, data_opts(), backbone_opts(), fusion_opts(), train_opts()})},
      {"eval", "zero-shot evaluation",
       join({{out, model}, data_opts(), eval_opts(), {{"forecast-svg", "0", "forecast overlays to draw"}}})},
      {"scenario", "retrieval scenario studies",
       join({{out,
              {"kind", "k-sweep", "k-sweep, random, small-kb, cross-dataset, cross-family or relevance"},
              {"model", "", "fusion model checkpoint (all kinds but relevance)"},
              {"k", "1..15", "retrieved-set sizes, e.g. 1..15 or 2,6,10; the largest is used by other kinds"},
              {"n-seeds", "5", "random retrieval seeds"},
              {"fractions", "0.25,0.5,0.75,1", "small-kb fractions"},
              {"kb-data", "toy", "cross-dataset: knowledge-base source ('toy' or CSV)"},
              {"kb-toy-seed", "11", "cross-dataset: toy seed of the knowledge-base source"},
              {"kb-families", "3,4,5", "cross-family: families of the knowledge base"},
              {"query-families", "0,1,2", "cross-family: families of the queries"},
              {"n-same", "5", "relevance: same-family retrieved samples"},
              {"n-other", "5", "relevance: other-family retrieved samples"},
              {"seeds", "1,2,3,4,5", "relevance: training seeds"},
              {"svg", "0", "also draw the study as SVG"}},
             data_opts(), eval_opts(), backbone_opts(), fusion_opts(), train_opts()})},
      {"ablate", "train and evaluate the fusion-component grid",
       join({{out, {"masks", "all", "'all' or ';'-separated masks"}, {"seeds", "1,2,3", "training seeds"}},
             data_opts(), backbone_opts(), fusion_opts(), train_opts()})},
      {"sweep-lambda", "train and evaluate across gate weights",
       join({{out,
              {"lambdas", "0.4,0.5,0.6,0.7,0.8", "gate weights"},
              {"learnable", "1", "add a learnable-gate model"},
              {"seeds", "1,2,3", "training seeds"}},
             data_opts(), backbone_opts(), fusion_opts(), train_opts()})},
      {"export-attention", "export cross-attention weights per query",
       join({{out, model, {"queries", "20", "queries to export, 0 for all"}, {"svg", "0", "bar charts to draw"}},
             data_opts(), eval_opts()})},
      {"report-efficiency", "retrieval timing, inference cost and parameter table",
       join({{out, model, {"runs", "1000", "timed forecasts per mask"}, {"kb-size", "0", "cap on KB entries, 0 for all"}},
             data_opts()})},
  };
}

// Resolved option values for one invocation.
class Settings {
 public:
  Settings(std::string verb, std::map<std::string, std::string> values, std::vector<std::string> order)
      : verb_(std::move(verb)), values_(std::move(values)), order_(std::move(order)) {}

  const std::string& verb() const { return verb_; }
  std::string str(const std::string& key) const { return values_.at(key); }

  double real(const std::string& key) const {
    const auto& s = values_.at(key);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty()) throw UsageError("--" + key + ": '" + s + "' is not a number");
    return v;
  }

  std::uint64_t u64(const std::string& key) const { return parse_u64(key, values_.at(key)); }
  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(u64(key)); }

  bool flag(const std::string& key) const {
    const auto& s = values_.at(key);
    if (s == "1" || s == "true" || s == "yes") return true;
    if (s == "0" || s == "false" || s == "no") return false;
    throw UsageError("--" + key + ": '" + s + "' is not a boolean");
  }

  // "1..15", "1,5,15" or a mix such as "1..3,10".
  std::vector<std::uint64_t> u64_list(const std::string& key) const {
    std::vector<std::uint64_t> out;
    std::stringstream in(values_.at(key));
    std::string part;
    while (std::getline(in, part, ',')) {
      part = trim(part);
      if (auto dots = part.find(".."); dots != std::string::npos) {
        const auto a = parse_u64(key, part.substr(0, dots));
        const auto b = parse_u64(key, part.substr(dots + 2));
        if (b < a) throw UsageError("--" + key + ": empty range " + part);
        for (auto v = a; v <= b; ++v) out.push_back(v);
      } else {
        out.push_back(parse_u64(key, part));
      }
    }
    if (out.empty()) throw UsageError("--" + key + ": empty list");
    return out;
  }

  std::vector<double> real_list(const std::string& key) const {
    std::vector<double> out;
    std::stringstream in(values_.at(key));
    std::string part;
    while (std::getline(in, part, ',')) {
      part = trim(part);
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(part, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (part.empty() || used != part.size()) throw UsageError("--" + key + ": '" + part + "' is not a number");
      out.push_back(v);
    }
    if (out.empty()) throw UsageError("--" + key + ": empty list");
    return out;
  }

  std::filesystem::path out_dir() const { return values_.at("out"); }

  void write_manifest(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << "# xrag " << verb_ << "\n";
    out << "verb = " << verb_ << "\n";
    for (const auto& k : order_) out << k << " = " << values_.at(k) << "\n";
    if (!out) throw std::runtime_error("write failed: " + path.string());
  }

 private:
  static std::uint64_t parse_u64(const std::string& key, const std::string& raw) {
    const auto s = trim(raw);
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
      throw UsageError("--" + key + ": '" + s + "' is not a non-negative integer");
    }
    try {
      return std::stoull(s);
    } catch (const std::exception&) {
      throw UsageError("--" + key + ": '" + s + "' is out of range");
    }
  }

  std::string verb_;
  std::map<std::string, std::string> values_;
  std::vector<std::string> order_;
};

// --- Shared helpers ---------------------------------------------------------

Dataset load_data(const Settings& s) {
  const auto T = s.size("T"), L = s.size("L");
  if (s.str("data") == "toy") {
    ToyCorpusSpec spec;
    spec.n_relevant_families = s.size("n-relevant");
    spec.n_irrelevant_families = s.size("n-irrelevant");
    spec.samples_per_family = s.size("samples-per-family");
    spec.noise_sigma = s.real("noise");
    spec.seed = s.u64("toy-seed");
    spec.phase_grid = s.size("phase-grid");
    spec.T = T;
    spec.L = L;
    return toy_dataset(gen_toy_corpus(spec));
  }
  CsvSplit split;
  split.train_fraction = s.real("train-fraction");
  split.test_fraction = s.real("test-fraction");
  split.train_stride = s.size("train-stride");
  if (split.train_stride == 0) throw UsageError("--train-stride must be >= 1");
  return load_csv_dataset(s.str("data"), T, L, split);
}

// Windows the backbone and fusion modules are trained on.
const std::vector<WindowPair>& training_corpus(const Dataset& d) { return d.pretrain.empty() ? d.train : d.pretrain; }

std::shared_ptr<const FrozenBackbone> obtain_backbone(const Settings& s, const Dataset& d) {
  if (!s.str("backbone").empty()) {
    auto bb = std::make_shared<FrozenBackbone>(FrozenBackbone::from_params(load_checkpoint(s.str("backbone"))));
    if (bb->config().T != d.T || bb->config().L != d.L) {
      throw std::invalid_argument("backbone (T, L) does not match the data");
    }
    return bb;
  }
  BackboneConfig bc{d.T, d.L, s.size("hidden"), s.size("d")};
  TrainConfig tc;
  tc.steps = s.size("bb-steps");
  tc.batch_size = s.size("bb-batch");
  tc.lr = s.real("bb-lr");
  tc.seed = s.u64("seed");
  tc.loss_mode = HeadMode::Mse;
  TrainResult curve;
  auto bb = std::make_shared<FrozenBackbone>(pretrain_backbone(training_corpus(d), bc, tc, &curve));
  save_checkpoint(bb->params(), s.out_dir() / "backbone.ckpt");
  write_loss_csv(curve, s.out_dir() / "backbone_loss.csv");
  return bb;
}

FusionConfig fusion_config(const Settings& s, const Dataset& d, const FrozenBackbone& bb) {
  FusionConfig c;
  c.T = d.T;
  c.L = d.L;
  c.d = bb.config().d;
  c.n_heads = s.size("heads");
  // Relevance runs retrieve a fixed same/other mix.
  c.k = s.verb() == "scenario" ? s.size("n-same") + s.size("n-other") : s.size("k");
  c.ffn_mult = s.size("ffn-mult");
  c.lambda = s.real("lambda");
  c.dropout_p = s.real("dropout");
  const auto gate = s.str("gate");
  if (gate != "fixed" && gate != "learnable") throw UsageError("--gate must be fixed or learnable");
  c.gate_mode = gate == "fixed" ? GateMode::Fixed : GateMode::Learnable;
  const auto head = s.str("head");
  if (head != "quantile" && head != "mse") throw UsageError("--head must be quantile or mse");
  c.head_mode = head == "quantile" ? HeadMode::Quantile : HeadMode::Mse;
  c.mask = AblationMask::parse(s.str("mask"));
  c.head_trainable = s.flag("head-trainable");
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return c;
}

TrainConfig train_config(const Settings& s) {
  TrainConfig t;
  t.steps = s.size("steps");
  t.batch_size = s.size("batch");
  t.lr = s.real("lr");
  t.weight_decay = s.real("weight-decay");
  t.clip_norm = s.real("clip");
  t.log_every = s.size("log-every");
  t.seed = s.u64("seed");
  return t;
}

MetricKind metric_kind(const Settings& s) {
  try {
    return metric_from_string(s.str("metric"));
  } catch (const std::exception& e) {
    throw UsageError(e.what());
  }
}

void write_model(const CrossRagModel& m, const std::filesystem::path& path) {
  save_checkpoint(m.checkpoint_params(), path);
  std::ofstream cfg(path.string() + ".cfg");
  const auto& c = m.config();
  cfg << "T = " << c.T << "\nL = " << c.L << "\nd = " << c.d << "\nheads = " << c.n_heads << "\nk = " << c.k
      << "\nffn-mult = " << c.ffn_mult << "\nlambda = " << fmt_double(c.lambda)
      << "\ndropout = " << fmt_double(c.dropout_p) << "\ngate = " << (c.gate_mode == GateMode::Fixed ? "fixed" : "learnable")
      << "\nhead = " << (c.head_mode == HeadMode::Quantile ? "quantile" : "mse") << "\nmask = " << c.mask.label()
      << "\nhead-trainable = " << (c.head_trainable ? 1 : 0) << "\n";
  if (!cfg) throw std::runtime_error("cannot write " + path.string() + ".cfg");
}

CrossRagModel read_model(const Settings& s, const Dataset& d) {
  const auto path = s.str("model");
  if (path.empty()) throw UsageError(s.verb() + " requires --model");
  const auto kv = read_config(path + ".cfg");
  auto get = [&](const char* k) {
    auto it = kv.find(k);
    if (it == kv.end()) throw std::runtime_error(path + ".cfg: missing key " + k);
    return it->second;
  };
  FusionConfig c;
  c.T = std::stoull(get("T"));
  c.L = std::stoull(get("L"));
  c.d = std::stoull(get("d"));
  c.n_heads = std::stoull(get("heads"));
  c.k = std::stoull(get("k"));
  c.ffn_mult = std::stoull(get("ffn-mult"));
  c.lambda = std::stod(get("lambda"));
  c.dropout_p = std::stod(get("dropout"));
  c.gate_mode = get("gate") == "fixed" ? GateMode::Fixed : GateMode::Learnable;
  c.head_mode = get("head") == "quantile" ? HeadMode::Quantile : HeadMode::Mse;
  c.mask = AblationMask::parse(get("mask"));
  c.head_trainable = get("head-trainable") == "1";
  if (c.T != d.T || c.L != d.L) throw std::invalid_argument("model (T, L) does not match the data");
  return CrossRagModel::from_checkpoint(load_checkpoint(path), c);
}

EvalSpec eval_spec(const Settings& s) {
  EvalSpec e;
  if (s.verb() == "scenario") {
    const auto ks = s.u64_list("k");
    e.k = static_cast<std::size_t>(*std::max_element(ks.begin(), ks.end()));
  } else {
    e.k = s.size("k");
  }
  e.metric = metric_kind(s);
  e.lambda = s.real("lambda");
  e.mask = AblationMask::parse(s.str("mask"));
  const auto mode = s.str("retrieval");
  if (mode != "topk" && mode != "random") throw UsageError("--retrieval must be topk or random");
  e.mode = mode == "topk" ? RetrievalMode::TopK : RetrievalMode::Random;
  e.retrieval_seed = s.u64("retrieval-seed");
  return e;
}

FusionRecipe recipe(const Settings& s, const Dataset& d, const FrozenBackbone& bb) {
  FusionRecipe r;
  r.model = fusion_config(s, d, bb);
  r.train = train_config(s);
  r.train.loss_mode = r.model.head_mode;
  r.metric = metric_kind(s);
  return r;
}

std::vector<std::uint64_t> seeds(const Settings& s, const std::string& key) { return s.u64_list(key); }

// --- Verbs ------------------------------------------------------------------

void cmd_gen_toy(const Settings& s, std::ostream& out) {
  ToyCorpusSpec spec;
  spec.n_relevant_families = s.size("n-relevant");
  spec.n_irrelevant_families = s.size("n-irrelevant");
  spec.samples_per_family = s.size("samples-per-family");
  spec.noise_sigma = s.real("noise");
  spec.seed = s.u64("seed");
  spec.phase_grid = s.size("phase-grid");
  spec.T = s.size("T");
  spec.L = s.size("L");
  const auto corpus = gen_toy_corpus(spec);
  export_toy_csv(corpus, s.out_dir() / "toy.csv");
  out << "wrote " << corpus.pretrain.size() + corpus.kb.size() + corpus.test.size() << " windows to "
      << (s.out_dir() / "toy.csv").string() << "\n";
}

void cmd_build_index(const Settings& s, std::ostream& out) {
  const auto d = load_data(s);
  const auto kb = build_kb(d.train);
  save_index(kb, s.out_dir() / "index.xrag");
  out << "indexed " << kb.size() << " windows (T = " << kb.input_len() << ", L = " << kb.horizon_len() << ")\n";
}

void cmd_pretrain(const Settings& s, std::ostream& out) {
  const auto d = load_data(s);
  if (!s.str("backbone").empty()) throw UsageError("pretrain-backbone does not take --backbone");
  const auto bb = obtain_backbone(s, d);
  const auto res = backbone_eval(*bb, d.test);
  std::ofstream m(s.out_dir() / "backbone_metrics.csv");
  m << "dataset,mse,mae,n_queries\n" << d.name << ',' << fmt_double(res.mse) << ',' << fmt_double(res.mae) << ','
    << res.n_queries << '\n';
  out << "backbone test mse " << fmt_double(res.mse) << "\n";
}

void cmd_train(const Settings& s, std::ostream& out) {
  const auto d = load_data(s);
  const auto bb = obtain_backbone(s, d);
  const auto r = recipe(s, d, *bb);
  const auto kb = build_kb(d.train);
  TrainResult curve;
  Workbench wb{bb, &kb, training_corpus(d), d.test};
  const auto model = train_recipe(wb, r, r.train.seed, nullptr, &curve);
  write_model(model, s.out_dir() / "model.ckpt");
  write_loss_csv(curve, s.out_dir() / "loss.csv");
  out << "trained " << curve.steps_run << " steps";
  if (!curve.curve.empty()) out << ", final loss " << fmt_double(curve.curve.back().loss);
  out << "\n";
}

void cmd_eval(const Settings& s, std::ostream& out) {
  const auto d = load_data(s);
  const auto model = read_model(s, d);
  const auto kb = build_kb(d.train);
  auto spec = eval_spec(s);
  const auto n_svg = s.size("forecast-svg");
  spec.keep_forecasts = n_svg > 0;
  const auto res = zero_shot_eval(model, kb, d.test, spec);
  const auto path = s.out_dir() / "metrics.csv";
  std::ofstream m(path);
  m << "dataset,mse,mae,n_queries\n" << d.name << ',' << fmt_double(res.mse) << ',' << fmt_double(res.mae) << ','
    << res.n_queries << '\n';
  if (!m) throw std::runtime_error("write failed: " + path.string());
  for (std::size_t i = 0; i < std::min(n_svg, d.test.size()); ++i) {
    write_forecast_svg(d.test[i], res.forecasts[i].point, s.out_dir() / ("forecast_" + std::to_string(i) + ".svg"));
  }
  out << d.name << " mse " << fmt_double(res.mse) << " mae " << fmt_double(res.mae) << "\n";
}

std::vector<int> int_list(const Settings& s, const std::string& key) {
  std::vector<int> out;
  for (auto v : s.u64_list(key)) out.push_back(static_cast<int>(v));
  return out;
}

std::vector<WindowPair> of_families(std::span<const WindowPair> ws, const std::vector<int>& fams) {
  std::vector<WindowPair> out;
  for (const auto& w : ws) {
    if (std::find(fams.begin(), fams.end(), w.family) != fams.end()) out.push_back(w);
  }
  return out;
}

void sweep_svg(std::span<const SweepRow> rows, const std::string& title, const std::filesystem::path& path) {
  SvgSeries mse{"mse", {}, {}}, mae{"mae", {}, {}};
  for (const auto& r : rows) {
    mse.x.push_back(r.x);
    mse.y.push_back(r.mse);
    mae.x.push_back(r.x);
    mae.y.push_back(r.mae);
  }
  const SvgSeries both[] = {mse, mae};
  write_line_svg(both, title, path);
}

void cmd_scenario(const Settings& s, std::ostream& out) {
  const auto kind = s.str("kind");
  const auto d = load_data(s);
  const bool svg = s.flag("svg");
  const auto dir = s.out_dir();
  if (kind == "relevance") {
    if (s.str("data") != "toy") throw UsageError("scenario relevance needs the toy corpus");
    const auto bb = obtain_backbone(s, d);
    const auto kb = build_kb(d.train);
    Workbench wb{bb, &kb, training_corpus(d), d.test};
    const auto n_rel = s.size("n-relevant");
    auto other = [n_rel](int f) { return f >= static_cast<int>(n_rel); };
    const auto sd = seeds(s, "seeds");
    const auto rows = run_relevance_study(wb, recipe(s, d, *bb), s.size("n-same"), s.size("n-other"), other, sd);
    write_relevance_csv(rows, dir / "relevance.csv");
    for (const auto& r : rows) {
      out << "seed " << r.seed << ": full " << fmt_double(r.full_mse) << " self-only " << fmt_double(r.self_only_mse)
          << " mass " << fmt_double(r.relevant_mass) << "/" << fmt_double(r.other_mass) << "\n";
    }
    return;
  }
  const auto model = read_model(s, d);
  const auto spec = eval_spec(s);
  if (kind == "k-sweep" || kind == "random") {
    std::vector<std::size_t> ks;
    for (auto v : s.u64_list("k")) ks.push_back(static_cast<std::size_t>(v));
    const auto kb = build_kb(d.train);
    const auto rows = kind == "k-sweep" ? run_k_sweep(model, kb, d.test, spec, ks)
                                        : run_random_retrieval(model, kb, d.test, spec, ks, s.size("n-seeds"));
    const auto name = kind == "k-sweep" ? "k_sweep" : "random_retrieval";
    write_sweep_csv(rows, "k", dir / (std::string(name) + ".csv"));
    if (svg) sweep_svg(rows, name, dir / (std::string(name) + ".svg"));
    out << "wrote " << rows.size() << " rows\n";
  } else if (kind == "small-kb") {
    const auto fr = s.real_list("fractions");
    const auto rows = run_small_kb(model, d.train, d.test, spec, fr);
    write_sweep_csv(rows, "fraction", dir / "small_kb.csv");
    if (svg) sweep_svg(rows, "small_kb", dir / "small_kb.svg");
    out << "wrote " << rows.size() << " rows\n";
  } else if (kind == "cross-dataset" || kind == "cross-family") {
    Dataset kb_src, target;
    if (kind == "cross-dataset") {
      auto kb_settings_data = s.str("kb-data");
      if (kb_settings_data == "toy") {
        ToyCorpusSpec spec_t;
        spec_t.n_relevant_families = s.size("n-relevant");
        spec_t.n_irrelevant_families = s.size("n-irrelevant");
        spec_t.samples_per_family = s.size("samples-per-family");
        spec_t.noise_sigma = s.real("noise");
        spec_t.seed = s.u64("kb-toy-seed");
        spec_t.phase_grid = s.size("phase-grid");
        spec_t.T = s.size("T");
        spec_t.L = s.size("L");
        kb_src = toy_dataset(gen_toy_corpus(spec_t), "toy-" + s.str("kb-toy-seed"));
      } else {
        CsvSplit split;
        split.train_fraction = s.real("train-fraction");
        split.test_fraction = s.real("test-fraction");
        split.train_stride = s.size("train-stride");
        kb_src = load_csv_dataset(kb_settings_data, s.size("T"), s.size("L"), split);
      }
      target = d;
    } else {
      if (s.str("data") != "toy") throw UsageError("scenario cross-family needs the toy corpus");
      kb_src = d;
      kb_src.name = "families " + s.str("kb-families");
      kb_src.train = of_families(d.train, int_list(s, "kb-families"));
      target = d;
      target.name = "families " + s.str("query-families");
      target.test = of_families(d.test, int_list(s, "query-families"));
      if (kb_src.train.empty() || target.test.empty()) throw UsageError("cross-family: a family selection is empty");
    }
    const auto r = run_cross_dataset(model, kb_src, target, spec);
    const auto path = dir / (kind == "cross-dataset" ? "cross_dataset.csv" : "cross_family.csv");
    std::ofstream f(path);
    f << "kb,target,method,mse,mae\n";
    f << r.kb_name << ',' << r.target_name << ",cross-rag," << fmt_double(r.mse) << ',' << fmt_double(r.mae) << '\n';
    f << r.kb_name << ',' << r.target_name << ",backbone-only," << fmt_double(r.baseline_mse) << ','
      << fmt_double(r.baseline_mae) << '\n';
    if (!f) throw std::runtime_error("write failed: " + path.string());
    out << "cross-rag mse " << fmt_double(r.mse) << " vs backbone " << fmt_double(r.baseline_mse) << "\n";
  } else {
    throw UsageError("unknown scenario kind '" + kind + "'");
  }
}

void cmd_ablate(const Settings& s, std::ostream& out) {
  const auto d = load_data(s);
  const auto bb = obtain_backbone(s, d);
  const auto kb = build_kb(d.train);
  Workbench wb{bb, &kb, training_corpus(d), d.test};
  std::vector<AblationMask> masks;
  if (s.str("masks") == "all") {
    const auto all = AblationMask::all();
    masks.assign(all.begin(), all.end());
  } else {
    std::stringstream in(s.str("masks"));
    std::string part;
    while (std::getline(in, part, ';')) masks.push_back(AblationMask::parse(trim(part)));
  }
  const auto sd = seeds(s, "seeds");
  const auto rows = run_ablation_grid(wb, recipe(s, d, *bb), masks, sd);
  write_sweep_csv(rows, "index", s.out_dir() / "ablation.csv", true);
  const auto mean = mean_by_label(rows);
  std::vector<SweepRow> labelled = mean;
  write_sweep_csv(labelled, "mask", s.out_dir() / "ablation_mean.csv");
  for (const auto& r : mean) out << r.label << " mse " << fmt_double(r.mse) << "\n";
}

void cmd_sweep_lambda(const Settings& s, std::ostream& out) {
  const auto d = load_data(s);
  const auto bb = obtain_backbone(s, d);
  const auto kb = build_kb(d.train);
  Workbench wb{bb, &kb, training_corpus(d), d.test};
  const auto lambdas = s.real_list("lambdas");
  for (double l : lambdas) {
    if (!(l >= 0.0 && l <= 1.0)) throw UsageError("--lambdas: " + fmt_double(l) + " is outside [0, 1]");
  }
  const auto sd = seeds(s, "seeds");
  const auto rows = run_lambda_sweep(wb, recipe(s, d, *bb), lambdas, s.flag("learnable"), sd);
  write_sweep_csv(rows, "lambda", s.out_dir() / "lambda.csv", true);
  const auto mean = mean_by_label(rows);
  write_sweep_csv(mean, "lambda", s.out_dir() / "lambda_mean.csv");
  for (const auto& r : mean) out << r.label << " mse " << fmt_double(r.mse) << "\n";
}

void cmd_export_attention(const Settings& s, std::ostream& out) {
  const auto d = load_data(s);
  const auto model = read_model(s, d);
  const auto kb = build_kb(d.train);
  auto spec = eval_spec(s);
  if (!spec.mask.cross) throw UsageError("export-attention needs a mask with QxR");
  spec.keep_forecasts = true;
  const auto n = s.size("queries");
  std::span<const WindowPair> qs(d.test);
  if (n > 0 && n < qs.size()) qs = qs.first(n);
  const auto res = zero_shot_eval(model, kb, qs, spec);
  write_attention_csv(res, s.out_dir() / "attention.csv");
  const auto n_svg = std::min(s.size("svg"), res.forecasts.size());
  for (std::size_t i = 0; i < n_svg; ++i) {
    const auto& a = res.forecasts[i].attention;
    std::vector<std::string> labels;
    std::vector<double> mass(a.dim(1), 0.0);
    for (std::size_t r = 0; r < a.dim(1); ++r) {
      labels.push_back(std::to_string(res.retrieved[i][r]));
      for (std::size_t h = 0; h < a.dim(0); ++h) mass[r] += a.at(h, r) / static_cast<double>(a.dim(0));
    }
    write_bar_svg(labels, mass, res.query_ids[i], s.out_dir() / ("attention_" + std::to_string(i) + ".svg"));
  }
  out << "exported attention for " << res.forecasts.size() << " queries\n";
}

void cmd_report_efficiency(const Settings& s, std::ostream& out) {
  const auto d = load_data(s);
  const auto model = read_model(s, d);
  auto train = d.train;
  const auto cap = s.size("kb-size");
  if (cap > 0 && cap < train.size()) train.resize(cap);
  const auto kb = build_kb(std::move(train));
  const auto rep = report_efficiency(model, kb, d.test, s.size("runs"));
  write_efficiency_csv(rep, s.out_dir());
  for (const auto& t : rep.retrieval) {
    out << "retrieval " << t.metric << " total " << fmt_double(t.total()) << " s\n";
  }
  for (const auto& it : rep.inference) {
    out << "inference " << it.mask << " " << fmt_double(it.seconds_per_instance) << " s, " << it.flops.total()
        << " flops\n";
  }
  out << "trainable " << rep.params.trainable << " / frozen " << rep.params.frozen << "\n";
}

using Handler = std::function<void(const Settings&, std::ostream&)>;

const std::map<std::string, Handler>& handlers() {
  static const std::map<std::string, Handler> h = {
      {"gen-toy", cmd_gen_toy},
      {"build-index", cmd_build_index},
      {"pretrain-backbone", cmd_pretrain},
      {"train", cmd_train},
      {"eval", cmd_eval},
      {"scenario", cmd_scenario},
      {"ablate", cmd_ablate},
      {"sweep-lambda", cmd_sweep_lambda},
      {"export-attention", cmd_export_attention},
      {"report-efficiency", cmd_report_efficiency},
  };
  return h;
}

}  // namespace

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Retrieval-augmented forecasting with cross-attention fusion", "xrag"};
  app.require_subcommand(1);
  const auto all = verbs();
  struct Bound {
    CLI::App* cmd;
    std::map<std::string, std::string> given;
    std::map<std::string, CLI::Option*> opts;
    std::string config;
    CLI::Option* config_opt;
  };
  std::vector<Bound> bound(all.size());
  for (std::size_t v = 0; v < all.size(); ++v) {
    auto* cmd = app.add_subcommand(all[v].name, all[v].help);
    bound[v].cmd = cmd;
    for (const auto& o : all[v].opts) {
      const auto help = o.help + " (default: " + (o.def.empty() ? "none" : o.def) + ")";
      bound[v].opts[o.name] = cmd->add_option("--" + o.name, bound[v].given[o.name], help);
    }
    bound[v].config_opt = cmd->add_option("--config", bound[v].config, "key = value config file; flags win");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return 1;
  }

  std::size_t v = 0;
  while (v < all.size() && !bound[v].cmd->parsed()) ++v;
  const auto& verb = all[v];
  auto& b = bound[v];
  try {
    std::map<std::string, std::string> values;
    std::vector<std::string> order;
    for (const auto& o : verb.opts) {
      values[o.name] = o.def;
      order.push_back(o.name);
    }
    if (b.config_opt->count() > 0) {
      for (const auto& [key, val] : read_config(b.config)) {
        if (key == "verb") {
          if (val != verb.name) throw UsageError("config was written for '" + val + "', not '" + verb.name + "'");
          continue;
        }
        if (!values.count(key)) throw UsageError("unknown config key '" + key + "' for " + verb.name);
        values[key] = val;
      }
    }
    for (const auto& [name, opt] : b.opts) {
      if (opt->count() > 0) values[name] = b.given[name];
    }
    Settings s(verb.name, values, order);
    std::filesystem::create_directories(s.out_dir());
    handlers().at(verb.name)(s, out);
    s.write_manifest(s.out_dir() / "manifest.txt");
  } catch (const UsageError& e) {
    err << "xrag " << verb.name << ": " << e.what() << "\n\n" << b.cmd->help();
    return 1;
  } catch (const std::exception& e) {
    err << "xrag " << verb.name << ": error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace xrag
