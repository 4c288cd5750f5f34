#include "xrag/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "binary_io.hpp"
#include "xrag/kernels.hpp"

namespace xrag {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (numel(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_str(shape_) + " does not match " + std::to_string(data_.size()) +
                     " values");
  }
}

Tensor Tensor::reshaped(Shape s) const {
  if (numel(s) != data_.size()) shape_fail("reshape", shape_, s);
  return Tensor(std::move(s), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

// --- ParameterSet -----------------------------------------------------------

Parameter& ParameterSet::add(std::string name, Tensor value, bool trainable) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  index_[name] = items_.size();
  items_.push_back({std::move(name), std::move(value), trainable});
  return items_.back();
}

Parameter& ParameterSet::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return items_[it->second];
}

const Parameter& ParameterSet::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return items_[it->second];
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.value.size();
  return n;
}

std::size_t ParameterSet::scalar_count(bool trainable) const {
  std::size_t n = 0;
  for (const auto& p : items_) {
    if (p.trainable == trainable) n += p.value.size();
  }
  return n;
}

void ParameterSet::set_trainable_prefix(const std::string& prefix, bool trainable) {
  for (auto& p : items_) {
    if (p.name.rfind(prefix, 0) == 0) p.trainable = trainable;
  }
}

ParameterSet ParameterSet::subset(const std::string& prefix) const {
  ParameterSet out;
  for (const auto& p : items_) {
    if (p.name.rfind(prefix, 0) == 0) out.add(p.name, p.value, p.trainable);
  }
  return out;
}

void ParameterSet::merge(const ParameterSet& other) {
  for (const auto& p : other.items_) {
    auto& dst = at(p.name);
    if (dst.value.shape() != p.value.shape()) shape_fail(("merge " + p.name).c_str(), dst.value.shape(), p.value.shape());
    dst.value = p.value;
  }
}

std::uint64_t fingerprint(const ParameterSet& params, const std::string& prefix) {
  std::uint64_t h = 1469598103934665603ULL;
  auto feed = [&](const void* data, std::size_t n) {
    const auto* b = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ULL;
    }
  };
  for (const auto& p : params.items()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    feed(p.name.data(), p.name.size());
    for (auto d : p.value.shape()) {
      const auto d64 = static_cast<std::uint64_t>(d);
      feed(&d64, sizeof d64);
    }
    feed(p.value.data().data(), p.value.size() * sizeof(double));
  }
  return h;
}

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open checkpoint for writing: " + path.string());
  out.write("XRGW", 4);
  binio::put<std::uint32_t>(out, kCheckpointVersion);
  binio::put<std::uint64_t>(out, params.size());
  for (const auto& p : params.items()) {
    binio::put_string(out, p.name);
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rank()));
    for (auto d : p.value.shape()) binio::put<std::uint64_t>(out, d);
    binio::put_doubles(out, p.value.vec());
  }
  out.flush();
  if (!out) throw CheckpointError("write failed: " + path.string());
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  const std::size_t limit = static_cast<std::size_t>(std::filesystem::file_size(path)) / sizeof(double) + 1;
  binio::Reader<CheckpointError> rd(in);
  rd.expect_magic("XRGW");
  const auto version = rd.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) + " is not supported");
  }
  const auto count = rd.get<std::uint64_t>();
  if (count > limit) throw CheckpointError("corrupt record count");
  ParameterSet out;
  for (std::uint64_t r = 0; r < count; ++r) {
    auto name = rd.get_string();
    const auto rank = rd.get<std::uint32_t>();
    if (rank > 8) throw CheckpointError("corrupt tensor rank");
    Shape shape(rank);
    for (auto& d : shape) d = rd.get<std::uint64_t>();
    const auto n = numel(shape);
    if (n > limit) throw CheckpointError("corrupt tensor shape");
    out.add(std::move(name), Tensor(shape, rd.get_doubles(n, limit)), true);
  }
  if (!rd.at_end()) throw CheckpointError("trailing bytes after checkpoint payload");
  return out;
}

// --- Dropout stream ---------------------------------------------------------

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double DropoutStream::uniform(std::uint64_t i) const {
  const std::uint64_t key = mix64(mix64(mix64(seed) ^ step) ^ (static_cast<std::uint64_t>(layer) << 32));
  return static_cast<double>(mix64(key ^ i) >> 11) * 0x1.0p-53;
}

// --- Tape -------------------------------------------------------------------

const Tensor& BackwardContext::grad_out() const { return tape_.nodes_[node_].grad; }
const Tensor& BackwardContext::output() const { return tape_.nodes_[node_].value; }
const Tensor& BackwardContext::input(std::size_t i) const { return tape_.nodes_[tape_.nodes_[node_].inputs[i]].value; }
bool BackwardContext::needs(std::size_t i) const { return tape_.nodes_[tape_.nodes_[node_].inputs[i]].requires_grad; }

Tensor& BackwardContext::grad(std::size_t i) {
  auto& n = tape_.nodes_[tape_.nodes_[node_].inputs[i]];
  if (!n.grad_ready) {
    n.grad = Tensor(n.value.shape(), 0.0);
    n.grad_ready = true;
  }
  return n.grad;
}

void Tape::check(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw std::invalid_argument("dangling tape reference");
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

Var Tape::param(const Parameter& p) {
  Node n;
  if (inference) {
    n.borrowed = &p.value;
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }
  n.value = p.value;
  n.name = p.name;
  n.requires_grad = p.trainable;
  n.trainable_leaf = p.trainable;
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  if (inference) {
    for (auto v : inputs) check(v);
    nodes_.push_back(std::move(n));
    return {nodes_.size() - 1};
  }
  for (auto v : inputs) {
    check(v);
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
  check(v);
  const auto& n = nodes_[v.id];
  return n.borrowed ? *n.borrowed : n.value;
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.id].requires_grad;
}

const char* Tape::op_name(Var v) const {
  check(v);
  return nodes_[v.id].op;
}

void Tape::note_kinks(std::span<const double> pre) {
  if (!track_kinks) return;
  for (double v : pre) {
    const std::uint64_t side = v > 0.0 ? 2 : (v < 0.0 ? 0 : 1);
    kink_hash_ = mix64(kink_hash_ ^ side);
  }
}

GradientMap Tape::backward(Var loss) {
  check(loss);
  if (inference) throw std::logic_error("backward: tape was recorded in inference mode");
  if (nodes_[loss.id].value.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(nodes_[loss.id].value.shape()));
  }
  for (auto& n : nodes_) {
    n.grad = Tensor();
    n.grad_ready = false;
  }
  backward_order_.clear();
  auto& root = nodes_[loss.id];
  root.grad = Tensor(root.value.shape(), 1.0);
  root.grad_ready = true;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.requires_grad || !n.grad_ready || !n.backward) continue;
    backward_order_.push_back(i);
    BackwardContext ctx(*this, i);
    n.backward(ctx);
  }
  GradientMap grads;
  for (auto& n : nodes_) {
    if (!n.trainable_leaf) continue;
    Tensor g = n.grad_ready ? n.grad : Tensor(n.value.shape(), 0.0);
    auto it = grads.find(n.name);
    if (it == grads.end()) {
      grads.emplace(n.name, std::move(g));
    } else {
      for (std::size_t j = 0; j < g.size(); ++j) it->second[j] += g[j];
    }
  }
  return grads;
}

GradientMap backward(Var loss, Tape& tape) { return tape.backward(loss); }

// --- Ops --------------------------------------------------------------------

namespace ops {

Var matmul(Tape& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.rank() < 1 || B.rank() != 2 || A.cols() != B.dim(0)) shape_fail("matmul", A.shape(), B.shape());
  const std::size_t m = A.rows(), n = A.cols(), p = B.dim(1);
  Shape out_shape = A.shape();
  out_shape.back() = p;
  Tensor C(out_shape);
  kernels::gemm(A.data(), B.data(), C.data(), {1, m, n, p});
  return t.record(std::move(C), {a, b}, [m, n, p](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    if (ctx.needs(0)) kernels::gemm_bt(g.data(), ctx.input(1).data(), ctx.grad(0).data(), {1, m, p, n}, true);
    if (ctx.needs(1)) kernels::gemm_at(ctx.input(0).data(), g.data(), ctx.grad(1).data(), {1, m, n, p}, true);
  }, "matmul");
}

Var add(Tape& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.shape() != B.shape()) shape_fail("add", A.shape(), B.shape());
  Tensor C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] + B[i];
  return t.record(std::move(C), {a, b}, [](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.needs(k)) continue;
      auto& gi = ctx.grad(k);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  }, "add");
}

Var sub(Tape& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.shape() != B.shape()) shape_fail("sub", A.shape(), B.shape());
  Tensor C(A.shape());
  for (std::size_t i = 0; i < C.size(); ++i) C[i] = A[i] - B[i];
  return t.record(std::move(C), {a, b}, [](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    if (ctx.needs(0)) {
      auto& gi = ctx.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
    if (ctx.needs(1)) {
      auto& gi = ctx.grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] -= g[i];
    }
  }, "sub");
}

Var bias_add(Tape& t, Var x, Var bias) {
  const auto& X = t.value(x);
  const auto& b = t.value(bias);
  if (X.rank() < 1 || b.size() != X.cols()) shape_fail("bias_add", X.shape(), b.shape());
  const std::size_t rows = X.rows(), n = X.cols();
  Tensor Y(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) Y[r * n + j] = X[r * n + j] + b[j];
  }
  return t.record(std::move(Y), {x, bias}, [rows, n](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    if (ctx.needs(0)) {
      auto& gx = ctx.grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (ctx.needs(1)) {
      auto& gb = ctx.grad(1);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[r * n + j];
      }
    }
  }, "bias_add");
}

Var relu(Tape& t, Var x) {
  const auto& X = t.value(x);
  t.note_kinks(X.data());
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = X[i] > 0.0 ? X[i] : 0.0;
  return t.record(std::move(Y), {x}, [](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    const auto& X = ctx.input(0);
    auto& gx = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (X[i] > 0.0) gx[i] += g[i];
    }
  }, "relu");
}

Var sigmoid(Tape& t, Var x) {
  const auto& X = t.value(x);
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = 1.0 / (1.0 + std::exp(-X[i]));
  return t.record(std::move(Y), {x}, [](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    const auto& Y = ctx.output();
    auto& gx = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * Y[i] * (1.0 - Y[i]);
  }, "sigmoid");
}

Var softmax_lastdim(Tape& t, Var x) {
  const auto& X = t.value(x);
  if (X.rank() < 1 || X.cols() == 0) shape_fail("softmax_lastdim", X.shape(), {});
  const std::size_t rows = X.rows(), n = X.cols();
  Tensor Y(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = X.data().data() + r * n;
    double* yr = Y.data().data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      sum += yr[j];
    }
    for (std::size_t j = 0; j < n; ++j) yr[j] /= sum;
  }
  return t.record(std::move(Y), {x}, [rows, n](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    const auto& Y = ctx.output();
    auto& gx = ctx.grad(0);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * Y[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += Y[r * n + j] * (g[r * n + j] - dot);
    }
  }, "softmax");
}

Var mean_axis(Tape& t, Var x, std::size_t axis) {
  const auto& X = t.value(x);
  if (axis >= X.rank()) shape_fail("mean_axis", X.shape(), {axis});
  const auto& s = X.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t mid = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i != axis) out_shape.push_back(s[i]);
  }
  if (out_shape.empty()) out_shape = {1};
  Tensor Y(out_shape, 0.0);
  const double inv = 1.0 / static_cast<double>(mid);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t m = 0; m < mid; ++m) {
      for (std::size_t i = 0; i < inner; ++i) Y[o * inner + i] += X[(o * mid + m) * inner + i];
    }
  }
  for (auto& v : Y.data()) v *= inv;
  return t.record(std::move(Y), {x}, [outer, mid, inner, inv](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    auto& gx = ctx.grad(0);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t m = 0; m < mid; ++m) {
        for (std::size_t i = 0; i < inner; ++i) gx[(o * mid + m) * inner + i] += g[o * inner + i] * inv;
      }
    }
  }, "mean_axis");
}

Var dropout(Tape& t, Var x, double p, bool train, const DropoutStream& stream) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: rate must lie in [0, 1)");
  if (!train || p == 0.0) return x;
  const auto& X = t.value(x);
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(X.size());
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) {
    mask[i] = stream.uniform(i) >= p ? keep_scale : 0.0;
    Y[i] = X[i] * mask[i];
  }
  return t.record(std::move(Y), {x}, [mask = std::move(mask)](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    auto& gx = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  }, "dropout");
}

Var concat_lastdim(Tape& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.rank() < 1 || A.rank() != B.rank() || A.rows() != B.rows()) shape_fail("concat_lastdim", A.shape(), B.shape());
  for (std::size_t i = 0; i + 1 < A.rank(); ++i) {
    if (A.dim(i) != B.dim(i)) shape_fail("concat_lastdim", A.shape(), B.shape());
  }
  const std::size_t rows = A.rows(), na = A.cols(), nb = B.cols();
  Shape out_shape = A.shape();
  out_shape.back() = na + nb;
  Tensor Y(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(A.data().begin() + static_cast<std::ptrdiff_t>(r * na), na,
                Y.data().begin() + static_cast<std::ptrdiff_t>(r * (na + nb)));
    std::copy_n(B.data().begin() + static_cast<std::ptrdiff_t>(r * nb), nb,
                Y.data().begin() + static_cast<std::ptrdiff_t>(r * (na + nb) + na));
  }
  return t.record(std::move(Y), {a, b}, [rows, na, nb](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    if (ctx.needs(0)) {
      auto& ga = ctx.grad(0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < na; ++j) ga[r * na + j] += g[r * (na + nb) + j];
      }
    }
    if (ctx.needs(1)) {
      auto& gb = ctx.grad(1);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < nb; ++j) gb[r * nb + j] += g[r * (na + nb) + na + j];
      }
    }
  }, "concat_lastdim");
}

Var affine(Tape& t, Var x, double alpha, double beta) {
  const auto& X = t.value(x);
  Tensor Y(X.shape());
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = alpha * X[i] + beta;
  return t.record(std::move(Y), {x}, [alpha](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    auto& gx = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += alpha * g[i];
  }, "affine");
}

Var scale(Tape& t, Var x, double alpha) { return affine(t, x, alpha, 0.0); }

Var mul_rows(Tape& t, Var x, Var g) {
  const auto& X = t.value(x);
  const auto& G = t.value(g);
  if (X.rank() < 1 || G.size() != X.rows()) shape_fail("mul_rows", X.shape(), G.shape());
  const std::size_t rows = X.rows(), n = X.cols();
  Tensor Y(X.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < n; ++j) Y[r * n + j] = X[r * n + j] * G[r];
  }
  return t.record(std::move(Y), {x, g}, [rows, n](BackwardContext& ctx) {
    const auto& gout = ctx.grad_out();
    const auto& X = ctx.input(0);
    const auto& G = ctx.input(1);
    if (ctx.needs(0)) {
      auto& gx = ctx.grad(0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += gout[r * n + j] * G[r];
      }
    }
    if (ctx.needs(1)) {
      auto& gg = ctx.grad(1);
      for (std::size_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += gout[r * n + j] * X[r * n + j];
        gg[r] += acc;
      }
    }
  }, "mul_rows");
}

Var reshape(Tape& t, Var x, Shape shape) {
  Tensor Y = t.value(x).reshaped(std::move(shape));
  return t.record(std::move(Y), {x}, [](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    auto& gx = ctx.grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  }, "reshape");
}

Var sum_all(Tape& t, Var x) {
  const auto& X = t.value(x);
  double s = 0.0;
  for (double v : X.data()) s += v;
  return t.record(Tensor::scalar(s), {x}, [](BackwardContext& ctx) {
    const double g = ctx.grad_out()[0];
    auto& gx = ctx.grad(0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  }, "sum_all");
}

Var bmm(Tape& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0) || A.dim(2) != B.dim(1)) {
    shape_fail("bmm", A.shape(), B.shape());
  }
  const std::size_t G = A.dim(0), m = A.dim(1), n = A.dim(2), p = B.dim(2);
  Tensor C({G, m, p});
  kernels::gemm(A.data(), B.data(), C.data(), {G, m, n, p});
  return t.record(std::move(C), {a, b}, [G, m, n, p](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    if (ctx.needs(0)) kernels::gemm_bt(g.data(), ctx.input(1).data(), ctx.grad(0).data(), {G, m, p, n}, true);
    if (ctx.needs(1)) kernels::gemm_at(ctx.input(0).data(), g.data(), ctx.grad(1).data(), {G, m, n, p}, true);
  }, "bmm");
}

Var bmm_bt(Tape& t, Var a, Var b) {
  const auto& A = t.value(a);
  const auto& B = t.value(b);
  if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0) || A.dim(2) != B.dim(2)) {
    shape_fail("bmm_bt", A.shape(), B.shape());
  }
  const std::size_t G = A.dim(0), m = A.dim(1), n = A.dim(2), p = B.dim(1);
  Tensor C({G, m, p});
  kernels::gemm_bt(A.data(), B.data(), C.data(), {G, m, n, p});
  return t.record(std::move(C), {a, b}, [G, m, n, p](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    if (ctx.needs(0)) kernels::gemm(g.data(), ctx.input(1).data(), ctx.grad(0).data(), {G, m, p, n}, true);
    if (ctx.needs(1)) kernels::gemm_at(g.data(), ctx.input(0).data(), ctx.grad(1).data(), {G, m, p, n}, true);
  }, "bmm_bt");
}

Var split_heads(Tape& t, Var x, std::size_t batch, std::size_t heads) {
  const auto& X = t.value(x);
  if (X.rank() != 2 || batch == 0 || heads == 0 || X.rows() % batch != 0 || X.cols() % heads != 0) {
    shape_fail("split_heads", X.shape(), {batch, heads});
  }
  const std::size_t m = X.rows() / batch, d = X.cols(), dh = d / heads;
  Tensor Y({batch * heads, m, dh});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t h = 0; h < heads; ++h) {
        const double* src = X.data().data() + (b * m + i) * d + h * dh;
        double* dst = Y.data().data() + ((b * heads + h) * m + i) * dh;
        std::copy_n(src, dh, dst);
      }
    }
  }
  return t.record(std::move(Y), {x}, [batch, heads, m, d, dh](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    auto& gx = ctx.grad(0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
          const double* src = g.data().data() + ((b * heads + h) * m + i) * dh;
          double* dst = gx.data().data() + (b * m + i) * d + h * dh;
          for (std::size_t e = 0; e < dh; ++e) dst[e] += src[e];
        }
      }
    }
  }, "split_heads");
}

Var merge_heads(Tape& t, Var x, std::size_t batch, std::size_t heads) {
  const auto& X = t.value(x);
  if (X.rank() != 3 || batch == 0 || heads == 0 || X.dim(0) != batch * heads) {
    shape_fail("merge_heads", X.shape(), {batch, heads});
  }
  const std::size_t m = X.dim(1), dh = X.dim(2), d = dh * heads;
  Tensor Y({batch * m, d});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t h = 0; h < heads; ++h) {
        const double* src = X.data().data() + ((b * heads + h) * m + i) * dh;
        double* dst = Y.data().data() + (b * m + i) * d + h * dh;
        std::copy_n(src, dh, dst);
      }
    }
  }
  return t.record(std::move(Y), {x}, [batch, heads, m, d, dh](BackwardContext& ctx) {
    const auto& g = ctx.grad_out();
    auto& gx = ctx.grad(0);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t h = 0; h < heads; ++h) {
          const double* src = g.data().data() + (b * m + i) * d + h * dh;
          double* dst = gx.data().data() + ((b * heads + h) * m + i) * dh;
          for (std::size_t e = 0; e < dh; ++e) dst[e] += src[e];
        }
      }
    }
  }, "merge_heads");
}

Var linear(Tape& t, Var x, Var w, Var b) { return bias_add(t, matmul(t, x, w), b); }

}  // namespace ops

// --- Gradient check ---------------------------------------------------------

namespace {

struct Evaluation {
  double loss = 0.0;
  std::uint64_t signature = 0;
};

Evaluation evaluate(const LossBuilder& f, const ParameterSet& params) {
  Tape tape;
  tape.track_kinks = true;
  Var loss = f(tape, params);
  return {tape.value(loss)[0], tape.kink_signature()};
}

struct AnalyticPoint {
  GradientMap grads;
  std::uint64_t signature = 0;
};

AnalyticPoint analytic(const LossBuilder& f, const ParameterSet& params) {
  Tape tape;
  tape.track_kinks = true;
  Var loss = f(tape, params);
  AnalyticPoint out;
  out.signature = tape.kink_signature();
  out.grads = tape.backward(loss);
  return out;
}

}  // namespace

GradCheckResult grad_check(const LossBuilder& f, ParameterSet params, const GradCheckOptions& opt) {
  GradCheckResult result;
  const AnalyticPoint base = analytic(f, params);
  std::mt19937_64 rng(opt.seed);
  const double nudge_steps[] = {10.0, -10.0, 50.0, -50.0, 200.0, -200.0, 1000.0, -1000.0};

  for (auto& p : params.items()) {
    if (!p.trainable) continue;
    const std::size_t n = p.value.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (n > opt.coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opt.coords_per_tensor);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t c : coords) {
      const double original = p.value[c];
      const AnalyticPoint* point = &base;
      AnalyticPoint nudged_point;
      double centre = original;
      bool clean = false;
      bool was_nudged = false;
      double lp = 0.0, lm = 0.0;
      for (std::size_t attempt = 0; attempt <= opt.max_nudges; ++attempt) {
        if (attempt > 0) {
          centre = original + nudge_steps[(attempt - 1) % std::size(nudge_steps)] * opt.h;
          p.value[c] = centre;
          nudged_point = analytic(f, params);
          point = &nudged_point;
          was_nudged = true;
        }
        p.value[c] = centre + opt.h;
        const auto plus = evaluate(f, params);
        p.value[c] = centre - opt.h;
        const auto minus = evaluate(f, params);
        p.value[c] = centre;
        lp = plus.loss;
        lm = minus.loss;
        if (plus.signature == point->signature && minus.signature == point->signature) {
          clean = true;
          break;
        }
      }
      p.value[c] = original;
      if (!clean) {
        ++result.skipped;
        continue;
      }
      if (was_nudged) ++result.nudged;
      const double ga = point->grads.at(p.name)[c];
      const double gn = (lp - lm) / (2.0 * opt.h);
      const double rel = std::abs(ga - gn) / std::max({std::abs(ga), std::abs(gn), opt.floor});
      ++result.coordinates_checked;
      if (rel > result.max_relative_error) {
        result.max_relative_error = rel;
        result.worst_parameter = p.name + "[" + std::to_string(c) + "]";
        result.worst_analytic = ga;
        result.worst_numeric = gn;
      }
    }
  }
  return result;
}

}  // namespace xrag
