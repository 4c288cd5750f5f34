#pragma once

// Dense float64 tensors and a tape-based reverse-mode differentiator.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace xrag {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return data_.size(); }
  // Product of all but the last dimension.
  std::size_t rows() const { return shape_.empty() ? 0 : data_.size() / shape_.back(); }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  Tensor reshaped(Shape s) const;
  void fill(double v);

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  std::vector<double> data_;
};

struct Parameter {
  std::string name;
  Tensor value;
  bool trainable = true;
};

// Insertion-ordered named tensors.
class ParameterSet {
 public:
  Parameter& add(std::string name, Tensor value, bool trainable = true);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  std::size_t size() const { return items_.size(); }
  std::vector<Parameter>& items() { return items_; }
  const std::vector<Parameter>& items() const { return items_; }

  std::size_t scalar_count() const;
  std::size_t scalar_count(bool trainable) const;
  void set_trainable_prefix(const std::string& prefix, bool trainable);
  ParameterSet subset(const std::string& prefix) const;
  // Copies every tensor of `other` (matched by name) into this set.
  void merge(const ParameterSet& other);

 private:
  std::vector<Parameter> items_;
  std::map<std::string, std::size_t> index_;
};

// FNV-1a over names, shapes and raw bytes of every tensor whose name starts
// with `prefix`.
std::uint64_t fingerprint(const ParameterSet& params, const std::string& prefix = "");

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const ParameterSet& params, const std::filesystem::path& path);
// Loaded tensors are all marked trainable; owners reassign the flags.
ParameterSet load_checkpoint(const std::filesystem::path& path);

// Counter-based stream for dropout masks: the mask bit of element i depends
// only on (seed, step, layer, i).
struct DropoutStream {
  std::uint64_t seed = 0;
  std::uint64_t step = 0;
  std::uint32_t layer = 0;

  double uniform(std::uint64_t i) const;
};

std::uint64_t mix64(std::uint64_t x);

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
  bool valid() const { return id != static_cast<std::size_t>(-1); }
};

class Tape;

// Passed to an op's backward closure.
class BackwardContext {
 public:
  const Tensor& grad_out() const;
  const Tensor& output() const;
  const Tensor& input(std::size_t i) const;
  bool needs(std::size_t i) const;
  // Gradient buffer of input i, zero-initialised on first access.
  Tensor& grad(std::size_t i);

 private:
  friend class Tape;
  BackwardContext(Tape& tape, std::size_t node) : tape_(tape), node_(node) {}
  Tape& tape_;
  std::size_t node_;
};

using BackwardFn = std::function<void(BackwardContext&)>;

using GradientMap = std::map<std::string, Tensor>;

class Tape {
 public:
  Tape() { nodes_.reserve(128); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var param(const Parameter& p);

  // Records an op whose value was computed by the caller.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward, const char* op);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  const char* op_name(Var v) const;

  // Piecewise-linear ops report on which side of their kink each element fell,
  // so the gradient checker can detect a crossing.
  void note_kinks(std::span<const double> pre_activation);
  std::uint64_t kink_signature() const { return kink_hash_; }
  bool track_kinks = false;
  // Value-only recording: parameters are borrowed rather than copied (they
  // must outlive the tape) and no backward graph is kept.
  bool inference = false;

  // Node ids visited by the last backward pass, in visiting order.
  const std::vector<std::size_t>& backward_order() const { return backward_order_; }

  GradientMap backward(Var loss);

 private:
  friend class BackwardContext;
  struct Node {
    Tensor value;
    const Tensor* borrowed = nullptr;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    std::string name;
    const char* op = "leaf";
    bool requires_grad = false;
    bool trainable_leaf = false;
    bool grad_ready = false;
  };
  void check(Var v) const;

  std::vector<Node> nodes_;
  std::uint64_t kink_hash_ = 1469598103934665603ULL;
  std::vector<std::size_t> backward_order_;
};

// Free-function form of Tape::backward.
GradientMap backward(Var loss, Tape& tape);

namespace ops {

Var matmul(Tape& t, Var a, Var b);
Var add(Tape& t, Var a, Var b);
Var sub(Tape& t, Var a, Var b);
Var bias_add(Tape& t, Var x, Var bias);
Var relu(Tape& t, Var x);
Var sigmoid(Tape& t, Var x);
Var softmax_lastdim(Tape& t, Var x);
Var mean_axis(Tape& t, Var x, std::size_t axis);
Var dropout(Tape& t, Var x, double p, bool train, const DropoutStream& stream);
Var concat_lastdim(Tape& t, Var a, Var b);
Var scale(Tape& t, Var x, double alpha);
// alpha * x + beta, element-wise.
Var affine(Tape& t, Var x, double alpha, double beta);
// Row r of x (rows x n) multiplied by g[r]; g has rows elements.
Var mul_rows(Tape& t, Var x, Var g);
Var reshape(Tape& t, Var x, Shape shape);
Var sum_all(Tape& t, Var x);
// [G, m, n] x [G, n, p] -> [G, m, p]
Var bmm(Tape& t, Var a, Var b);
// [G, m, n] x [G, p, n]^T -> [G, m, p]
Var bmm_bt(Tape& t, Var a, Var b);
// [B*m, H*dh] -> [B*H, m, dh]
Var split_heads(Tape& t, Var x, std::size_t batch, std::size_t heads);
// [B*H, m, dh] -> [B*m, H*dh]
Var merge_heads(Tape& t, Var x, std::size_t batch, std::size_t heads);

// x W + b for x of shape [rows, in].
Var linear(Tape& t, Var x, Var w, Var b);

}  // namespace ops

struct GradCheckOptions {
  double h = 1e-5;
  std::size_t coords_per_tensor = 100;
  std::uint64_t seed = 1;
  std::size_t max_nudges = 6;
  // Denominator floor; keeps round-off on exactly-zero gradients from
  // dominating the relative error.
  double floor = 1e-6;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
  std::size_t nudged = 0;   // coordinates moved off a kink before comparing
  std::size_t skipped = 0;  // coordinates still on a kink after max_nudges
};

using LossBuilder = std::function<Var(Tape&, const ParameterSet&)>;

// Compares reverse-mode gradients with central differences on sampled
// coordinates of every trainable tensor. Relative error is
// |ga - gn| / max(|ga|, |gn|, floor).
GradCheckResult grad_check(const LossBuilder& f, ParameterSet params, const GradCheckOptions& opt = {});

}  // namespace xrag
