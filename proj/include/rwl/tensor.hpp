#pragma once

// Dense 64-bit tensors and a tape-based reverse-mode differentiator.
//
// Tensors are plain values. A Tape records the primitive applications whose
// inputs require gradients; Var is a lightweight handle to a node on a tape.
// All operations taking Vars require every input to live on the same tape.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace rwl {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Thrown when the inputs of a primitive violate its shape contract.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape);
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor zeros_like(const Tensor& other);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  // For rank-2 tensors; a rank-1 tensor behaves as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return data_; }
  std::span<double> data() { return data_; }
  const double* ptr() const { return data_.data(); }
  double* ptr() { return data_.data(); }
  const std::vector<double>& storage() const { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  std::span<const double> row(std::size_t r) const;
  std::span<double> row(std::size_t r);
  double item() const;

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool value) { requires_grad_ = value; }
  bool all_finite() const;

  // Shape and bit-pattern equality of the data.
  bool bit_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
  bool requires_grad_ = false;
};

enum class OpId : std::uint8_t {
  kLeaf,
  kMatmul,
  kMatmulNT,
  kAdd,
  kAddRow,
  kSub,
  kMul,
  kScale,
  kGelu,
  kLayerNorm,
  kSoftmax,
  kLogSumExp,
  kMeanOverAxis,
  kSum,
  kDot,
  kCosineSimilarity,
  kDropout,
  kEmbeddingLookup,
  kStridedConv1d,
  kCrossEntropy,
  kSliceCols,
  kConcatCols,
  kStack,
  kIndex,
  kMaskRows,
  kWeightedSum,
};

std::string_view op_name(OpId op);

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Gradients indexed by node id. Every node that requires gradients has an
// entry; nodes unreachable from the loss hold zeros.
class Gradients {
 public:
  const Tensor& operator[](Var v) const;
  const Tensor& at(std::size_t node_id) const;
  bool contains(std::size_t node_id) const;

 private:
  friend class Tape;
  std::vector<Tensor> grads_;
  std::vector<bool> present_;
};

// Handed to a backward closure. grad(k) is the accumulation buffer of input
// k, or nullptr when that input does not require gradients.
class BackwardContext {
 public:
  const Tensor& grad_out() const { return *grad_out_; }
  const Tensor& output() const { return *output_; }
  const Tensor& input(std::size_t k) const;
  double* grad(std::size_t k);

 private:
  friend class Tape;
  const Tensor* grad_out_ = nullptr;
  const Tensor* output_ = nullptr;
  Tape* tape_ = nullptr;
  const std::vector<std::size_t>* inputs_ = nullptr;
  std::vector<Tensor>* grads_ = nullptr;
};

using BackwardFn = std::function<void(BackwardContext&)>;

class Tape {
 public:
  struct Entry {
    OpId op;
    std::vector<std::size_t> inputs;
    std::size_t output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf whose gradient flag comes from the tensor itself.
  Var leaf(Tensor value);
  Var constant(Tensor value);
  Var variable(Tensor value);

  const Tensor& value(std::size_t id) const;
  bool requires_grad(std::size_t id) const;
  std::size_t node_count() const { return nodes_.size(); }
  const std::vector<Entry>& entries() const { return entries_; }
  bool backward_done() const { return backward_done_; }

  // Reverse sweep from a scalar loss. A tape supports exactly one sweep.
  Gradients backward(Var loss);

  // Appends a node; the closure is kept only if some input requires grad.
  Var record(OpId op, std::span<const Var> inputs, Tensor output, BackwardFn fn);

  void check_owned(Var v, std::string_view context) const;

  // Drops every node created after `node_count`. Only valid while nothing
  // beyond that point has been recorded for differentiation; lets a tape with
  // bound constants be reused across many forward passes.
  void rewind(std::size_t node_count);

 private:
  struct Node {
    Tensor value;
    bool requires_grad;
  };
  std::vector<Node> nodes_;
  std::vector<Entry> entries_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Primitives. Shape conventions: rank-2 tensors are row-major [rows x cols];
// "row vector" arguments are rank 1.

Var matmul(Var a, Var b);      // [m x k] * [k x n]
Var matmul_nt(Var a, Var b);   // [m x k] * [n x k]^T
Var add(Var a, Var b);         // same shape
Var add_row(Var x, Var bias);  // [n x d] + [d] broadcast over rows
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise
Var scale(Var x, double factor);
Var gelu(Var x);  // tanh approximation
Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-5);  // per row
Var softmax(Var x);     // along the last axis
Var logsumexp(Var x);   // along the last axis; rank-1 input gives a scalar
Var mean_over_axis(Var x, std::size_t axis);
Var sum(Var x);
Var dot(Var a, Var b);                // rank-1 inputs
Var cosine_similarity(Var a, Var b);  // rank-1 inputs; zero norm throws
// Inverted dropout. keep_prob == 1 returns x unchanged.
Var dropout(Var x, double keep_prob, std::mt19937_64& rng);
// Multiplies by an explicit mask of per-element factors.
Var dropout_with_mask(Var x, const Tensor& mask);
Var embedding_lookup(Var table, std::span<const std::size_t> ids);
// x [T x c_in], weight [(stride * c_in) x c_out], bias [c_out]. Kernel width
// equals the stride and there is no padding, so T' = floor(T / stride).
Var strided_conv1d(Var x, Var weight, Var bias, std::size_t stride);
// Mean over rows of -log softmax(logits)[label]. Logits [n x C] or [C].
Var cross_entropy(Var logits, std::span<const std::size_t> labels);
Var slice_cols(Var x, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
// Scalars stack into a vector; equal-length vectors stack into rows.
Var stack(std::span<const Var> parts);
Var index(Var x, std::size_t i);  // rank-1 input
// Rows where mask[r] is true are replaced by fill [d].
Var mask_rows(Var x, Var fill, const std::vector<bool>& mask);
// sum_k weights[k] * mats[k]
Var weighted_sum(std::span<const Var> mats, Var weights);

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& x, double h = 1e-5);

}  // namespace rwl
