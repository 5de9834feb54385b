#include "rwl/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace rwl {

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : shape_(std::move(shape)), data_(std::move(data)), requires_grad_(requires_grad) {
  if (shape_numel(shape_) != data_.size())
    throw ShapeError("tensor shape " + shape_to_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::vector(std::vector<double> values) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
  return Tensor(Shape{rows, cols}, std::move(values));
}

Tensor Tensor::zeros_like(const Tensor& other) { return Tensor(other.shape()); }

std::size_t Tensor::rows() const {
  if (rank() == 2) return shape_[0];
  if (rank() <= 1) return 1;
  throw ShapeError("rows() on tensor of shape " + shape_to_string(shape_));
}

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape_[1];
  if (rank() == 1) return shape_[0];
  if (rank() == 0) return 1;
  throw ShapeError("cols() on tensor of shape " + shape_to_string(shape_));
}

std::span<const double> Tensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const double>(data_).subspan(r * c, c);
}

std::span<double> Tensor::row(std::size_t r) {
  const std::size_t c = cols();
  return std::span<double>(data_).subspan(r * c, c);
}

double Tensor::item() const {
  if (data_.size() != 1)
    throw ShapeError("item() on tensor of shape " + shape_to_string(shape_));
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

bool Tensor::bit_equal(const Tensor& other) const {
  return shape_ == other.shape_ && data_.size() == other.data_.size() &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

std::string_view op_name(OpId op) {
  switch (op) {
    case OpId::kLeaf: return "leaf";
    case OpId::kMatmul: return "matmul";
    case OpId::kMatmulNT: return "matmul_nt";
    case OpId::kAdd: return "add";
    case OpId::kAddRow: return "add_row";
    case OpId::kSub: return "sub";
    case OpId::kMul: return "mul";
    case OpId::kScale: return "scale";
    case OpId::kGelu: return "gelu";
    case OpId::kLayerNorm: return "layernorm";
    case OpId::kSoftmax: return "softmax";
    case OpId::kLogSumExp: return "logsumexp";
    case OpId::kMeanOverAxis: return "mean_over_axis";
    case OpId::kSum: return "sum";
    case OpId::kDot: return "dot";
    case OpId::kCosineSimilarity: return "cosine_similarity";
    case OpId::kDropout: return "dropout";
    case OpId::kEmbeddingLookup: return "embedding_lookup";
    case OpId::kStridedConv1d: return "strided_conv1d";
    case OpId::kCrossEntropy: return "cross_entropy";
    case OpId::kSliceCols: return "slice_cols";
    case OpId::kConcatCols: return "concat_cols";
    case OpId::kStack: return "stack";
    case OpId::kIndex: return "index";
    case OpId::kMaskRows: return "mask_rows";
    case OpId::kWeightedSum: return "weighted_sum";
  }
  return "unknown";
}

const Tensor& Var::value() const {
  if (!tape_) throw std::logic_error("value() on an unbound Var");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

const Tensor& Gradients::operator[](Var v) const { return at(v.id()); }

const Tensor& Gradients::at(std::size_t node_id) const {
  if (!contains(node_id))
    throw std::out_of_range("no gradient recorded for node " + std::to_string(node_id));
  return grads_[node_id];
}

bool Gradients::contains(std::size_t node_id) const {
  return node_id < present_.size() && present_[node_id];
}

const Tensor& BackwardContext::input(std::size_t k) const {
  return tape_->value((*inputs_)[k]);
}

double* BackwardContext::grad(std::size_t k) {
  const std::size_t id = (*inputs_)[k];
  if (!tape_->requires_grad(id)) return nullptr;
  Tensor& g = (*grads_)[id];
  if (g.numel() != tape_->value(id).numel() || g.shape() != tape_->value(id).shape())
    g = Tensor(tape_->value(id).shape());
  return g.ptr();
}

Var Tape::leaf(Tensor value) {
  const bool rg = value.requires_grad();
  nodes_.push_back(Node{std::move(value), rg});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  value.set_requires_grad(false);
  return leaf(std::move(value));
}

Var Tape::variable(Tensor value) {
  value.set_requires_grad(true);
  return leaf(std::move(value));
}

const Tensor& Tape::value(std::size_t id) const { return nodes_.at(id).value; }

bool Tape::requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

void Tape::check_owned(Var v, std::string_view context) const {
  if (v.tape() != this)
    throw std::invalid_argument(std::string(context) + ": input is not on this tape");
}

void Tape::rewind(std::size_t node_count) {
  if (node_count > nodes_.size()) throw std::invalid_argument("rewind: count beyond tape end");
  if (!entries_.empty() && entries_.back().output >= node_count)
    throw std::logic_error("rewind: recorded entries would be discarded");
  nodes_.resize(node_count);
}

Var Tape::record(OpId op, std::span<const Var> inputs, Tensor output, BackwardFn fn) {
  bool any = false;
  std::vector<std::size_t> ids;
  ids.reserve(inputs.size());
  for (const Var& v : inputs) {
    check_owned(v, op_name(op));
    ids.push_back(v.id());
    any = any || requires_grad(v.id());
  }
  output.set_requires_grad(any);
  nodes_.push_back(Node{std::move(output), any});
  const std::size_t out = nodes_.size() - 1;
  if (any) entries_.push_back(Entry{op, std::move(ids), out, std::move(fn)});
  return Var(this, out);
}

Gradients Tape::backward(Var loss) {
  if (loss.tape() != this) throw std::invalid_argument("backward: loss is not on this tape");
  if (value(loss.id()).numel() != 1 || value(loss.id()).rank() != 0)
    throw ShapeError("backward: loss must be a scalar, got " +
                     shape_to_string(value(loss.id()).shape()));
  if (!requires_grad(loss.id()))
    throw std::invalid_argument("backward: loss was not produced through recorded operations");
  if (backward_done_) throw std::logic_error("backward: this tape has already been differentiated");
  backward_done_ = true;

  std::vector<Tensor> grads(nodes_.size());
  grads[loss.id()] = Tensor::scalar(1.0);

  BackwardContext ctx;
  ctx.tape_ = this;
  ctx.grads_ = &grads;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->output > loss.id()) continue;
    const Tensor& g = grads[it->output];
    if (g.numel() == 0 && value(it->output).numel() != 0) continue;
    ctx.grad_out_ = &g;
    ctx.output_ = &nodes_[it->output].value;
    ctx.inputs_ = &it->inputs;
    it->backward(ctx);
  }

  Gradients result;
  result.present_.assign(nodes_.size(), false);
  result.grads_.resize(nodes_.size());
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    if (!nodes_[id].requires_grad) continue;
    result.present_[id] = true;
    if (grads[id].shape() == nodes_[id].value.shape() &&
        grads[id].numel() == nodes_[id].value.numel())
      result.grads_[id] = std::move(grads[id]);
    else
      result.grads_[id] = Tensor(nodes_[id].value.shape());
  }
  return result;
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f,
                                  const Tensor& x, double h) {
  if (!(h > 0.0)) throw std::invalid_argument("finite_difference_gradient: h must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::domain_error("finite_difference_gradient: non-finite evaluation at coordinate " +
                              std::to_string(i));
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace rwl
