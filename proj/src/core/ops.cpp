#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>

#include "rwl/kernels.hpp"
#include "rwl/tensor.hpp"

namespace rwl {
namespace {

const kernels::KernelTable& K() { return kernels::active(); }

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_to_string(a) + " and " +
                   shape_to_string(b));
}

[[noreturn]] void shape_fail(std::string_view op, const Shape& a, std::string_view want) {
  throw ShapeError(std::string(op) + ": shape " + shape_to_string(a) + " " + std::string(want));
}

Tape& tape_of(std::string_view op, std::initializer_list<Var> vars) {
  Tape* t = nullptr;
  for (const Var& v : vars) {
    if (!v.valid()) throw std::invalid_argument(std::string(op) + ": unbound input");
    if (t && v.tape() != t) throw std::invalid_argument(std::string(op) + ": inputs live on different tapes");
    t = v.tape();
  }
  return *t;
}

void require_rank(std::string_view op, const Tensor& t, std::size_t rank) {
  if (t.rank() != rank)
    shape_fail(op, t.shape(), "must have rank " + std::to_string(rank));
}

std::vector<double> transposed(const double* src, std::size_t rows, std::size_t cols) {
  std::vector<double> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = src[r * cols + c];
  return out;
}

// C (+)= A * B^T with A [m x k], B [n x k].
void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const std::vector<double> bt = transposed(b, n, k);
  K().gemm(a, bt.data(), c, m, k, n, accumulate);
}

// C (+)= A^T * B with A [k x m], B [k x n].
void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
             std::size_t n, bool accumulate) {
  const std::vector<double> at = transposed(a, k, m);
  K().gemm(at.data(), b, c, m, k, n, accumulate);
}

void accumulate(double* dst, const Tensor& src) {
  if (dst) K().axpy(1.0, src.ptr(), dst, src.numel());
}

constexpr double kSqrt2OverPi = 0.7978845608028654;
constexpr double kGeluCoeff = 0.044715;

}  // namespace

Var matmul(Var a, Var b) {
  Tape& tape = tape_of("matmul", {a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows()) shape_fail("matmul", A.shape(), B.shape());
  const std::size_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor out(Shape{m, n});
  K().gemm(A.ptr(), B.ptr(), out.ptr(), m, k, n, false);
  const Var in[] = {a, b};
  return tape.record(OpId::kMatmul, in, std::move(out), [m, k, n](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    if (double* ga = ctx.grad(0)) gemm_nt(g.ptr(), ctx.input(1).ptr(), ga, m, n, k, true);
    if (double* gb = ctx.grad(1)) gemm_tn(ctx.input(0).ptr(), g.ptr(), gb, k, m, n, true);
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& tape = tape_of("matmul_nt", {a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.cols()) shape_fail("matmul_nt", A.shape(), B.shape());
  const std::size_t m = A.rows(), k = A.cols(), n = B.rows();
  Tensor out(Shape{m, n});
  gemm_nt(A.ptr(), B.ptr(), out.ptr(), m, k, n, false);
  const Var in[] = {a, b};
  return tape.record(OpId::kMatmulNT, in, std::move(out), [m, k, n](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();  // [m x n]
    // dA = g * B, dB = g^T * A
    if (double* ga = ctx.grad(0)) K().gemm(g.ptr(), ctx.input(1).ptr(), ga, m, n, k, true);
    if (double* gb = ctx.grad(1)) gemm_tn(g.ptr(), ctx.input(0).ptr(), gb, n, m, k, true);
  });
}

Var add(Var a, Var b) {
  Tape& tape = tape_of("add", {a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) shape_fail("add", A.shape(), B.shape());
  Tensor out(A.shape());
  K().add(A.ptr(), B.ptr(), out.ptr(), A.numel());
  const Var in[] = {a, b};
  return tape.record(OpId::kAdd, in, std::move(out), [](BackwardContext& ctx) {
    accumulate(ctx.grad(0), ctx.grad_out());
    accumulate(ctx.grad(1), ctx.grad_out());
  });
}

Var add_row(Var x, Var bias) {
  Tape& tape = tape_of("add_row", {x, bias});
  const Tensor& X = x.value();
  const Tensor& b = bias.value();
  if (X.rank() != 2 || b.rank() != 1 || b.numel() != X.cols()) shape_fail("add_row", X.shape(), b.shape());
  const std::size_t n = X.rows(), d = X.cols();
  Tensor out(X.shape());
  for (std::size_t r = 0; r < n; ++r) K().add(X.ptr() + r * d, b.ptr(), out.ptr() + r * d, d);
  const Var in[] = {x, bias};
  return tape.record(OpId::kAddRow, in, std::move(out), [n, d](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    accumulate(ctx.grad(0), g);
    if (double* gb = ctx.grad(1))
      for (std::size_t r = 0; r < n; ++r) K().axpy(1.0, g.ptr() + r * d, gb, d);
  });
}

Var sub(Var a, Var b) {
  Tape& tape = tape_of("sub", {a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) shape_fail("sub", A.shape(), B.shape());
  Tensor out = A;
  K().axpy(-1.0, B.ptr(), out.ptr(), out.numel());
  const Var in[] = {a, b};
  return tape.record(OpId::kSub, in, std::move(out), [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    accumulate(ctx.grad(0), g);
    if (double* gb = ctx.grad(1)) K().axpy(-1.0, g.ptr(), gb, g.numel());
  });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of("mul", {a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.shape() != B.shape()) shape_fail("mul", A.shape(), B.shape());
  Tensor out(A.shape());
  K().mul(A.ptr(), B.ptr(), out.ptr(), A.numel());
  const Var in[] = {a, b};
  return tape.record(OpId::kMul, in, std::move(out), [](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    const std::size_t n = g.numel();
    if (double* ga = ctx.grad(0)) {
      const double* bv = ctx.input(1).ptr();
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bv[i];
    }
    if (double* gb = ctx.grad(1)) {
      const double* av = ctx.input(0).ptr();
      for (std::size_t i = 0; i < n; ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var x, double factor) {
  Tape& tape = tape_of("scale", {x});
  const Tensor& X = x.value();
  Tensor out(X.shape());
  K().scale(factor, X.ptr(), out.ptr(), X.numel());
  const Var in[] = {x};
  return tape.record(OpId::kScale, in, std::move(out), [factor](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    if (double* gx = ctx.grad(0)) K().axpy(factor, g.ptr(), gx, g.numel());
  });
}

Var gelu(Var x) {
  Tape& tape = tape_of("gelu", {x});
  const Tensor& X = x.value();
  Tensor out(X.shape());
  auto tanhs = std::make_shared<std::vector<double>>(X.numel());
  for (std::size_t i = 0; i < X.numel(); ++i) {
    const double v = X[i];
    const double t = std::tanh(kSqrt2OverPi * (v + kGeluCoeff * v * v * v));
    (*tanhs)[i] = t;
    out[i] = 0.5 * v * (1.0 + t);
  }
  const Var in[] = {x};
  return tape.record(OpId::kGelu, in, std::move(out), [tanhs](BackwardContext& ctx) {
    double* gx = ctx.grad(0);
    if (!gx) return;
    const Tensor& X = ctx.input(0);
    const Tensor& g = ctx.grad_out();
    for (std::size_t i = 0; i < X.numel(); ++i) {
      const double v = X[i];
      const double t = (*tanhs)[i];
      const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCoeff * v * v);
      gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
}

Var layernorm(Var x, Var gamma, Var beta, double eps) {
  Tape& tape = tape_of("layernorm", {x, gamma, beta});
  const Tensor& X = x.value();
  if (X.rank() != 2 && X.rank() != 1) shape_fail("layernorm", X.shape(), "must have rank 1 or 2");
  const std::size_t n = X.rows(), d = X.cols();
  if (gamma.value().shape() != Shape{d} || beta.value().shape() != Shape{d})
    shape_fail("layernorm", X.shape(), gamma.value().shape());
  if (d == 0) shape_fail("layernorm", X.shape(), "has an empty normalization axis");
  Tensor out(X.shape());
  auto xhat = std::make_shared<std::vector<double>>(X.numel());
  auto inv_std = std::make_shared<std::vector<double>>(n);
  const double* gm = gamma.value().ptr();
  const double* bt = beta.value().ptr();
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = X.ptr() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (xr[c] - mean) * is;
      (*xhat)[r * d + c] = h;
      out[r * d + c] = h * gm[c] + bt[c];
    }
  }
  const Var in[] = {x, gamma, beta};
  return tape.record(OpId::kLayerNorm, in, std::move(out), [n, d, xhat, inv_std](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    const double* gm = ctx.input(1).ptr();
    double* gx = ctx.grad(0);
    double* gg = ctx.grad(1);
    double* gb = ctx.grad(2);
    std::vector<double> gh(d);
    for (std::size_t r = 0; r < n; ++r) {
      const double* gr = g.ptr() + r * d;
      const double* hr = xhat->data() + r * d;
      if (gg)
        for (std::size_t c = 0; c < d; ++c) gg[c] += gr[c] * hr[c];
      if (gb)
        for (std::size_t c = 0; c < d; ++c) gb[c] += gr[c];
      if (gx) {
        double sum_gh = 0.0, sum_ghh = 0.0;
        for (std::size_t c = 0; c < d; ++c) {
          gh[c] = gr[c] * gm[c];
          sum_gh += gh[c];
          sum_ghh += gh[c] * hr[c];
        }
        const double is = (*inv_std)[r];
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t c = 0; c < d; ++c)
          gx[r * d + c] += is * (gh[c] - inv_d * sum_gh - hr[c] * inv_d * sum_ghh);
      }
    }
  });
}

Var softmax(Var x) {
  Tape& tape = tape_of("softmax", {x});
  const Tensor& X = x.value();
  if (X.rank() == 0 || X.rank() > 2) shape_fail("softmax", X.shape(), "must have rank 1 or 2");
  const std::size_t n = X.rows(), d = X.cols();
  if (d == 0) shape_fail("softmax", X.shape(), "has an empty axis");
  Tensor out(X.shape());
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = X.ptr() + r * d;
    double* yr = out.ptr() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      yr[c] = std::exp(xr[c] - mx);
      s += yr[c];
    }
    const double inv = 1.0 / s;
    for (std::size_t c = 0; c < d; ++c) yr[c] *= inv;
  }
  const Var in[] = {x};
  return tape.record(OpId::kSoftmax, in, std::move(out), [n, d](BackwardContext& ctx) {
    double* gx = ctx.grad(0);
    if (!gx) return;
    const Tensor& y = ctx.output();
    const Tensor& g = ctx.grad_out();
    for (std::size_t r = 0; r < n; ++r) {
      const double* yr = y.ptr() + r * d;
      const double* gr = g.ptr() + r * d;
      const double s = K().dot(yr, gr, d);
      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += yr[c] * (gr[c] - s);
    }
  });
}

Var logsumexp(Var x) {
  Tape& tape = tape_of("logsumexp", {x});
  const Tensor& X = x.value();
  if (X.rank() == 0 || X.rank() > 2) shape_fail("logsumexp", X.shape(), "must have rank 1 or 2");
  const std::size_t n = X.rows(), d = X.cols();
  if (d == 0) shape_fail("logsumexp", X.shape(), "has an empty axis");
  Tensor out(X.rank() == 1 ? Shape{} : Shape{n});
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = X.ptr() + r * d;
    const double mx = *std::max_element(xr, xr + d);
    double s = 0.0;
    for (std::size_t c = 0; c < d; ++c) s += std::exp(xr[c] - mx);
    out[r] = mx + std::log(s);
  }
  const Var in[] = {x};
  return tape.record(OpId::kLogSumExp, in, std::move(out), [n, d](BackwardContext& ctx) {
    double* gx = ctx.grad(0);
    if (!gx) return;
    const Tensor& X = ctx.input(0);
    const Tensor& y = ctx.output();
    const Tensor& g = ctx.grad_out();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[r] * std::exp(X[r * d + c] - y[r]);
  });
}

Var mean_over_axis(Var x, std::size_t axis) {
  Tape& tape = tape_of("mean_over_axis", {x});
  const Tensor& X = x.value();
  if (X.rank() == 1 && axis == 0) {
    const std::size_t d = X.numel();
    if (d == 0) shape_fail("mean_over_axis", X.shape(), "has an empty axis");
    double s = 0.0;
    for (double v : X.data()) s += v;
    const Var in[] = {x};
    return tape.record(OpId::kMeanOverAxis, in, Tensor::scalar(s / static_cast<double>(d)),
                       [d](BackwardContext& ctx) {
                         double* gx = ctx.grad(0);
                         if (!gx) return;
                         const double gv = ctx.grad_out()[0] / static_cast<double>(d);
                         for (std::size_t i = 0; i < d; ++i) gx[i] += gv;
                       });
  }
  if (X.rank() != 2 || axis > 1) shape_fail("mean_over_axis", X.shape(), "unsupported axis " + std::to_string(axis));
  const std::size_t n = X.rows(), d = X.cols();
  const std::size_t len = axis == 0 ? n : d;
  if (len == 0) shape_fail("mean_over_axis", X.shape(), "has an empty axis");
  const double inv = 1.0 / static_cast<double>(len);
  Tensor out(axis == 0 ? Shape{d} : Shape{n});
  if (axis == 0) {
    for (std::size_t r = 0; r < n; ++r) K().axpy(1.0, X.ptr() + r * d, out.ptr(), d);
    K().scale(inv, out.ptr(), out.ptr(), d);
  } else {
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += X[r * d + c];
      out[r] = s * inv;
    }
  }
  const Var in[] = {x};
  return tape.record(OpId::kMeanOverAxis, in, std::move(out), [n, d, axis, inv](BackwardContext& ctx) {
    double* gx = ctx.grad(0);
    if (!gx) return;
    const Tensor& g = ctx.grad_out();
    if (axis == 0) {
      for (std::size_t r = 0; r < n; ++r) K().axpy(inv, g.ptr(), gx + r * d, d);
    } else {
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[r] * inv;
    }
  });
}

Var sum(Var x) {
  Tape& tape = tape_of("sum", {x});
  const Tensor& X = x.value();
  double s = 0.0;
  for (double v : X.data()) s += v;
  const Var in[] = {x};
  return tape.record(OpId::kSum, in, Tensor::scalar(s), [](BackwardContext& ctx) {
    double* gx = ctx.grad(0);
    if (!gx) return;
    const double gv = ctx.grad_out()[0];
    const std::size_t n = ctx.input(0).numel();
    for (std::size_t i = 0; i < n; ++i) gx[i] += gv;
  });
}

Var dot(Var a, Var b) {
  Tape& tape = tape_of("dot", {a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 1 || A.shape() != B.shape()) shape_fail("dot", A.shape(), B.shape());
  const Var in[] = {a, b};
  return tape.record(OpId::kDot, in, Tensor::scalar(K().dot(A.ptr(), B.ptr(), A.numel())),
                     [](BackwardContext& ctx) {
                       const double gv = ctx.grad_out()[0];
                       const std::size_t n = ctx.input(0).numel();
                       if (double* ga = ctx.grad(0)) K().axpy(gv, ctx.input(1).ptr(), ga, n);
                       if (double* gb = ctx.grad(1)) K().axpy(gv, ctx.input(0).ptr(), gb, n);
                     });
}

Var cosine_similarity(Var a, Var b) {
  Tape& tape = tape_of("cosine_similarity", {a, b});
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.rank() != 1 || A.shape() != B.shape()) shape_fail("cosine_similarity", A.shape(), B.shape());
  const std::size_t n = A.numel();
  const double ab = K().dot(A.ptr(), B.ptr(), n);
  const double aa = K().dot(A.ptr(), A.ptr(), n);
  const double bb = K().dot(B.ptr(), B.ptr(), n);
  if (aa == 0.0 || bb == 0.0) throw std::domain_error("cosine_similarity: zero-norm input");
  const double denom = std::sqrt(aa * bb);
  const double cosv = ab / denom;
  const Var in[] = {a, b};
  return tape.record(OpId::kCosineSimilarity, in, Tensor::scalar(cosv),
                     [n, aa, bb, denom, cosv](BackwardContext& ctx) {
                       const double gv = ctx.grad_out()[0];
                       const double* av = ctx.input(0).ptr();
                       const double* bv = ctx.input(1).ptr();
                       if (double* ga = ctx.grad(0))
                         for (std::size_t i = 0; i < n; ++i)
                           ga[i] += gv * (bv[i] / denom - cosv * av[i] / aa);
                       if (double* gb = ctx.grad(1))
                         for (std::size_t i = 0; i < n; ++i)
                           gb[i] += gv * (av[i] / denom - cosv * bv[i] / bb);
                     });
}

Var dropout_with_mask(Var x, const Tensor& mask) {
  Tape& tape = tape_of("dropout", {x});
  const Tensor& X = x.value();
  if (mask.shape() != X.shape()) shape_fail("dropout", X.shape(), mask.shape());
  Tensor out(X.shape());
  K().mul(X.ptr(), mask.ptr(), out.ptr(), X.numel());
  const Var in[] = {x};
  return tape.record(OpId::kDropout, in, std::move(out), [mask](BackwardContext& ctx) {
    double* gx = ctx.grad(0);
    if (!gx) return;
    const Tensor& g = ctx.grad_out();
    for (std::size_t i = 0; i < g.numel(); ++i) gx[i] += g[i] * mask[i];
  });
}

Var dropout(Var x, double keep_prob, std::mt19937_64& rng) {
  if (!(keep_prob > 0.0 && keep_prob <= 1.0))
    throw std::invalid_argument("dropout: keep probability must lie in (0, 1]");
  if (keep_prob == 1.0) return x;
  const Tensor& X = x.value();
  Tensor mask(X.shape());
  // Keep when a raw 64-bit draw falls below keep_prob * 2^64.
  const auto threshold = static_cast<std::uint64_t>(std::ldexp(keep_prob, 64) - 1.0);
  const double inv = 1.0 / keep_prob;
  for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = rng() <= threshold ? inv : 0.0;
  return dropout_with_mask(x, mask);
}

Var embedding_lookup(Var table, std::span<const std::size_t> ids) {
  Tape& tape = tape_of("embedding_lookup", {table});
  const Tensor& T = table.value();
  require_rank("embedding_lookup", T, 2);
  const std::size_t v = T.rows(), d = T.cols();
  Tensor out(Shape{ids.size(), d});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= v)
      throw std::out_of_range("embedding_lookup: id " + std::to_string(ids[r]) + " outside table of " +
                              std::to_string(v) + " rows");
    std::copy_n(T.ptr() + ids[r] * d, d, out.ptr() + r * d);
  }
  std::vector<std::size_t> saved(ids.begin(), ids.end());
  const Var in[] = {table};
  return tape.record(OpId::kEmbeddingLookup, in, std::move(out), [saved, d](BackwardContext& ctx) {
    double* gt = ctx.grad(0);
    if (!gt) return;
    const Tensor& g = ctx.grad_out();
    for (std::size_t r = 0; r < saved.size(); ++r) K().axpy(1.0, g.ptr() + r * d, gt + saved[r] * d, d);
  });
}

Var strided_conv1d(Var x, Var weight, Var bias, std::size_t stride) {
  Tape& tape = tape_of("strided_conv1d", {x, weight, bias});
  const Tensor& X = x.value();
  const Tensor& W = weight.value();
  const Tensor& b = bias.value();
  if (stride == 0) throw std::invalid_argument("strided_conv1d: stride must be positive");
  require_rank("strided_conv1d", X, 2);
  require_rank("strided_conv1d", W, 2);
  const std::size_t t_in = X.rows(), c_in = X.cols();
  const std::size_t window = stride * c_in;
  if (W.rows() != window) shape_fail("strided_conv1d", X.shape(), W.shape());
  const std::size_t c_out = W.cols();
  if (b.shape() != Shape{c_out}) shape_fail("strided_conv1d", W.shape(), b.shape());
  if (t_in < stride)
    throw ShapeError("strided_conv1d: input length " + std::to_string(t_in) + " is shorter than kernel " +
                     std::to_string(stride));
  const std::size_t t_out = t_in / stride;
  // Row-major storage makes each window a contiguous run of `window` values.
  Tensor out(Shape{t_out, c_out});
  for (std::size_t r = 0; r < t_out; ++r) std::copy_n(b.ptr(), c_out, out.ptr() + r * c_out);
  K().gemm(X.ptr(), W.ptr(), out.ptr(), t_out, window, c_out, true);
  const Var in[] = {x, weight, bias};
  return tape.record(OpId::kStridedConv1d, in, std::move(out), [t_out, window, c_out](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    if (double* gx = ctx.grad(0)) gemm_nt(g.ptr(), ctx.input(1).ptr(), gx, t_out, c_out, window, true);
    if (double* gw = ctx.grad(1)) gemm_tn(ctx.input(0).ptr(), g.ptr(), gw, window, t_out, c_out, true);
    if (double* gb = ctx.grad(2))
      for (std::size_t r = 0; r < t_out; ++r) K().axpy(1.0, g.ptr() + r * c_out, gb, c_out);
  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  Tape& tape = tape_of("cross_entropy", {logits});
  const Tensor& Z = logits.value();
  if (Z.rank() == 0 || Z.rank() > 2) shape_fail("cross_entropy", Z.shape(), "must have rank 1 or 2");
  const std::size_t n = Z.rows(), c = Z.cols();
  if (c == 0) shape_fail("cross_entropy", Z.shape(), "has an empty class axis");
  if (labels.size() != n)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(n) +
                     " rows");
  auto probs = std::make_shared<std::vector<double>>(n * c);
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] >= c) throw std::out_of_range("cross_entropy: label outside class range");
    const double* zr = Z.ptr() + r * c;
    const double mx = *std::max_element(zr, zr + c);
    double s = 0.0;
    for (std::size_t k = 0; k < c; ++k) s += std::exp(zr[k] - mx);
    const double lse = mx + std::log(s);
    for (std::size_t k = 0; k < c; ++k) (*probs)[r * c + k] = std::exp(zr[k] - lse);
    total += lse - zr[labels[r]];
  }
  std::vector<std::size_t> saved(labels.begin(), labels.end());
  const Var in[] = {logits};
  return tape.record(OpId::kCrossEntropy, in, Tensor::scalar(total / static_cast<double>(n)),
                     [n, c, probs, saved](BackwardContext& ctx) {
                       double* gz = ctx.grad(0);
                       if (!gz) return;
                       const double gv = ctx.grad_out()[0] / static_cast<double>(n);
                       for (std::size_t r = 0; r < n; ++r)
                         for (std::size_t k = 0; k < c; ++k)
                           gz[r * c + k] += gv * ((*probs)[r * c + k] - (k == saved[r] ? 1.0 : 0.0));
                     });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
  Tape& tape = tape_of("slice_cols", {x});
  const Tensor& X = x.value();
  require_rank("slice_cols", X, 2);
  const std::size_t n = X.rows(), d = X.cols();
  if (begin + count > d) shape_fail("slice_cols", X.shape(), "cannot supply the requested columns");
  Tensor out(Shape{n, count});
  for (std::size_t r = 0; r < n; ++r) std::copy_n(X.ptr() + r * d + begin, count, out.ptr() + r * count);
  const Var in[] = {x};
  return tape.record(OpId::kSliceCols, in, std::move(out), [n, d, begin, count](BackwardContext& ctx) {
    double* gx = ctx.grad(0);
    if (!gx) return;
    const Tensor& g = ctx.grad_out();
    for (std::size_t r = 0; r < n; ++r) K().axpy(1.0, g.ptr() + r * count, gx + r * d + begin, count);
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape& tape = *parts[0].tape();
  const std::size_t n = parts[0].value().rows();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    tape.check_owned(p, "concat_cols");
    const Tensor& t = p.value();
    require_rank("concat_cols", t, 2);
    if (t.rows() != n) shape_fail("concat_cols", parts[0].value().shape(), t.shape());
    widths.push_back(t.cols());
    total += t.cols();
  }
  Tensor out(Shape{n, total});
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& t = parts[k].value();
    for (std::size_t r = 0; r < n; ++r) std::copy_n(t.ptr() + r * widths[k], widths[k], out.ptr() + r * total + offset);
    offset += widths[k];
  }
  return tape.record(OpId::kConcatCols, parts, std::move(out), [n, total, widths](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    std::size_t offset = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (double* gk = ctx.grad(k))
        for (std::size_t r = 0; r < n; ++r) K().axpy(1.0, g.ptr() + r * total + offset, gk + r * widths[k], widths[k]);
      offset += widths[k];
    }
  });
}

Var stack(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("stack: no inputs");
  Tape& tape = *parts[0].tape();
  const Shape& first = parts[0].value().shape();
  if (first.size() > 1) shape_fail("stack", first, "must be a scalar or a vector");
  for (const Var& p : parts) {
    tape.check_owned(p, "stack");
    if (p.value().shape() != first) shape_fail("stack", first, p.value().shape());
  }
  const std::size_t width = shape_numel(first);
  Tensor out(first.empty() ? Shape{parts.size()} : Shape{parts.size(), width});
  for (std::size_t k = 0; k < parts.size(); ++k) std::copy_n(parts[k].value().ptr(), width, out.ptr() + k * width);
  return tape.record(OpId::kStack, parts, std::move(out), [width, count = parts.size()](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    for (std::size_t k = 0; k < count; ++k)
      if (double* gk = ctx.grad(k)) K().axpy(1.0, g.ptr() + k * width, gk, width);
  });
}

Var index(Var x, std::size_t i) {
  Tape& tape = tape_of("index", {x});
  const Tensor& X = x.value();
  require_rank("index", X, 1);
  if (i >= X.numel()) throw std::out_of_range("index: position outside vector");
  const Var in[] = {x};
  return tape.record(OpId::kIndex, in, Tensor::scalar(X[i]), [i](BackwardContext& ctx) {
    if (double* gx = ctx.grad(0)) gx[i] += ctx.grad_out()[0];
  });
}

Var mask_rows(Var x, Var fill, const std::vector<bool>& mask) {
  Tape& tape = tape_of("mask_rows", {x, fill});
  const Tensor& X = x.value();
  const Tensor& F = fill.value();
  require_rank("mask_rows", X, 2);
  const std::size_t n = X.rows(), d = X.cols();
  if (F.shape() != Shape{d}) shape_fail("mask_rows", X.shape(), F.shape());
  if (mask.size() != n)
    throw ShapeError("mask_rows: mask of " + std::to_string(mask.size()) + " rows for " + std::to_string(n));
  Tensor out = X;
  out.set_requires_grad(false);
  for (std::size_t r = 0; r < n; ++r)
    if (mask[r]) std::copy_n(F.ptr(), d, out.ptr() + r * d);
  const Var in[] = {x, fill};
  return tape.record(OpId::kMaskRows, in, std::move(out), [n, d, mask](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    double* gx = ctx.grad(0);
    double* gf = ctx.grad(1);
    for (std::size_t r = 0; r < n; ++r) {
      if (mask[r]) {
        if (gf) K().axpy(1.0, g.ptr() + r * d, gf, d);
      } else if (gx) {
        K().axpy(1.0, g.ptr() + r * d, gx + r * d, d);
      }
    }
  });
}

Var weighted_sum(std::span<const Var> mats, Var weights) {
  if (mats.empty()) throw std::invalid_argument("weighted_sum: no inputs");
  Tape& tape = tape_of("weighted_sum", {weights});
  const Tensor& w = weights.value();
  if (w.rank() != 1 || w.numel() != mats.size())
    throw ShapeError("weighted_sum: " + std::to_string(mats.size()) + " inputs but weights of shape " +
                     shape_to_string(w.shape()));
  const Shape& shape = mats[0].value().shape();
  Tensor out(shape);
  for (std::size_t k = 0; k < mats.size(); ++k) {
    tape.check_owned(mats[k], "weighted_sum");
    if (mats[k].value().shape() != shape) shape_fail("weighted_sum", shape, mats[k].value().shape());
    K().axpy(w[k], mats[k].value().ptr(), out.ptr(), out.numel());
  }
  std::vector<Var> in(mats.begin(), mats.end());
  in.push_back(weights);
  const std::size_t count = mats.size();
  return tape.record(OpId::kWeightedSum, in, std::move(out), [count](BackwardContext& ctx) {
    const Tensor& g = ctx.grad_out();
    const Tensor& w = ctx.input(count);
    double* gw = ctx.grad(count);
    for (std::size_t k = 0; k < count; ++k) {
      if (double* gk = ctx.grad(k)) K().axpy(w[k], g.ptr(), gk, g.numel());
      if (gw) gw[k] += K().dot(g.ptr(), ctx.input(k).ptr(), g.numel());
    }
  });
}

}  // namespace rwl
