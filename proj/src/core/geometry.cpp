#include "rwl/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "rwl/random.hpp"

namespace rwl::geometry {

namespace {

void require_matrix(const Tensor& v, const char* op) {
  if (v.rank() != 2) throw ShapeError(std::string(op) + ": expected a matrix, got " + shape_to_string(v.shape()));
  if (!v.all_finite()) throw std::domain_error(std::string(op) + ": non-finite entries");
}

void require_labels(const Tensor& v, std::span<const int> labels, const char* op) {
  if (labels.size() != v.rows())
    throw std::invalid_argument(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                                std::to_string(v.rows()) + " rows");
}

// Rows scaled to unit length; a zero row is an error.
std::vector<double> unit_rows(const Tensor& v, const char* op) {
  const std::size_t n = v.rows(), d = v.cols();
  std::vector<double> u(v.data().begin(), v.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    double nn = 0.0;
    for (std::size_t j = 0; j < d; ++j) nn += u[i * d + j] * u[i * d + j];
    if (nn == 0.0) throw std::domain_error(std::string(op) + ": row " + std::to_string(i) + " has zero norm");
    const double inv = 1.0 / std::sqrt(nn);
    for (std::size_t j = 0; j < d; ++j) u[i * d + j] *= inv;
  }
  return u;
}

double row_dot(const std::vector<double>& u, std::size_t d, std::size_t i, std::size_t j) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) s += u[i * d + k] * u[j * d + k];
  return s;
}

// logsumexp with terms summed in ascending order, so any permutation of
// the same multiset gives the same bits.
double sorted_logsumexp(std::vector<double> xs) {
  std::sort(xs.begin(), xs.end());
  const double hi = xs.back();
  double s = 0.0;
  for (double x : xs) s += std::exp(x - hi);
  return hi + std::log(s);
}

Tensor gram(const Tensor& v) {
  const std::size_t n = v.rows(), d = v.cols();
  Tensor g(Shape{d, d});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double via = v.at(i, a);
      for (std::size_t b = a; b < d; ++b) g.at(a, b) += via * v.at(i, b);
    }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < a; ++b) g.at(a, b) = g.at(b, a);
  return g;
}

}  // namespace

EigenDecomposition jacobi_eigen(const Tensor& symmetric, double tolerance, std::size_t max_sweeps) {
  if (symmetric.rank() != 2 || symmetric.rows() != symmetric.cols())
    throw ShapeError("jacobi_eigen: expected a square matrix, got " + shape_to_string(symmetric.shape()));
  if (!symmetric.all_finite()) throw std::domain_error("jacobi_eigen: non-finite entries");
  const std::size_t d = symmetric.rows();
  std::vector<double> a(symmetric.data().begin(), symmetric.data().end());
  std::vector<double> vec(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) vec[i * d + i] = 1.0;
  auto A = [&](std::size_t r, std::size_t c) -> double& { return a[r * d + c]; };

  double total = 0.0;
  for (double x : a) total += x * x;
  total = std::sqrt(total);
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t p = 0; p < d; ++p)
      for (std::size_t q = 0; q < d; ++q)
        if (p != q) s += A(p, q) * A(p, q);
    return std::sqrt(s);
  };

  EigenDecomposition out;
  double off = off_norm();
  while (off > tolerance * total) {
    if (out.sweeps == max_sweeps) {
      std::ostringstream msg;
      msg << "jacobi_eigen: no convergence after " << max_sweeps << " sweeps (off-diagonal residual " << off << ")";
      throw std::runtime_error(msg.str());
    }
    for (std::size_t p = 0; p + 1 < d; ++p)
      for (std::size_t q = p + 1; q < d; ++q) {
        const double apq = A(p, q);
        if (apq == 0.0) continue;
        const double theta = (A(q, q) - A(p, p)) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < d; ++k) {
          const double akp = A(k, p), akq = A(k, q);
          A(k, p) = c * akp - s * akq;
          A(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double apk = A(p, k), aqk = A(q, k);
          A(p, k) = c * apk - s * aqk;
          A(q, k) = s * apk + c * aqk;
        }
        A(p, q) = A(q, p) = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
          const double vkp = vec[k * d + p], vkq = vec[k * d + q];
          vec[k * d + p] = c * vkp - s * vkq;
          vec[k * d + q] = s * vkp + c * vkq;
        }
      }
    ++out.sweeps;
    off = off_norm();
  }

  std::vector<std::size_t> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return A(x, x) > A(y, y); });
  out.vectors = Tensor(Shape{d, d});
  for (std::size_t k = 0; k < d; ++k) {
    out.values.push_back(A(order[k], order[k]));
    for (std::size_t r = 0; r < d; ++r) out.vectors.at(r, k) = vec[r * d + order[k]];
  }
  return out;
}

IsotropyReport log_isotropy(const Tensor& v) {
  require_matrix(v, "log_isotropy");
  const std::size_t n = v.rows(), d = v.cols();
  if (n < 2 || d < 2) throw std::invalid_argument("log_isotropy: needs at least 2 rows and 2 columns");
  const EigenDecomposition eig = jacobi_eigen(gram(v));
  IsotropyReport rep;
  rep.eigen_spectrum = eig.values;
  for (std::size_t k = 0; k < d; ++k) {
    std::vector<double> proj(n);
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += eig.vectors.at(j, k) * v.at(i, j);
      proj[i] = s;
    }
    rep.direction_scores.push_back(sorted_logsumexp(proj));
    for (double& x : proj) x = -x;
    rep.direction_scores.push_back(sorted_logsumexp(std::move(proj)));
  }
  const auto [lo, hi] = std::minmax_element(rep.direction_scores.begin(), rep.direction_scores.end());
  rep.argmin = static_cast<std::size_t>(lo - rep.direction_scores.begin());
  rep.argmax = static_cast<std::size_t>(hi - rep.direction_scores.begin());
  rep.log_is = *lo - *hi;
  return rep;
}

CosineStats cosine_stats(const Tensor& v, std::span<const int> labels, std::uint64_t seed, std::size_t sample_pairs) {
  require_matrix(v, "cosine_stats");
  const std::size_t n = v.rows(), d = v.cols();
  if (n < 2) throw std::invalid_argument("cosine_stats: needs at least 2 rows");
  const bool labelled = !labels.empty();
  if (labelled) require_labels(v, labels, "cosine_stats");
  const std::vector<double> u = unit_rows(v, "cosine_stats");

  double sum = 0.0, sum_sq = 0.0, within = 0.0, between = 0.0;
  std::size_t pairs = 0, n_within = 0, n_between = 0;
  auto visit = [&](std::size_t i, std::size_t j) {
    const double c = row_dot(u, d, i, j);
    sum += c;
    sum_sq += c * c;
    ++pairs;
    if (labelled) {
      if (labels[i] == labels[j]) {
        within += c;
        ++n_within;
      } else {
        between += c;
        ++n_between;
      }
    }
  };
  if (n <= 2000) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) visit(i, j);
  } else {
    Rng rng = make_rng(seed, 0xC05);
    for (std::size_t k = 0; k < sample_pairs; ++k) {
      const std::size_t i = uniform_index(rng, n);
      std::size_t j = uniform_index(rng, n - 1);
      if (j >= i) ++j;
      visit(i, j);
    }
  }
  CosineStats st;
  st.pairs = pairs;
  st.mean = sum / static_cast<double>(pairs);
  st.stddev = std::sqrt(std::max(0.0, sum_sq / static_cast<double>(pairs) - st.mean * st.mean));
  if (n_within) st.within_mean = within / static_cast<double>(n_within);
  if (n_between) st.between_mean = between / static_cast<double>(n_between);
  return st;
}

std::vector<double> silhouette_samples(const Tensor& v, std::span<const int> labels) {
  require_matrix(v, "cluster_separation");
  require_labels(v, labels, "cluster_separation");
  const std::size_t n = v.rows(), d = v.cols();
  std::map<int, std::size_t> sizes;
  for (int l : labels) ++sizes[l];
  if (sizes.size() < 2) throw std::invalid_argument("cluster_separation: needs at least 2 classes");
  for (auto [label, count] : sizes)
    if (count < 2)
      throw std::invalid_argument("cluster_separation: class " + std::to_string(label) + " has a single member");

  const std::vector<double> u = unit_rows(v, "cluster_separation");
  std::vector<double> out(n);
  std::map<int, double> dist_sum;
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& [label, s] : dist_sum) s = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) dist_sum[labels[j]] += 1.0 - row_dot(u, d, i, j);
    const double a = dist_sum[labels[i]] / static_cast<double>(sizes[labels[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (auto& [label, s] : dist_sum)
      if (label != labels[i]) b = std::min(b, s / static_cast<double>(sizes[label]));
    const double m = std::max(a, b);
    out[i] = m > 0.0 ? (b - a) / m : 0.0;
  }
  return out;
}

double cluster_separation(const Tensor& v, std::span<const int> labels) {
  const std::vector<double> s = silhouette_samples(v, labels);
  return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
}

Projection project2d(const Tensor& v) {
  require_matrix(v, "project2d");
  const std::size_t n = v.rows(), d = v.cols();
  if (d < 2) throw std::invalid_argument("project2d: needs at least 2 columns");
  if (n == 0) throw std::invalid_argument("project2d: empty matrix");
  Tensor centered(Shape{n, d});
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += v.at(i, j);
    mean /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) centered.at(i, j) = v.at(i, j) - mean;
  }
  const EigenDecomposition eig = jacobi_eigen(gram(centered));
  double trace = 0.0;
  for (double l : eig.values) trace += std::max(0.0, l);
  if (!(trace > 0.0)) throw std::invalid_argument("project2d: rank-0 matrix");

  Projection p;
  p.coords = Tensor(Shape{n, 2});
  for (std::size_t k = 0; k < 2; ++k) {
    // Axes with numerically null variance project to exactly zero.
    if (eig.values[k] <= 1e-12 * eig.values[0]) continue;
    std::size_t lead = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(eig.vectors.at(j, k)) > std::abs(eig.vectors.at(lead, k))) lead = j;
    const double sign = eig.vectors.at(lead, k) < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += centered.at(i, j) * eig.vectors.at(j, k);
      p.coords.at(i, k) = sign * s;
    }
  }
  p.variance_share = (std::max(0.0, eig.values[0]) + std::max(0.0, eig.values[1])) / trace;
  return p;
}

void write_projection_csv(const std::filesystem::path& path, const Tensor& coords, std::span<const int> labels) {
  require_labels(coords, labels, "write_projection_csv");
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.precision(17);
  out << "x,y,label\n";
  for (std::size_t i = 0; i < coords.rows(); ++i) out << coords.at(i, 0) << ',' << coords.at(i, 1) << ',' << labels[i] << '\n';
}

std::string projection_svg(const Tensor& coords, std::span<const int> labels, const std::string& title) {
  require_labels(coords, labels, "projection_svg");
  static constexpr const char* kPalette[10] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
                                               "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  constexpr double kSize = 800.0, kPad = 40.0;
  const std::size_t n = coords.rows();
  double x_lo = 0, x_hi = 0, y_lo = 0, y_hi = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = coords.at(i, 0), y = coords.at(i, 1);
    if (i == 0 || x < x_lo) x_lo = x;
    if (i == 0 || x > x_hi) x_hi = x;
    if (i == 0 || y < y_lo) y_lo = y;
    if (i == 0 || y > y_hi) y_hi = y;
  }
  const double span = std::max({x_hi - x_lo, y_hi - y_lo, 1e-12});
  const double scale = (kSize - 2 * kPad) / span;
  std::ostringstream svg;
  svg.precision(6);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"800\" height=\"800\" viewBox=\"0 0 800 800\">\n"
      << "<rect width=\"800\" height=\"800\" fill=\"white\"/>\n";
  if (!title.empty()) svg << "<text x=\"400\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">"
                          << title << "</text>\n";
  std::map<int, std::size_t> colour;
  for (int l : labels) colour.emplace(l, 0);
  std::size_t next = 0;
  for (auto& [label, c] : colour) c = next++ % 10;
  for (std::size_t i = 0; i < n; ++i) {
    const double cx = kPad + (coords.at(i, 0) - x_lo) * scale;
    const double cy = kSize - kPad - (coords.at(i, 1) - y_lo) * scale;
    svg << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"3\" fill=\"" << kPalette[colour[labels[i]]]
        << "\" fill-opacity=\"0.8\"><title>" << labels[i] << "</title></circle>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void write_projection_svg(const std::filesystem::path& path, const Tensor& coords, std::span<const int> labels,
                          const std::string& title) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << projection_svg(coords, labels, title);
}

}  // namespace rwl::geometry
