#pragma once

// Diagnostics on a matrix of utterance embeddings (one row per utterance):
// log-space isotropy, pairwise cosine statistics, silhouette separation and a
// PCA projection with CSV / SVG export.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rwl/tensor.hpp"

namespace rwl::geometry {

struct EigenDecomposition {
  std::vector<double> values;  // descending
  Tensor vectors;              // [d x d], column k pairs with values[k]
  std::size_t sweeps = 0;
};

// Cyclic Jacobi on a symmetric matrix. Converged when the off-diagonal
// Frobenius norm is at most `tolerance` times the full norm; throws
// std::runtime_error with the residual after `max_sweeps`.
EigenDecomposition jacobi_eigen(const Tensor& symmetric, double tolerance = 1e-12, std::size_t max_sweeps = 100);

struct IsotropyReport {
  double log_is = 0.0;
  std::vector<double> eigen_spectrum;  // of V^T V, descending
  // Directions are ordered +m_0, -m_0, +m_1, -m_1, ...
  std::vector<double> direction_scores;  // log sum_i exp(m^T v_i)
  std::size_t argmin = 0;
  std::size_t argmax = 0;
};

IsotropyReport log_isotropy(const Tensor& v);

struct CosineStats {
  double mean = 0.0;
  double stddev = 0.0;
  std::size_t pairs = 0;
  std::optional<double> within_mean;
  std::optional<double> between_mean;
};

// Exact over all pairs for n <= 2000, else `sample_pairs` seeded random pairs.
CosineStats cosine_stats(const Tensor& v, std::span<const int> labels = {}, std::uint64_t seed = 0,
                         std::size_t sample_pairs = 1000000);

// Per-row silhouette with cosine distance 1 - cos.
std::vector<double> silhouette_samples(const Tensor& v, std::span<const int> labels);
double cluster_separation(const Tensor& v, std::span<const int> labels);

struct Projection {
  Tensor coords;  // [n x 2]
  double variance_share = 0.0;
};

// Centered PCA onto the top two axes; each axis is signed so its
// largest-magnitude loading is positive.
Projection project2d(const Tensor& v);

void write_projection_csv(const std::filesystem::path& path, const Tensor& coords, std::span<const int> labels);
std::string projection_svg(const Tensor& coords, std::span<const int> labels, const std::string& title = "");
void write_projection_svg(const std::filesystem::path& path, const Tensor& coords, std::span<const int> labels,
                          const std::string& title = "");

}  // namespace rwl::geometry
