#pragma once

// Geometric comparison of probes and activations: cosine similarity between
// probe directions, signed supports of sparse probes, support overlap, and a
// deterministic 2-D PCA projection for cluster inspection.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "probegeo/error.hpp"
#include "probegeo/probe.hpp"
#include "probegeo/transfer.hpp"

namespace probegeo {

namespace detail {
inline std::vector<std::string> probe_names(const std::vector<LinearProbe>& probes) {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    std::string id;
    for (const auto& t : probes[i].meta.tasks) id += (id.empty() ? "" : "+") + t;
    names.push_back(id.empty() ? "probe" + std::to_string(i) : id);
  }
  return names;
}
}  // namespace detail

// Cosine between raw-space weight vectors; the bias is not part of the direction.
inline double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) throw DataError("cosine of a zero-norm vector");
  return std::clamp(a.dot(b) / (na * nb), -1.0, 1.0);
}

inline TransferMatrix cosine_matrix(const std::vector<LinearProbe>& probes) {
  const auto names = detail::probe_names(probes);
  auto m = make_matrix(names, names, "cosine");
  std::vector<Vector> w;
  for (const auto& p : probes) {
    w.push_back(p.raw_weights());
    if (w.back().norm() == 0.0) throw DataError("cosine_matrix: probe has zero-norm theta");
    if (w.back().size() != w.front().size()) throw DataError("cosine_matrix: dimension mismatch");
  }
  for (std::size_t i = 0; i < w.size(); ++i)
    for (std::size_t j = 0; j < w.size(); ++j)
      m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          i == j ? 1.0 : cosine(w[i], w[j]);
  return m;
}

struct SignedSupport {
  std::vector<std::string> probes;
  std::vector<std::vector<int>> signs;  // [probe][dimension] in {-1, 0, +1}
  std::vector<std::size_t> order;       // display permutation, densest dimension first
};

inline SignedSupport signed_support(const std::vector<LinearProbe>& probes) {
  if (probes.empty()) throw ConfigError("signed_support needs at least one probe");
  SignedSupport s;
  s.probes = detail::probe_names(probes);
  const auto d = probes.front().dim();
  std::vector<std::size_t> count(d, 0);
  for (const auto& p : probes) {
    if (p.reg.kind != Penalty::l1)
      throw ConfigError("signed_support needs L1-trained probes (exact zeros)");
    if (p.dim() != d) throw DataError("signed_support: dimension mismatch");
    std::vector<int> row(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double v = p.theta[static_cast<Eigen::Index>(j)];
      row[j] = (v > 0) - (v < 0);
      count[j] += row[j] != 0;
    }
    s.signs.push_back(std::move(row));
  }
  s.order.resize(d);
  std::iota(s.order.begin(), s.order.end(), 0);
  std::stable_sort(s.order.begin(), s.order.end(),
                   [&](std::size_t a, std::size_t b) { return count[a] > count[b]; });
  return s;
}

enum class OverlapKind { jaccard, containment };  // containment: |A n B| / |A| (row probe)

inline TransferMatrix support_overlap(const std::vector<LinearProbe>& probes,
                                      OverlapKind kind = OverlapKind::jaccard) {
  const auto names = detail::probe_names(probes);
  auto m = make_matrix(names, names, kind == OverlapKind::jaccard ? "overlap_pct" : "containment_pct");
  std::vector<std::vector<bool>> supp;
  for (const auto& p : probes) {
    std::vector<bool> s(p.dim());
    std::size_t n = 0;
    for (std::size_t j = 0; j < p.dim(); ++j) n += (s[j] = p.theta[static_cast<Eigen::Index>(j)] != 0.0);
    if (n == 0) throw DataError("support_overlap: probe has empty support");
    if (p.dim() != probes.front().dim()) throw DataError("support_overlap: dimension mismatch");
    supp.push_back(std::move(s));
  }
  for (std::size_t i = 0; i < supp.size(); ++i)
    for (std::size_t j = 0; j < supp.size(); ++j) {
      std::size_t inter = 0, uni = 0, own = 0;
      for (std::size_t q = 0; q < supp[i].size(); ++q) {
        inter += supp[i][q] && supp[j][q];
        uni += supp[i][q] || supp[j][q];
        own += supp[i][q];
      }
      const double denom = kind == OverlapKind::jaccard ? static_cast<double>(uni) : static_cast<double>(own);
      m.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          100.0 * static_cast<double>(inter) / denom;
    }
  return m;
}

struct Projection {
  Matrix coords;                 // n x dims
  Matrix components;             // d x dims, unit columns
  Vector explained_variance;     // per component
  std::vector<std::int8_t> labels;
  std::vector<std::uint16_t> task_ids;
};

// Mean-centered projection onto the top right singular vectors. Each component's
// sign makes its largest-magnitude loading positive.
inline Projection pca_project(const Matrix& x, std::vector<std::int8_t> labels = {},
                              std::vector<std::uint16_t> task_ids = {}, int dims = 2) {
  if (x.rows() < 3) throw DataError("pca_project needs at least 3 rows");
  if (x.cols() < dims) throw DataError("pca_project: dimension smaller than requested components");
  const Matrix centered = x.rowwise() - x.colwise().mean();
  Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  if (sv.size() < dims || sv[dims - 1] <= 1e-12 * std::max(1.0, sv[0]))
    throw DataError("pca_project: data is rank-deficient for the requested components");
  Projection p;
  p.components = svd.matrixV().leftCols(dims);
  for (int c = 0; c < dims; ++c) {
    Eigen::Index arg = 0;
    p.components.col(c).cwiseAbs().maxCoeff(&arg);
    if (p.components(arg, c) < 0) p.components.col(c) *= -1.0;
  }
  p.coords = centered * p.components;
  p.explained_variance = sv.head(dims).array().square() / static_cast<double>(x.rows() - 1);
  p.labels = std::move(labels);
  p.task_ids = std::move(task_ids);
  return p;
}

inline Projection pca_project(const ActivationDataset& ds, int dims = 2) {
  return pca_project(ds.vectors_f64(), ds.labels, ds.task_ids, dims);
}

}  // namespace probegeo
