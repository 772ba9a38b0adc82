#pragma once

// Synthetic activation datasets with planted per-task truth directions.
//
// Each task k has a truth direction v_k = normalize(sqrt(rho) u_0 + sqrt(1-rho) u_k)
// built from mutually orthonormal u_0..u_K, so cos(v_i, v_j) = rho for i != j.
// Task cluster centers c_k = center_scale * e_k are orthonormal and orthogonal
// to every v_j. A row of task k is h = c_k + y * margin * v_k + sigma * eps.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "probegeo/dataset.hpp"
#include "probegeo/error.hpp"
#include "probegeo/rng.hpp"

namespace probegeo {

struct SyntheticSpec {
  std::size_t d = 64;
  std::size_t tasks = 4;
  std::size_t n_per_task = 500;
  double center_scale = 10.0;
  double direction_cosine = 0.0;  // rho
  double margin = 3.0;
  double noise_sigma = 1.0;
  std::vector<double> pos_rate = {0.5};  // one value, or one per task
  std::uint64_t seed = 0;
  std::string model = "synthetic";
  int layer = 0;
  std::string token_position = std::string(kTokenStop);

  double pos_rate_for(std::size_t k) const {
    return pos_rate.size() == 1 ? pos_rate.front() : pos_rate.at(k);
  }

  void validate() const {
    if (d < 1) throw ConfigError("synthetic spec: d must be >= 1");
    if (tasks < 1) throw ConfigError("synthetic spec: K must be >= 1");
    if (tasks > d) throw ConfigError("synthetic spec: K > d (orthogonal construction must fit)");
    if (tasks > 65536) throw ConfigError("synthetic spec: too many tasks");
    const std::size_t needed = tasks + 1 + (center_scale > 0.0 ? tasks : 0);
    if (needed > d)
      throw ConfigError("synthetic spec: d=" + std::to_string(d) + " is too small; the planted geometry needs " +
                        std::to_string(needed) + " orthonormal vectors");
    if (n_per_task < 1) throw ConfigError("synthetic spec: n_per_task must be >= 1");
    if (!(direction_cosine >= 0.0 && direction_cosine <= 1.0))
      throw ConfigError("synthetic spec: direction_cosine must lie in [0,1]");
    if (!(margin > 0.0)) throw ConfigError("synthetic spec: margin must be > 0");
    if (!(noise_sigma >= 0.0)) throw ConfigError("synthetic spec: noise_sigma must be >= 0");
    if (!(center_scale >= 0.0)) throw ConfigError("synthetic spec: center_scale must be >= 0");
    if (pos_rate.size() != 1 && pos_rate.size() != tasks)
      throw ConfigError("synthetic spec: pos_rate needs 1 or K entries");
    for (double p : pos_rate)
      if (!(p > 0.0 && p < 1.0)) throw ConfigError("synthetic spec: pos_rate must lie in (0,1)");
  }
};

inline nlohmann::json to_json(const SyntheticSpec& s) {
  return {{"d", s.d},
          {"K", s.tasks},
          {"n_per_task", s.n_per_task},
          {"center_scale", s.center_scale},
          {"direction_cosine", s.direction_cosine},
          {"margin", s.margin},
          {"noise_sigma", s.noise_sigma},
          {"pos_rate", s.pos_rate},
          {"seed", s.seed},
          {"model", s.model},
          {"layer", s.layer},
          {"token_position", s.token_position}};
}

// Missing keys keep their defaults.
inline SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  try {
    s.d = j.value("d", s.d);
    s.tasks = j.value("K", s.tasks);
    s.n_per_task = j.value("n_per_task", s.n_per_task);
    s.center_scale = j.value("center_scale", s.center_scale);
    s.direction_cosine = j.value("direction_cosine", s.direction_cosine);
    s.margin = j.value("margin", s.margin);
    s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
    if (j.contains("pos_rate")) {
      if (j["pos_rate"].is_array())
        s.pos_rate = j["pos_rate"].get<std::vector<double>>();
      else
        s.pos_rate = {j["pos_rate"].get<double>()};
    }
    s.seed = j.value("seed", s.seed);
    s.model = j.value("model", s.model);
    s.layer = j.value("layer", s.layer);
    s.token_position = j.value("token_position", s.token_position);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("synthetic spec: ") + e.what());
  }
  s.validate();
  return s;
}

namespace detail {

// Gram-Schmidt of `count` fresh Gaussian vectors against `basis` (and each other).
// A draw whose residual collapses is resampled; ten consecutive failures is an error.
inline void extend_orthonormal(std::vector<Vector>& basis, std::size_t count, std::size_t d,
                               Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t c = 0; c < count; ++c) {
    int failures = 0;
    while (true) {
      Vector v(static_cast<Eigen::Index>(d));
      for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
      // Two passes for numerical orthogonality.
      for (int pass = 0; pass < 2; ++pass)
        for (const auto& b : basis) v -= b.dot(v) * b;
      const double norm = v.norm();
      if (norm > 1e-6) {
        basis.push_back(v / norm);
        break;
      }
      if (++failures >= 10)
        throw NumericalError("degenerate Gram-Schmidt: could not extend orthonormal basis of size " +
                             std::to_string(basis.size()) + " in dimension " + std::to_string(d));
    }
  }
}

struct PlantedGeometry {
  std::vector<Vector> directions;  // v_1..v_K
  std::vector<Vector> centers;     // c_1..c_K
};

inline PlantedGeometry plant(const SyntheticSpec& spec) {
  spec.validate();
  auto rng = make_rng(spec.seed, "synthgen/directions");
  std::vector<Vector> basis;  // u_0, u_1..u_K
  extend_orthonormal(basis, spec.tasks + 1, spec.d, rng);
  const double a = std::sqrt(spec.direction_cosine);
  const double b = std::sqrt(1.0 - spec.direction_cosine);
  PlantedGeometry g;
  for (std::size_t k = 1; k <= spec.tasks; ++k) {
    Vector v = a * basis[0] + b * basis[k];
    g.directions.push_back(v / v.norm());
  }
  if (spec.center_scale > 0.0) {
    auto crng = make_rng(spec.seed, "synthgen/centers");
    std::vector<Vector> cbasis = basis;
    extend_orthonormal(cbasis, spec.tasks, spec.d, crng);
    for (std::size_t k = 0; k < spec.tasks; ++k)
      g.centers.push_back(spec.center_scale * cbasis[spec.tasks + 1 + k]);
  } else {
    g.centers.assign(spec.tasks, Vector::Zero(static_cast<Eigen::Index>(spec.d)));
  }
  return g;
}

}  // namespace detail

inline std::vector<Vector> planted_directions(const SyntheticSpec& spec) {
  return detail::plant(spec).directions;
}

inline std::vector<Vector> planted_centers(const SyntheticSpec& spec) {
  return detail::plant(spec).centers;
}

inline ActivationDataset generate(const SyntheticSpec& spec) {
  const auto geo = detail::plant(spec);
  const auto K = spec.tasks;
  const auto n = K * spec.n_per_task;
  ActivationDataset ds;
  ds.vectors.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(spec.d));
  ds.labels.resize(n);
  ds.task_ids.resize(n);
  for (std::size_t k = 0; k < K; ++k) ds.task_names.push_back("task" + std::to_string(k));
  ds.meta.model = spec.model;
  ds.meta.layer = spec.layer;
  ds.meta.token_position = spec.token_position;

  for (std::size_t k = 0; k < K; ++k) {
    auto rng = make_rng(spec.seed, "synthgen/rows", k);
    std::bernoulli_distribution positive(spec.pos_rate_for(k));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (std::size_t r = 0; r < spec.n_per_task; ++r) {
      const std::size_t i = k * spec.n_per_task + r;
      const int y = positive(rng) ? 1 : -1;
      Vector h = geo.centers[k] + (y * spec.margin) * geo.directions[k];
      if (spec.noise_sigma > 0.0)
        for (Eigen::Index j = 0; j < h.size(); ++j) h[j] += spec.noise_sigma * normal(rng);
      ds.vectors.row(static_cast<Eigen::Index>(i)) = h.cast<float>().transpose();
      ds.labels[i] = static_cast<std::int8_t>(y);
      ds.task_ids[i] = static_cast<std::uint16_t>(k);
    }
  }
  validate(ds);
  return ds;
}

}  // namespace probegeo
