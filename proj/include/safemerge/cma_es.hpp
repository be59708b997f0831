#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "safemerge/common.hpp"
#include "safemerge/rng.hpp"

namespace safemerge {

// Box-constrained search domain.
struct SearchSpace {
  std::vector<std::string> names;
  std::vector<double> lower;
  std::vector<double> upper;

  std::size_t dim() const { return names.size(); }

  void validate() const {
    if (names.empty() || lower.size() != names.size() || upper.size() != names.size()) {
      throw ValidationError("search space must have matching non-empty name/bound lists");
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (!(lower[i] < upper[i])) {
        throw ValidationError("search space bound lower >= upper for '" + names[i] + "'");
      }
    }
  }

  std::vector<double> clip(std::vector<double> x) const {
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = std::clamp(x[i], lower[i], upper[i]);
    }
    return x;
  }

  std::vector<double> midpoint() const {
    std::vector<double> x(dim());
    for (std::size_t i = 0; i < dim(); ++i) x[i] = 0.5 * (lower[i] + upper[i]);
    return x;
  }
};

// Default population p = 4 + floor(3 ln n).
inline int cma_default_population(int n) {
  if (n < 1) throw ValidationError("dimension must be positive");
  return 4 + static_cast<int>(std::floor(3.0 * std::log(static_cast<double>(n))));
}

struct CmaHistoryRow {
  int generation = 0;
  double best_f = 0.0;   // best so far
  double mean_f = 0.0;   // population mean of this generation
  double sigma = 0.0;
};

struct CmaResult {
  std::vector<double> best_x;
  double best_f = std::numeric_limits<double>::infinity();
  std::vector<CmaHistoryRow> history;
  int discarded = 0;  // candidates with non-finite objective values
};

// Standard (mu/mu_w, lambda)-CMA-ES with cumulative step-size adaptation and
// rank-one plus rank-mu covariance updates. Sampled candidates are clipped to
// the box before evaluation; non-finite objective values rank last with an
// infinite penalty. Fully deterministic given the seed.
inline CmaResult cma_es_minimize(const std::function<double(const std::vector<double>&)>& objective,
                                 const SearchSpace& space, const std::vector<double>& x0,
                                 double sigma0, int generations, std::uint64_t seed,
                                 int population = 0) {
  space.validate();
  const int n = static_cast<int>(space.dim());
  if (static_cast<int>(x0.size()) != n) throw ValidationError("x0 dimension mismatch");
  for (int i = 0; i < n; ++i) {
    if (x0[i] < space.lower[i] || x0[i] > space.upper[i]) {
      throw ValidationError("x0 outside the search box");
    }
  }
  if (!(sigma0 > 0.0)) throw ValidationError("sigma0 must be positive");
  const int p = population > 0 ? population : cma_default_population(n);
  const int mu = p / 2;

  // Recombination weights and strategy constants (standard defaults in n, p).
  std::vector<double> weights(mu);
  for (int i = 0; i < mu; ++i) {
    weights[i] = std::log(static_cast<double>(p + 1) / 2.0) - std::log(static_cast<double>(i + 1));
  }
  double wsum = std::accumulate(weights.begin(), weights.end(), 0.0);
  for (double& w : weights) w /= wsum;
  double mueff = 0.0;
  for (double w : weights) mueff += w * w;
  mueff = 1.0 / mueff;

  const double nd = static_cast<double>(n);
  const double c_sigma = (mueff + 2.0) / (nd + mueff + 5.0);
  const double d_sigma =
      1.0 + 2.0 * std::max(0.0, std::sqrt((mueff - 1.0) / (nd + 1.0)) - 1.0) + c_sigma;
  const double c_c = (4.0 + mueff / nd) / (nd + 4.0 + 2.0 * mueff / nd);
  const double c_1 = 2.0 / ((nd + 1.3) * (nd + 1.3) + mueff);
  const double c_mu = std::min(1.0 - c_1, 2.0 * (mueff - 2.0 + 1.0 / mueff) /
                                              ((nd + 2.0) * (nd + 2.0) + mueff));
  const double chi_n = std::sqrt(nd) * (1.0 - 1.0 / (4.0 * nd) + 1.0 / (21.0 * nd * nd));

  Eigen::VectorXd mean = Eigen::Map<const Eigen::VectorXd>(x0.data(), n);
  double sigma = sigma0;
  Eigen::MatrixXd C = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd p_sigma = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd p_c = Eigen::VectorXd::Zero(n);
  Eigen::MatrixXd B = Eigen::MatrixXd::Identity(n, n);
  Eigen::VectorXd D = Eigen::VectorXd::Ones(n);

  Rng rng = Rng(seed).substream("cma-es");
  CmaResult result;

  for (int gen = 0; gen < generations; ++gen) {
    // Eigendecomposition with eigenvalue flooring keeps C positive definite.
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(C);
    D = eig.eigenvalues().cwiseMax(1e-14).cwiseSqrt();
    B = eig.eigenvectors();

    std::vector<Eigen::VectorXd> xs(p), ys(p);
    std::vector<double> fs(p);
    double mean_f = 0.0;
    for (int k = 0; k < p; ++k) {
      Eigen::VectorXd z(n);
      for (int i = 0; i < n; ++i) z[i] = rng.normal();
      Eigen::VectorXd x = mean + sigma * (B * (D.asDiagonal() * z));
      std::vector<double> xv = space.clip(std::vector<double>(x.data(), x.data() + n));
      x = Eigen::Map<const Eigen::VectorXd>(xv.data(), n);
      double f = objective(xv);
      if (!std::isfinite(f)) {
        f = std::numeric_limits<double>::infinity();
        ++result.discarded;
      }
      xs[k] = x;
      ys[k] = (x - mean) / sigma;  // post-clip displacement drives the update
      fs[k] = f;
      mean_f += f;
      if (f < result.best_f) {
        result.best_f = f;
        result.best_x = xv;
      }
    }
    mean_f /= static_cast<double>(p);

    double gen_best = *std::min_element(fs.begin(), fs.end());
    if (!std::isfinite(gen_best)) {
      // Entirely infeasible generation: ranking is meaningless, so widen the
      // search instead of adapting on arbitrary ties.
      sigma = std::min(sigma * 2.0, 10.0 * sigma0);
      result.history.push_back({gen + 1, result.best_f, mean_f, sigma});
      continue;
    }

    std::vector<int> order(p);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return fs[a] < fs[b]; });

    Eigen::VectorXd y_w = Eigen::VectorXd::Zero(n);
    for (int i = 0; i < mu; ++i) y_w += weights[i] * ys[order[i]];
    mean += sigma * y_w;

    // C^{-1/2} (m' - m) / sigma
    Eigen::VectorXd c_inv_sqrt_yw = B * (D.cwiseInverse().asDiagonal() * (B.transpose() * y_w));
    p_sigma = (1.0 - c_sigma) * p_sigma +
              std::sqrt(c_sigma * (2.0 - c_sigma) * mueff) * c_inv_sqrt_yw;
    double ps_norm = p_sigma.norm();
    bool h_sigma = ps_norm / std::sqrt(1.0 - std::pow(1.0 - c_sigma, 2.0 * (gen + 1))) <
                   (1.4 + 2.0 / (nd + 1.0)) * chi_n;
    p_c = (1.0 - c_c) * p_c +
          (h_sigma ? std::sqrt(c_c * (2.0 - c_c) * mueff) : 0.0) * y_w;

    Eigen::MatrixXd rank_mu = Eigen::MatrixXd::Zero(n, n);
    for (int i = 0; i < mu; ++i) {
      rank_mu += weights[i] * (ys[order[i]] * ys[order[i]].transpose());
    }
    double delta_h = h_sigma ? 0.0 : c_1 * c_c * (2.0 - c_c);
    C = (1.0 - c_1 - c_mu + delta_h) * C + c_1 * (p_c * p_c.transpose()) + c_mu * rank_mu;
    C = 0.5 * (C + C.transpose().eval());  // keep symmetric

    sigma *= std::exp((c_sigma / d_sigma) * (ps_norm / chi_n - 1.0));

    result.history.push_back({gen + 1, result.best_f, mean_f, sigma});
  }
  return result;
}

}  // namespace safemerge
