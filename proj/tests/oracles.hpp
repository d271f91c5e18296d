#pragma once

// Sequential reference implementations used by the unit and acceptance
// tests. None of them call into the library's algorithms.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <stdexcept>
#include <utility>
#include <vector>

namespace oracle {

// ---------------------------------------------------------------------------
// Star forest graph walk

struct Edge {
  int leaf_rank;
  std::int64_t leaf;
  int root_rank;
  std::int64_t root;
};

using PerRank = std::vector<std::vector<double>>;

inline void bcast(const std::vector<Edge>& edges, const PerRank& roots, PerRank& leaves, bool sum) {
  for (const auto& e : edges) {
    double r = roots[static_cast<std::size_t>(e.root_rank)][static_cast<std::size_t>(e.root)];
    double& l = leaves[static_cast<std::size_t>(e.leaf_rank)][static_cast<std::size_t>(e.leaf)];
    l = sum ? l + r : r;
  }
}

/// Contributions reach each root by ascending source rank, then leaf index.
inline void reduce(std::vector<Edge> edges, const PerRank& leaves, PerRank& roots, bool sum) {
  std::stable_sort(edges.begin(), edges.end(), [](const Edge& a, const Edge& b) {
    return std::tie(a.leaf_rank, a.leaf) < std::tie(b.leaf_rank, b.leaf);
  });
  for (const auto& e : edges) {
    double l = leaves[static_cast<std::size_t>(e.leaf_rank)][static_cast<std::size_t>(e.leaf)];
    double& r = roots[static_cast<std::size_t>(e.root_rank)][static_cast<std::size_t>(e.root)];
    r = sum ? r + l : l;
  }
}

// ---------------------------------------------------------------------------
// COO triplet accumulation

struct Coo {
  std::vector<std::int64_t> i, j;
  std::vector<double> v;
};

/// Owner's own entries first (ascending k), then other ranks ascending, each
/// by ascending k. Entries with a negative index are dropped.
inline std::map<std::pair<std::int64_t, std::int64_t>, double> accumulate(const std::vector<Coo>& per_rank,
                                                                            const std::vector<std::int64_t>& starts) {
  const int R = static_cast<int>(per_rank.size());
  auto owner = [&](std::int64_t row) {
    return static_cast<int>(std::upper_bound(starts.begin(), starts.end(), row) - starts.begin()) - 1;
  };
  std::map<std::pair<std::int64_t, std::int64_t>, double> out;
  for (int dest = 0; dest < R; ++dest) {
    std::vector<int> order{dest};
    for (int r = 0; r < R; ++r)
      if (r != dest) order.push_back(r);
    for (int src : order) {
      const auto& c = per_rank[static_cast<std::size_t>(src)];
      for (std::size_t k = 0; k < c.i.size(); ++k) {
        if (c.i[k] < 0 || c.j[k] < 0 || owner(c.i[k]) != dest) continue;
        auto [it, fresh] = out.try_emplace({c.i[k], c.j[k]}, 0.0);
        it->second = it->second + c.v[k];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Direct solvers

/// Banded LU without pivoting (SPD or diagonally dominant input), half
/// bandwidth w. Rows given as (col, value) lists.
inline std::vector<double> banded_solve(std::int64_t n, std::int64_t w,
                                        const std::vector<std::vector<std::pair<std::int64_t, double>>>& rows,
                                        std::vector<double> b) {
  const std::int64_t width = 2 * w + 1;
  std::vector<double> band(static_cast<std::size_t>(n * width), 0.0);
  auto at = [&](std::int64_t i, std::int64_t j) -> double& {
    return band[static_cast<std::size_t>(i * width + (j - i + w))];
  };
  for (std::int64_t i = 0; i < n; ++i)
    for (auto [j, v] : rows[static_cast<std::size_t>(i)]) {
      if (std::abs(j - i) > w) throw std::logic_error("banded_solve: entry outside band");
      at(i, j) += v;
    }
  for (std::int64_t k = 0; k < n; ++k) {
    double piv = at(k, k);
    if (piv == 0.0) throw std::runtime_error("banded_solve: zero pivot");
    for (std::int64_t i = k + 1; i <= std::min(n - 1, k + w); ++i) {
      double f = at(i, k) / piv;
      if (f == 0.0) continue;
      for (std::int64_t j = k; j <= std::min(n - 1, k + w); ++j) at(i, j) -= f * at(k, j);
      b[static_cast<std::size_t>(i)] -= f * b[static_cast<std::size_t>(k)];
    }
  }
  std::vector<double> x(static_cast<std::size_t>(n));
  for (std::int64_t i = n - 1; i >= 0; --i) {
    double acc = b[static_cast<std::size_t>(i)];
    for (std::int64_t j = i + 1; j <= std::min(n - 1, i + w); ++j) acc -= at(i, j) * x[static_cast<std::size_t>(j)];
    x[static_cast<std::size_t>(i)] = acc / at(i, i);
  }
  return x;
}

/// Dense Gaussian elimination with partial pivoting; a is row-major n x n.
inline std::vector<double> dense_solve(std::vector<double> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t k = 0; k < n; ++k) {
    std::size_t p = k;
    for (std::size_t i = k + 1; i < n; ++i)
      if (std::abs(a[i * n + k]) > std::abs(a[p * n + k])) p = i;
    if (a[p * n + k] == 0.0) throw std::runtime_error("dense_solve: singular");
    if (p != k) {
      for (std::size_t j = 0; j < n; ++j) std::swap(a[k * n + j], a[p * n + j]);
      std::swap(b[k], b[p]);
    }
    for (std::size_t i = k + 1; i < n; ++i) {
      double f = a[i * n + k] / a[k * n + k];
      for (std::size_t j = k; j < n; ++j) a[i * n + j] -= f * a[k * n + j];
      b[i] -= f * b[k];
    }
  }
  std::vector<double> x(n);
  for (std::size_t i = n; i-- > 0;) {
    double acc = b[i];
    for (std::size_t j = i + 1; j < n; ++j) acc -= a[i * n + j] * x[j];
    x[i] = acc / a[i * n + i];
  }
  return x;
}

// ---------------------------------------------------------------------------
// Dense BFGS inverse update: H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T

inline std::vector<double> bfgs_dense(std::size_t n, std::vector<double> H,
                                      const std::vector<std::vector<double>>& S,
                                      const std::vector<std::vector<double>>& Y) {
  for (std::size_t p = 0; p < S.size(); ++p) {
    const auto& s = S[p];
    const auto& y = Y[p];
    double sy = 0.0;
    for (std::size_t i = 0; i < n; ++i) sy += s[i] * y[i];
    const double rho = 1.0 / sy;
    std::vector<double> Hy(n, 0.0), yH(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        Hy[i] += H[i * n + j] * y[j];
        yH[j] += y[i] * H[i * n + j];
      }
    double yHy = 0.0;
    for (std::size_t i = 0; i < n; ++i) yHy += y[i] * Hy[i];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        H[i * n + j] += -rho * (s[i] * yH[j] + Hy[i] * s[j]) + (rho * rho * yHy + rho) * s[i] * s[j];
  }
  return H;
}

inline std::vector<double> matvec(std::size_t n, const std::vector<double>& A, const std::vector<double>& x) {
  std::vector<double> y(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) y[i] += A[i * n + j] * x[j];
  return y;
}

/// Q^T Q + shift I with Q uniform in [-1, 1].
inline std::vector<double> random_spd(std::size_t n, double shift, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> Q(n * n), A(n * n, 0.0);
  for (auto& q : Q) q = u(rng);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < n; ++k) acc += Q[k * n + i] * Q[k * n + j];
      A[i * n + j] = acc / static_cast<double>(n) + (i == j ? shift : 0.0);
    }
  return A;
}

inline double rel_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double d = 0.0, r = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    r += b[i] * b[i];
  }
  return r == 0.0 ? std::sqrt(d) : std::sqrt(d / r);
}

}  // namespace oracle
