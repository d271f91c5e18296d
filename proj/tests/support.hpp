#pragma once

#include <cstdint>
#include <cstdlib>
#include <random>
#include <utility>
#include <vector>

#include "sfla/mat.hpp"
#include "sfla/vec.hpp"

namespace testing_support {

/// Collective: every rank receives the full vector.
inline std::vector<double> gather(const sfla::DistVector& v) {
  auto local = v.host_read();
  auto parts = v.layout().comm().allgather(sfla::encode(local));
  std::vector<double> out;
  for (const auto& p : parts) {
    auto d = sfla::decode<double>(p);
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

inline sfla::DistVector scatter(const sfla::Layout& layout, const std::vector<double>& global) {
  sfla::DistVector v(layout);
  auto h = v.host_write();
  for (std::int64_t k = 0; k < layout.local_size(); ++k)
    h[static_cast<std::size_t>(k)] = global[static_cast<std::size_t>(layout.start() + k)];
  return v;
}

using Rows = std::vector<std::vector<std::pair<std::int64_t, double>>>;

/// Dirichlet Laplacian-type stencil written directly from its definition:
/// center weight = neighbor count, -1 per in-grid neighbor.
inline Rows stencil_rows(int dim, int fd, int L) {
  const std::int64_t n = dim == 2 ? std::int64_t{L} * L : std::int64_t{L} * L * L;
  const int nz = dim == 3 ? 1 : 0;
  const int nb = dim == 2 ? (fd ? 8 : 4) : (fd ? 26 : 6);
  Rows rows(static_cast<std::size_t>(n));
  for (std::int64_t r = 0; r < n; ++r) {
    const int x = static_cast<int>(r % L), y = static_cast<int>((r / L) % L), z = static_cast<int>(r / (std::int64_t{L} * L));
    auto& row = rows[static_cast<std::size_t>(r)];
    for (int dz = -nz; dz <= nz; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
          if (manhattan == 0) {
            row.emplace_back(r, static_cast<double>(nb));
            continue;
          }
          if (!fd && manhattan > 1) continue;
          const int X = x + dx, Y = y + dy, Z = z + dz;
          if (X < 0 || X >= L || Y < 0 || Y >= L || Z < 0 || Z >= (dim == 3 ? L : 1)) continue;
          row.emplace_back(X + std::int64_t{L} * (Y + std::int64_t{L} * Z), -1.0);
        }
  }
  return rows;
}

/// Random sparse rows, strictly diagonally dominant; symmetric on request.
inline Rows random_rows(std::mt19937_64& rng, int n, bool symmetric) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), p(0.0, 1.0);
  std::vector<double> dense(static_cast<std::size_t>(n * n), 0.0);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j && p(rng) < 0.2) dense[i * n + j] = u(rng);
  if (symmetric)
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < i; ++j) dense[i * n + j] = dense[j * n + i];
  Rows rows(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int j = 0; j < n; ++j) s += std::abs(dense[i * n + j]);
    dense[i * n + i] = s + 0.5 + p(rng);
    for (int j = 0; j < n; ++j)
      if (dense[i * n + j] != 0.0) rows[i].emplace_back(j, dense[i * n + j]);
  }
  return rows;
}

/// Square matrix from global rows; each rank inserts only the rows it owns.
inline sfla::DistCsrMatrix assemble(const sfla::Layout& l, const Rows& rows) {
  std::vector<std::int64_t> i, j;
  std::vector<double> v;
  for (std::int64_t r = l.start(); r < l.end(); ++r)
    for (auto [c, x] : rows[static_cast<std::size_t>(r)]) {
      i.push_back(r);
      j.push_back(c);
      v.push_back(x);
    }
  sfla::DistCsrMatrix A(l, l);
  A.set_preallocation_coo(i, j);
  A.set_values_coo(v, sfla::InsertMode::Insert);
  return A;
}

}  // namespace testing_support
