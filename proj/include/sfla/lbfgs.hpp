#pragma once

// Limited-memory BFGS inverse-Hessian application. The history lives in a
// ring buffer of distributed vectors; the small m x m quantities (S^T Y, its
// triangle and diagonal) are replicated on every rank.

#include <cstdint>
#include <functional>
#include <vector>

#include "sfla/vec.hpp"

namespace sfla {

enum class Formulation { Recursive, CompactDense, IntermediateDense };

/// Symmetric positive definite base operator: out = H0 in.
using BaseOperator = std::function<void(const DistVector& in, DistVector& out)>;

struct LbfgsOptions {
  double curvature_eps = 1e-12;  // reject s^T y <= eps ||s|| ||y||
  bool track_compact = true;     // maintain W = H0 Y and W^T Y across updates
};

struct LbfgsCounters {
  std::uint64_t reductions = 0;
  std::uint64_t h0_calls = 0;
  std::uint64_t h0_refresh_calls = 0;  // compact-dense W rebuilds after H0 changed
};

class LbfgsState {
 public:
  /// h0 defaults to the identity.
  LbfgsState(Layout layout, int m, BaseOperator h0 = {}, LbfgsOptions options = {});

  /// Collective. Returns false (state unchanged) when the curvature gate rejects the pair.
  bool update(const DistVector& s, const DistVector& y);

  /// Collective. p = H_k g.
  void apply(const DistVector& g, DistVector& p, Formulation f);

  /// Replaces the base operator; compact-dense caches are rebuilt on next use.
  void set_base(BaseOperator h0);

  int capacity() const { return m_; }
  int size() const { return k_; }
  const Layout& layout() const { return layout_; }

  /// Logical order, oldest first.
  const DistVector& s(int j) const { return S_[slot(j)]; }
  const DistVector& y(int j) const { return Y_[slot(j)]; }
  /// k x k row-major, entry (i, j) = s_i^T y_j.
  const std::vector<double>& sty() const { return sty_; }
  std::vector<double> d() const;
  std::vector<double> r_matrix() const;  // triu(S^T Y), k x k row-major
  /// Collective oracle: S^T Y recomputed from the stored vectors.
  std::vector<double> recompute_sty() const;

  const LbfgsCounters& last_apply() const { return last_; }
  const LbfgsCounters& last_update() const { return last_update_; }
  const LbfgsCounters& totals() const { return total_; }

 private:
  std::size_t slot(int j) const { return static_cast<std::size_t>((head_ + j) % m_); }
  void base(const DistVector& in, DistVector& out, LbfgsCounters& c, bool refresh = false);
  std::vector<double> reduce(std::vector<double> partial, LbfgsCounters& c) const;
  void refresh_compact(LbfgsCounters& c);

  void apply_recursive(const DistVector& g, DistVector& p, LbfgsCounters& c);
  void apply_compact(const DistVector& g, DistVector& p, LbfgsCounters& c);
  void apply_intermediate(const DistVector& g, DistVector& p, LbfgsCounters& c);

  // Triangular solves with R = triu(S^T Y).
  std::vector<double> solve_r(std::vector<double> a) const;
  std::vector<double> solve_rt(std::vector<double> c) const;

  Layout layout_;
  int m_;
  int k_ = 0;
  int head_ = 0;
  BaseOperator h0_;
  LbfgsOptions options_;
  std::uint64_t h0_version_ = 0;

  std::vector<DistVector> S_, Y_, W_;
  std::vector<double> sty_;  // k x k
  std::vector<double> wty_;  // k x k, valid when w_version_ == h0_version_
  std::uint64_t w_version_ = 0;
  bool w_valid_ = true;

  LbfgsCounters last_, last_update_, total_;
};

/// Scalar elements moved per update-and-apply over elapsed time: n(2m+2)/(t_update+t_solve).
double effective_bandwidth(double n, double m, double t_update, double t_solve);
/// Same, in bytes per second at 8 bytes per element.
double effective_bandwidth_bytes(double n, double m, double t_update, double t_solve);

}  // namespace sfla
