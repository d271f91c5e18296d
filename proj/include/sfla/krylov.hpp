#pragma once

// Krylov solvers over distributed CSR matrices (CG, TFQMR; blocking and
// stream-enqueued variants), Jacobi preconditioning, and batched solvers for
// many small systems sharing one sparsity pattern.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "sfla/mat.hpp"
#include "sfla/stream.hpp"
#include "sfla/vec.hpp"

namespace sfla {

enum class Method { Cg, CgAsync, Tfqmr, TfqmrAsync, BicgBatched, TfqmrBatched };
enum class PcType { None, Jacobi };

struct SolverConfig {
  Method method = Method::Cg;
  double rtol = 1e-8;
  int max_it = 10000;
  int check_stride = 20;  // async variants: host convergence check every c iterations
  PcType pc = PcType::None;

  void validate() const;
};

struct SolveReport {
  int iterations = 0;
  double rel_residual = 0.0;  // recomputed ||b - A x|| / ||b||
  bool converged = false;
  std::uint64_t sync_points = 0;
  std::uint64_t reductions = 0;
  bool breakdown = false;  // batched lanes only; blocking solvers throw instead
  int restarts = 0;        // TFQMR: estimate passed, true residual did not
};

class JacobiPc {
 public:
  /// Collective; throws LinAlgError naming the first zero-diagonal row.
  static JacobiPc setup(const DistCsrMatrix& A);
  /// z = D^{-1} r
  void apply(const DistVector& r, DistVector& z) const;
  void apply_async(DeviceContext& ctx, DistVector& r, DistVector& z);
  const DistVector& inverse_diagonal() const { return inv_; }

 private:
  DistVector inv_;
};

/// x holds the initial guess on entry and the solution on return.
SolveReport solve_cg(const DistCsrMatrix& A, const DistVector& b, DistVector& x, const SolverConfig& config);
SolveReport solve_cg_async(DistCsrMatrix& A, DistVector& b, DistVector& x, const SolverConfig& config,
                           DeviceContext& ctx);
/// Iterations count TFQMR half-steps.
SolveReport solve_tfqmr(const DistCsrMatrix& A, const DistVector& b, DistVector& x, const SolverConfig& config);
SolveReport solve_tfqmr_async(DistCsrMatrix& A, DistVector& b, DistVector& x, const SolverConfig& config,
                              DeviceContext& ctx);

/// Dispatches on config.method; the async methods need ctx.
SolveReport solve(DistCsrMatrix& A, DistVector& b, DistVector& x, const SolverConfig& config,
                  DeviceContext* ctx = nullptr);

// ---------------------------------------------------------------------------
// Small rank-local systems.

struct SmallCsr {
  int n = 0;
  std::vector<std::int64_t> rowptr{0};
  std::vector<std::int64_t> col;
  std::vector<double> val;
};

enum class BatchMethod { Tfqmr, Bicg };

/// B systems sharing one n x n sparsity. values[lane * nnz + s], rhs[lane * n + i].
struct BatchedSystem {
  int batch = 0;
  int n = 0;
  std::vector<std::int64_t> rowptr{0};
  std::vector<std::int64_t> col;
  std::vector<double> values;
  std::vector<double> rhs;

  std::int64_t nnz() const { return static_cast<std::int64_t>(col.size()); }
  SmallCsr lane_matrix(int lane) const;
  void validate() const;
};

struct BatchedResult {
  std::vector<double> x;  // x[lane * n + i]
  std::vector<SolveReport> reports;
};

struct SingleResult {
  std::vector<double> x;
  SolveReport report;
};

/// Plain one-system solver (zero initial guess); the per-lane reference.
SingleResult solve_single(const SmallCsr& A, const std::vector<double>& b, BatchMethod method,
                          const SolverConfig& config);

/// All lanes advance together; converged lanes freeze. Lane breakdowns are
/// flagged in that lane's report. Zero diagonal with Jacobi throws naming the lane.
BatchedResult solve_batched(const BatchedSystem& systems, BatchMethod method, const SolverConfig& config);

/// Stacks the lanes into one block-diagonal system and solves it at once.
BatchedResult solve_ensemble(const BatchedSystem& systems, BatchMethod method, const SolverConfig& config);

}  // namespace sfla
