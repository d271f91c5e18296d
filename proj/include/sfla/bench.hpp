#pragma once

// Benchmark harness: structured-grid problem generators, repetition
// statistics, CSV output, and the individual benchmarks driven by sfla-bench.

#include <cstdint>
#include <iosfwd>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "sfla/krylov.hpp"
#include "sfla/lbfgs.hpp"
#include "sfla/mat.hpp"

namespace sfla::bench {

inline constexpr int kSchemaVersion = 1;

/// A benchmark's correctness oracle failed; nothing was timed.
class OracleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Stencil problems

struct StencilSpec {
  int dim = 2;      // 2 or 3
  int fd = 0;       // 0: axis neighbors only, 1: full box neighborhood
  int extent = 32;  // grid points per axis

  std::int64_t rows() const;
  /// 5 or 9 in 2-D, 7 or 27 in 3-D.
  int points() const;
  void validate() const;
};

struct StencilProblem {
  StencilSpec spec;
  DistCsrMatrix A;
  DistVector b;
};

/// Grid offsets of the off-center stencil points, in ascending linear order.
std::vector<std::vector<int>> stencil_offsets(const StencilSpec& spec);
double stencil_rhs(std::int64_t row);

/// Collective. Each rank writes its own rows' contributions into one COO
/// buffer; neighbors outside the grid get a negative column (Dirichlet).
StencilProblem make_stencil(const Communicator& comm, const StencilSpec& spec);

// ---------------------------------------------------------------------------
// Records and output

struct Stats {
  double mean = 0.0;
  double min = 0.0;
  double p50 = 0.0;
  int used = 0;
};

/// Drops reps[0] as warm-up; needs at least 5 reps.
Stats summarize(const std::vector<double>& reps);

struct BenchRecord {
  std::string benchmark;
  std::vector<std::pair<std::string, std::string>> params;
  std::vector<double> reps;  // seconds, including the warm-up rep
  std::vector<std::pair<std::string, std::string>> derived;
};

/// Header: schema_version,benchmark,<params>,reps,mean_s,min_s,p50_s,<derived>.
/// All records must share one column set.
void write_csv(std::ostream& out, const std::vector<BenchRecord>& records);
void write_csv_file(const std::string& path, const std::vector<BenchRecord>& records);
void write_meta_file(const std::string& path, const std::map<std::string, std::string>& meta);

// ---------------------------------------------------------------------------
// Benchmarks. Each checks its oracle first and throws OracleError on mismatch.

struct SfBenchOptions {
  int ranks = 2;
  std::vector<std::int64_t> sizes{1, 8, 64, 512, 4096, 32768};
  int iters = 1000;
  int reps = 5;
};

/// One-way latency of bcast+reduce round trips over a one-to-one forest.
std::vector<BenchRecord> sf_pingpong(const SfBenchOptions& options);
/// As sf_pingpong with SUM, so every iteration changes the data.
std::vector<BenchRecord> sf_unpack(const SfBenchOptions& options);

struct LaunchBenchOptions {
  std::size_t count = 100000;
  int reps = 5;
};

/// Records for mode=async then mode=sync_each; reps are per-launch means.
std::vector<BenchRecord> launch_latency(const LaunchBenchOptions& options);

struct SolveBenchOptions {
  int ranks = 1;
  std::vector<StencilSpec> problems{{2, 0, 16}, {2, 0, 32}, {2, 1, 32}, {3, 0, 12}, {3, 1, 12}};
  std::vector<Method> methods{Method::Cg, Method::CgAsync};
  double rtol = 1e-8;
  int max_it = 10000;
  int check_stride = 20;
  PcType pc = PcType::None;
  int reps = 5;
};

std::vector<BenchRecord> solve(const SolveBenchOptions& options);

struct BatchBenchOptions {
  std::vector<int> batches{1, 8, 32, 128};
  int nb = 16;
  BatchMethod method = BatchMethod::Tfqmr;
  PcType pc = PcType::Jacobi;
  double rtol = 1e-10;
  std::uint64_t seed = 1;
  int reps = 5;
};

/// Random diagonally dominant systems on a 2-D 5-point pattern with nb rows.
BatchedSystem make_batch(int batch, int nb, std::uint64_t seed);
/// Records for solver=batched, ensemble, solo per batch size.
std::vector<BenchRecord> batch(const BatchBenchOptions& options);

struct LbfgsBenchOptions {
  int ranks = 8;
  std::vector<std::int64_t> sizes{1000, 10000, 100000};
  std::vector<int> memories{5, 10, 20, 50};
  std::vector<Formulation> formulations{Formulation::Recursive, Formulation::CompactDense,
                                        Formulation::IntermediateDense};
  int iters = 100;
  int reps = 5;
  std::uint64_t seed = 1;
};

/// Reps hold the mean update-plus-apply time per iteration.
std::vector<BenchRecord> lbfgs(const LbfgsBenchOptions& options);

std::string to_string(Method m);
std::string to_string(BatchMethod m);
std::string to_string(Formulation f);
std::string to_string(const StencilSpec& s);

}  // namespace sfla::bench
