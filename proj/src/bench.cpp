#include "sfla/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

namespace sfla::bench {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string num(std::int64_t v) { return std::to_string(v); }

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

}  // namespace

// ---------------------------------------------------------------------------
// Stencils

std::int64_t StencilSpec::rows() const {
  std::int64_t n = 1;
  for (int d = 0; d < dim; ++d) n *= extent;
  return n;
}

int StencilSpec::points() const {
  if (dim == 2) return fd ? 9 : 5;
  return fd ? 27 : 7;
}

void StencilSpec::validate() const {
  if (dim != 2 && dim != 3) throw std::invalid_argument("stencil: dimension must be 2 or 3");
  if (fd != 0 && fd != 1) throw std::invalid_argument("stencil: fd flag must be 0 or 1");
  if (extent < 2) throw std::invalid_argument("stencil: extent must be at least 2");
}

std::vector<std::vector<int>> stencil_offsets(const StencilSpec& spec) {
  std::vector<std::vector<int>> out;
  int zlo = spec.dim == 3 ? -1 : 0, zhi = spec.dim == 3 ? 1 : 0;
  for (int dz = zlo; dz <= zhi; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        int nonzero = (dx != 0) + (dy != 0) + (dz != 0);
        if (nonzero == 0) continue;
        if (spec.fd == 0 && nonzero != 1) continue;
        if (spec.dim == 3)
          out.push_back({dx, dy, dz});
        else
          out.push_back({dx, dy});
      }
  return out;
}

double stencil_rhs(std::int64_t row) { return 1.0 + static_cast<double>((row * 37) % 11) / 11.0; }

StencilProblem make_stencil(const Communicator& comm, const StencilSpec& spec) {
  spec.validate();
  Layout rows = Layout::uniform(comm, spec.rows());
  auto offsets = stencil_offsets(spec);
  const std::int64_t L = spec.extent;
  const double center = static_cast<double>(offsets.size());

  std::vector<std::int64_t> ci, cj;
  std::vector<double> cv;
  std::size_t per_row = offsets.size() + 1;
  ci.reserve(static_cast<std::size_t>(rows.local_size()) * per_row);
  cj.reserve(ci.capacity());
  cv.reserve(ci.capacity());
  for (std::int64_t r = rows.start(); r < rows.end(); ++r) {
    std::int64_t c[3] = {r % L, (r / L) % L, r / (L * L)};
    ci.push_back(r);
    cj.push_back(r);
    cv.push_back(center);
    for (const auto& off : offsets) {
      std::int64_t col = 0, stride = 1;
      bool inside = true;
      for (int d = 0; d < spec.dim; ++d) {
        std::int64_t x = c[d] + off[static_cast<std::size_t>(d)];
        if (x < 0 || x >= L) inside = false;
        col += x * stride;
        stride *= L;
      }
      ci.push_back(r);
      cj.push_back(inside ? col : -1);
      cv.push_back(-1.0);
    }
  }

  StencilProblem p{spec, DistCsrMatrix(rows, rows), DistVector(rows)};
  p.A.set_preallocation_coo(ci, cj);
  p.A.set_values_coo(cv, InsertMode::Insert);
  auto b = p.b.host_write();
  for (std::int64_t k = 0; k < rows.local_size(); ++k) b[static_cast<std::size_t>(k)] = stencil_rhs(rows.start() + k);
  return p;
}

// ---------------------------------------------------------------------------
// Records

Stats summarize(const std::vector<double>& reps) {
  if (reps.size() < 5) throw std::invalid_argument("summarize: need at least 5 repetitions");
  std::vector<double> v(reps.begin() + 1, reps.end());
  Stats s;
  s.used = static_cast<int>(v.size());
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  std::sort(v.begin(), v.end());
  s.min = v.front();
  std::size_t h = v.size() / 2;
  s.p50 = v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
  return s;
}

void write_csv(std::ostream& out, const std::vector<BenchRecord>& records) {
  if (records.empty()) return;
  const auto& first = records.front();
  auto keys = [](const auto& kv) {
    std::vector<std::string> k;
    for (const auto& [name, value] : kv) k.push_back(name);
    return k;
  };
  auto pkeys = keys(first.params);
  auto dkeys = keys(first.derived);
  out << "schema_version,benchmark";
  for (const auto& k : pkeys) out << ',' << k;
  out << ",reps,mean_s,min_s,p50_s";
  for (const auto& k : dkeys) out << ',' << k;
  out << '\n';
  for (const auto& r : records) {
    if (keys(r.params) != pkeys || keys(r.derived) != dkeys)
      throw std::invalid_argument("write_csv: records do not share one column set");
    Stats s = summarize(r.reps);
    out << kSchemaVersion << ',' << r.benchmark;
    for (const auto& [k, v] : r.params) out << ',' << v;
    out << ',' << s.used << ',' << num(s.mean) << ',' << num(s.min) << ',' << num(s.p50);
    for (const auto& [k, v] : r.derived) out << ',' << v;
    out << '\n';
  }
}

void write_csv_file(const std::string& path, const std::vector<BenchRecord>& records) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  write_csv(f, records);
}

void write_meta_file(const std::string& path, const std::map<std::string, std::string>& meta) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  f << "schema_version=" << kSchemaVersion << '\n';
  for (const auto& [k, v] : meta) f << k << '=' << v << '\n';
}

std::string to_string(Method m) {
  switch (m) {
    case Method::Cg: return "cg";
    case Method::CgAsync: return "cg_async";
    case Method::Tfqmr: return "tfqmr";
    case Method::TfqmrAsync: return "tfqmr_async";
    case Method::BicgBatched: return "bicg_batched";
    case Method::TfqmrBatched: return "tfqmr_batched";
  }
  return "?";
}

std::string to_string(BatchMethod m) { return m == BatchMethod::Tfqmr ? "tfqmr" : "bicg"; }

std::string to_string(Formulation f) {
  switch (f) {
    case Formulation::Recursive: return "recursive";
    case Formulation::CompactDense: return "compact";
    case Formulation::IntermediateDense: return "intermediate";
  }
  return "?";
}

std::string to_string(const StencilSpec& s) {
  return std::to_string(s.dim) + "d-" + std::to_string(s.points()) + "pt-" + std::to_string(s.extent);
}

// ---------------------------------------------------------------------------
// Star-forest latency

namespace {

struct SfRun {
  bool ok = true;
  std::string failure;
  std::vector<double> reps;
};

double sf_root_init(std::int64_t k) { return 1.0 + 1e-3 * static_cast<double>(k); }
constexpr double kLeafInit = 0.5;

std::vector<BenchRecord> sf_latency(const SfBenchOptions& o, ReduceOp op, const char* name) {
  if (o.ranks != 2) throw std::invalid_argument(std::string(name) + ": needs exactly 2 ranks");
  if (o.iters < 1 || o.reps < 5) throw std::invalid_argument(std::string(name) + ": need iters >= 1 and reps >= 5");
  std::vector<BenchRecord> out;
  for (std::int64_t n : o.sizes) {
    if (n < 0) throw std::invalid_argument(std::string(name) + ": sizes must be nonnegative");
    auto runs = spawn_world(2, [&](Communicator& comm) {
      SfRun run;
      const bool root_side = comm.rank() == 0;
      std::vector<LeafSpec> leaves;
      if (!root_side)
        for (std::int64_t k = 0; k < n; ++k) leaves.push_back({k, 0, k});
      StarForest sf(comm, root_side ? n : 0, leaves);
      std::vector<double> root(static_cast<std::size_t>(root_side ? n : 0));
      std::vector<double> leaf(static_cast<std::size_t>(root_side ? 0 : n));
      auto reset = [&] {
        for (std::size_t k = 0; k < root.size(); ++k) root[k] = sf_root_init(static_cast<std::int64_t>(k));
        std::fill(leaf.begin(), leaf.end(), op == ReduceOp::Sum ? kLeafInit : 0.0);
      };
      auto loop = [&] {
        for (int it = 0; it < o.iters; ++it) {
          sf.bcast<double>(root, leaf, op);
          sf.reduce<double>(leaf, root, op);
        }
      };

      reset();
      loop();
      // Sequential oracle for the data each side ends up holding.
      bool ok = true;
      for (std::int64_t k = 0; k < n && ok; ++k) {
        double r = sf_root_init(k), l = op == ReduceOp::Sum ? kLeafInit : 0.0;
        for (int it = 0; it < o.iters; ++it) {
          if (op == ReduceOp::Sum) {
            l += r;
            r += l;
          } else {
            l = r;
            r = l;
          }
        }
        double got = root_side ? root[static_cast<std::size_t>(k)] : leaf[static_cast<std::size_t>(k)];
        if (!same_bits(got, root_side ? r : l)) ok = false;
      }
      run.ok = comm.allreduce(ok ? 0.0 : 1.0) == 0.0;
      if (!run.ok) {
        run.failure = std::string(name) + ": transported data differs from the sequential oracle at size " + num(n);
        return run;
      }

      for (int rep = 0; rep < o.reps; ++rep) {
        reset();
        comm.barrier();
        auto t0 = Clock::now();
        loop();
        run.reps.push_back(seconds_since(t0) / (2.0 * o.iters));
      }
      return run;
    });
    if (!runs[0].ok) throw OracleError(runs[0].failure);
    BenchRecord r;
    r.benchmark = name;
    r.params = {{"ranks", "2"}, {"op", op == ReduceOp::Sum ? "sum" : "replace"}, {"n", num(n)},
                {"bytes", num(n * static_cast<std::int64_t>(sizeof(double)))}, {"iters", std::to_string(o.iters)}};
    r.reps = runs[0].reps;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

std::vector<BenchRecord> sf_pingpong(const SfBenchOptions& options) {
  return sf_latency(options, ReduceOp::Replace, "sf-pingpong");
}

std::vector<BenchRecord> sf_unpack(const SfBenchOptions& options) {
  return sf_latency(options, ReduceOp::Sum, "sf-unpack");
}

// ---------------------------------------------------------------------------
// Launch latency

std::vector<BenchRecord> launch_latency(const LaunchBenchOptions& o) {
  if (o.count < 1 || o.reps < 5) throw std::invalid_argument("launch-latency: need count >= 1 and reps >= 5");
  Device dev;
  std::vector<double> async_reps, sync_reps;
  for (int rep = 0; rep < o.reps; ++rep) {
    for (LaunchMode mode : {LaunchMode::Async, LaunchMode::SyncEach}) {
      auto before = dev.stats().tasks_run;
      double t = measure_submit_latency(dev, mode, o.count);
      if (dev.stats().tasks_run - before != o.count)
        throw OracleError("launch-latency: executed task count differs from submitted count");
      (mode == LaunchMode::Async ? async_reps : sync_reps).push_back(t);
    }
  }
  std::vector<BenchRecord> out;
  for (int k = 0; k < 2; ++k) {
    BenchRecord r;
    r.benchmark = "launch-latency";
    r.params = {{"mode", k == 0 ? "async" : "sync_each"}, {"count", std::to_string(o.count)},
                {"workers", std::to_string(dev.workers())}};
    r.reps = k == 0 ? async_reps : sync_reps;
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stencil solves

namespace {

struct SolveRun {
  bool ok = true;
  std::string failure;
  std::int64_t nnz = 0;
  SolveReport report;
  std::vector<double> reps;
};

bool is_async(Method m) { return m == Method::CgAsync || m == Method::TfqmrAsync; }

}  // namespace

std::vector<BenchRecord> solve(const SolveBenchOptions& o) {
  if (o.ranks < 1 || o.ranks > 8) throw std::invalid_argument("solve: ranks must be in [1, 8]");
  if (o.reps < 5) throw std::invalid_argument("solve: need reps >= 5");
  for (Method m : o.methods)
    if (m == Method::BicgBatched || m == Method::TfqmrBatched)
      throw std::invalid_argument("solve: batched methods belong to batch-bench");
  for (const auto& p : o.problems) p.validate();

  std::vector<BenchRecord> out;
  for (const auto& spec : o.problems) {
    for (Method method : o.methods) {
      SolverConfig cfg;
      cfg.method = method;
      cfg.rtol = o.rtol;
      cfg.max_it = o.max_it;
      cfg.check_stride = o.check_stride;
      cfg.pc = o.pc;
      cfg.validate();
      auto runs = spawn_world(o.ranks, [&](Communicator& comm) {
        SolveRun run;
        StencilProblem prob = make_stencil(comm, spec);
        run.nnz = prob.A.global_nnz();
        std::optional<Device> dev;
        if (is_async(method)) dev.emplace();
        for (int rep = 0; rep < o.reps; ++rep) {
          DistVector x(prob.A.row_layout());
          std::optional<DeviceContext> ctx;
          if (dev) ctx = dev->create_context();
          comm.barrier();
          auto t0 = Clock::now();
          SolveReport sr = sfla::solve(prob.A, prob.b, x, cfg, ctx ? &*ctx : nullptr);
          comm.barrier();
          double t = seconds_since(t0);
          if (!sr.converged || !(sr.rel_residual <= o.rtol)) {
            run.ok = false;
            run.failure = "solve: " + to_string(method) + " on " + to_string(spec) +
                          " did not reach rtol (residual " + num(sr.rel_residual) + ")";
            return run;
          }
          run.report = sr;
          run.reps.push_back(t);
        }
        return run;
      });
      if (!runs[0].ok) throw OracleError(runs[0].failure);
      BenchRecord r;
      r.benchmark = "solve";
      r.params = {{"problem", to_string(spec)}, {"method", to_string(method)}, {"ranks", std::to_string(o.ranks)},
                  {"rtol", num(o.rtol)}, {"check_stride", std::to_string(o.check_stride)}};
      r.reps = runs[0].reps;
      const auto& rep = runs[0].report;
      r.derived = {{"rows", num(spec.rows())},
                   {"nnz", num(runs[0].nnz)},
                   {"iterations", std::to_string(rep.iterations)},
                   {"rel_residual", num(rep.rel_residual)},
                   {"sync_points", std::to_string(rep.sync_points)},
                   {"reductions", std::to_string(rep.reductions)}};
      out.push_back(std::move(r));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batched solves

BatchedSystem make_batch(int batch, int nb, std::uint64_t seed) {
  if (batch < 1 || nb < 1) throw std::invalid_argument("make_batch: batch and nb must be positive");
  BatchedSystem sys;
  sys.batch = batch;
  sys.n = nb;
  int w = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(nb))));
  for (int i = 0; i < nb; ++i) {
    std::vector<std::int64_t> cols;
    if (i - w >= 0) cols.push_back(i - w);
    if (i % w != 0) cols.push_back(i - 1);
    cols.push_back(i);
    if ((i + 1) % w != 0 && i + 1 < nb) cols.push_back(i + 1);
    if (i + w < nb) cols.push_back(i + w);
    sys.col.insert(sys.col.end(), cols.begin(), cols.end());
    sys.rowptr.push_back(static_cast<std::int64_t>(sys.col.size()));
  }
  const auto nnz = static_cast<std::size_t>(sys.nnz());
  sys.values.resize(nnz * static_cast<std::size_t>(batch));
  sys.rhs.resize(static_cast<std::size_t>(nb) * static_cast<std::size_t>(batch));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> off(-1.0, -0.1), unit(-1.0, 1.0), expo(-2.0, 1.0);
  for (int l = 0; l < batch; ++l) {
    // Lanes get different diagonal margins, hence different iteration counts.
    double margin = std::pow(10.0, expo(rng));
    double* v = sys.values.data() + static_cast<std::size_t>(l) * nnz;
    for (int i = 0; i < nb; ++i) {
      double sum = 0.0;
      std::int64_t diag = -1;
      for (auto s = sys.rowptr[static_cast<std::size_t>(i)]; s < sys.rowptr[static_cast<std::size_t>(i) + 1]; ++s) {
        if (sys.col[static_cast<std::size_t>(s)] == i) {
          diag = s;
          continue;
        }
        v[s] = off(rng);
        sum += std::abs(v[s]);
      }
      v[diag] = sum * (1.0 + margin) + 1e-3;
    }
    for (int i = 0; i < nb; ++i) sys.rhs[static_cast<std::size_t>(l * nb + i)] = unit(rng);
  }
  return sys;
}

std::vector<BenchRecord> batch(const BatchBenchOptions& o) {
  if (o.reps < 5) throw std::invalid_argument("batch-bench: need reps >= 5");
  SolverConfig cfg;
  cfg.method = o.method == BatchMethod::Tfqmr ? Method::TfqmrBatched : Method::BicgBatched;
  cfg.rtol = o.rtol;
  cfg.pc = o.pc;
  cfg.validate();

  std::vector<BenchRecord> out;
  for (int B : o.batches) {
    BatchedSystem sys = make_batch(B, o.nb, o.seed + static_cast<std::uint64_t>(B));
    BatchedResult batched = solve_batched(sys, o.method, cfg);
    int max_lane_it = 0;
    for (int l = 0; l < B; ++l) {
      SmallCsr A = sys.lane_matrix(l);
      std::vector<double> b(sys.rhs.begin() + l * o.nb, sys.rhs.begin() + (l + 1) * o.nb);
      SingleResult solo = solve_single(A, b, o.method, cfg);
      const auto& lr = batched.reports[static_cast<std::size_t>(l)];
      if (!lr.converged || lr.iterations != solo.report.iterations)
        throw OracleError("batch-bench: lane " + std::to_string(l) + " disagrees with its solo solve (" +
                          std::to_string(lr.iterations) + " vs " + std::to_string(solo.report.iterations) +
                          " iterations, converged " + std::to_string(lr.converged) + "/" +
                          std::to_string(solo.report.converged) + ")");
      double diff = 0.0, ref = 0.0;
      for (int i = 0; i < o.nb; ++i) {
        double d = batched.x[static_cast<std::size_t>(l * o.nb + i)] - solo.x[static_cast<std::size_t>(i)];
        diff += d * d;
        ref += solo.x[static_cast<std::size_t>(i)] * solo.x[static_cast<std::size_t>(i)];
      }
      if (std::sqrt(diff) > 1e-10 * std::sqrt(ref))
        throw OracleError("batch-bench: lane " + std::to_string(l) + " solution differs from its solo solve");
      max_lane_it = std::max(max_lane_it, lr.iterations);
    }
    BatchedResult ens = solve_ensemble(sys, o.method, cfg);
    if (!ens.reports.front().converged) throw OracleError("batch-bench: ensemble solve did not converge");

    std::vector<double> t_batched, t_ensemble, t_solo;
    for (int rep = 0; rep < o.reps; ++rep) {
      auto t0 = Clock::now();
      solve_batched(sys, o.method, cfg);
      t_batched.push_back(seconds_since(t0));
      t0 = Clock::now();
      solve_ensemble(sys, o.method, cfg);
      t_ensemble.push_back(seconds_since(t0));
      t0 = Clock::now();
      for (int l = 0; l < B; ++l) {
        std::vector<double> b(sys.rhs.begin() + l * o.nb, sys.rhs.begin() + (l + 1) * o.nb);
        solve_single(sys.lane_matrix(l), b, o.method, cfg);
      }
      t_solo.push_back(seconds_since(t0));
    }
    auto add = [&](const char* solver, std::vector<double> reps, int iterations) {
      BenchRecord r;
      r.benchmark = "batch-bench";
      r.params = {{"solver", solver}, {"method", to_string(o.method)}, {"batch", std::to_string(B)},
                  {"nb", std::to_string(o.nb)}};
      Stats s = summarize(reps);
      r.reps = std::move(reps);
      r.derived = {{"iterations", std::to_string(iterations)}, {"solves_per_s", num(B / s.mean)}};
      out.push_back(std::move(r));
    };
    add("batched", t_batched, max_lane_it);
    add("ensemble", t_ensemble, ens.reports.front().iterations);
    add("solo", t_solo, max_lane_it);
  }
  return out;
}

// ---------------------------------------------------------------------------
// L-BFGS bandwidth

namespace {

struct LbfgsRun {
  bool ok = true;
  std::string failure;
  std::vector<double> reps;
  double t_update = 0.0;
  double t_solve = 0.0;
  LbfgsCounters counters;
};

void fill_random(DistVector& v, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (double& x : v.host_write()) x = u(rng);
}

}  // namespace

std::vector<BenchRecord> lbfgs(const LbfgsBenchOptions& o) {
  if (o.ranks < 1 || o.ranks > 8) throw std::invalid_argument("lbfgs-bench: ranks must be in [1, 8]");
  if (o.iters < 1 || o.reps < 5) throw std::invalid_argument("lbfgs-bench: need iters >= 1 and reps >= 5");
  std::vector<BenchRecord> out;
  for (std::int64_t n : o.sizes) {
    if (n < o.ranks) throw std::invalid_argument("lbfgs-bench: n must be at least the rank count");
    for (int m : o.memories) {
      if (m < 1) throw std::invalid_argument("lbfgs-bench: memories must be positive");
      for (Formulation f : o.formulations) {
        auto runs = spawn_world(o.ranks, [&](Communicator& comm) {
          LbfgsRun run;
          Layout layout = Layout::uniform(comm, n);
          std::mt19937_64 rng(o.seed * 1000003u + static_cast<std::uint64_t>(comm.rank()));
          // Diagonal SPD quadratic: y = A s always passes the curvature gate.
          DistVector diag(layout);
          {
            std::uniform_real_distribution<double> u(1.0, 10.0);
            for (double& x : diag.host_write()) x = u(rng);
          }
          // m + 1 distinct pairs cycled, so the window never holds a repeat.
          std::vector<DistVector> S, Y;
          for (int j = 0; j <= m; ++j) {
            S.emplace_back(layout);
            Y.emplace_back(layout);
            fill_random(S.back(), rng);
            vec_pointwise_mult(Y.back(), diag, S.back());
          }
          DistVector g(layout), p(layout), ref(layout);
          fill_random(g, rng);

          LbfgsOptions opts;
          opts.track_compact = f == Formulation::CompactDense;
          LbfgsState state(layout, m, {}, opts);
          int next = 0;
          for (int j = 0; j < m; ++j, next = (next + 1) % (m + 1)) state.update(S[next], Y[next]);

          // Oracle: agreement with the recursive two-loop before timing.
          state.apply(g, p, f);
          run.counters = state.last_apply();
          LbfgsState oracle(layout, m, {}, LbfgsOptions{1e-12, false});
          for (int j = 0; j < m; ++j) oracle.update(S[j], Y[j]);
          oracle.apply(g, ref, Formulation::Recursive);
          vec_axpy(ref, -1.0, p);
          double rel = vec_norm2(ref) / vec_norm2(p);
          if (!(rel <= 1e-8)) {
            run.ok = false;
            run.failure = "lbfgs-bench: " + to_string(f) + " differs from the two-loop oracle (rel " + num(rel) + ")";
            return run;
          }

          double tu_sum = 0.0, ts_sum = 0.0;
          for (int rep = 0; rep < o.reps; ++rep) {
            double tu = 0.0, ts = 0.0;
            comm.barrier();
            for (int it = 0; it < o.iters; ++it, next = (next + 1) % (m + 1)) {
              auto t0 = Clock::now();
              state.update(S[next], Y[next]);
              auto t1 = Clock::now();
              state.apply(g, p, f);
              auto t2 = Clock::now();
              tu += std::chrono::duration<double>(t1 - t0).count();
              ts += std::chrono::duration<double>(t2 - t1).count();
            }
            run.reps.push_back((tu + ts) / o.iters);
            if (rep > 0) {
              tu_sum += tu / o.iters;
              ts_sum += ts / o.iters;
            }
          }
          run.t_update = tu_sum / (o.reps - 1);
          run.t_solve = ts_sum / (o.reps - 1);
          return run;
        });
        if (!runs[0].ok) throw OracleError(runs[0].failure);
        const auto& run = runs[0];
        BenchRecord r;
        r.benchmark = "lbfgs-bench";
        r.params = {{"formulation", to_string(f)}, {"n", num(n)}, {"m", std::to_string(m)},
                    {"ranks", std::to_string(o.ranks)}, {"iters", std::to_string(o.iters)}};
        r.reps = run.reps;
        double nn = static_cast<double>(n), mm = static_cast<double>(m);
        r.derived = {{"t_update_s", num(run.t_update)},
                     {"t_solve_s", num(run.t_solve)},
                     {"be_elements_per_s", num(effective_bandwidth(nn, mm, run.t_update, run.t_solve))},
                     {"be_bytes_per_s", num(effective_bandwidth_bytes(nn, mm, run.t_update, run.t_solve))},
                     {"reductions_per_apply", std::to_string(run.counters.reductions)},
                     {"h0_calls_per_apply", std::to_string(run.counters.h0_calls)}};
        out.push_back(std::move(r));
      }
    }
  }
  return out;
}

}  // namespace sfla::bench
