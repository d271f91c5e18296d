#include "sfla/krylov.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace sfla {

namespace {

constexpr double kBreakdown = 1e-300;

class BreakdownError : public LinAlgError {
 public:
  using LinAlgError::LinAlgError;
};

}  // namespace

void SolverConfig::validate() const {
  if (!(rtol > 0.0)) throw LinAlgError("solver config: rtol must be positive");
  if (max_it < 1) throw LinAlgError("solver config: max_it must be at least 1");
  if (check_stride < 1) throw LinAlgError("solver config: check stride must be at least 1");
}

// ---------------------------------------------------------------------------
// Jacobi

JacobiPc JacobiPc::setup(const DistCsrMatrix& A) {
  DistVector d = mat_get_diagonal(A);
  auto dv = d.host_read_write();
  std::int64_t bad = -1;
  for (std::size_t t = 0; t < dv.size(); ++t) {
    if (dv[t] == 0.0) {
      bad = A.row_layout().start() + static_cast<std::int64_t>(t);
      break;
    }
    dv[t] = 1.0 / dv[t];
  }
  auto all = A.row_layout().comm().allgather(encode(std::vector<std::int64_t>{bad}));
  for (const auto& a : all) {
    const auto row = decode<std::int64_t>(a).at(0);
    if (row >= 0) throw LinAlgError("jacobi: zero diagonal at row " + std::to_string(row));
  }
  JacobiPc pc;
  pc.inv_ = std::move(d);
  return pc;
}

void JacobiPc::apply(const DistVector& r, DistVector& z) const { vec_pointwise_mult(z, inv_, r); }

void JacobiPc::apply_async(DeviceContext& ctx, DistVector& r, DistVector& z) {
  vec_pointwise_mult_async(ctx, z, inv_, r);
}

// ---------------------------------------------------------------------------
// Algorithm cores shared by the blocking distributed solvers and the
// single-system solver. Ops supplies vectors, reductions and operators.

namespace {

template <class Ops>
void cg_core(Ops& ops, const SolverConfig& cfg, SolveReport& rep) {
  using V = typename Ops::Vec;
  const double bnorm = ops.norm(ops.b());
  if (bnorm == 0.0) {
    ops.zero_x();
    rep.converged = true;
    return;
  }
  auto confirm = [&] {
    rep.rel_residual = ops.true_residual() / bnorm;
    return rep.rel_residual <= cfg.rtol;
  };
  V r = ops.vec();
  ops.residual(r);
  const bool use_z = ops.has_pc();
  V z = ops.vec();
  if (use_z) ops.precondition(r, z);
  const V& zr = use_z ? z : r;
  V p = ops.vec();
  ops.copy(p, zr);
  V q = ops.vec();
  double rz = ops.dot(r, zr);
  double rnorm = use_z ? ops.norm(r) : std::sqrt(rz);
  if (rnorm / bnorm <= cfg.rtol && confirm()) {
    rep.converged = true;
    return;
  }
  for (int it = 1; it <= cfg.max_it; ++it) {
    ops.matvec(p, q);
    const double pq = ops.dot(p, q);
    double alpha = 0.0;
    if (rz != 0.0) {
      if (!(pq > 0.0)) throw LinAlgError("matrix not SPD");
      alpha = rz / pq;
    }
    ops.axpy(ops.x(), alpha, p);
    ops.axpy(r, -alpha, q);
    if (use_z) ops.precondition(r, z);
    const double rz_new = ops.dot(r, zr);
    rnorm = use_z ? ops.norm(r) : std::sqrt(rz_new);
    rep.iterations = it;
    if (rnorm / bnorm <= cfg.rtol && confirm()) {
      rep.converged = true;
      return;
    }
    if (rz_new != 0.0 && rz == 0.0) throw LinAlgError("CG: division by zero");
    const double beta = rz_new == 0.0 ? 0.0 : rz_new / rz;
    ops.aypx(p, beta, zr);
    rz = rz_new;
  }
  confirm();
}

template <class Ops>
void tfqmr_core(Ops& ops, const SolverConfig& cfg, SolveReport& rep) {
  using V = typename Ops::Vec;
  const double bnorm = ops.norm(ops.b());
  if (bnorm == 0.0) {
    ops.zero_x();
    rep.converged = true;
    return;
  }
  auto confirm = [&] {
    rep.rel_residual = ops.true_residual() / bnorm;
    return rep.rel_residual <= cfg.rtol;
  };
  V r = ops.vec();
  ops.residual(r);
  double bp = bnorm;
  if (ops.has_pc()) {
    V t = ops.vec();
    ops.precondition(ops.b(), t);
    bp = ops.norm(t);
    ops.precondition(r, r);
  }
  V u = ops.vec(), w = ops.vec(), rstar = ops.vec(), v = ops.vec(), Au = ops.vec(), d = ops.vec();
  double rho = 0.0, tau = 0.0, theta = 0.0, eta = 0.0, alpha = 0.0;
  // (Re)start from the residual r; d restarts at zero.
  auto start = [&] {
    ops.copy(u, r);
    ops.copy(w, r);
    ops.copy(rstar, r);
    ops.op(u, v);
    ops.copy(Au, v);
    ops.zero(d);
    rho = ops.dot(r, r);
    tau = std::sqrt(rho);
    theta = eta = alpha = 0.0;
  };
  start();
  if (tau <= cfg.rtol * bp && confirm()) {
    rep.converged = true;
    return;
  }
  int m0 = 0;  // first iteration of the current cycle
  for (int m = 0; m < cfg.max_it; ++m) {
    const int k = m - m0;
    const bool even = (k % 2) == 0;
    if (even) {
      const double sigma = ops.dot(v, rstar);
      alpha = 0.0;
      if (rho != 0.0) {
        if (std::abs(sigma) < kBreakdown) throw BreakdownError("TFQMR breakdown");
        alpha = rho / sigma;
      }
    }
    const double num = theta * theta * eta;
    if (num != 0.0 && alpha == 0.0) throw BreakdownError("TFQMR breakdown");
    const double coef = num == 0.0 ? 0.0 : num / alpha;
    ops.aypx(d, coef, u);
    ops.axpy(w, -alpha, Au);
    double wn2 = 0.0, rho_new = 0.0;
    if (even) {
      wn2 = ops.dot(w, w);
    } else {
      std::tie(wn2, rho_new) = ops.dot2(w, rstar, w);
    }
    const double wn = std::sqrt(wn2);
    if (wn != 0.0 && tau == 0.0) throw BreakdownError("TFQMR breakdown");
    theta = wn == 0.0 ? 0.0 : wn / tau;
    const double c = 1.0 / std::sqrt(1.0 + theta * theta);
    tau = tau * theta * c;
    eta = c * c * alpha;
    ops.axpy(ops.x(), eta, d);
    rep.iterations = m + 1;
    if (tau * std::sqrt(k + 2.0) <= cfg.rtol * bp) {
      if (confirm()) {
        rep.converged = true;
        return;
      }
      // The estimate passed but the true residual did not: restart from x.
      ops.residual(r);
      if (ops.has_pc()) ops.precondition(r, r);
      start();
      m0 = m + 1;
      ++rep.restarts;
      continue;
    }
    if (even) {
      ops.axpy(u, -alpha, v);
      ops.op(u, Au);
    } else {
      if (std::abs(rho_new) < kBreakdown && wn2 != 0.0) throw BreakdownError("TFQMR breakdown");
      if (rho_new != 0.0 && rho == 0.0) throw BreakdownError("TFQMR breakdown");
      const double beta = rho_new == 0.0 ? 0.0 : rho_new / rho;
      rho = rho_new;
      ops.aypx(u, beta, w);
      ops.aypx(v, beta, Au);
      ops.op(u, Au);
      ops.aypx(v, beta, Au);
    }
  }
  confirm();
}

template <class Ops>
void bicg_core(Ops& ops, const SolverConfig& cfg, SolveReport& rep) {
  using V = typename Ops::Vec;
  const double bnorm = ops.norm(ops.b());
  if (bnorm == 0.0) {
    ops.zero_x();
    rep.converged = true;
    return;
  }
  auto confirm = [&] {
    rep.rel_residual = ops.true_residual() / bnorm;
    return rep.rel_residual <= cfg.rtol;
  };
  V r = ops.vec();
  ops.residual(r);
  V rt = ops.vec(), z = ops.vec(), zt = ops.vec(), p = ops.vec(), pt = ops.vec(), q = ops.vec(), qt = ops.vec();
  ops.copy(rt, r);
  ops.precondition(r, z);
  ops.precondition(rt, zt);
  ops.copy(p, z);
  ops.copy(pt, zt);
  double rho = ops.dot(z, rt);
  double rnorm = ops.norm(r);
  if (rnorm / bnorm <= cfg.rtol && confirm()) {
    rep.converged = true;
    return;
  }
  for (int it = 1; it <= cfg.max_it; ++it) {
    ops.matvec(p, q);
    ops.matvec_t(pt, qt);
    const double sigma = ops.dot(pt, q);
    double alpha = 0.0;
    if (rho != 0.0) {
      if (std::abs(sigma) < kBreakdown) throw BreakdownError("BiCG breakdown");
      alpha = rho / sigma;
    }
    ops.axpy(ops.x(), alpha, p);
    ops.axpy(r, -alpha, q);
    ops.axpy(rt, -alpha, qt);
    rnorm = ops.norm(r);
    rep.iterations = it;
    if (rnorm / bnorm <= cfg.rtol && confirm()) {
      rep.converged = true;
      return;
    }
    ops.precondition(r, z);
    ops.precondition(rt, zt);
    const double rho_new = ops.dot(z, rt);
    if (std::abs(rho_new) < kBreakdown && rnorm != 0.0) throw BreakdownError("BiCG breakdown");
    if (rho_new != 0.0 && rho == 0.0) throw BreakdownError("BiCG breakdown");
    const double beta = rho_new == 0.0 ? 0.0 : rho_new / rho;
    rho = rho_new;
    ops.aypx(p, beta, z);
    ops.aypx(pt, beta, zt);
  }
  confirm();
}

// Blocking distributed operations.
struct DistOps {
  using Vec = DistVector;
  const DistCsrMatrix& A;
  const DistVector& rhs;
  DistVector& sol;
  const JacobiPc* pc;
  SolveReport& rep;

  Vec vec() { return DistVector(A.row_layout()); }
  const DistVector& b() { return rhs; }
  DistVector& x() { return sol; }
  bool has_pc() const { return pc != nullptr; }
  void zero_x() { vec_set(sol, 0.0); }
  void zero(Vec& v) { vec_set(v, 0.0); }
  void copy(Vec& dst, const Vec& src) { vec_copy(dst, src); }
  void axpy(Vec& y, double a, const Vec& x) { vec_axpy(y, a, x); }
  void aypx(Vec& y, double a, const Vec& x) { vec_aypx(y, a, x); }
  double dot(const Vec& a, const Vec& c) {
    ++rep.reductions;
    ++rep.sync_points;
    return vec_dot(a, c);
  }
  double norm(const Vec& a) { return std::sqrt(dot(a, a)); }
  std::pair<double, double> dot2(const Vec& a, const Vec& c, const Vec& y) {
    ++rep.reductions;
    ++rep.sync_points;
    const DistVector* cols[] = {&a, &c};
    auto r = vec_mdot(cols, y);
    return {r[0], r[1]};
  }
  void matvec(const Vec& in, Vec& out) { mat_mult(A, in, out); }
  void precondition(const Vec& in, Vec& out) {
    if (pc) pc->apply(in, out);
    else if (&in != &out) vec_copy(out, in);
  }
  void op(const Vec& in, Vec& out) {
    matvec(in, out);
    if (pc) pc->apply(out, out);
  }
  void residual(Vec& r) {
    mat_mult(A, sol, r);
    vec_aypx(r, -1.0, rhs);
  }
  double true_residual() {
    Vec t = vec();
    residual(t);
    return norm(t);
  }
};

void check_system(const DistCsrMatrix& A, const DistVector& b, const DistVector& x) {
  if (!A.preallocated()) throw LinAlgError("solver: matrix not assembled");
  if (!A.row_layout().same_partition(A.col_layout())) throw LinAlgError("solver: matrix must be square with matching layouts");
  if (!b.layout().same_partition(A.row_layout()) || !x.layout().same_partition(A.col_layout()))
    throw LinAlgError("solver: layout mismatch");
}

}  // namespace

SolveReport solve_cg(const DistCsrMatrix& A, const DistVector& b, DistVector& x, const SolverConfig& config) {
  config.validate();
  check_system(A, b, x);
  SolveReport rep;
  std::optional<JacobiPc> pc;
  if (config.pc == PcType::Jacobi) pc = JacobiPc::setup(A);
  DistOps ops{A, b, x, pc ? &*pc : nullptr, rep};
  cg_core(ops, config, rep);
  return rep;
}

SolveReport solve_tfqmr(const DistCsrMatrix& A, const DistVector& b, DistVector& x, const SolverConfig& config) {
  config.validate();
  check_system(A, b, x);
  SolveReport rep;
  std::optional<JacobiPc> pc;
  if (config.pc == PcType::Jacobi) pc = JacobiPc::setup(A);
  DistOps ops{A, b, x, pc ? &*pc : nullptr, rep};
  tfqmr_core(ops, config, rep);
  return rep;
}

// ---------------------------------------------------------------------------
// Enqueued solvers. Scalars stay in the device domain; the host waits only at
// convergence checks.

namespace {

struct AsyncSolve {
  DeviceContext& ctx;
  Device& dev;
  DistCsrMatrix& A;
  DistVector& b;
  DistVector& x;
  std::optional<JacobiPc> pc;
  SolveReport& rep;
  ManagedScalar minus_one;

  AsyncSolve(DeviceContext& c, DistCsrMatrix& a, DistVector& rhs, DistVector& sol, PcType pct, SolveReport& r)
      : ctx(c), dev(c.device()), A(a), b(rhs), x(sol), rep(r), minus_one(c.device(), -1.0) {
    if (pct == PcType::Jacobi) pc = JacobiPc::setup(A);
  }

  DistVector vec() { return DistVector(A.row_layout()); }
  ManagedScalar scalar() { return ManagedScalar(dev); }

  void dot(DistVector& a, DistVector& c, ManagedScalar& out) {
    ++rep.reductions;
    vec_dot_async(ctx, a, c, out);
  }
  void norm(DistVector& a, ManagedScalar& out) {
    ++rep.reductions;
    vec_norm_async(ctx, a, out);
  }
  void residual(DistVector& r) {
    mat_mult_async(ctx, A, x, r);
    vec_aypx_async(ctx, r, minus_one, b);
  }
  void precondition(DistVector& in, DistVector& out) {
    if (pc) pc->apply_async(ctx, in, out);
    else if (in.id() != out.id()) vec_copy_async(ctx, out, in);
  }
  void op(DistVector& in, DistVector& out) {
    mat_mult_async(ctx, A, in, out);
    if (pc) pc->apply_async(ctx, out, out);
  }

  void sync() {
    ++rep.sync_points;
    try {
      ctx.synchronize();
    } catch (const StreamError& e) {
      throw LinAlgError(e.what());
    }
  }

  /// Enqueues the true residual norm of the current iterate into out.
  void true_residual(DistVector& t, ManagedScalar& out) {
    residual(t);
    norm(t, out);
  }

  double value(const ManagedScalar& s) {
    try {
      return s.value();
    } catch (const StreamError& e) {
      throw LinAlgError(e.what());
    }
  }
};

bool is_check(int it, const SolverConfig& cfg) { return it % cfg.check_stride == 0 || it == cfg.max_it; }

}  // namespace

SolveReport solve_cg_async(DistCsrMatrix& A, DistVector& b, DistVector& x, const SolverConfig& config,
                           DeviceContext& ctx) {
  config.validate();
  check_system(A, b, x);
  SolveReport rep;
  AsyncSolve s(ctx, A, b, x, config.pc, rep);
  const bool use_z = s.pc.has_value();

  DistVector r = s.vec(), z = s.vec(), p = s.vec(), q = s.vec(), t = s.vec();
  ManagedScalar bnorm = s.scalar(), rz = s.scalar(), rz_new = s.scalar(), pq = s.scalar();
  ManagedScalar rnorm = s.scalar(), tnorm = s.scalar();

  s.norm(b, bnorm);
  s.residual(r);
  if (use_z) s.precondition(r, z);
  DistVector& zr = use_z ? z : r;
  vec_copy_async(ctx, p, zr);
  s.dot(r, zr, rz);

  for (int it = 1; it <= config.max_it; ++it) {
    mat_mult_async(ctx, A, p, q);
    s.dot(p, q, pq);
    ManagedScalar alpha = eval(safe_div(rz, ScalarExpr::require_positive(pq, "matrix not SPD")), ctx);
    vec_axpy_async(ctx, x, alpha, p);
    ManagedScalar nalpha = eval(-ScalarExpr(alpha), ctx);
    vec_axpy_async(ctx, r, nalpha, q);
    if (use_z) s.precondition(r, z);
    s.dot(r, zr, rz_new);
    rep.iterations = it;
    if (is_check(it, config)) {
      s.norm(r, rnorm);
      s.true_residual(t, tnorm);
      s.sync();
      const double bn = s.value(bnorm);
      if (bn == 0.0) {
        vec_set(x, 0.0);
        rep.rel_residual = 0.0;
        rep.converged = true;
        return rep;
      }
      rep.rel_residual = s.value(tnorm) / bn;
      if (s.value(rnorm) / bn <= config.rtol && rep.rel_residual <= config.rtol) {
        rep.converged = true;
        return rep;
      }
    }
    ManagedScalar beta = eval(safe_div(rz_new, rz), ctx);
    vec_aypx_async(ctx, p, beta, zr);
    std::swap(rz, rz_new);
  }
  return rep;
}

SolveReport solve_tfqmr_async(DistCsrMatrix& A, DistVector& b, DistVector& x, const SolverConfig& config,
                              DeviceContext& ctx) {
  config.validate();
  check_system(A, b, x);
  SolveReport rep;
  AsyncSolve s(ctx, A, b, x, config.pc, rep);
  const char* kMsg = "TFQMR breakdown";

  DistVector r = s.vec(), u = s.vec(), w = s.vec(), rstar = s.vec(), v = s.vec(), Au = s.vec(), d = s.vec();
  DistVector t = s.vec();
  ManagedScalar bnorm = s.scalar(), bp = s.scalar(), rho = s.scalar(), sigma = s.scalar();
  ManagedScalar wn2 = s.scalar(), rho_new = s.scalar(), tnorm = s.scalar();

  s.norm(b, bnorm);
  s.residual(r);
  if (s.pc) {
    s.precondition(b, t);
    s.norm(t, bp);
    s.precondition(r, r);
  } else {
    bp = bnorm;
  }
  ManagedScalar tau, alpha, zero(s.dev, 0.0);
  ScalarExpr theta = 0.0, eta = 0.0;
  auto start = [&] {
    vec_copy_async(ctx, u, r);
    vec_copy_async(ctx, w, r);
    vec_copy_async(ctx, rstar, r);
    s.op(u, v);
    vec_copy_async(ctx, Au, v);
    vec_scale_async(ctx, d, zero);
    s.dot(r, r, rho);
    tau = eval(sqrt(rho), ctx);
    theta = 0.0;
    eta = 0.0;
    alpha = ManagedScalar(s.dev, 0.0);
  };
  start();

  int m0 = 0;
  for (int m = 0; m < config.max_it; ++m) {
    const int k = m - m0;
    const bool even = (k % 2) == 0;
    if (even) {
      s.dot(v, rstar, sigma);
      alpha = eval(safe_div(rho, ScalarExpr::require_nonzero(sigma, rho, kBreakdown, kMsg)), ctx);
    }
    ManagedScalar coef = eval(safe_div(theta * theta * eta, alpha), ctx);
    vec_aypx_async(ctx, d, coef, u);
    ManagedScalar nalpha = eval(-ScalarExpr(alpha), ctx);
    vec_axpy_async(ctx, w, nalpha, Au);
    s.dot(w, w, wn2);
    if (!even) s.dot(rstar, w, rho_new);
    ManagedScalar th = eval(safe_div(sqrt(wn2), tau), ctx);
    ManagedScalar c = eval(1.0 / sqrt(1.0 + ScalarExpr(th) * th), ctx);
    tau = eval(ScalarExpr(tau) * th * c, ctx);
    ManagedScalar et = eval(ScalarExpr(c) * c * alpha, ctx);
    theta = th;
    eta = et;
    vec_axpy_async(ctx, x, et, d);
    rep.iterations = m + 1;
    if (is_check(m + 1, config)) {
      s.true_residual(t, tnorm);
      s.sync();
      const double bn = s.value(bnorm);
      if (bn == 0.0) {
        vec_set(x, 0.0);
        rep.rel_residual = 0.0;
        rep.converged = true;
        return rep;
      }
      rep.rel_residual = s.value(tnorm) / bn;
      if (s.value(tau) * std::sqrt(k + 2.0) <= config.rtol * s.value(bp)) {
        if (rep.rel_residual <= config.rtol) {
          rep.converged = true;
          return rep;
        }
        s.residual(r);
        if (s.pc) s.precondition(r, r);
        start();
        m0 = m + 1;
        ++rep.restarts;
        continue;
      }
    }
    if (even) {
      vec_axpy_async(ctx, u, nalpha, v);
      s.op(u, Au);
    } else {
      ManagedScalar checked = eval(ScalarExpr::require_nonzero(rho_new, wn2, kBreakdown, kMsg), ctx);
      ManagedScalar beta = eval(safe_div(checked, rho), ctx);
      std::swap(rho, rho_new);
      vec_aypx_async(ctx, u, beta, w);
      vec_aypx_async(ctx, v, beta, Au);
      s.op(u, Au);
      vec_aypx_async(ctx, v, beta, Au);
    }
  }
  return rep;
}

SolveReport solve(DistCsrMatrix& A, DistVector& b, DistVector& x, const SolverConfig& config, DeviceContext* ctx) {
  switch (config.method) {
    case Method::Cg: return solve_cg(A, b, x, config);
    case Method::Tfqmr: return solve_tfqmr(A, b, x, config);
    case Method::CgAsync:
    case Method::TfqmrAsync: {
      if (ctx == nullptr) throw LinAlgError("async solver needs a device context");
      return config.method == Method::CgAsync ? solve_cg_async(A, b, x, config, *ctx)
                                              : solve_tfqmr_async(A, b, x, config, *ctx);
    }
    case Method::BicgBatched:
    case Method::TfqmrBatched: break;
  }
  throw LinAlgError("solve: batched methods take a BatchedSystem");
}

// ---------------------------------------------------------------------------
// Small systems.

SmallCsr BatchedSystem::lane_matrix(int lane) const {
  SmallCsr m;
  m.n = n;
  m.rowptr = rowptr;
  m.col = col;
  const auto off = static_cast<std::size_t>(lane) * static_cast<std::size_t>(nnz());
  m.val.assign(values.begin() + static_cast<std::ptrdiff_t>(off),
               values.begin() + static_cast<std::ptrdiff_t>(off + static_cast<std::size_t>(nnz())));
  return m;
}

void BatchedSystem::validate() const {
  if (batch < 1) throw LinAlgError("batched system: batch size must be at least 1");
  if (n < 1) throw LinAlgError("batched system: empty systems");
  if (static_cast<int>(rowptr.size()) != n + 1 || rowptr.front() != 0 || rowptr.back() != nnz())
    throw LinAlgError("batched system: malformed row pointers");
  for (auto c : col)
    if (c < 0 || c >= n) throw LinAlgError("batched system: column out of range");
  if (values.size() != static_cast<std::size_t>(batch) * static_cast<std::size_t>(nnz()))
    throw LinAlgError("batched system: expected batch * nnz values");
  if (rhs.size() != static_cast<std::size_t>(batch) * static_cast<std::size_t>(n))
    throw LinAlgError("batched system: expected batch * n right-hand side entries");
}

namespace {

std::vector<double> inverse_diagonal(const SmallCsr& A, const std::string& what) {
  std::vector<double> inv(static_cast<std::size_t>(A.n), 0.0);
  for (int i = 0; i < A.n; ++i) {
    double d = 0.0;
    for (auto s = A.rowptr[static_cast<std::size_t>(i)]; s < A.rowptr[static_cast<std::size_t>(i) + 1]; ++s)
      if (A.col[static_cast<std::size_t>(s)] == i) d = A.val[static_cast<std::size_t>(s)];
    if (d == 0.0) throw LinAlgError("jacobi: zero diagonal at row " + std::to_string(i) + what);
    inv[static_cast<std::size_t>(i)] = 1.0 / d;
  }
  return inv;
}

struct SmallOps {
  using Vec = std::vector<double>;
  const SmallCsr& A;
  const std::vector<double>& rhs;
  std::vector<double>& sol;
  std::vector<double> inv;  // empty: no preconditioner

  Vec vec() { return Vec(static_cast<std::size_t>(A.n), 0.0); }
  const Vec& b() { return rhs; }
  Vec& x() { return sol; }
  bool has_pc() const { return !inv.empty(); }
  void zero_x() { std::fill(sol.begin(), sol.end(), 0.0); }
  void zero(Vec& v) { std::fill(v.begin(), v.end(), 0.0); }
  void copy(Vec& dst, const Vec& src) { dst = src; }
  void axpy(Vec& y, double a, const Vec& x) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
  }
  void aypx(Vec& y, double a, const Vec& x) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = x[i] + a * y[i];
  }
  double dot(const Vec& a, const Vec& c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * c[i];
    return acc;
  }
  double norm(const Vec& a) { return std::sqrt(dot(a, a)); }
  std::pair<double, double> dot2(const Vec& a, const Vec& c, const Vec& y) { return {dot(a, y), dot(c, y)}; }
  void matvec(const Vec& in, Vec& out) {
    for (int i = 0; i < A.n; ++i) {
      double acc = 0.0;
      for (auto s = A.rowptr[static_cast<std::size_t>(i)]; s < A.rowptr[static_cast<std::size_t>(i) + 1]; ++s)
        acc += A.val[static_cast<std::size_t>(s)] * in[static_cast<std::size_t>(A.col[static_cast<std::size_t>(s)])];
      out[static_cast<std::size_t>(i)] = acc;
    }
  }
  void matvec_t(const Vec& in, Vec& out) {
    std::fill(out.begin(), out.end(), 0.0);
    for (int i = 0; i < A.n; ++i)
      for (auto s = A.rowptr[static_cast<std::size_t>(i)]; s < A.rowptr[static_cast<std::size_t>(i) + 1]; ++s)
        out[static_cast<std::size_t>(A.col[static_cast<std::size_t>(s)])] +=
            A.val[static_cast<std::size_t>(s)] * in[static_cast<std::size_t>(i)];
  }
  void precondition(const Vec& in, Vec& out) {
    if (inv.empty()) {
      if (&in != &out) out = in;
      return;
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * inv[i];
  }
  void op(const Vec& in, Vec& out) {
    matvec(in, out);
    if (!inv.empty()) precondition(out, out);
  }
  void residual(Vec& r) {
    matvec(sol, r);
    aypx(r, -1.0, rhs);
  }
  double true_residual() {
    Vec t = vec();
    residual(t);
    return norm(t);
  }
};

}  // namespace

SingleResult solve_single(const SmallCsr& A, const std::vector<double>& b, BatchMethod method,
                          const SolverConfig& config) {
  config.validate();
  if (static_cast<int>(b.size()) != A.n) throw LinAlgError("solve_single: right-hand side length mismatch");
  SingleResult res;
  res.x.assign(static_cast<std::size_t>(A.n), 0.0);
  SmallOps ops{A, b, res.x, {}};
  if (config.pc == PcType::Jacobi) ops.inv = inverse_diagonal(A, "");
  try {
    if (method == BatchMethod::Tfqmr)
      tfqmr_core(ops, config, res.report);
    else
      bicg_core(ops, config, res.report);
  } catch (const BreakdownError&) {
    res.report.breakdown = true;
    res.report.converged = false;
    const double bn = ops.norm(b);
    res.report.rel_residual = bn == 0.0 ? 0.0 : ops.true_residual() / bn;
  }
  return res;
}

// ---------------------------------------------------------------------------
// Batched: structure-of-arrays over lanes, v[i * B + lane]. Every per-lane
// statement mirrors the single-system cores above operation for operation.

namespace {

class Lanes {
 public:
  Lanes(const BatchedSystem& s, bool jacobi) : S(s), B(s.batch), n(s.n), nnz(static_cast<std::size_t>(s.nnz())) {
    vals.resize(nnz * static_cast<std::size_t>(B));
    for (int l = 0; l < B; ++l)
      for (std::size_t k = 0; k < nnz; ++k)
        vals[k * static_cast<std::size_t>(B) + static_cast<std::size_t>(l)] =
            s.values[static_cast<std::size_t>(l) * nnz + k];
    b = vec();
    for (int l = 0; l < B; ++l)
      for (int i = 0; i < n; ++i) b[at(i, l)] = s.rhs[static_cast<std::size_t>(l) * static_cast<std::size_t>(n) + static_cast<std::size_t>(i)];
    x = vec();
    if (jacobi) {
      inv = vec();
      for (int l = 0; l < B; ++l) {
        auto lane_inv = inverse_diagonal(s.lane_matrix(l), " in lane " + std::to_string(l));
        for (int i = 0; i < n; ++i) inv[at(i, l)] = lane_inv[static_cast<std::size_t>(i)];
      }
    }
    active.assign(static_cast<std::size_t>(B), 1);
    reports.resize(static_cast<std::size_t>(B));
  }

  using Vec = std::vector<double>;
  using Scal = std::vector<double>;

  std::size_t at(int i, int l) const { return static_cast<std::size_t>(i) * static_cast<std::size_t>(B) + static_cast<std::size_t>(l); }
  Vec vec() const { return Vec(static_cast<std::size_t>(n) * static_cast<std::size_t>(B), 0.0); }
  Scal scal(double v = 0.0) const { return Scal(static_cast<std::size_t>(B), v); }
  bool on(int l) const { return active[static_cast<std::size_t>(l)] != 0; }
  bool any() const { return std::any_of(active.begin(), active.end(), [](char a) { return a != 0; }); }

  bool all_on() const { return std::all_of(active.begin(), active.end(), [](char a) { return a != 0; }); }

  /// Runs f with the active lanes failing keep(l) switched off.
  template <class P, class F>
  void masked(P keep, F f) {
    auto saved = active;
    for (int l = 0; l < B; ++l)
      if (on(l) && !keep(l)) active[static_cast<std::size_t>(l)] = 0;
    f();
    active = std::move(saved);
  }

  template <class F>
  void each(F f) {
    if (all_on()) {
      for (int i = 0; i < n; ++i)
        for (int l = 0; l < B; ++l) f(at(i, l), static_cast<std::size_t>(l));
      return;
    }
    for (int i = 0; i < n; ++i)
      for (int l = 0; l < B; ++l)
        if (on(l)) f(at(i, l), static_cast<std::size_t>(l));
  }

  void copy(Vec& dst, const Vec& src) {
    each([&](std::size_t k, std::size_t) { dst[k] = src[k]; });
  }
  void axpy(Vec& y, const Scal& a, const Vec& xv, double sign = 1.0) {
    each([&](std::size_t k, std::size_t l) { y[k] += (sign < 0 ? -a[l] : a[l]) * xv[k]; });
  }
  void aypx(Vec& y, const Scal& a, const Vec& xv) {
    each([&](std::size_t k, std::size_t l) { y[k] = xv[k] + a[l] * y[k]; });
  }
  Scal dot(const Vec& a, const Vec& c) {
    Scal acc = scal();
    each([&](std::size_t k, std::size_t l) { acc[l] += a[k] * c[k]; });
    return acc;
  }
  Scal norm(const Vec& a) {
    Scal s = dot(a, a);
    for (auto& v : s) v = std::sqrt(v);
    return s;
  }
  void matvec(const Vec& in, Vec& out) {
    if (all_on()) {
      for (int i = 0; i < n; ++i) {
        double* o = &out[at(i, 0)];
        std::fill(o, o + B, 0.0);
        for (auto s = S.rowptr[static_cast<std::size_t>(i)]; s < S.rowptr[static_cast<std::size_t>(i) + 1]; ++s) {
          const double* vrow = &vals[static_cast<std::size_t>(s) * static_cast<std::size_t>(B)];
          const double* xin = &in[at(static_cast<int>(S.col[static_cast<std::size_t>(s)]), 0)];
          for (int l = 0; l < B; ++l) o[l] += vrow[l] * xin[l];
        }
      }
      return;
    }
    std::vector<double> acc(static_cast<std::size_t>(B));
    for (int i = 0; i < n; ++i) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (auto s = S.rowptr[static_cast<std::size_t>(i)]; s < S.rowptr[static_cast<std::size_t>(i) + 1]; ++s) {
        const auto c = static_cast<int>(S.col[static_cast<std::size_t>(s)]);
        const double* vrow = &vals[static_cast<std::size_t>(s) * static_cast<std::size_t>(B)];
        for (int l = 0; l < B; ++l)
          if (on(l)) acc[static_cast<std::size_t>(l)] += vrow[l] * in[at(c, l)];
      }
      for (int l = 0; l < B; ++l)
        if (on(l)) out[at(i, l)] = acc[static_cast<std::size_t>(l)];
    }
  }
  void matvec_t(const Vec& in, Vec& out) {
    each([&](std::size_t k, std::size_t) { out[k] = 0.0; });
    for (int i = 0; i < n; ++i)
      for (auto s = S.rowptr[static_cast<std::size_t>(i)]; s < S.rowptr[static_cast<std::size_t>(i) + 1]; ++s) {
        const auto c = static_cast<int>(S.col[static_cast<std::size_t>(s)]);
        const double* vrow = &vals[static_cast<std::size_t>(s) * static_cast<std::size_t>(B)];
        for (int l = 0; l < B; ++l)
          if (on(l)) out[at(c, l)] += vrow[l] * in[at(i, l)];
      }
  }
  bool has_pc() const { return !inv.empty(); }
  void precondition(const Vec& in, Vec& out) {
    if (inv.empty()) {
      if (&in != &out) copy(out, in);
      return;
    }
    each([&](std::size_t k, std::size_t) { out[k] = in[k] * inv[k]; });
  }
  void op(const Vec& in, Vec& out) {
    matvec(in, out);
    if (!inv.empty()) precondition(out, out);
  }
  void residual(Vec& r) {
    matvec(x, r);
    Scal m1 = scal(-1.0);
    aypx(r, m1, b);
  }

  /// True relative residual of one lane.
  double lane_residual(int l, double bnorm) {
    double acc2 = 0.0;
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      for (auto s = S.rowptr[static_cast<std::size_t>(i)]; s < S.rowptr[static_cast<std::size_t>(i) + 1]; ++s)
        acc += vals[static_cast<std::size_t>(s) * static_cast<std::size_t>(B) + static_cast<std::size_t>(l)] *
               x[at(static_cast<int>(S.col[static_cast<std::size_t>(s)]), l)];
      const double ri = b[at(i, l)] + -1.0 * acc;
      acc2 += ri * ri;
    }
    return std::sqrt(acc2) / bnorm;
  }

  void freeze(int l) { active[static_cast<std::size_t>(l)] = 0; }
  void converge(int l, double rel) {
    auto& rep = reports[static_cast<std::size_t>(l)];
    rep.converged = true;
    rep.rel_residual = rel;
    freeze(l);
  }
  void fail(int l, const Scal& bnorm) {
    auto& rep = reports[static_cast<std::size_t>(l)];
    rep.breakdown = true;
    rep.rel_residual = lane_residual(l, bnorm[static_cast<std::size_t>(l)]);
    freeze(l);
  }
  void finish(const Scal& bnorm) {
    for (int l = 0; l < B; ++l) {
      if (!on(l)) continue;
      reports[static_cast<std::size_t>(l)].rel_residual = lane_residual(l, bnorm[static_cast<std::size_t>(l)]);
    }
  }
  void zero_lane(int l) {
    for (int i = 0; i < n; ++i) x[at(i, l)] = 0.0;
  }

  const BatchedSystem& S;
  int B;
  int n;
  std::size_t nnz;
  std::vector<double> vals;  // vals[s * B + lane]
  Vec b, x, inv;
  std::vector<char> active;
  std::vector<SolveReport> reports;
};

void batched_tfqmr(Lanes& L, const SolverConfig& cfg) {
  using Vec = Lanes::Vec;
  const auto lanes = static_cast<std::size_t>(L.B);
  auto bnorm = L.norm(L.b);
  for (int l = 0; l < L.B; ++l)
    if (bnorm[static_cast<std::size_t>(l)] == 0.0) {
      L.zero_lane(l);
      L.converge(l, 0.0);
    }
  Vec r = L.vec();
  auto bp = bnorm;
  if (L.has_pc()) {
    Vec t = L.vec();
    L.precondition(L.b, t);
    bp = L.norm(t);
  }
  Vec u = L.vec(), w = L.vec(), rstar = L.vec(), v = L.vec(), Au = L.vec(), d = L.vec();
  auto rho = L.scal(), tau = L.scal(), theta = L.scal(), eta = L.scal(), alpha = L.scal(), coef = L.scal(),
       beta = L.scal();
  std::vector<int> m0(lanes, 0);  // first iteration of each lane's current cycle
  std::vector<char> restart(lanes, 0);
  auto start = [&](int m) {
    L.residual(r);
    if (L.has_pc()) L.precondition(r, r);
    L.copy(u, r);
    L.copy(w, r);
    L.copy(rstar, r);
    L.op(u, v);
    L.copy(Au, v);
    L.each([&](std::size_t k, std::size_t) { d[k] = 0.0; });
    auto fresh = L.dot(r, r);
    for (int l = 0; l < L.B; ++l) {
      const auto k = static_cast<std::size_t>(l);
      if (!L.on(l)) continue;
      rho[k] = fresh[k];
      tau[k] = std::sqrt(rho[k]);
      theta[k] = eta[k] = alpha[k] = 0.0;
      m0[k] = m;
    }
  };
  start(0);
  for (int l = 0; l < L.B; ++l) {
    const auto k = static_cast<std::size_t>(l);
    if (!L.on(l)) continue;
    if (tau[k] <= cfg.rtol * bp[k]) {
      const double rel = L.lane_residual(l, bnorm[k]);
      L.reports[k].rel_residual = rel;
      if (rel <= cfg.rtol) L.converge(l, rel);
    }
  }
  for (int m = 0; m < cfg.max_it && L.any(); ++m) {
    auto even = [&](int l) { return (m - m0[static_cast<std::size_t>(l)]) % 2 == 0; };
    auto odd = [&](int l) { return !even(l); };
    Lanes::Scal sigma = L.scal();
    L.masked(even, [&] { sigma = L.dot(v, rstar); });
    for (int l = 0; l < L.B; ++l) {
      const auto k = static_cast<std::size_t>(l);
      if (!L.on(l) || !even(l)) continue;
      alpha[k] = 0.0;
      if (rho[k] != 0.0) {
        if (std::abs(sigma[k]) < kBreakdown) {
          L.fail(l, bnorm);
          continue;
        }
        alpha[k] = rho[k] / sigma[k];
      }
    }
    for (int l = 0; l < L.B; ++l) {
      const auto k = static_cast<std::size_t>(l);
      if (!L.on(l)) continue;
      const double num = theta[k] * theta[k] * eta[k];
      if (num != 0.0 && alpha[k] == 0.0) {
        L.fail(l, bnorm);
        continue;
      }
      coef[k] = num == 0.0 ? 0.0 : num / alpha[k];
    }
    L.aypx(d, coef, u);
    L.axpy(w, alpha, Au, -1.0);
    auto wn2 = L.dot(w, w);
    Lanes::Scal rho_new = L.scal();
    L.masked(odd, [&] { rho_new = L.dot(rstar, w); });
    for (int l = 0; l < L.B; ++l) {
      const auto k = static_cast<std::size_t>(l);
      if (!L.on(l)) continue;
      const double wn = std::sqrt(wn2[k]);
      if (wn != 0.0 && tau[k] == 0.0) {
        L.fail(l, bnorm);
        continue;
      }
      theta[k] = wn == 0.0 ? 0.0 : wn / tau[k];
      const double c = 1.0 / std::sqrt(1.0 + theta[k] * theta[k]);
      tau[k] = tau[k] * theta[k] * c;
      eta[k] = c * c * alpha[k];
    }
    L.axpy(L.x, eta, d);
    bool any_restart = false;
    for (int l = 0; l < L.B; ++l) {
      const auto k = static_cast<std::size_t>(l);
      restart[k] = 0;
      if (!L.on(l)) continue;
      L.reports[k].iterations = m + 1;
      if (tau[k] * std::sqrt(m - m0[k] + 2.0) <= cfg.rtol * bp[k]) {
        const double rel = L.lane_residual(l, bnorm[k]);
        L.reports[k].rel_residual = rel;
        if (rel <= cfg.rtol) {
          L.converge(l, rel);
        } else {
          restart[k] = 1;
          any_restart = true;
          ++L.reports[k].restarts;
        }
      }
    }
    auto go = [&](int l) { return !restart[static_cast<std::size_t>(l)]; };
    L.masked([&](int l) { return go(l) && even(l); }, [&] {
      L.axpy(u, alpha, v, -1.0);
      L.op(u, Au);
    });
    for (int l = 0; l < L.B; ++l) {
      const auto k = static_cast<std::size_t>(l);
      if (!L.on(l) || !go(l) || even(l)) continue;
      if ((std::abs(rho_new[k]) < kBreakdown && wn2[k] != 0.0) || (rho_new[k] != 0.0 && rho[k] == 0.0)) {
        L.fail(l, bnorm);
        continue;
      }
      beta[k] = rho_new[k] == 0.0 ? 0.0 : rho_new[k] / rho[k];
      rho[k] = rho_new[k];
    }
    L.masked([&](int l) { return go(l) && odd(l); }, [&] {
      L.aypx(u, beta, w);
      L.aypx(v, beta, Au);
      L.op(u, Au);
      L.aypx(v, beta, Au);
    });
    if (any_restart) L.masked([&](int l) { return !go(l); }, [&] { start(m + 1); });
  }
  L.finish(bnorm);
}

void batched_bicg(Lanes& L, const SolverConfig& cfg) {
  using Vec = Lanes::Vec;
  auto bnorm = L.norm(L.b);
  for (int l = 0; l < L.B; ++l)
    if (bnorm[static_cast<std::size_t>(l)] == 0.0) {
      L.zero_lane(l);
      L.converge(l, 0.0);
    }
  Vec r = L.vec();
  L.residual(r);
  Vec rt = L.vec(), z = L.vec(), zt = L.vec(), p = L.vec(), pt = L.vec(), q = L.vec(), qt = L.vec();
  L.copy(rt, r);
  L.precondition(r, z);
  L.precondition(rt, zt);
  L.copy(p, z);
  L.copy(pt, zt);
  auto rho = L.dot(z, rt);
  auto rnorm = L.norm(r);
  auto alpha = L.scal(), beta = L.scal();
  auto check = [&](int l) {
    const auto k = static_cast<std::size_t>(l);
    if (rnorm[k] / bnorm[k] <= cfg.rtol) {
      const double rel = L.lane_residual(l, bnorm[k]);
      L.reports[k].rel_residual = rel;
      if (rel <= cfg.rtol) L.converge(l, rel);
    }
  };
  for (int l = 0; l < L.B; ++l)
    if (L.on(l)) check(l);
  for (int it = 1; it <= cfg.max_it && L.any(); ++it) {
    L.matvec(p, q);
    L.matvec_t(pt, qt);
    auto sigma = L.dot(pt, q);
    for (int l = 0; l < L.B; ++l) {
      const auto k = static_cast<std::size_t>(l);
      if (!L.on(l)) continue;
      alpha[k] = 0.0;
      if (rho[k] != 0.0) {
        if (std::abs(sigma[k]) < kBreakdown) {
          L.fail(l, bnorm);
          continue;
        }
        alpha[k] = rho[k] / sigma[k];
      }
    }
    L.axpy(L.x, alpha, p);
    L.axpy(r, alpha, q, -1.0);
    L.axpy(rt, alpha, qt, -1.0);
    rnorm = L.norm(r);
    for (int l = 0; l < L.B; ++l) {
      if (!L.on(l)) continue;
      L.reports[static_cast<std::size_t>(l)].iterations = it;
      check(l);
    }
    L.precondition(r, z);
    L.precondition(rt, zt);
    auto rho_new = L.dot(z, rt);
    for (int l = 0; l < L.B; ++l) {
      const auto k = static_cast<std::size_t>(l);
      if (!L.on(l)) continue;
      if ((std::abs(rho_new[k]) < kBreakdown && rnorm[k] != 0.0) || (rho_new[k] != 0.0 && rho[k] == 0.0)) {
        L.fail(l, bnorm);
        continue;
      }
      beta[k] = rho_new[k] == 0.0 ? 0.0 : rho_new[k] / rho[k];
      rho[k] = rho_new[k];
    }
    L.aypx(p, beta, z);
    L.aypx(pt, beta, zt);
  }
  L.finish(bnorm);
}

}  // namespace

BatchedResult solve_batched(const BatchedSystem& systems, BatchMethod method, const SolverConfig& config) {
  config.validate();
  systems.validate();
  Lanes L(systems, config.pc == PcType::Jacobi);
  if (method == BatchMethod::Tfqmr)
    batched_tfqmr(L, config);
  else
    batched_bicg(L, config);
  BatchedResult res;
  res.x.resize(static_cast<std::size_t>(systems.batch) * static_cast<std::size_t>(systems.n));
  for (int l = 0; l < systems.batch; ++l)
    for (int i = 0; i < systems.n; ++i)
      res.x[static_cast<std::size_t>(l) * static_cast<std::size_t>(systems.n) + static_cast<std::size_t>(i)] =
          L.x[L.at(i, l)];
  res.reports = std::move(L.reports);
  return res;
}

BatchedResult solve_ensemble(const BatchedSystem& systems, BatchMethod method, const SolverConfig& config) {
  systems.validate();
  const int B = systems.batch;
  const int n = systems.n;
  const auto nnz = systems.nnz();
  SmallCsr big;
  big.n = B * n;
  big.rowptr.clear();
  big.rowptr.push_back(0);
  big.col.reserve(static_cast<std::size_t>(B * nnz));
  big.val.reserve(static_cast<std::size_t>(B * nnz));
  for (int l = 0; l < B; ++l) {
    for (int i = 0; i < n; ++i) {
      for (auto s = systems.rowptr[static_cast<std::size_t>(i)]; s < systems.rowptr[static_cast<std::size_t>(i) + 1]; ++s) {
        big.col.push_back(static_cast<std::int64_t>(l) * n + systems.col[static_cast<std::size_t>(s)]);
        big.val.push_back(systems.values[static_cast<std::size_t>(l * nnz + s)]);
      }
      big.rowptr.push_back(static_cast<std::int64_t>(big.col.size()));
    }
  }
  auto single = solve_single(big, systems.rhs, method, config);
  BatchedResult res;
  res.x = std::move(single.x);
  res.reports.assign(static_cast<std::size_t>(B), single.report);
  return res;
}

}  // namespace sfla
