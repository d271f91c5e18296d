#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "support.hpp"
#include "sfla/bench.hpp"
#include "sfla/krylov.hpp"

using namespace sfla;
using testing_support::gather;

namespace {

std::vector<double> rows_dense(const testing_support::Rows& rows) {
  const std::size_t n = rows.size();
  std::vector<double> d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (auto [c, v] : rows[i]) d[i * n + static_cast<std::size_t>(c)] += v;
  return d;
}

}  // namespace

TEST_SUITE("krylov") {
  TEST_CASE("config validation") {
    SolverConfig c;
    c.rtol = 0.0;
    CHECK_THROWS_AS(c.validate(), LinAlgError);
    c = {};
    c.max_it = 0;
    CHECK_THROWS_AS(c.validate(), LinAlgError);
    c = {};
    c.check_stride = 0;
    CHECK_THROWS_AS(c.validate(), LinAlgError);
  }

  TEST_CASE("cg and tfqmr solve a 5-point problem like the direct solver") {
    const int L = 12;
    auto rows = testing_support::stencil_rows(2, 0, L);
    std::vector<double> b(L * L);
    for (int k = 0; k < L * L; ++k) b[k] = 1.0 + (k % 5);
    auto ref = oracle::banded_solve(L * L, L, rows, b);
    for (Method m : {Method::Cg, Method::Tfqmr}) {
      for (PcType pc : {PcType::None, PcType::Jacobi}) {
        auto out = spawn_world(2, [&](Communicator& c) {
          Layout l = Layout::uniform(c, L * L);
          auto A = testing_support::assemble(l, rows);
          auto B = testing_support::scatter(l, b);
          DistVector x(l);
          SolverConfig cfg;
          cfg.method = m;
          cfg.rtol = 1e-12;
          cfg.pc = pc;
          auto rep = solve(A, B, x, cfg);
          CHECK(rep.converged);
          CHECK(rep.rel_residual <= 1e-12);
          return gather(x);
        });
        CHECK(oracle::rel_diff(out[0], ref) < 1e-10);
      }
    }
  }

  TEST_CASE("iterates are identical across rank counts") {
    std::mt19937_64 rng(8);
    auto rows = testing_support::random_rows(rng, 40, false);
    std::vector<double> b(40, 1.0);
    std::vector<std::vector<double>> xs;
    for (int R : {1, 2, 4}) {
      auto out = spawn_world(R, [&](Communicator& c) {
        Layout l = Layout::uniform(c, 40);
        auto A = testing_support::assemble(l, rows);
        auto B = testing_support::scatter(l, b);
        DistVector x(l);
        SolverConfig cfg;
        cfg.method = Method::Tfqmr;
        cfg.rtol = 1e-10;
        solve(A, B, x, cfg);
        return gather(x);
      });
      xs.push_back(out[0]);
    }
    CHECK(xs[1] == xs[0]);
    CHECK(xs[2] == xs[0]);
  }

  TEST_CASE("zero right-hand side returns zero immediately") {
    spawn_world(1, [](Communicator& c) {
      Layout l = Layout::uniform(c, 9);
      auto A = testing_support::assemble(l, testing_support::stencil_rows(2, 0, 3));
      DistVector b(l), x(l, 5.0);
      SolverConfig cfg;
      auto rep = solve_cg(A, b, x, cfg);
      CHECK(rep.converged);
      CHECK(rep.iterations == 0);
      CHECK(vec_norm2(x) == 0.0);
    });
  }

  TEST_CASE("cg reports an indefinite operator") {
    spawn_world(1, [](Communicator& c) {
      Layout l = Layout::uniform(c, 2);
      testing_support::Rows rows{{{0, 1.0}}, {{1, -1.0}}};
      auto A = testing_support::assemble(l, rows);
      DistVector b(l, 1.0), x(l);
      SolverConfig cfg;
      CHECK_THROWS_WITH_AS(solve_cg(A, b, x, cfg), doctest::Contains("SPD"), LinAlgError);
    });
  }

  TEST_CASE("jacobi names the zero diagonal row") {
    spawn_world(2, [](Communicator& c) {
      Layout l = Layout::uniform(c, 4);
      testing_support::Rows rows{{{0, 1.0}}, {{1, 1.0}}, {{2, 1.0}, {3, 1.0}}, {{3, 1.0}}};
      rows[2] = {{3, 1.0}};
      auto A = testing_support::assemble(l, rows);
      CHECK_THROWS_WITH_AS(JacobiPc::setup(A), doctest::Contains("row 2"), LinAlgError);
    });
  }

  TEST_CASE("async solvers match blocking solvers with one sync at stride max_it") {
    std::mt19937_64 rng(9);
    for (bool spd : {true, false}) {
      auto rows = testing_support::random_rows(rng, 30, spd);
      std::vector<double> b(30);
      for (auto& v : b) v = std::uniform_real_distribution<double>(-1, 1)(rng);
      spawn_world(2, [&](Communicator& c) {
        Device dev(DeviceOptions{1, false, 0, 0});
        Layout l = Layout::uniform(c, 30);
        auto A = testing_support::assemble(l, rows);
        auto B = testing_support::scatter(l, b);
        DistVector x1(l), x2(l);
        SolverConfig cfg;
        cfg.method = spd ? Method::Cg : Method::Tfqmr;
        cfg.rtol = 1e-300;
        cfg.max_it = 12;
        cfg.check_stride = 12;
        auto r1 = solve(A, B, x1, cfg);
        cfg.method = spd ? Method::CgAsync : Method::TfqmrAsync;
        auto ctx = dev.create_context();
        auto r2 = solve(A, B, x2, cfg, &ctx);
        CHECK(r1.iterations == r2.iterations);
        CHECK(r2.sync_points == 1);
        CHECK(oracle::rel_diff(gather(x2), gather(x1)) <= 1e-10);
      });
    }
  }

  TEST_CASE("async solve converges and agrees with the dense oracle") {
    std::mt19937_64 rng(10);
    auto rows = testing_support::random_rows(rng, 25, false);
    std::vector<double> b(25, 1.0);
    auto ref = oracle::dense_solve(rows_dense(rows), b);
    spawn_world(3, [&](Communicator& c) {
      Device dev(DeviceOptions{1, false, 0, 0});
      Layout l = Layout::uniform(c, 25);
      auto A = testing_support::assemble(l, rows);
      auto B = testing_support::scatter(l, b);
      DistVector x(l);
      SolverConfig cfg;
      cfg.method = Method::TfqmrAsync;
      cfg.rtol = 1e-12;
      cfg.check_stride = 5;
      cfg.pc = PcType::Jacobi;
      auto ctx = dev.create_context();
      auto rep = solve(A, B, x, cfg, &ctx);
      CHECK(rep.converged);
      CHECK(oracle::rel_diff(gather(x), ref) < 1e-10);
    });
  }

  TEST_CASE("batched lanes equal solo solves") {
    std::mt19937_64 rng(12);
    BatchedSystem sys;
    sys.batch = 6;
    sys.n = 9;
    auto base = testing_support::random_rows(rng, 9, false);
    for (int i = 0; i < 9; ++i) {
      for (auto [c, v] : base[i]) sys.col.push_back(c);
      sys.rowptr.push_back(static_cast<std::int64_t>(sys.col.size()));
    }
    for (int l = 0; l < sys.batch; ++l) {
      auto rows = testing_support::random_rows(rng, 9, false);
      for (int i = 0; i < 9; ++i)
        for (auto [c, v] : base[i]) {
          double val = 0.0;
          for (auto [c2, v2] : rows[i])
            if (c2 == c) val = v2;
          sys.values.push_back(c == i ? 2.0 * (l + 1) + std::abs(v) * 4 : val);
        }
      for (int i = 0; i < 9; ++i) sys.rhs.push_back(std::sin(1.0 + i + l));
    }
    for (BatchMethod m : {BatchMethod::Tfqmr, BatchMethod::Bicg}) {
      SolverConfig cfg;
      cfg.rtol = 1e-11;
      cfg.pc = PcType::Jacobi;
      auto res = solve_batched(sys, m, cfg);
      for (int l = 0; l < sys.batch; ++l) {
        auto solo = solve_single(sys.lane_matrix(l), {sys.rhs.begin() + l * 9, sys.rhs.begin() + (l + 1) * 9}, m, cfg);
        CHECK(res.reports[l].iterations == solo.report.iterations);
        std::vector<double> xl(res.x.begin() + l * 9, res.x.begin() + (l + 1) * 9);
        CHECK(oracle::rel_diff(xl, solo.x) <= 1e-10);
      }
      auto ens = solve_ensemble(sys, m, cfg);
      CHECK(ens.reports[0].converged);
    }
  }

  TEST_CASE("batched zero diagonal names the lane") {
    BatchedSystem sys;
    sys.batch = 2;
    sys.n = 1;
    sys.col = {0};
    sys.rowptr = {0, 1};
    sys.values = {1.0, 0.0};
    sys.rhs = {1.0, 1.0};
    SolverConfig cfg;
    cfg.pc = PcType::Jacobi;
    CHECK_THROWS_WITH_AS(solve_batched(sys, BatchMethod::Tfqmr, cfg), doctest::Contains("lane 1"), LinAlgError);
  }

  TEST_CASE("batched breakdown is flagged per lane") {
    BatchedSystem sys;
    sys.batch = 2;
    sys.n = 2;
    sys.col = {0, 1, 0, 1};
    sys.rowptr = {0, 2, 4};
    // lane 1 is skew: r^T A r = 0 stalls BiCG at the first step
    sys.values = {2.0, 0.0, 0.0, 2.0, 0.0, 1.0, -1.0, 0.0};
    sys.rhs = {1.0, 1.0, 1.0, 0.0};
    SolverConfig cfg;
    auto res = solve_batched(sys, BatchMethod::Bicg, cfg);
    CHECK(res.reports[0].converged);
    CHECK(res.reports[1].breakdown);
    CHECK_FALSE(res.reports[1].converged);
  }

  TEST_CASE("tfqmr restarts when its residual estimate outruns the true residual") {
    // On this grid the true residual stalls near 4e-12 without a restart.
    spawn_world(2, [](Communicator& c) {
      auto P = bench::make_stencil(c, {2, 0, 64});
      DistVector x(P.A.row_layout()), x2(P.A.row_layout());
      SolverConfig cfg;
      cfg.method = Method::Tfqmr;
      cfg.rtol = 1e-12;
      auto rep = solve(P.A, P.b, x, cfg);
      CHECK(rep.converged);
      CHECK(rep.restarts >= 1);
      CHECK(rep.rel_residual <= 1e-12);
      Device dev(DeviceOptions{1, false, 0, 0});
      auto ctx = dev.create_context();
      cfg.method = Method::TfqmrAsync;
      cfg.check_stride = 10;
      auto arep = solve(P.A, P.b, x2, cfg, &ctx);
      CHECK(arep.converged);
      CHECK(arep.restarts >= 1);
      CHECK(arep.rel_residual <= 1e-12);
    });
  }

  TEST_CASE("a restarting batched lane still equals its solo solve") {
    auto sys = bench::make_batch(128, 16, 909);
    SolverConfig cfg;
    cfg.rtol = 1e-10;
    cfg.pc = PcType::Jacobi;
    auto res = solve_batched(sys, BatchMethod::Tfqmr, cfg);
    int restarted = 0;
    for (int l = 0; l < sys.batch; ++l) {
      if (res.reports[l].restarts == 0) continue;
      ++restarted;
      std::vector<double> b(sys.rhs.begin() + l * 16, sys.rhs.begin() + (l + 1) * 16);
      auto solo = solve_single(sys.lane_matrix(l), b, BatchMethod::Tfqmr, cfg);
      CHECK(solo.report.restarts == res.reports[l].restarts);
      CHECK(solo.report.iterations == res.reports[l].iterations);
      CHECK(std::equal(solo.x.begin(), solo.x.end(), res.x.begin() + l * 16));
      CHECK(res.reports[l].converged);
    }
    CHECK(restarted >= 1);
  }
}
