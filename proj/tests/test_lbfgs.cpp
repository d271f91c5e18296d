#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "support.hpp"
#include "sfla/lbfgs.hpp"

using namespace sfla;
using testing_support::gather;
using testing_support::scatter;

namespace {

/// Dense base operator; collective because it gathers its input.
BaseOperator dense_base(std::size_t n, std::vector<double> H) {
  return [n, H = std::move(H)](const DistVector& in, DistVector& out) {
    auto y = oracle::matvec(n, H, gather(in));
    auto h = out.host_write();
    const auto& l = out.layout();
    for (std::int64_t k = 0; k < l.local_size(); ++k)
      h[static_cast<std::size_t>(k)] = y[static_cast<std::size_t>(l.start() + k)];
  };
}

struct History {
  std::vector<std::vector<double>> S, Y;
};

/// Pairs y = A s for an SPD A, so every pair passes the curvature gate.
History random_history(std::mt19937_64& rng, std::size_t n, int count) {
  auto A = oracle::random_spd(n, 0.5, rng);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  History h;
  for (int k = 0; k < count; ++k) {
    std::vector<double> s(n);
    for (auto& v : s) v = u(rng);
    h.Y.push_back(oracle::matvec(n, A, s));
    h.S.push_back(std::move(s));
  }
  return h;
}

std::vector<double> unit(std::size_t n, std::size_t i) {
  std::vector<double> e(n, 0.0);
  e[i] = 1.0;
  return e;
}

}  // namespace

TEST_SUITE("lbfgs") {
  TEST_CASE("a single unit pair gives D = [1]; orthogonal pairs are rejected") {
    spawn_world(2, [](Communicator& c) {
      Layout l = Layout::uniform(c, 4);
      LbfgsState st(l, 3);
      CHECK(st.update(scatter(l, unit(4, 0)), scatter(l, unit(4, 0))));
      CHECK(st.d() == std::vector<double>{1.0});
      CHECK_FALSE(st.update(scatter(l, unit(4, 0)), scatter(l, unit(4, 1))));
      CHECK(st.size() == 1);
      DistVector g = scatter(l, {1, 2, 3, 4}), p(l);
      for (auto f : {Formulation::Recursive, Formulation::CompactDense, Formulation::IntermediateDense}) {
        st.apply(g, p, f);
        CHECK(gather(p) == std::vector<double>{1, 2, 3, 4});
      }
    });
  }

  TEST_CASE("eviction keeps the newest m pairs and S^T Y consistent") {
    std::mt19937_64 rng(3);
    auto h = random_history(rng, 9, 5);
    spawn_world(3, [&](Communicator& c) {
      Layout l = Layout::uniform(c, 9);
      LbfgsState st(l, 2);
      for (int k = 0; k < 5; ++k) REQUIRE(st.update(scatter(l, h.S[k]), scatter(l, h.Y[k])));
      CHECK(st.size() == 2);
      CHECK(gather(st.s(0)) == h.S[3]);
      CHECK(gather(st.y(1)) == h.Y[4]);
      CHECK(st.sty() == st.recompute_sty());
    });
  }

  TEST_CASE("every formulation matches the dense BFGS recursion") {
    std::mt19937_64 rng(5);
    const std::size_t n = 12;
    auto H0 = oracle::random_spd(n, 1.0, rng);
    auto h = random_history(rng, n, 6);
    std::vector<double> g(n);
    for (auto& v : g) v = std::uniform_real_distribution<double>(-1, 1)(rng);
    auto H = oracle::bfgs_dense(n, H0, h.S, h.Y);
    auto ref = oracle::matvec(n, H, g);
    spawn_world(2, [&](Communicator& c) {
      Layout l = Layout::uniform(c, static_cast<std::int64_t>(n));
      LbfgsState st(l, 6, dense_base(n, H0));
      for (int k = 0; k < 6; ++k) REQUIRE(st.update(scatter(l, h.S[k]), scatter(l, h.Y[k])));
      DistVector G = scatter(l, g), p(l), q(l);
      for (auto f : {Formulation::Recursive, Formulation::CompactDense, Formulation::IntermediateDense}) {
        st.apply(G, p, f);
        CHECK(oracle::rel_diff(gather(p), ref) < 1e-10);
      }
      // secant condition on the newest pair
      st.apply(scatter(l, h.Y[5]), q, Formulation::IntermediateDense);
      CHECK(oracle::rel_diff(gather(q), h.S[5]) < 1e-10);
    });
  }

  TEST_CASE("per-apply reduction and base-operator counts") {
    std::mt19937_64 rng(6);
    auto h = random_history(rng, 8, 4);
    spawn_world(2, [&](Communicator& c) {
      Layout l = Layout::uniform(c, 8);
      LbfgsState st(l, 4);
      for (int k = 0; k < 4; ++k) st.update(scatter(l, h.S[k]), scatter(l, h.Y[k]));
      CHECK(st.last_update().reductions == 1);
      DistVector g = scatter(l, h.S[0]), p(l);
      st.apply(g, p, Formulation::Recursive);
      CHECK(st.last_apply().reductions == 8);
      CHECK(st.last_apply().h0_calls == 1);
      st.apply(g, p, Formulation::CompactDense);
      CHECK(st.last_apply().reductions == 1);
      CHECK(st.last_apply().h0_calls == 1);
      CHECK(st.last_apply().h0_refresh_calls == 0);
      st.apply(g, p, Formulation::IntermediateDense);
      CHECK(st.last_apply().reductions == 2);
      CHECK(st.last_apply().h0_calls == 1);
    });
  }

  TEST_CASE("changing the base operator forces a compact refresh only") {
    std::mt19937_64 rng(7);
    const std::size_t n = 10;
    auto h = random_history(rng, n, 5);
    auto H1 = oracle::random_spd(n, 0.3, rng);
    auto ref = oracle::matvec(n, oracle::bfgs_dense(n, H1, h.S, h.Y), h.S[0]);
    spawn_world(2, [&](Communicator& c) {
      Layout l = Layout::uniform(c, static_cast<std::int64_t>(n));
      LbfgsState st(l, 5);
      for (int k = 0; k < 5; ++k) st.update(scatter(l, h.S[k]), scatter(l, h.Y[k]));
      st.set_base(dense_base(n, H1));
      DistVector g = scatter(l, h.S[0]), p(l);
      st.apply(g, p, Formulation::IntermediateDense);
      CHECK(st.last_apply().h0_calls == 1);
      CHECK(st.last_apply().h0_refresh_calls == 0);
      CHECK(oracle::rel_diff(gather(p), ref) < 1e-10);
      st.apply(g, p, Formulation::CompactDense);
      CHECK(st.last_apply().h0_refresh_calls == 5);
      CHECK(st.last_apply().h0_calls == 6);
      CHECK(oracle::rel_diff(gather(p), ref) < 1e-10);
      st.apply(g, p, Formulation::CompactDense);
      CHECK(st.last_apply().h0_refresh_calls == 0);
    });
  }

  TEST_CASE("argument errors") {
    spawn_world(1, [](Communicator& c) {
      Layout l = Layout::uniform(c, 3);
      CHECK_THROWS_AS(LbfgsState(l, 0), LinAlgError);
      LbfgsState st(l, 2);
      DistVector bad(Layout::uniform(c, 4)), ok(l, 1.0);
      CHECK_THROWS_WITH_AS(st.update(bad, ok), doctest::Contains("dimension mismatch"), LinAlgError);
    });
  }

  TEST_CASE("effective bandwidth") {
    CHECK(effective_bandwidth(1000, 5, 5e-4, 5e-4) == doctest::Approx(1.2e7).epsilon(1e-12));
    CHECK(effective_bandwidth(1000, 0, 5e-4, 5e-4) == doctest::Approx(2e6).epsilon(1e-12));
    CHECK(effective_bandwidth(1e5, 50, 5e-3, 5e-3) == doctest::Approx(1.02e9).epsilon(1e-12));
    CHECK(effective_bandwidth_bytes(1000, 5, 5e-4, 5e-4) == doctest::Approx(9.6e7).epsilon(1e-12));
    CHECK_THROWS_AS(effective_bandwidth(1000, 5, 0.0, 0.0), LinAlgError);
    CHECK_THROWS_AS(effective_bandwidth(1000, 5, -1.0, 2e-3), LinAlgError);
  }
}
