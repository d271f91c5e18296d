#include <doctest.h>

#include <random>

#include "support.hpp"
#include "sfla/vec.hpp"

using namespace sfla;
using testing_support::gather;
using testing_support::scatter;

namespace {

std::vector<double> random_values(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<int> e(-20, 20);
  std::vector<double> v(n);
  for (auto& x : v) x = std::ldexp(u(rng), e(rng));
  return v;
}

}  // namespace

TEST_SUITE("vec") {
  TEST_CASE("uniform layout gives the remainder to lower ranks") {
    auto sizes = spawn_world(3, [](Communicator& c) {
      Layout l = Layout::uniform(c, 10);
      CHECK(l.global_size() == 10);
      CHECK(l.owner(0) == 0);
      CHECK(l.owner(9) == 2);
      return l.local_size();
    });
    CHECK(sizes == std::vector<std::int64_t>{4, 3, 3});
  }

  TEST_CASE("from_local layouts and empty ranks") {
    spawn_world(3, [](Communicator& c) {
      Layout l = Layout::from_local(c, c.rank() == 1 ? 0 : 2);
      CHECK(l.global_size() == 4);
      CHECK(l.start(2) == 2);
      CHECK(l.owner(2) == 2);
      CHECK_THROWS_AS(l.owner(4), LinAlgError);
    });
  }

  TEST_CASE("dot and norm are identical across rank counts") {
    const auto x = random_values(1001, 1), y = random_values(1001, 2);
    std::vector<double> dots, norms;
    for (int R : {1, 2, 3, 4, 7}) {
      auto out = spawn_world(R, [&](Communicator& c) {
        Layout l = Layout::uniform(c, 1001);
        auto X = scatter(l, x), Y = scatter(l, y);
        return std::make_pair(vec_dot(X, Y), vec_norm2(X));
      });
      dots.push_back(out[0].first);
      norms.push_back(out[0].second);
    }
    for (std::size_t k = 1; k < dots.size(); ++k) {
      CHECK(dots[k] == dots[0]);
      CHECK(norms[k] == norms[0]);
    }
    double ref = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) ref += x[i] * y[i];
    CHECK(dots[0] == doctest::Approx(ref).epsilon(1e-12));
  }

  TEST_CASE("blocking elementwise operations") {
    spawn_world(2, [](Communicator& c) {
      Layout l = Layout::uniform(c, 5);
      auto x = scatter(l, {1, 2, 3, 4, 5});
      auto y = scatter(l, {1, 1, 1, 1, 1});
      vec_axpy(y, 2.0, x);
      CHECK(gather(y) == std::vector<double>{3, 5, 7, 9, 11});
      vec_aypx(y, 0.5, x);
      CHECK(gather(y) == std::vector<double>{2.5, 4.5, 6.5, 8.5, 10.5});
      vec_scale(y, 2.0);
      DistVector w(l);
      vec_pointwise_mult(w, x, x);
      CHECK(gather(w) == std::vector<double>{1, 4, 9, 16, 25});
      vec_copy(w, y);
      CHECK(gather(w) == std::vector<double>{5, 9, 13, 17, 21});
      vec_set(w, -1.0);
      CHECK(vec_dot(w, x) == -15.0);
      std::vector<const DistVector*> cols{&x, &w};
      auto md = vec_mdot(cols, x);
      CHECK(md == std::vector<double>{55.0, -15.0});
    });
  }

  TEST_CASE("layout mismatch is rejected") {
    spawn_world(2, [](Communicator& c) {
      DistVector a(Layout::uniform(c, 5)), b(Layout::uniform(c, 6));
      CHECK_THROWS_AS(vec_axpy(a, 1.0, b), LinAlgError);
    });
  }

  TEST_CASE("COO values route to owners with deterministic accumulation") {
    spawn_world(3, [](Communicator& c) {
      Layout l = Layout::uniform(c, 6);
      DistVector v(l, 100.0);
      // Every rank contributes to index 0 and its own first entry; rank 2 adds a skipped entry.
      std::vector<std::int64_t> idx{0, l.start(), -1};
      v.set_preallocation_coo(idx);
      std::vector<double> vals{1.0 + c.rank(), 10.0, 99.0};
      v.set_values_coo(vals, InsertMode::Insert);
      auto g = gather(v);
      // index 0: rank 0 gives 1 and 10 (local order), then rank 1 gives 2, rank 2 gives 3
      CHECK(g[0] == ((1.0 + 10.0) + 2.0) + 3.0);
      CHECK(g[1] == 100.0);  // untouched under Insert
      CHECK(g[2] == 10.0);
      CHECK(g[4] == 10.0);
      v.set_values_coo(vals, InsertMode::Add);
      g = gather(v);
      CHECK(g[2] == 20.0);
      CHECK(g[1] == 100.0);
    });
  }

  TEST_CASE("COO errors are collective") {
    std::atomic<int> thrown{0};
    spawn_world(2, [&](Communicator& c) {
      DistVector v(Layout::uniform(c, 4));
      std::vector<std::int64_t> idx{c.rank() == 1 ? 7 : 0};
      try {
        v.set_preallocation_coo(idx);
      } catch (const LinAlgError&) {
        ++thrown;
      }
    });
    CHECK(thrown == 2);
    spawn_world(1, [](Communicator& c) {
      DistVector v(Layout::uniform(c, 4));
      std::vector<double> vals{1.0};
      CHECK_THROWS_AS(v.set_values_coo(vals, InsertMode::Add), LinAlgError);
    });
  }

  TEST_CASE("residency: one copy per direction and invalidation") {
    spawn_world(1, [&](Communicator& c) {
      Device dev(DeviceOptions{2, false, 0, 0});
      Layout l = Layout::uniform(c, 8);
      auto ctx = dev.create_context();
      DistVector x(l, 1.0), y(l, 2.0);
      ManagedScalar a(dev, 3.0);
      vec_axpy_async(ctx, y, a, x);
      vec_axpy_async(ctx, y, a, x);
      CHECK(x.host_to_device_copies() == 1);
      CHECK(y.residency().host_valid == false);
      auto h = y.host_read();
      CHECK(h[0] == 8.0);
      CHECK(y.device_to_host_copies() == 1);
      y.host_read();
      CHECK(y.device_to_host_copies() == 1);
      CHECK(y.residency().device_valid);
    });
  }

  TEST_CASE("async operations equal their blocking counterparts") {
    const auto xv = random_values(37, 5), yv = random_values(37, 6);
    spawn_world(3, [&](Communicator& c) {
      Device dev(DeviceOptions{2, false, 0, 0});
      Layout l = Layout::uniform(c, 37);
      auto ctx = dev.create_context();
      auto x1 = scatter(l, xv), y1 = scatter(l, yv), x2 = scatter(l, xv), y2 = scatter(l, yv);
      ManagedScalar a(dev, 0.75), dot(dev), nrm(dev);
      vec_axpy_async(ctx, y1, a, x1);
      vec_axpy(y2, 0.75, x2);
      vec_aypx_async(ctx, y1, a, x1);
      vec_aypx(y2, 0.75, x2);
      vec_scale_async(ctx, x1, a);
      vec_scale(x2, 0.75);
      vec_pointwise_mult_async(ctx, y1, y1, x1);
      vec_pointwise_mult(y2, y2, x2);
      vec_dot_async(ctx, x1, y1, dot);
      vec_norm_async(ctx, y1, nrm);
      DistVector z1(l), z2(l);
      vec_copy_async(ctx, z1, y1);
      vec_copy(z2, y2);
      ctx.synchronize();
      CHECK(gather(z1) == gather(z2));
      CHECK(dot.value() == vec_dot(x2, y2));
      CHECK(nrm.value() == vec_norm2(y2));
    });
  }
}
