#include <doctest.h>

#include <atomic>
#include <random>

#include "sfla/comm.hpp"
#include "sfla/exact_sum.hpp"

using namespace sfla;

TEST_SUITE("comm") {
  TEST_CASE("point-to-point messages arrive in send order") {
    spawn_world(2, [](Communicator& c) {
      if (c.rank() == 0) {
        for (int k = 0; k < 100; ++k) c.send_values<int>(1, 7, std::vector<int>{k});
      } else {
        for (int k = 0; k < 100; ++k) CHECK(c.recv_values<int>(0, 7).at(0) == k);
      }
    });
  }

  TEST_CASE("tags keep independent queues") {
    spawn_world(2, [](Communicator& c) {
      if (c.rank() == 0) {
        c.send_values<double>(1, 1, std::vector<double>{1.0});
        c.send_values<double>(1, 2, std::vector<double>{2.0});
      } else {
        CHECK(c.recv_values<double>(0, 2).at(0) == 2.0);
        CHECK(c.recv_values<double>(0, 1).at(0) == 1.0);
      }
    });
  }

  TEST_CASE("allreduce sums in ascending rank order") {
    auto out = spawn_world(3, [](Communicator& c) { return c.allreduce(static_cast<double>(c.rank() + 1)); });
    for (double v : out) CHECK(v == (1.0 + 2.0) + 3.0);

    // Values whose sum depends on association order.
    auto tricky = spawn_world(3, [](Communicator& c) {
      const double v[] = {1e16, 1.0, -1e16};
      return c.allreduce(v[c.rank()]);
    });
    for (double v : tricky) CHECK(v == (1e16 + 1.0) + -1e16);
  }

  TEST_CASE("allreduce replace takes the last rank") {
    auto out = spawn_world(4, [](Communicator& c) { return c.allreduce(c.rank() * 10.0, ReduceOp::Replace); });
    for (double v : out) CHECK(v == 30.0);
  }

  TEST_CASE("alltoall routes personalized payloads") {
    spawn_world(4, [](Communicator& c) {
      std::vector<Bytes> out(4);
      for (int d = 0; d < 4; ++d) out[d] = encode(std::vector<int>{c.rank() * 10 + d});
      auto in = c.alltoall(std::move(out));
      for (int s = 0; s < 4; ++s) CHECK(decode<int>(in[s]).at(0) == s * 10 + c.rank());
    });
  }

  TEST_CASE("allgather and broadcast") {
    spawn_world(3, [](Communicator& c) {
      auto all = c.allgather(encode(std::vector<int>{c.rank()}));
      REQUIRE(all.size() == 3);
      for (int r = 0; r < 3; ++r) CHECK(decode<int>(all[r]).at(0) == r);
      Bytes b = c.rank() == 2 ? encode(std::vector<int>{42}) : Bytes{};
      CHECK(decode<int>(c.broadcast(b, 2)).at(0) == 42);
    });
  }

  TEST_CASE("dup isolates traffic from the parent") {
    spawn_world(2, [](Communicator& c) {
      Communicator d = c.dup();
      CHECK(d.context_id() != c.context_id());
      if (c.rank() == 0) {
        d.send_values<int>(1, 5, std::vector<int>{1});
        c.send_values<int>(1, 5, std::vector<int>{2});
      } else {
        CHECK(c.recv_values<int>(0, 5).at(0) == 2);
        CHECK(d.recv_values<int>(0, 5).at(0) == 1);
      }
    });
  }

  TEST_CASE("next_tag agrees across ranks") {
    auto tags = spawn_world(3, [](Communicator& c) {
      c.next_tag();
      return c.next_tag();
    });
    CHECK(tags[0] == tags[1]);
    CHECK(tags[1] == tags[2]);
    CHECK(tags[0] >= Communicator::kUserTagLimit);
  }

  TEST_CASE("a failing rank aborts the world and releases blocked receivers") {
    bool thrown = false;
    try {
      spawn_world(3, [](Communicator& c) {
        if (c.rank() == 1) throw std::runtime_error("boom");
        c.recv(1, 0);  // never satisfied
      });
    } catch (const WorldError& e) {
      thrown = true;
      CHECK(e.rank() == 1);
      CHECK(std::string(e.what()).find("boom") != std::string::npos);
    }
    CHECK(thrown);
  }

  TEST_CASE("undelivered messages are reported at teardown") {
    CHECK_THROWS_AS(spawn_world(2, [](Communicator& c) {
                      if (c.rank() == 0) c.send(1, 3, Bytes(8));
                    }),
                    CommError);
  }

  TEST_CASE("invalid arguments") {
    CHECK_THROWS_AS(spawn_world(0, [](Communicator&) {}), CommError);
    CHECK_THROWS_AS(spawn_world(1, [](Communicator& c) { c.send(3, 0, Bytes{}); }), WorldError);
  }

  TEST_CASE("single rank world") {
    auto v = spawn_world(1, [](Communicator& c) { return c.allreduce(2.5); });
    CHECK(v.at(0) == 2.5);
  }
}

TEST_SUITE("exact_sum") {
  TEST_CASE("exact result independent of grouping") {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> mant(-1.0, 1.0);
    std::uniform_int_distribution<int> expo(-60, 60);
    std::vector<double> v(2000);
    for (auto& x : v) x = std::ldexp(mant(rng), expo(rng));
    ExactSum whole;
    whole.add(v);
    for (int parts : {2, 3, 7}) {
      ExactSum merged;
      std::size_t chunk = v.size() / static_cast<std::size_t>(parts) + 1;
      for (std::size_t s = 0; s < v.size(); s += chunk) {
        ExactSum part;
        for (std::size_t k = std::min(v.size(), s + chunk); k-- > s;) part.add(v[k]);
        merged.merge(ExactSum::unpack(part.pack()));
      }
      CHECK(merged.round() == whole.round());
    }
  }

  TEST_CASE("cancellation is exact") {
    ExactSum s;
    s.add(1e300);
    s.add(1.0);
    s.add(-1e300);
    CHECK(s.round() == 1.0);
    ExactSum t;
    t.add(0.1);
    t.add(0.2);
    t.add(-0.3);
    // 0.1 + 0.2 - 0.3 evaluated exactly in binary
    CHECK(t.round() == 2.7755575615628914e-17);
  }

  TEST_CASE("infinities and nan propagate") {
    ExactSum s;
    s.add(std::numeric_limits<double>::infinity());
    s.add(1.0);
    CHECK(s.round() == std::numeric_limits<double>::infinity());
    s.add(-std::numeric_limits<double>::infinity());
    CHECK(std::isnan(s.round()));
  }
}
