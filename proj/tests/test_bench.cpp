#include <doctest.h>

#include <sstream>

#include "support.hpp"
#include "sfla/bench.hpp"

using namespace sfla;
namespace sb = sfla::bench;

TEST_SUITE("bench") {
  TEST_CASE("stencil specs") {
    CHECK(sb::StencilSpec{2, 0, 8}.points() == 5);
    CHECK(sb::StencilSpec{2, 1, 8}.points() == 9);
    CHECK(sb::StencilSpec{3, 0, 4}.points() == 7);
    CHECK(sb::StencilSpec{3, 1, 4}.points() == 27);
    CHECK(sb::StencilSpec{3, 1, 4}.rows() == 64);
    CHECK(sb::stencil_offsets({3, 1, 4}).size() == 26);
    CHECK_THROWS_AS(sb::StencilSpec({4, 0, 8}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(sb::StencilSpec({2, 2, 8}).validate(), std::invalid_argument);
    CHECK_THROWS_AS(sb::StencilSpec({2, 0, 1}).validate(), std::invalid_argument);
    CHECK(sb::to_string(sb::StencilSpec{2, 0, 32}) == "2d-5pt-32");
  }

  TEST_CASE("generated stencils match the definition") {
    for (sb::StencilSpec spec : {sb::StencilSpec{2, 0, 5}, sb::StencilSpec{2, 1, 5}, sb::StencilSpec{3, 0, 3},
                                 sb::StencilSpec{3, 1, 3}}) {
      auto rows = testing_support::stencil_rows(spec.dim, spec.fd, spec.extent);
      spawn_world(3, [&](Communicator& c) {
        auto P = sb::make_stencil(c, spec);
        P.A.check_invariants();
        std::int64_t nnz = 0;
        for (const auto& r : rows) nnz += static_cast<std::int64_t>(r.size());
        CHECK(P.A.global_nnz() == nnz);
        for (const auto& t : P.A.local_entries()) {
          const auto& row = rows[static_cast<std::size_t>(t.i)];
          bool found = false;
          for (auto [j, v] : row)
            if (j == t.j) found = v == t.v;
          CHECK(found);
        }
        auto b = P.b.host_read();
        CHECK(b[0] == sb::stencil_rhs(P.A.row_layout().start()));
      });
    }
  }

  TEST_CASE("summary drops the warm-up rep") {
    auto s = sb::summarize({100.0, 1.0, 3.0, 2.0, 4.0});
    CHECK(s.used == 4);
    CHECK(s.mean == 2.5);
    CHECK(s.min == 1.0);
    CHECK(s.p50 == 2.5);
    CHECK_THROWS_AS(sb::summarize({1.0, 2.0}), std::invalid_argument);
  }

  TEST_CASE("csv carries the schema version and all columns") {
    sb::BenchRecord r{"demo", {{"n", "4"}}, {9.0, 1.0, 1.0, 1.0, 1.0}, {{"iters", "7"}}};
    std::ostringstream out;
    sb::write_csv(out, {r, r});
    std::istringstream in(out.str());
    std::string header, row;
    std::getline(in, header);
    std::getline(in, row);
    CHECK(header == "schema_version,benchmark,n,reps,mean_s,min_s,p50_s,iters");
    CHECK(row.rfind("1,demo,4,4,", 0) == 0);
    sb::BenchRecord other{"demo", {{"m", "4"}}, r.reps, {}};
    std::ostringstream sink;
    CHECK_THROWS_AS(sb::write_csv(sink, {r, other}), std::invalid_argument);
  }

  TEST_CASE("small benchmark runs pass their oracles") {
    sb::SfBenchOptions sf;
    sf.sizes = {1, 64};
    sf.iters = 10;
    auto rec = sb::sf_pingpong(sf);
    CHECK(rec.size() == 2);
    sf.ranks = 3;
    CHECK_THROWS_AS(sb::sf_pingpong(sf), std::invalid_argument);

    sb::SolveBenchOptions so;
    so.problems = {{2, 0, 8}};
    so.ranks = 2;
    so.reps = 5;
    auto srec = sb::solve(so);
    CHECK(srec.size() == 2);

    sb::BatchBenchOptions bo;
    bo.batches = {4};
    auto brec = sb::batch(bo);
    CHECK(brec.size() == 3);

    sb::LbfgsBenchOptions lo;
    lo.ranks = 2;
    lo.sizes = {200};
    lo.memories = {3};
    lo.iters = 5;
    auto lrec = sb::lbfgs(lo);
    CHECK(lrec.size() == 3);
  }

  TEST_CASE("solve oracle failure is reported") {
    sb::SolveBenchOptions so;
    so.problems = {{2, 0, 16}};
    so.max_it = 2;
    CHECK_THROWS_AS(sb::solve(so), sb::OracleError);
  }
}
