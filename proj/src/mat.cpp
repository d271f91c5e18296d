#include "sfla/mat.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "vec_internal.hpp"

namespace sfla {

namespace detail {

struct MatCooPlan {
  std::int64_t n = 0;
  std::vector<std::int64_t> local_k;  // COO positions whose row is owned here
  std::vector<int> send_ranks;
  std::vector<std::vector<std::int64_t>> send_k;
  std::vector<int> recv_ranks;  // ascending
  std::vector<std::int64_t> recv_count;
  // Per nonzero in (row, col) order: contributions seg_src[seg_ptr[z]..seg_ptr[z+1])
  // index the value buffer laid out as [local entries | received by rank].
  std::vector<std::int64_t> seg_ptr{0};
  std::vector<std::int64_t> seg_src;
  std::vector<std::uint8_t> nz_offdiag;
  std::vector<std::int64_t> nz_slot;
  int tag = 0;
};

}  // namespace detail

namespace {

struct Pair {
  std::int64_t i;
  std::int64_t j;
};

void throw_if_any(const Communicator& comm, const std::string& error, const char* what) {
  auto errors = comm.allgather(encode(std::span<const char>(error.data(), error.size())));
  for (const auto& e : errors)
    if (!e.empty())
      throw LinAlgError(std::string(what) + ": " + std::string(reinterpret_cast<const char*>(e.data()), e.size()));
}

}  // namespace

DistCsrMatrix::DistCsrMatrix(Layout rows, Layout cols) : rows_(std::move(rows)), cols_(std::move(cols)) {
  if (!rows_.valid() || !cols_.valid()) throw LinAlgError("matrix needs valid layouts");
  diag_.nrows = offdiag_.nrows = rows_.local_size();
  diag_.ncols = cols_.local_size();
  diag_.rowptr.assign(static_cast<std::size_t>(diag_.nrows) + 1, 0);
  offdiag_.rowptr.assign(static_cast<std::size_t>(offdiag_.nrows) + 1, 0);
  off_split_.assign(static_cast<std::size_t>(diag_.nrows), 0);
}

DistCsrMatrix::DistCsrMatrix() = default;
DistCsrMatrix::DistCsrMatrix(DistCsrMatrix&&) noexcept = default;
DistCsrMatrix& DistCsrMatrix::operator=(DistCsrMatrix&&) noexcept = default;

DistCsrMatrix::~DistCsrMatrix() {
  if (device_ != nullptr) device_->wait_for_object(id_, AccessMode::Write);
}

void DistCsrMatrix::wait_device_idle() const {
  if (device_ != nullptr) device_->wait_for_object(id_, AccessMode::Write);
}

void DistCsrMatrix::bind(Device& device) {
  if (device_ == nullptr)
    device_ = &device;
  else if (device_ != &device)
    throw LinAlgError("matrix is bound to a different device");
}

void DistCsrMatrix::set_preallocation_coo(std::span<const std::int64_t> i, std::span<const std::int64_t> j) {
  const auto& comm = rows_.comm();
  const int R = comm.size();
  const int me = comm.rank();
  if (i.size() != j.size()) throw LinAlgError("mat_set_preallocation_coo: i and j lengths differ");
  wait_device_idle();

  auto plan = std::make_unique<detail::MatCooPlan>();
  plan->n = static_cast<std::int64_t>(i.size());
  plan->tag = comm.next_tag();

  std::string error;
  std::vector<Pair> local;
  std::vector<std::vector<Pair>> out(static_cast<std::size_t>(R));
  std::vector<std::vector<std::int64_t>> send_k(static_cast<std::size_t>(R));
  for (std::size_t k = 0; k < i.size(); ++k) {
    if (i[k] < 0 || j[k] < 0) continue;
    if (i[k] >= rows_.global_size() || j[k] >= cols_.global_size()) {
      if (error.empty())
        error = "rank " + std::to_string(me) + ": entry k=" + std::to_string(k) + " (i=" + std::to_string(i[k]) +
                ", j=" + std::to_string(j[k]) + ") outside " + std::to_string(rows_.global_size()) + "x" +
                std::to_string(cols_.global_size());
      continue;
    }
    const int o = rows_.owner(i[k]);
    if (o == me) {
      plan->local_k.push_back(static_cast<std::int64_t>(k));
      local.push_back({i[k], j[k]});
    } else {
      out[static_cast<std::size_t>(o)].push_back({i[k], j[k]});
      send_k[static_cast<std::size_t>(o)].push_back(static_cast<std::int64_t>(k));
    }
  }
  throw_if_any(comm, error, "mat_set_preallocation_coo");

  std::vector<Bytes> outgoing(static_cast<std::size_t>(R));
  for (int r = 0; r < R; ++r) {
    outgoing[static_cast<std::size_t>(r)] = encode(out[static_cast<std::size_t>(r)]);
    if (!send_k[static_cast<std::size_t>(r)].empty()) {
      plan->send_ranks.push_back(r);
      plan->send_k.push_back(std::move(send_k[static_cast<std::size_t>(r)]));
    }
  }
  auto incoming = comm.alltoall(std::move(outgoing));

  std::vector<Pair> entries = std::move(local);
  for (int r = 0; r < R; ++r) {
    auto got = decode<Pair>(incoming[static_cast<std::size_t>(r)]);
    if (got.empty()) continue;
    plan->recv_ranks.push_back(r);
    plan->recv_count.push_back(static_cast<std::int64_t>(got.size()));
    entries.insert(entries.end(), got.begin(), got.end());
  }

  std::vector<std::int64_t> order(entries.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t b) {
    const auto& x = entries[static_cast<std::size_t>(a)];
    const auto& y = entries[static_cast<std::size_t>(b)];
    return x.i != y.i ? x.i < y.i : x.j < y.j;
  });

  const std::int64_t rstart = rows_.start();
  const std::int64_t cstart = cols_.start();
  const std::int64_t cend = cols_.end();
  std::vector<Pair> nz;
  for (std::size_t t = 0; t < order.size(); ++t) {
    const auto& e = entries[static_cast<std::size_t>(order[t])];
    if (nz.empty() || nz.back().i != e.i || nz.back().j != e.j) {
      if (!nz.empty()) plan->seg_ptr.push_back(static_cast<std::int64_t>(t));
      nz.push_back(e);
    }
    plan->seg_src.push_back(order[t]);
  }
  if (!nz.empty()) plan->seg_ptr.push_back(static_cast<std::int64_t>(order.size()));

  colmap_.clear();
  for (const auto& e : nz)
    if (e.j < cstart || e.j >= cend) colmap_.push_back(e.j);
  std::sort(colmap_.begin(), colmap_.end());
  colmap_.erase(std::unique(colmap_.begin(), colmap_.end()), colmap_.end());

  const auto nrows = static_cast<std::size_t>(rows_.local_size());
  diag_ = CsrBlock{};
  offdiag_ = CsrBlock{};
  diag_.nrows = offdiag_.nrows = rows_.local_size();
  diag_.ncols = cols_.local_size();
  offdiag_.ncols = static_cast<std::int64_t>(colmap_.size());
  diag_.rowptr.assign(nrows + 1, 0);
  offdiag_.rowptr.assign(nrows + 1, 0);
  for (const auto& e : nz) {
    const auto r = static_cast<std::size_t>(e.i - rstart);
    if (e.j >= cstart && e.j < cend) {
      plan->nz_offdiag.push_back(0);
      plan->nz_slot.push_back(diag_.nnz());
      diag_.col.push_back(e.j - cstart);
      ++diag_.rowptr[r + 1];
    } else {
      plan->nz_offdiag.push_back(1);
      plan->nz_slot.push_back(offdiag_.nnz());
      offdiag_.col.push_back(std::lower_bound(colmap_.begin(), colmap_.end(), e.j) - colmap_.begin());
      ++offdiag_.rowptr[r + 1];
    }
  }
  for (std::size_t r = 0; r < nrows; ++r) {
    diag_.rowptr[r + 1] += diag_.rowptr[r];
    offdiag_.rowptr[r + 1] += offdiag_.rowptr[r];
  }
  diag_.val.assign(diag_.col.size(), 0.0);
  offdiag_.val.assign(offdiag_.col.size(), 0.0);

  off_split_.assign(nrows, 0);
  for (std::size_t r = 0; r < nrows; ++r) {
    auto s = offdiag_.rowptr[r];
    while (s < offdiag_.rowptr[r + 1] && colmap_[static_cast<std::size_t>(offdiag_.col[static_cast<std::size_t>(s)])] < cstart) ++s;
    off_split_[r] = s;
  }

  std::vector<LeafSpec> leaves;
  leaves.reserve(colmap_.size());
  for (std::size_t g = 0; g < colmap_.size(); ++g) {
    const int o = cols_.owner(colmap_[g]);
    leaves.push_back({static_cast<std::int64_t>(g), o, colmap_[g] - cols_.start(o)});
  }
  halo_ = std::make_unique<StarForest>(comm, cols_.local_size(), std::move(leaves));
  channel_ = comm.dup();
  ghost_ = std::make_shared<std::vector<double>>(colmap_.size(), 0.0);

  plan_ = std::move(plan);
  ++plan_builds_;
}

void DistCsrMatrix::set_values_coo(std::span<const double> v, InsertMode mode) {
  if (!plan_) throw LinAlgError("mat_set_values_coo called before mat_set_preallocation_coo");
  const auto& plan = *plan_;
  if (static_cast<std::int64_t>(v.size()) != plan.n)
    throw LinAlgError("mat_set_values_coo: expected " + std::to_string(plan.n) + " values, got " +
                      std::to_string(v.size()));
  wait_device_idle();
  const auto& comm = rows_.comm();
  for (std::size_t s = 0; s < plan.send_ranks.size(); ++s) {
    std::vector<double> buf;
    buf.reserve(plan.send_k[s].size());
    for (auto k : plan.send_k[s]) buf.push_back(v[static_cast<std::size_t>(k)]);
    comm.send(plan.send_ranks[s], plan.tag, encode(buf));
  }
  std::vector<double> buf;
  buf.reserve(plan.seg_src.size());
  for (auto k : plan.local_k) buf.push_back(v[static_cast<std::size_t>(k)]);
  for (std::size_t s = 0; s < plan.recv_ranks.size(); ++s) {
    auto got = comm.recv_values<double>(plan.recv_ranks[s], plan.tag);
    if (static_cast<std::int64_t>(got.size()) != plan.recv_count[s])
      throw LinAlgError("mat_set_values_coo: protocol mismatch with rank " + std::to_string(plan.recv_ranks[s]));
    buf.insert(buf.end(), got.begin(), got.end());
  }
  const std::size_t nnz = plan.nz_slot.size();
  for (std::size_t z = 0; z < nnz; ++z) {
    double& slot = (plan.nz_offdiag[z] ? offdiag_.val : diag_.val)[static_cast<std::size_t>(plan.nz_slot[z])];
    double acc = mode == InsertMode::Insert ? 0.0 : slot;
    for (auto e = plan.seg_ptr[z]; e < plan.seg_ptr[z + 1]; ++e)
      acc += buf[static_cast<std::size_t>(plan.seg_src[static_cast<std::size_t>(e)])];
    slot = acc;
  }
}

std::int64_t DistCsrMatrix::global_nnz() const {
  return static_cast<std::int64_t>(rows_.comm().allreduce(static_cast<double>(diag_.nnz() + offdiag_.nnz())));
}

std::vector<Triplet> DistCsrMatrix::local_entries() const {
  std::vector<Triplet> out;
  const std::int64_t rstart = rows_.start();
  const std::int64_t cstart = cols_.start();
  for (std::int64_t r = 0; r < diag_.nrows; ++r) {
    const auto u = static_cast<std::size_t>(r);
    auto emit_off = [&](std::int64_t lo, std::int64_t hi) {
      for (auto s = lo; s < hi; ++s) {
        const auto su = static_cast<std::size_t>(s);
        out.push_back({rstart + r, colmap_[static_cast<std::size_t>(offdiag_.col[su])], offdiag_.val[su]});
      }
    };
    emit_off(offdiag_.rowptr[u], off_split_[u]);
    for (auto s = diag_.rowptr[u]; s < diag_.rowptr[u + 1]; ++s) {
      const auto su = static_cast<std::size_t>(s);
      out.push_back({rstart + r, cstart + diag_.col[su], diag_.val[su]});
    }
    emit_off(off_split_[u], offdiag_.rowptr[u + 1]);
  }
  return out;
}

void DistCsrMatrix::check_invariants() const {
  auto check_block = [](const CsrBlock& b, const char* name) {
    if (static_cast<std::int64_t>(b.rowptr.size()) != b.nrows + 1 || b.rowptr.front() != 0 ||
        b.rowptr.back() != b.nnz() || b.val.size() != b.col.size())
      throw LinAlgError(std::string(name) + ": malformed row pointers");
    for (std::int64_t r = 0; r < b.nrows; ++r) {
      const auto lo = b.rowptr[static_cast<std::size_t>(r)];
      const auto hi = b.rowptr[static_cast<std::size_t>(r) + 1];
      if (hi < lo) throw LinAlgError(std::string(name) + ": decreasing row pointer at row " + std::to_string(r));
      for (auto s = lo; s < hi; ++s) {
        const auto c = b.col[static_cast<std::size_t>(s)];
        if (c < 0 || c >= b.ncols) throw LinAlgError(std::string(name) + ": column out of range in row " + std::to_string(r));
        if (s > lo && b.col[static_cast<std::size_t>(s) - 1] >= c)
          throw LinAlgError(std::string(name) + ": columns not strictly ascending in row " + std::to_string(r));
      }
    }
  };
  check_block(diag_, "diag");
  check_block(offdiag_, "offdiag");
  for (std::size_t g = 1; g < colmap_.size(); ++g)
    if (colmap_[g - 1] >= colmap_[g]) throw LinAlgError("colmap not strictly ascending");
  for (auto g : colmap_)
    if (cols_.owns(g)) throw LinAlgError("colmap holds an owned column");
}

// ---------------------------------------------------------------------------

namespace {

void check_mult(const DistCsrMatrix& A, const DistVector& x, const DistVector& y) {
  if (!A.preallocated()) throw LinAlgError("mat_mult: matrix not assembled");
  if (!x.layout().same_partition(A.col_layout()) || !y.layout().same_partition(A.row_layout()))
    throw LinAlgError("mat_mult: layout mismatch");
  if (x.id() == y.id()) throw LinAlgError("mat_mult: x and y must be distinct");
}

void spmv_rows(const CsrBlock& d, const CsrBlock& o, const std::vector<std::int64_t>& split, const double* x,
               const double* ghost, double* y) {
  for (std::int64_t r = 0; r < d.nrows; ++r) {
    const auto u = static_cast<std::size_t>(r);
    double acc = 0.0;
    for (auto s = o.rowptr[u]; s < split[u]; ++s)
      acc += o.val[static_cast<std::size_t>(s)] * ghost[o.col[static_cast<std::size_t>(s)]];
    for (auto s = d.rowptr[u]; s < d.rowptr[u + 1]; ++s)
      acc += d.val[static_cast<std::size_t>(s)] * x[d.col[static_cast<std::size_t>(s)]];
    for (auto s = split[u]; s < o.rowptr[u + 1]; ++s)
      acc += o.val[static_cast<std::size_t>(s)] * ghost[o.col[static_cast<std::size_t>(s)]];
    y[u] = acc;
  }
}

}  // namespace

void mat_mult(const DistCsrMatrix& A, const DistVector& x, DistVector& y) {
  check_mult(A, x, y);
  auto xs = x.host_read();
  std::vector<double> ghost(A.colmap().size());
  auto& sf = const_cast<StarForest&>(A.halo());
  sf.bcast<double>(xs, ghost, ReduceOp::Replace);
  auto ys = y.host_write();
  spmv_rows(A.diag(), A.offdiag(), A.offdiag_split(), xs.data(), ghost.data(), ys.data());
}

void mat_mult_async(DeviceContext& ctx, DistCsrMatrix& A, DistVector& x, DistVector& y) {
  check_mult(A, x, y);
  Device& dev = ctx.device();
  A.bind(dev);
  x.bind(dev);
  y.bind(dev);
  x.prepare_device_read();
  y.prepare_device_write();
  auto xs = detail::VecAccess::storage(x);
  auto ys = detail::VecAccess::storage(y);
  std::span<double> ghost = A.ghost_buffer();
  auto& sf = const_cast<StarForest&>(A.halo());
  sf.bcast_enqueue(
      ctx, A.device_channel(), x.id(), [xs]() -> std::span<const double> { return xs->dev; }, A.ghost_id(),
      [ghost] { return ghost; }, ReduceOp::Replace);
  const DistCsrMatrix* a = &A;
  ctx.submit({{A.id(), AccessMode::Read},
              {x.id(), AccessMode::Read},
              {A.ghost_id(), AccessMode::Read},
              {y.id(), AccessMode::Write}},
             [a, xs, ys, ghost] {
               spmv_rows(a->diag(), a->offdiag(), a->offdiag_split(), xs->dev.data(), ghost.data(), ys->dev.data());
             });
}

DistVector mat_get_diagonal(const DistCsrMatrix& A) {
  DistVector d(A.row_layout());
  auto out = d.host_write();
  const std::int64_t rstart = A.row_layout().start();
  const std::int64_t cstart = A.col_layout().start();
  const auto& D = A.diag();
  const auto& O = A.offdiag();
  for (std::int64_t r = 0; r < D.nrows; ++r) {
    const auto u = static_cast<std::size_t>(r);
    const std::int64_t g = rstart + r;
    double v = 0.0;
    if (A.col_layout().owns(g)) {
      for (auto s = D.rowptr[u]; s < D.rowptr[u + 1]; ++s)
        if (D.col[static_cast<std::size_t>(s)] == g - cstart) v = D.val[static_cast<std::size_t>(s)];
    } else {
      for (auto s = O.rowptr[u]; s < O.rowptr[u + 1]; ++s)
        if (A.colmap()[static_cast<std::size_t>(O.col[static_cast<std::size_t>(s)])] == g) v = O.val[static_cast<std::size_t>(s)];
    }
    out[u] = v;
  }
  return d;
}

DistCsrMatrix mat_assemble_baseline(const Layout& rows, const Layout& cols, std::span<const Triplet> local) {
  const auto& comm = rows.comm();
  const int R = comm.size();
  const int me = comm.rank();
  std::vector<std::vector<Triplet>> out(static_cast<std::size_t>(R));
  for (const auto& t : local) {
    if (t.i < 0 || t.j < 0) continue;
    if (t.i >= rows.global_size() || t.j >= cols.global_size()) throw LinAlgError("baseline: triplet out of range");
    out[static_cast<std::size_t>(rows.owner(t.i))].push_back(t);
  }
  std::vector<Bytes> outgoing;
  for (auto& o : out) outgoing.push_back(encode(o));
  auto incoming = comm.alltoall(std::move(outgoing));

  std::map<std::pair<std::int64_t, std::int64_t>, double> acc;
  auto absorb = [&](const Bytes& b) {
    for (const auto& t : decode<Triplet>(b)) acc[{t.i, t.j}] += t.v;
  };
  absorb(incoming[static_cast<std::size_t>(me)]);
  for (int r = 0; r < R; ++r)
    if (r != me) absorb(incoming[static_cast<std::size_t>(r)]);

  std::vector<std::int64_t> ii, jj;
  std::vector<double> vv;
  for (const auto& [key, v] : acc) {
    ii.push_back(key.first);
    jj.push_back(key.second);
    vv.push_back(v);
  }
  DistCsrMatrix A(rows, cols);
  A.set_preallocation_coo(ii, jj);
  A.set_values_coo(vv, InsertMode::Insert);
  return A;
}

TripletFile read_triplets(std::istream& in) {
  TripletFile f;
  std::int64_t nnz = 0;
  if (!(in >> f.rows >> f.cols >> nnz) || f.rows < 0 || f.cols < 0 || nnz < 0)
    throw LinAlgError("triplet file: bad header, expected \"rows cols nnz\"");
  f.entries.reserve(static_cast<std::size_t>(nnz));
  for (std::int64_t k = 0; k < nnz; ++k) {
    Triplet t{};
    if (!(in >> t.i >> t.j >> t.v)) throw LinAlgError("triplet file: entry " + std::to_string(k) + " unreadable");
    if (t.i < 0 || t.i >= f.rows || t.j < 0 || t.j >= f.cols)
      throw LinAlgError("triplet file: entry " + std::to_string(k) + " out of range");
    f.entries.push_back(t);
  }
  return f;
}

TripletFile read_triplets_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LinAlgError("cannot open " + path);
  return read_triplets(in);
}

void write_triplets(std::ostream& out, const TripletFile& file) {
  out << file.rows << ' ' << file.cols << ' ' << file.entries.size() << '\n';
  out.precision(17);
  for (const auto& t : file.entries) out << t.i << ' ' << t.j << ' ' << t.v << '\n';
}

}  // namespace sfla
