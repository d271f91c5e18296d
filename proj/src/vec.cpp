#include "sfla/vec.hpp"

#include <algorithm>
#include <cmath>

#include "sfla/exact_sum.hpp"
#include "vec_internal.hpp"

namespace sfla {

int Layout::owner(std::int64_t global_index) const {
  const auto& s = d_->starts;
  if (global_index < 0 || global_index >= s.back())
    throw LinAlgError("index " + std::to_string(global_index) + " outside [0," + std::to_string(s.back()) + ")");
  auto it = std::upper_bound(s.begin(), s.end(), global_index);
  return static_cast<int>(it - s.begin()) - 1;
}

Layout Layout::from_local(const Communicator& comm, std::int64_t local_size) {
  if (local_size < 0) throw LinAlgError("negative local size");
  auto parts = comm.allgather(encode(std::vector<std::int64_t>{local_size}));
  auto d = std::make_shared<Data>();
  d->comm = comm;
  d->device_comm = comm.dup();
  d->starts.push_back(0);
  for (const auto& p : parts) d->starts.push_back(d->starts.back() + decode<std::int64_t>(p).at(0));
  Layout l;
  l.d_ = std::move(d);
  return l;
}

Layout Layout::uniform(const Communicator& comm, std::int64_t global_size) {
  if (global_size < 0) throw LinAlgError("negative global size");
  auto d = std::make_shared<Data>();
  d->comm = comm;
  d->device_comm = comm.dup();
  const std::int64_t R = comm.size();
  d->starts.push_back(0);
  for (std::int64_t r = 0; r < R; ++r)
    d->starts.push_back(d->starts.back() + global_size / R + (r < global_size % R ? 1 : 0));
  Layout l;
  l.d_ = std::move(d);
  return l;
}

namespace {

void check_same(const DistVector& a, const DistVector& b, const char* op) {
  if (!a.layout().valid() || !b.layout().valid() || !a.layout().same_partition(b.layout()))
    throw LinAlgError(std::string(op) + ": layout mismatch");
}

void wait_host(detail::VecStorage& s, AccessMode mode) {
  if (s.device != nullptr) s.device->wait_for_object(s.id, mode);
}

}  // namespace

DistVector::DistVector(Layout layout, double fill) : layout_(std::move(layout)) {
  if (!layout_.valid()) throw LinAlgError("vector needs a valid layout");
  storage_ = std::make_shared<detail::VecStorage>();
  storage_->host.assign(static_cast<std::size_t>(layout_.local_size()), fill);
}

DistVector::DistVector() = default;
DistVector::DistVector(DistVector&&) noexcept = default;
DistVector& DistVector::operator=(DistVector&&) noexcept = default;
// Outstanding tasks hold the storage alive.
DistVector::~DistVector() = default;

DistVector DistVector::duplicate() const {
  DistVector out(layout_);
  auto src = host_read();
  std::copy(src.begin(), src.end(), out.storage_->host.begin());
  return out;
}

ObjectId DistVector::id() const { return storage_->id; }

std::span<const double> DistVector::host_read() const {
  auto& s = *storage_;
  wait_host(s, AccessMode::Read);
  if (!s.host_valid) {
    s.host = s.dev;
    s.host_valid = true;
    s.d2h.fetch_add(1, std::memory_order_relaxed);
  }
  return s.host;
}

std::span<double> DistVector::host_write() {
  auto& s = *storage_;
  wait_host(s, AccessMode::Write);
  s.host_valid = true;
  s.device_valid = false;
  return s.host;
}

std::span<double> DistVector::host_read_write() {
  auto& s = *storage_;
  wait_host(s, AccessMode::ReadWrite);
  if (!s.host_valid) {
    s.host = s.dev;
    s.d2h.fetch_add(1, std::memory_order_relaxed);
  }
  s.host_valid = true;
  s.device_valid = false;
  return s.host;
}

void DistVector::bind(Device& device) {
  auto& s = *storage_;
  if (s.device == nullptr) {
    s.device = &device;
    s.dev.assign(s.host.size(), 0.0);
  } else if (s.device != &device) {
    throw LinAlgError("vector is bound to a different device");
  }
}

Device* DistVector::device() const { return storage_->device; }

void DistVector::prepare_device_read() const {
  auto& s = *storage_;
  if (s.device == nullptr) throw LinAlgError("vector is not bound to a device");
  if (!s.device_valid) {
    // Copy at enqueue time; any pending device writer would have left the
    // device copy valid, so the host copy is current here.
    s.dev = s.host;
    s.device_valid = true;
    s.h2d.fetch_add(1, std::memory_order_relaxed);
  }
}

void DistVector::prepare_device_write() {
  auto& s = *storage_;
  if (s.device == nullptr) throw LinAlgError("vector is not bound to a device");
  s.device_valid = true;
  s.host_valid = false;
}

std::span<const double> DistVector::device_read() const { return storage_->dev; }
std::span<double> DistVector::device_span() const { return storage_->dev; }

Residency DistVector::residency() const { return {storage_->host_valid, storage_->device_valid}; }
std::uint64_t DistVector::host_to_device_copies() const { return storage_->h2d.load(); }
std::uint64_t DistVector::device_to_host_copies() const { return storage_->d2h.load(); }

void DistVector::set_preallocation_coo(std::span<const std::int64_t> i) {
  const auto& comm = layout_.comm();
  const int R = comm.size();
  auto plan = std::make_unique<detail::VecCooPlan>();
  plan->n = static_cast<std::int64_t>(i.size());
  plan->tag = comm.next_tag();

  std::string error;
  std::vector<std::vector<std::int64_t>> out_idx(static_cast<std::size_t>(R));
  std::vector<std::vector<std::int64_t>> send_k(static_cast<std::size_t>(R));
  for (std::size_t k = 0; k < i.size(); ++k) {
    const auto g = i[k];
    if (g < 0) continue;
    if (g >= layout_.global_size()) {
      if (error.empty())
        error = "rank " + std::to_string(comm.rank()) + ": i[" + std::to_string(k) + "] = " + std::to_string(g) +
                " out of range [0," + std::to_string(layout_.global_size()) + ")";
      continue;
    }
    const int o = layout_.owner(g);
    if (o == comm.rank()) {
      plan->local_k.push_back(static_cast<std::int64_t>(k));
      plan->local_idx.push_back(g - layout_.start());
    } else {
      out_idx[static_cast<std::size_t>(o)].push_back(g);
      send_k[static_cast<std::size_t>(o)].push_back(static_cast<std::int64_t>(k));
    }
  }
  // Agree on failure before exchanging, so every rank throws.
  auto errors = comm.allgather(encode(std::span<const char>(error.data(), error.size())));
  for (const auto& e : errors)
    if (!e.empty()) throw LinAlgError("vec_set_preallocation_coo: " + std::string(reinterpret_cast<const char*>(e.data()), e.size()));

  std::vector<Bytes> outgoing(static_cast<std::size_t>(R));
  for (int r = 0; r < R; ++r) {
    outgoing[static_cast<std::size_t>(r)] = encode(out_idx[static_cast<std::size_t>(r)]);
    if (!send_k[static_cast<std::size_t>(r)].empty()) {
      plan->send_ranks.push_back(r);
      plan->send_k.push_back(std::move(send_k[static_cast<std::size_t>(r)]));
    }
  }
  auto incoming = comm.alltoall(std::move(outgoing));
  for (int r = 0; r < R; ++r) {
    auto idx = decode<std::int64_t>(incoming[static_cast<std::size_t>(r)]);
    if (idx.empty()) continue;
    for (auto& g : idx) g -= layout_.start();
    plan->recv_ranks.push_back(r);
    plan->recv_idx.push_back(std::move(idx));
  }
  coo_ = std::move(plan);
}

void DistVector::set_values_coo(std::span<const double> v, InsertMode mode) {
  if (!coo_) throw LinAlgError("vec_set_values_coo called before vec_set_preallocation_coo");
  const auto& plan = *coo_;
  if (static_cast<std::int64_t>(v.size()) != plan.n)
    throw LinAlgError("vec_set_values_coo: expected " + std::to_string(plan.n) + " values, got " +
                      std::to_string(v.size()));
  const auto& comm = layout_.comm();
  for (std::size_t s = 0; s < plan.send_ranks.size(); ++s) {
    std::vector<double> buf;
    buf.reserve(plan.send_k[s].size());
    for (auto k : plan.send_k[s]) buf.push_back(v[static_cast<std::size_t>(k)]);
    comm.send(plan.send_ranks[s], plan.tag, encode(buf));
  }
  auto x = host_read_write();
  std::vector<char> touched(mode == InsertMode::Insert ? x.size() : 0, 0);
  auto put = [&](std::int64_t idx, double val) {
    auto u = static_cast<std::size_t>(idx);
    if (mode == InsertMode::Insert && !touched[u]) {
      touched[u] = 1;
      x[u] = val;
    } else {
      x[u] += val;
    }
  };
  for (std::size_t t = 0; t < plan.local_k.size(); ++t)
    put(plan.local_idx[t], v[static_cast<std::size_t>(plan.local_k[t])]);
  for (std::size_t s = 0; s < plan.recv_ranks.size(); ++s) {
    auto vals = comm.recv_values<double>(plan.recv_ranks[s], plan.tag);
    if (vals.size() != plan.recv_idx[s].size()) throw LinAlgError("vec_set_values_coo: protocol mismatch");
    for (std::size_t t = 0; t < vals.size(); ++t) put(plan.recv_idx[s][t], vals[t]);
  }
}

// ---------------------------------------------------------------------------

namespace {

using Packed = ExactSum::Packed;

Bytes pack_sums(const std::vector<ExactSum>& sums) {
  std::vector<Packed> p;
  p.reserve(sums.size());
  for (const auto& s : sums) p.push_back(s.pack());
  return encode(p);
}

std::vector<double> reduce_sums(const Communicator& comm, const std::vector<ExactSum>& sums) {
  Bytes all = comm.allreduce_bytes(pack_sums(sums), [](Bytes& acc, const Bytes& in) {
    auto a = decode<Packed>(acc);
    auto b = decode<Packed>(in);
    if (a.size() != b.size()) throw CommError("reproducible reduction: length mismatch");
    for (std::size_t t = 0; t < a.size(); ++t) {
      auto s = ExactSum::unpack(a[t]);
      s.merge(ExactSum::unpack(b[t]));
      a[t] = s.pack();
    }
    acc = encode(a);
  });
  auto packed = decode<Packed>(all);
  std::vector<double> out;
  out.reserve(packed.size());
  for (const auto& p : packed) out.push_back(ExactSum::unpack(p).round());
  return out;
}

ExactSum local_dot(std::span<const double> x, std::span<const double> y) {
  ExactSum s;
  for (std::size_t t = 0; t < x.size(); ++t) s.add(x[t] * y[t]);
  return s;
}

}  // namespace

double reproducible_dot(const Communicator& comm, std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw LinAlgError("reproducible_dot: length mismatch");
  return reduce_sums(comm, {local_dot(x, y)})[0];
}

double reproducible_sum_squares(const Communicator& comm, std::span<const double> x) {
  return reduce_sums(comm, {local_dot(x, x)})[0];
}

double vec_dot(const DistVector& x, const DistVector& y) {
  check_same(x, y, "vec_dot");
  return reproducible_dot(x.layout().comm(), x.host_read(), y.host_read());
}

double vec_norm2(const DistVector& x) { return std::sqrt(reproducible_sum_squares(x.layout().comm(), x.host_read())); }

void vec_axpy(DistVector& y, double a, const DistVector& x) {
  check_same(x, y, "vec_axpy");
  auto xs = x.host_read();
  auto ys = y.host_read_write();
  for (std::size_t t = 0; t < ys.size(); ++t) ys[t] += a * xs[t];
}

void vec_aypx(DistVector& y, double a, const DistVector& x) {
  check_same(x, y, "vec_aypx");
  auto xs = x.host_read();
  auto ys = y.host_read_write();
  for (std::size_t t = 0; t < ys.size(); ++t) ys[t] = xs[t] + a * ys[t];
}

void vec_scale(DistVector& x, double a) {
  for (auto& v : x.host_read_write()) v *= a;
}

void vec_pointwise_mult(DistVector& w, const DistVector& x, const DistVector& y) {
  check_same(x, y, "vec_pointwise_mult");
  check_same(w, x, "vec_pointwise_mult");
  auto xs = x.host_read();
  auto ys = y.host_read();
  if (w.id() == x.id() || w.id() == y.id()) {
    auto ws = w.host_read_write();
    for (std::size_t t = 0; t < ws.size(); ++t) ws[t] = xs[t] * ys[t];
    return;
  }
  auto ws = w.host_write();
  for (std::size_t t = 0; t < ws.size(); ++t) ws[t] = xs[t] * ys[t];
}

void vec_copy(DistVector& dst, const DistVector& src) {
  check_same(dst, src, "vec_copy");
  if (dst.id() == src.id()) return;
  auto s = src.host_read();
  auto d = dst.host_write();
  std::copy(s.begin(), s.end(), d.begin());
}

void vec_set(DistVector& x, double value) {
  auto d = x.host_write();
  std::fill(d.begin(), d.end(), value);
}

std::vector<double> vec_mdot(std::span<const DistVector* const> columns, const DistVector& y) {
  std::vector<ExactSum> sums;
  sums.reserve(columns.size());
  auto ys = y.host_read();
  for (const auto* c : columns) {
    check_same(*c, y, "vec_mdot");
    sums.push_back(local_dot(c->host_read(), ys));
  }
  return reduce_sums(y.layout().comm(), sums);
}

// ---------------------------------------------------------------------------
// Async variants.

namespace {

void bind_all(Device& dev, std::initializer_list<DistVector*> vs) {
  for (auto* v : vs) v->bind(dev);
}

}  // namespace

void vec_dot_async(DeviceContext& ctx, DistVector& x, DistVector& y, ManagedScalar& out) {
  check_same(x, y, "vec_dot_async");
  Device& dev = ctx.device();
  bind_all(dev, {&x, &y});
  out.bind(dev);
  x.prepare_device_read();
  y.prepare_device_read();
  out.prepare_device_write();
  auto xs = detail::VecAccess::storage(x);
  auto ys = detail::VecAccess::storage(y);
  Communicator comm = x.layout().device_comm();
  ManagedScalar o = out;
  ctx.submit({{x.id(), AccessMode::Read}, {y.id(), AccessMode::Read}, {out.id(), AccessMode::Write}},
             [xs, ys, comm, o] { o.set_device_value(reduce_sums(comm, {local_dot(xs->dev, ys->dev)})[0]); });
}

void vec_norm_async(DeviceContext& ctx, DistVector& x, ManagedScalar& out) {
  Device& dev = ctx.device();
  x.bind(dev);
  out.bind(dev);
  x.prepare_device_read();
  out.prepare_device_write();
  auto xs = detail::VecAccess::storage(x);
  Communicator comm = x.layout().device_comm();
  ManagedScalar o = out;
  ctx.submit({{x.id(), AccessMode::Read}, {out.id(), AccessMode::Write}},
             [xs, comm, o] { o.set_device_value(std::sqrt(reduce_sums(comm, {local_dot(xs->dev, xs->dev)})[0])); });
}

void vec_axpy_async(DeviceContext& ctx, DistVector& y, const ManagedScalar& a, DistVector& x) {
  check_same(x, y, "vec_axpy_async");
  Device& dev = ctx.device();
  bind_all(dev, {&x, &y});
  ManagedScalar s = a;
  s.bind(dev);
  x.prepare_device_read();
  y.prepare_device_read();
  s.prepare_device_read();
  y.prepare_device_write();
  auto xs = detail::VecAccess::storage(x);
  auto ys = detail::VecAccess::storage(y);
  ctx.submit({{x.id(), AccessMode::Read}, {y.id(), AccessMode::ReadWrite}, {s.id(), AccessMode::Read}}, [xs, ys, s] {
    const double av = s.device_value();
    for (std::size_t t = 0; t < ys->dev.size(); ++t) ys->dev[t] += av * xs->dev[t];
  });
}

void vec_aypx_async(DeviceContext& ctx, DistVector& y, const ManagedScalar& a, DistVector& x) {
  check_same(x, y, "vec_aypx_async");
  Device& dev = ctx.device();
  bind_all(dev, {&x, &y});
  ManagedScalar s = a;
  s.bind(dev);
  x.prepare_device_read();
  y.prepare_device_read();
  s.prepare_device_read();
  y.prepare_device_write();
  auto xs = detail::VecAccess::storage(x);
  auto ys = detail::VecAccess::storage(y);
  ctx.submit({{x.id(), AccessMode::Read}, {y.id(), AccessMode::ReadWrite}, {s.id(), AccessMode::Read}}, [xs, ys, s] {
    const double av = s.device_value();
    for (std::size_t t = 0; t < ys->dev.size(); ++t) ys->dev[t] = xs->dev[t] + av * ys->dev[t];
  });
}

void vec_scale_async(DeviceContext& ctx, DistVector& x, const ManagedScalar& a) {
  Device& dev = ctx.device();
  x.bind(dev);
  ManagedScalar s = a;
  s.bind(dev);
  x.prepare_device_read();
  s.prepare_device_read();
  x.prepare_device_write();
  auto xs = detail::VecAccess::storage(x);
  ctx.submit({{x.id(), AccessMode::ReadWrite}, {s.id(), AccessMode::Read}}, [xs, s] {
    const double av = s.device_value();
    for (auto& v : xs->dev) v *= av;
  });
}

void vec_pointwise_mult_async(DeviceContext& ctx, DistVector& w, DistVector& x, DistVector& y) {
  check_same(x, y, "vec_pointwise_mult_async");
  check_same(w, x, "vec_pointwise_mult_async");
  Device& dev = ctx.device();
  bind_all(dev, {&w, &x, &y});
  x.prepare_device_read();
  y.prepare_device_read();
  if (w.id() == x.id() || w.id() == y.id()) w.prepare_device_read();
  w.prepare_device_write();
  auto ws = detail::VecAccess::storage(w);
  auto xs = detail::VecAccess::storage(x);
  auto ys = detail::VecAccess::storage(y);
  ctx.submit({{x.id(), AccessMode::Read}, {y.id(), AccessMode::Read}, {w.id(), AccessMode::Write}}, [ws, xs, ys] {
    for (std::size_t t = 0; t < ws->dev.size(); ++t) ws->dev[t] = xs->dev[t] * ys->dev[t];
  });
}

void vec_copy_async(DeviceContext& ctx, DistVector& dst, DistVector& src) {
  check_same(dst, src, "vec_copy_async");
  if (dst.id() == src.id()) return;
  Device& dev = ctx.device();
  bind_all(dev, {&dst, &src});
  src.prepare_device_read();
  dst.prepare_device_write();
  auto ds = detail::VecAccess::storage(dst);
  auto ss = detail::VecAccess::storage(src);
  ctx.submit({{src.id(), AccessMode::Read}, {dst.id(), AccessMode::Write}}, [ds, ss] {
    std::copy(ss->dev.begin(), ss->dev.end(), ds->dev.begin());
  });
}

}  // namespace sfla
