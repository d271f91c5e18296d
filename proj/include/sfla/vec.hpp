#pragma once

// Distributed vectors over contiguous row layouts. Each vector keeps a host
// copy and a simulated device copy with a residency mask; device-side access
// happens only inside tasks enqueued on a DeviceContext.

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "sfla/comm.hpp"
#include "sfla/stream.hpp"

namespace sfla {

class LinAlgError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class InsertMode { Insert, Add };

class Layout {
 public:
  Layout() = default;

  /// Collective: each rank states how many entries it owns.
  static Layout from_local(const Communicator& comm, std::int64_t local_size);
  /// Collective: near-even split of global_size, remainder to lower ranks.
  static Layout uniform(const Communicator& comm, std::int64_t global_size);

  std::int64_t global_size() const { return d_->starts.back(); }
  std::int64_t start() const { return start(d_->comm.rank()); }
  std::int64_t end() const { return end(d_->comm.rank()); }
  std::int64_t local_size() const { return end() - start(); }
  std::int64_t start(int rank) const { return d_->starts[static_cast<std::size_t>(rank)]; }
  std::int64_t end(int rank) const { return d_->starts[static_cast<std::size_t>(rank) + 1]; }
  bool owns(std::int64_t global_index) const { return global_index >= start() && global_index < end(); }
  /// Rank owning global_index, which must lie in [0, global_size).
  int owner(std::int64_t global_index) const;

  const Communicator& comm() const { return d_->comm; }
  /// Communicator reserved for collectives issued from device tasks.
  const Communicator& device_comm() const { return d_->device_comm; }

  bool valid() const { return d_ != nullptr; }
  bool same_partition(const Layout& other) const { return d_ == other.d_ || d_->starts == other.d_->starts; }

 private:
  struct Data {
    Communicator comm;
    Communicator device_comm;
    std::vector<std::int64_t> starts;  // size R+1
  };
  std::shared_ptr<const Data> d_;
};

struct Residency {
  bool host_valid;
  bool device_valid;
};

namespace detail {
struct VecStorage;
struct VecCooPlan;
struct VecAccess;
}  // namespace detail

class DistVector {
 public:
  DistVector();
  explicit DistVector(Layout layout, double fill = 0.0);
  DistVector(DistVector&&) noexcept;
  DistVector& operator=(DistVector&&) noexcept;
  ~DistVector();

  /// Deep copy of the current values into a new object (new id).
  DistVector duplicate() const;

  const Layout& layout() const { return layout_; }
  ObjectId id() const;
  std::int64_t local_size() const { return layout_.local_size(); }

  // Host domain. Reads wait for pending device writers; writes also wait for
  // pending device readers. Each implicit transfer bumps a copy counter.
  std::span<const double> host_read() const;
  std::span<double> host_write();
  std::span<double> host_read_write();

  // Device domain. Call the prepare_* hooks when enqueuing; use the span
  // accessors only from inside task bodies.
  void bind(Device& device);
  Device* device() const;
  void prepare_device_read() const;
  void prepare_device_write();
  std::span<const double> device_read() const;
  std::span<double> device_span() const;

  Residency residency() const;
  std::uint64_t host_to_device_copies() const;
  std::uint64_t device_to_host_copies() const;

  /// Collective. Entries with i[k] < 0 are ignored; remote entries are routed
  /// to their owners.
  void set_preallocation_coo(std::span<const std::int64_t> i);
  /// Collective. Contributions are accumulated per index in a fixed order:
  /// local entries by ascending k, then received entries by ascending source
  /// rank and k. Insert sets touched entries to the sum of this call's
  /// contributions; untouched entries keep their values.
  void set_values_coo(std::span<const double> v, InsertMode mode);

 private:
  friend struct detail::VecAccess;
  Layout layout_;
  std::shared_ptr<detail::VecStorage> storage_;
  std::unique_ptr<detail::VecCooPlan> coo_;
};

// Blocking (host-domain) operations. Reductions are collective and
// bit-reproducible across runs and rank counts.
double vec_dot(const DistVector& x, const DistVector& y);
double vec_norm2(const DistVector& x);
void vec_axpy(DistVector& y, double a, const DistVector& x);   // y += a x
void vec_aypx(DistVector& y, double a, const DistVector& x);   // y = x + a y
void vec_scale(DistVector& x, double a);
void vec_pointwise_mult(DistVector& w, const DistVector& x, const DistVector& y);  // w = x .* y
void vec_copy(DistVector& dst, const DistVector& src);
void vec_set(DistVector& x, double value);

/// Fused multi-dot: result[j] = <columns[j], y>, one reduction.
std::vector<double> vec_mdot(std::span<const DistVector* const> columns, const DistVector& y);

/// Reproducible global reductions over local slices.
double reproducible_dot(const Communicator& comm, std::span<const double> x, std::span<const double> y);
double reproducible_sum_squares(const Communicator& comm, std::span<const double> x);

// Asynchronous (device-domain) operations: enqueue on ctx, never block the
// caller. Global reductions run inside the enqueued task over the layout's
// device communicator.
void vec_dot_async(DeviceContext& ctx, DistVector& x, DistVector& y, ManagedScalar& out);
void vec_norm_async(DeviceContext& ctx, DistVector& x, ManagedScalar& out);
void vec_axpy_async(DeviceContext& ctx, DistVector& y, const ManagedScalar& a, DistVector& x);
void vec_aypx_async(DeviceContext& ctx, DistVector& y, const ManagedScalar& a, DistVector& x);
void vec_scale_async(DeviceContext& ctx, DistVector& x, const ManagedScalar& a);
void vec_pointwise_mult_async(DeviceContext& ctx, DistVector& w, DistVector& x, DistVector& y);
void vec_copy_async(DeviceContext& ctx, DistVector& dst, DistVector& src);

}  // namespace sfla
