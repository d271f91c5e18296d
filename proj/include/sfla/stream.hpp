#pragma once

// Asynchronous execution engine modeled on GPU streams: a Device owns a worker
// pool and a dependency tracker; DeviceContexts are ordered task queues on a
// Device. Cross-context ordering comes from declared object accesses, which
// the tracker turns into task-graph edges. Waiting happens on pool workers;
// the enqueueing thread only blocks in synchronize() and ManagedScalar::value().

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

namespace sfla {

using ObjectId = std::uint64_t;

/// Process-wide unique id for registering memory with the tracker.
ObjectId new_object_id();

enum class AccessMode { Read, Write, ReadWrite };

class StreamError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DeviceOptions {
  unsigned workers = 0;      // 0: available parallelism
  bool deterministic = false;  // single worker, FIFO ready queue
  unsigned jitter_us = 0;    // random pre-task delay bound, for stress tests
  std::uint64_t jitter_seed = 0;
};

/// Defaults honor SFLA_STREAM_WORKERS and SFLA_STREAM_DETERMINISTIC, and
/// whatever the CLI installed with set_default_device_options().
DeviceOptions default_device_options();
void set_default_device_options(const DeviceOptions& options);

struct DeviceStats {
  std::uint64_t tasks_run = 0;
  std::uint64_t host_waits = 0;       // synchronize/materialize calls that had to block
  std::uint64_t sync_calls = 0;       // synchronize/materialize calls, blocking or not
  std::uint64_t enqueue_blocks = 0;   // must stay 0: enqueue paths never wait
};

struct Access {
  ObjectId id;
  AccessMode mode;
};

namespace detail {
struct TaskNode;
struct ContextState;
struct ScalarState;
class DeviceImpl;
}  // namespace detail

class DeviceContext;

/// One device serves one rank. Device tasks may run collectives on that
/// rank's communicator, so ranks sharing a device can starve each other.
class Device {
 public:
  explicit Device(DeviceOptions options = default_device_options());
  ~Device();
  Device(const Device&) = delete;
  Device& operator=(const Device&) = delete;

  /// The device's default context.
  DeviceContext current_context();
  DeviceContext create_context();

  unsigned workers() const;
  DeviceStats stats() const;

  /// Blocks until every recorded access to id that conflicts with mode has
  /// completed. Used by host-side access to registered memory.
  void wait_for_object(ObjectId id, AccessMode mode);

  /// Blocks until every task submitted to this device so far has completed.
  void drain();

  detail::DeviceImpl& impl() { return *impl_; }

 private:
  std::unique_ptr<detail::DeviceImpl> impl_;
};

/// Handle onto an ordered task queue. Copies refer to the same queue.
class DeviceContext {
 public:
  DeviceContext() = default;

  int id() const;
  Device& device() const;

  void mark_intent_begin(ObjectId id, AccessMode mode, std::string description = {});
  void mark_intent_end(ObjectId id, AccessMode mode);

  /// Enqueue body with the accesses declared by the currently open intents.
  void enqueue(std::function<void()> body);

  /// Enqueue body with an explicit access set (intent regions still apply).
  void submit(std::span<const Access> accesses, std::function<void()> body);
  void submit(std::initializer_list<Access> accesses, std::function<void()> body) {
    submit(std::span<const Access>(accesses.begin(), accesses.size()), std::move(body));
  }

  /// Blocks until all tasks enqueued so far complete; rethrows the first
  /// task failure recorded on this context since the last synchronize.
  void synchronize();

  std::vector<DeviceContext> fork(int k);
  void join(std::vector<DeviceContext>& children);

  bool valid() const noexcept { return state_ != nullptr; }
  bool operator==(const DeviceContext& other) const noexcept { return state_ == other.state_; }

 private:
  friend class detail::DeviceImpl;
  explicit DeviceContext(std::shared_ptr<detail::ContextState> s) : state_(std::move(s)) {}
  std::shared_ptr<detail::ContextState> state_;
};

/// Convenience form of submit taking read and write id lists.
void task_submit(DeviceContext& ctx, std::span<const ObjectId> reads, std::span<const ObjectId> writes,
                 std::function<void()> body);

// ---------------------------------------------------------------------------
// Managed scalars: a future-valued double mirrored between host and device.

class ManagedScalar {
 public:
  ManagedScalar();
  explicit ManagedScalar(Device& device, double host_value = 0.0);

  /// Materialize on the host: waits for the producing task, then copies
  /// device to host once. Rethrows a failure of the producing task.
  double value() const;
  /// Host write; waits for outstanding device readers and writers first.
  void set(double v);

  /// Binds an unbound scalar to device; throws if bound elsewhere.
  void bind(Device& device);

  ObjectId id() const;
  Device* device() const;
  bool host_valid() const;
  bool device_valid() const;
  std::uint64_t device_to_host_copies() const;
  std::uint64_t host_to_device_copies() const;

  // Device-side access, for use inside task bodies only.
  double device_value() const;
  void set_device_value(double v) const;

  /// Called at enqueue time by async producers/consumers.
  void prepare_device_read() const;
  void prepare_device_write() const;

 private:
  std::shared_ptr<detail::ScalarState> state_;
};

class ScalarExpr {
 public:
  ScalarExpr(double literal);  // NOLINT: implicit by design of the expression API
  ScalarExpr(const ManagedScalar& ref);  // NOLINT

  enum class Kind { Literal, Ref, Neg, Sqrt, Recip, Add, Sub, Mul, Div, SafeDiv, RequirePositive, RequireNonzero };

  struct Node {
    Kind kind;
    double literal = 0.0;
    ManagedScalar ref;
    std::shared_ptr<const Node> lhs, rhs;
    int depth = 1;
    std::string message;
  };

  const std::shared_ptr<const Node>& node() const { return node_; }
  int depth() const { return node_->depth; }

  static constexpr int kMaxDepth = 64;

  static ScalarExpr make(Kind kind, const ScalarExpr& a);
  static ScalarExpr make(Kind kind, const ScalarExpr& a, const ScalarExpr& b);

  /// Fails at evaluation with `message` unless the value is strictly positive.
  static ScalarExpr require_positive(const ScalarExpr& a, std::string message);
  /// Fails with `message` when |a| < threshold while guard is nonzero;
  /// otherwise evaluates to a.
  static ScalarExpr require_nonzero(const ScalarExpr& a, const ScalarExpr& guard, double threshold,
                                    std::string message);

 private:
  explicit ScalarExpr(std::shared_ptr<const Node> n) : node_(std::move(n)) {}
  std::shared_ptr<const Node> node_;
};

ScalarExpr operator+(const ScalarExpr& a, const ScalarExpr& b);
ScalarExpr operator-(const ScalarExpr& a, const ScalarExpr& b);
ScalarExpr operator*(const ScalarExpr& a, const ScalarExpr& b);
ScalarExpr operator/(const ScalarExpr& a, const ScalarExpr& b);
ScalarExpr operator-(const ScalarExpr& a);
ScalarExpr sqrt(const ScalarExpr& a);
ScalarExpr reciprocal(const ScalarExpr& a);
/// a / b, except that an exactly zero numerator yields 0 without evaluating b.
ScalarExpr safe_div(const ScalarExpr& a, const ScalarExpr& b);

/// Enqueue evaluation of expr on ctx; the result is device-valid only.
ManagedScalar eval(const ScalarExpr& expr, DeviceContext& ctx);

// ---------------------------------------------------------------------------

enum class LaunchMode { Async, SyncEach };

/// Mean wall time per submission of `count` empty tasks.
double measure_submit_latency(Device& device, LaunchMode mode, std::size_t count);

}  // namespace sfla
