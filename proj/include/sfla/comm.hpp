#pragma once

// In-process message-passing world. Ranks are concurrent workers inside one
// process; channels are keyed by (communicator context, source, destination,
// tag) and deliver in FIFO order.

#include <concepts>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <type_traits>
#include <vector>

namespace sfla {

using Bytes = std::vector<std::byte>;

enum class ReduceOp { Replace, Sum };

class CommError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

//! Raised by spawn_world when a rank program fails; names the first failing rank.
class WorldError : public std::runtime_error {
 public:
  WorldError(int rank, const std::string& what)
      : std::runtime_error("rank " + std::to_string(rank) + " failed: " + what),
        rank_(rank) {}
  int rank() const noexcept { return rank_; }

 private:
  int rank_;
};

namespace detail {
class World;
struct CommState;
}  // namespace detail

// ---------------------------------------------------------------------------
// Typed codec for trivially copyable arrays.

template <typename T>
  requires std::is_trivially_copyable_v<T>
Bytes encode(std::span<const T> values) {
  Bytes out(values.size_bytes());
  if (!values.empty()) std::memcpy(out.data(), values.data(), values.size_bytes());
  return out;
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
Bytes encode(const std::vector<T>& values) {
  return encode(std::span<const T>(values));
}

template <typename T>
  requires std::is_trivially_copyable_v<T>
std::vector<T> decode(const Bytes& bytes) {
  if (bytes.size() % sizeof(T) != 0)
    throw CommError("decode: payload size " + std::to_string(bytes.size()) +
                    " is not a multiple of element size " + std::to_string(sizeof(T)));
  std::vector<T> out(bytes.size() / sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

// ---------------------------------------------------------------------------

/// Per-rank handle onto a world. Copies share the same state (tag and dup
/// counters), so a handle and its copies must stay on one worker.
class Communicator {
 public:
  Communicator() = default;

  int rank() const;
  int size() const;

  void send(int dest, int tag, Bytes payload) const;
  Bytes recv(int src, int tag) const;

  template <typename T>
  void send_values(int dest, int tag, std::span<const T> values) const {
    send(dest, tag, encode(values));
  }
  template <typename T>
  std::vector<T> recv_values(int src, int tag) const {
    return decode<T>(recv(src, tag));
  }

  /// Element-wise reduction; contributions are combined in ascending rank
  /// order on rank 0 and broadcast, so results are bit-reproducible.
  std::vector<double> allreduce(std::span<const double> values, ReduceOp op = ReduceOp::Sum) const;
  double allreduce(double value, ReduceOp op = ReduceOp::Sum) const;

  /// Generic reduction over byte payloads: rank 0 folds contributions into
  /// its own in ascending rank order with `combine`, then broadcasts.
  Bytes allreduce_bytes(Bytes mine, const std::function<void(Bytes& acc, const Bytes& in)>& combine) const;

  std::vector<Bytes> allgather(Bytes mine) const;
  /// Personalized all-to-all: outgoing[d] goes to rank d; result[s] came from rank s.
  std::vector<Bytes> alltoall(std::vector<Bytes> outgoing) const;
  Bytes broadcast(Bytes payload, int root) const;
  void barrier() const;

  /// Collective. Returns a communicator over the same ranks whose messages
  /// never match this one's.
  Communicator dup() const;

  /// Collective-consistent tag allocator: ranks that call it in the same
  /// program order obtain the same value. Tags below kUserTagLimit are free
  /// for direct use.
  int next_tag() const;

  static constexpr int kUserTagLimit = 1 << 20;

  std::uint64_t context_id() const;
  bool valid() const noexcept { return state_ != nullptr; }

 private:
  friend class detail::World;
  explicit Communicator(std::shared_ptr<detail::CommState> state) : state_(std::move(state)) {}
  std::shared_ptr<detail::CommState> state_;
};

namespace detail {
void run_world(int nranks, const std::function<void(Communicator&)>& program);
}

/// Runs program(comm) on nranks concurrent workers and returns per-rank
/// results in rank order. The first failure aborts the world (blocked
/// receives on other ranks are released) and is rethrown as WorldError.
/// Messages still undelivered at teardown are reported as a CommError.
template <typename Program>
auto spawn_world(int nranks, Program&& program) {
  using Result = std::invoke_result_t<Program&, Communicator&>;
  if (nranks < 1) throw CommError("spawn_world: need at least one rank");
  if constexpr (std::is_void_v<Result>) {
    detail::run_world(nranks, [&](Communicator& c) { program(c); });
  } else {
    std::vector<std::optional<Result>> slots(static_cast<std::size_t>(nranks));
    detail::run_world(nranks, [&](Communicator& c) {
      slots[static_cast<std::size_t>(c.rank())].emplace(program(c));
    });
    std::vector<Result> out;
    out.reserve(slots.size());
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
  }
}

}  // namespace sfla
