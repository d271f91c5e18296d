#pragma once

// Star forest: a bipartite communication graph from globally addressed roots
// (owner rank, offset) to locally indexed leaves, with split-phase broadcast
// (roots to leaves) and reduce (leaves to roots).

#include <atomic>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "sfla/comm.hpp"
#include "sfla/stream.hpp"

namespace sfla {

class SfError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LeafSpec {
  std::int64_t leaf;    // local leaf index; holes allowed
  int rank;             // owner of the root
  std::int64_t offset;  // root offset on the owner
};

struct SfStats {
  std::uint64_t packs = 0;          // gather/scatter loops executed
  std::uint64_t packs_skipped = 0;  // contiguous ranges moved with a single copy
};

class StarForest {
 public:
  /// One side of the plan for a single neighbor rank. Indices are in the
  /// canonical edge order: ascending (root offset, leaf index).
  struct Neighbor {
    int rank = 0;
    std::vector<std::int64_t> indices;
    bool contiguous = false;
  };

  /// Collective. Throws SfError on every rank if any leaf is invalid.
  StarForest(const Communicator& comm, std::int64_t nroots, std::vector<LeafSpec> leaves);

  std::int64_t nroots() const { return nroots_; }
  std::int64_t nleaves() const { return nleaves_; }
  /// Minimum leaf-buffer length (largest leaf index + 1).
  std::int64_t leaf_extent() const { return leaf_extent_; }

  const std::vector<Neighbor>& root_plan() const { return root_side_; }
  const std::vector<Neighbor>& leaf_plan() const { return leaf_side_; }
  SfStats stats() const { return {counters_->packs.load(), counters_->skipped.load()}; }
  bool pending() const { return pending_.kind != Phase::None; }

  template <typename T>
  void bcast_begin(std::span<const T> rootdata, std::span<T> leafdata, ReduceOp op) {
    check_types<T>(op);
    start(Phase::Bcast, op, rootdata.data(), leafdata.data(), rootdata.size(), leafdata.size());
    send_side<T>(comm_, root_side_, rootdata);
  }

  template <typename T>
  void bcast_end(std::span<const T> rootdata, std::span<T> leafdata, ReduceOp op) {
    finish(Phase::Bcast, op, rootdata.data(), leafdata.data());
    recv_side<T>(comm_, leaf_side_, leafdata, op);
  }

  template <typename T>
  void reduce_begin(std::span<const T> leafdata, std::span<T> rootdata, ReduceOp op) {
    check_types<T>(op);
    start(Phase::Reduce, op, leafdata.data(), rootdata.data(), rootdata.size(), leafdata.size());
    send_side<T>(comm_, leaf_side_, leafdata);
  }

  template <typename T>
  void reduce_end(std::span<const T> leafdata, std::span<T> rootdata, ReduceOp op) {
    finish(Phase::Reduce, op, leafdata.data(), rootdata.data());
    recv_side<T>(comm_, root_side_, rootdata, op);
  }

  template <typename T>
  void bcast(std::span<const T> rootdata, std::span<T> leafdata, ReduceOp op) {
    bcast_begin(rootdata, leafdata, op);
    bcast_end(rootdata, leafdata, op);
  }

  template <typename T>
  void reduce(std::span<const T> leafdata, std::span<T> rootdata, ReduceOp op) {
    reduce_begin(leafdata, rootdata, op);
    reduce_end(leafdata, rootdata, op);
  }

  /// Stream-aware broadcast: enqueues pack+send and receive+unpack as two
  /// tasks on ctx, exchanging over `channel` (normally a dup of the setup
  /// communicator reserved for device-side traffic). Buffers are resolved
  /// when the tasks run.
  void bcast_enqueue(DeviceContext& ctx, const Communicator& channel, ObjectId root_id,
                     std::function<std::span<const double>()> rootdata, ObjectId leaf_id,
                     std::function<std::span<double>()> leafdata, ReduceOp op);
  void reduce_enqueue(DeviceContext& ctx, const Communicator& channel, ObjectId leaf_id,
                      std::function<std::span<const double>()> leafdata, ObjectId root_id,
                      std::function<std::span<double>()> rootdata, ReduceOp op);

 private:
  enum class Phase { None, Bcast, Reduce };
  struct Pending {
    Phase kind = Phase::None;
    ReduceOp op = ReduceOp::Replace;
    const void* src = nullptr;
    const void* dst = nullptr;
  };

  template <typename T>
  static void check_types(ReduceOp op) {
    static_assert(std::is_trivially_copyable_v<T>);
    if constexpr (!std::is_arithmetic_v<T>) {
      if (op == ReduceOp::Sum) throw SfError("SUM requires an arithmetic unit type");
    }
  }

  void start(Phase kind, ReduceOp op, const void* src, const void* dst, std::size_t root_len,
             std::size_t leaf_len);
  void finish(Phase kind, ReduceOp op, const void* src, const void* dst);

  template <typename T>
  void send_side(const Communicator& comm, const std::vector<Neighbor>& side, std::span<const T> data) {
    for (const auto& nb : side) {
      Bytes buf(nb.indices.size() * sizeof(T));
      if (nb.contiguous && !nb.indices.empty()) {
        std::memcpy(buf.data(), data.data() + nb.indices.front(), buf.size());
        counters_->skipped.fetch_add(1, std::memory_order_relaxed);
      } else {
        T* out = reinterpret_cast<T*>(buf.data());
        for (std::size_t k = 0; k < nb.indices.size(); ++k) out[k] = data[static_cast<std::size_t>(nb.indices[k])];
        counters_->packs.fetch_add(1, std::memory_order_relaxed);
      }
      comm.send(nb.rank, tag_, std::move(buf));
    }
  }

  template <typename T>
  void recv_side(const Communicator& comm, const std::vector<Neighbor>& side, std::span<T> data, ReduceOp op) {
    // Neighbors are ordered by ascending rank, which fixes the accumulation order.
    for (const auto& nb : side) {
      Bytes buf = comm.recv(nb.rank, tag_);
      if (buf.size() != nb.indices.size() * sizeof(T))
        throw SfError("star forest: message from rank " + std::to_string(nb.rank) + " has unexpected size");
      const T* in = reinterpret_cast<const T*>(buf.data());
      if (op == ReduceOp::Replace && nb.contiguous && !nb.indices.empty()) {
        std::memcpy(data.data() + nb.indices.front(), in, buf.size());
        counters_->skipped.fetch_add(1, std::memory_order_relaxed);
        continue;
      }
      counters_->packs.fetch_add(1, std::memory_order_relaxed);
      if (op == ReduceOp::Replace) {
        for (std::size_t k = 0; k < nb.indices.size(); ++k) data[static_cast<std::size_t>(nb.indices[k])] = in[k];
      } else {
        if constexpr (std::is_arithmetic_v<T>) {
          for (std::size_t k = 0; k < nb.indices.size(); ++k) data[static_cast<std::size_t>(nb.indices[k])] += in[k];
        }
      }
    }
  }

  Communicator comm_;
  int tag_ = 0;
  std::int64_t nroots_ = 0;
  std::int64_t nleaves_ = 0;
  std::int64_t leaf_extent_ = 0;
  std::vector<Neighbor> root_side_;
  std::vector<Neighbor> leaf_side_;
  Pending pending_;
  struct Counters {
    std::atomic<std::uint64_t> packs{0};
    std::atomic<std::uint64_t> skipped{0};
  };
  // Shared so that tasks enqueued on worker threads can count safely.
  std::shared_ptr<Counters> counters_ = std::make_shared<Counters>();
};

}  // namespace sfla
