#pragma once

#include <atomic>
#include <memory>
#include <vector>

#include "sfla/vec.hpp"

namespace sfla {

namespace detail {

struct VecStorage {
  ObjectId id = new_object_id();
  std::vector<double> host;
  std::vector<double> dev;
  bool host_valid = true;
  bool device_valid = false;
  Device* device = nullptr;
  std::atomic<std::uint64_t> h2d{0};
  std::atomic<std::uint64_t> d2h{0};
};

struct VecCooPlan {
  std::int64_t n = 0;
  std::vector<std::int64_t> local_k;    // COO positions owned here, ascending
  std::vector<std::int64_t> local_idx;  // matching local offsets
  std::vector<int> send_ranks;
  std::vector<std::vector<std::int64_t>> send_k;
  std::vector<int> recv_ranks;                      // ascending
  std::vector<std::vector<std::int64_t>> recv_idx;  // local offsets per received entry
  int tag = 0;
};

struct VecAccess {
  static std::shared_ptr<VecStorage> storage(const DistVector& v) { return v.storage_; }
};

}  // namespace detail

}  // namespace sfla
