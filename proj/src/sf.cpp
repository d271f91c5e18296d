#include "sfla/sf.hpp"

#include <algorithm>
#include <tuple>

namespace sfla {

namespace {

struct Request {
  std::int64_t offset;
  std::int64_t leaf;
};

bool is_contiguous(const std::vector<std::int64_t>& idx) {
  for (std::size_t k = 1; k < idx.size(); ++k)
    if (idx[k] != idx[0] + static_cast<std::int64_t>(k)) return false;
  return true;
}

Bytes encode_string(const std::string& s) {
  Bytes b(s.size());
  std::memcpy(b.data(), s.data(), s.size());
  return b;
}

std::string decode_string(const Bytes& b) { return {reinterpret_cast<const char*>(b.data()), b.size()}; }

}  // namespace

StarForest::StarForest(const Communicator& comm, std::int64_t nroots, std::vector<LeafSpec> leaves)
    : comm_(comm), tag_(comm.next_tag()), nroots_(nroots) {
  const int nranks = comm.size();
  const int me = comm.rank();
  std::string error;
  if (nroots < 0) error = "rank " + std::to_string(me) + ": negative root count";

  std::sort(leaves.begin(), leaves.end(), [](const LeafSpec& a, const LeafSpec& b) {
    return std::tie(a.rank, a.offset, a.leaf) < std::tie(b.rank, b.offset, b.leaf);
  });

  // Local validation; invalid leaves are dropped from the exchange so the
  // collective still completes, then reported below.
  std::vector<std::int64_t> seen_leaves;
  seen_leaves.reserve(leaves.size());
  std::vector<std::vector<Request>> requests(static_cast<std::size_t>(nranks));
  for (const auto& l : leaves) {
    if (l.leaf < 0 || l.rank < 0 || l.rank >= nranks || l.offset < 0) {
      if (error.empty())
        error = "rank " + std::to_string(me) + ": leaf " + std::to_string(l.leaf) + " has invalid root (" +
                std::to_string(l.rank) + ", " + std::to_string(l.offset) + ")";
      continue;
    }
    seen_leaves.push_back(l.leaf);
    requests[static_cast<std::size_t>(l.rank)].push_back({l.offset, l.leaf});
  }
  std::sort(seen_leaves.begin(), seen_leaves.end());
  if (auto dup = std::adjacent_find(seen_leaves.begin(), seen_leaves.end()); dup != seen_leaves.end()) {
    if (error.empty())
      error = "rank " + std::to_string(me) + ": leaf " + std::to_string(*dup) + " targets more than one root";
  }
  nleaves_ = static_cast<std::int64_t>(seen_leaves.size());
  leaf_extent_ = seen_leaves.empty() ? 0 : seen_leaves.back() + 1;

  for (int r = 0; r < nranks; ++r) {
    auto& req = requests[static_cast<std::size_t>(r)];
    if (req.empty()) continue;
    Neighbor nb;
    nb.rank = r;
    nb.indices.reserve(req.size());
    for (const auto& q : req) nb.indices.push_back(q.leaf);
    nb.contiguous = is_contiguous(nb.indices);
    leaf_side_.push_back(std::move(nb));
  }

  std::vector<Bytes> outgoing(static_cast<std::size_t>(nranks));
  for (int r = 0; r < nranks; ++r) outgoing[static_cast<std::size_t>(r)] = encode(requests[static_cast<std::size_t>(r)]);
  auto incoming = comm.alltoall(std::move(outgoing));

  for (int r = 0; r < nranks; ++r) {
    auto req = decode<Request>(incoming[static_cast<std::size_t>(r)]);
    if (req.empty()) continue;
    Neighbor nb;
    nb.rank = r;
    nb.indices.reserve(req.size());
    for (const auto& q : req) {
      if (q.offset >= nroots_ && error.empty())
        error = "rank " + std::to_string(r) + ": leaf " + std::to_string(q.leaf) + " references root offset " +
                std::to_string(q.offset) + " but rank " + std::to_string(me) + " owns " + std::to_string(nroots_) +
                " roots";
      nb.indices.push_back(q.offset);
    }
    nb.contiguous = is_contiguous(nb.indices);
    root_side_.push_back(std::move(nb));
  }

  auto errors = comm.allgather(encode_string(error));
  for (const auto& e : errors)
    if (!e.empty()) throw SfError("star forest setup: " + decode_string(e));
}

void StarForest::start(Phase kind, ReduceOp op, const void* src, const void* dst, std::size_t root_len,
                       std::size_t leaf_len) {
  if (pending_.kind != Phase::None) throw SfError("star forest: operation already pending");
  if (static_cast<std::int64_t>(root_len) < nroots_)
    throw SfError("star forest: root buffer shorter than nroots");
  if (static_cast<std::int64_t>(leaf_len) < leaf_extent_)
    throw SfError("star forest: leaf buffer shorter than largest leaf index");
  pending_ = {kind, op, src, dst};
}

void StarForest::finish(Phase kind, ReduceOp op, const void* src, const void* dst) {
  if (pending_.kind == Phase::None) throw SfError("star forest: end without matching begin");
  if (pending_.kind != kind) throw SfError("star forest: end does not match the pending operation kind");
  if (pending_.op != op) throw SfError("star forest: op differs between begin and end");
  if (pending_.src != src || pending_.dst != dst)
    throw SfError("star forest: buffers differ between begin and end");
  pending_ = {};
}

void StarForest::bcast_enqueue(DeviceContext& ctx, const Communicator& channel, ObjectId root_id,
                               std::function<std::span<const double>()> rootdata, ObjectId leaf_id,
                               std::function<std::span<double>()> leafdata, ReduceOp op) {
  ctx.submit({{root_id, AccessMode::Read}}, [this, channel, rootdata = std::move(rootdata)] {
    send_side<double>(channel, root_side_, rootdata());
  });
  ctx.submit({{leaf_id, op == ReduceOp::Replace ? AccessMode::Write : AccessMode::ReadWrite}},
             [this, channel, leafdata = std::move(leafdata), op] {
               recv_side<double>(channel, leaf_side_, leafdata(), op);
             });
}

void StarForest::reduce_enqueue(DeviceContext& ctx, const Communicator& channel, ObjectId leaf_id,
                                std::function<std::span<const double>()> leafdata, ObjectId root_id,
                                std::function<std::span<double>()> rootdata, ReduceOp op) {
  ctx.submit({{leaf_id, AccessMode::Read}}, [this, channel, leafdata = std::move(leafdata)] {
    send_side<double>(channel, leaf_side_, leafdata());
  });
  ctx.submit({{root_id, op == ReduceOp::Replace ? AccessMode::Write : AccessMode::ReadWrite}},
             [this, channel, rootdata = std::move(rootdata), op] {
               recv_side<double>(channel, root_side_, rootdata(), op);
             });
}

}  // namespace sfla
