#include "sfla/comm.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <deque>
#include <map>
#include <mutex>
#include <sstream>
#include <tuple>

namespace sfla {
namespace detail {

namespace {
// Reserved tags for collectives. Collectives are issued in the same program
// order on every rank, so FIFO channels keep successive calls apart.
constexpr int kTagAllreduce = -1;
constexpr int kTagAllreduceResult = -2;
constexpr int kTagAllgather = -3;
constexpr int kTagAlltoall = -4;
constexpr int kTagBroadcast = -5;
}  // namespace

class World {
 public:
  explicit World(int nranks)
      : nranks_(nranks), mailboxes_(static_cast<std::size_t>(nranks)),
        finished_(static_cast<std::size_t>(nranks)) {
    for (auto& f : finished_) f.store(false);
  }

  int size() const noexcept { return nranks_; }

  void post(std::uint64_t ctx, int src, int dst, int tag, Bytes payload) {
    check_rank(dst, "send");
    auto& box = mailboxes_[static_cast<std::size_t>(dst)];
    {
      std::lock_guard lock(box.mutex);
      box.queues[{ctx, src, tag}].push_back(std::move(payload));
    }
    box.cv.notify_all();
  }

  Bytes take(std::uint64_t ctx, int src, int dst, int tag) {
    check_rank(src, "recv");
    auto& box = mailboxes_[static_cast<std::size_t>(dst)];
    std::unique_lock lock(box.mutex);
    const Key key{ctx, src, tag};
    for (;;) {
      auto it = box.queues.find(key);
      if (it != box.queues.end() && !it->second.empty()) {
        Bytes out = std::move(it->second.front());
        it->second.pop_front();
        if (it->second.empty()) box.queues.erase(it);
        return out;
      }
      if (aborted_.load()) throw CommError("world aborted");
      // A finished sender can never satisfy the receive.
      if (src != dst && finished_[static_cast<std::size_t>(src)].load())
        throw CommError("world shut down: rank " + std::to_string(src) +
                        " completed without sending tag " + std::to_string(tag));
      box.cv.wait(lock);
    }
  }

  void mark_finished(int rank) {
    finished_[static_cast<std::size_t>(rank)].store(true);
    wake_all();
  }

  void abort() {
    aborted_.store(true);
    wake_all();
  }

  std::uint64_t dup_context(std::uint64_t parent, std::uint64_t seq) {
    std::lock_guard lock(ctx_mutex_);
    auto [it, inserted] = contexts_.try_emplace({parent, seq}, next_context_);
    if (inserted) ++next_context_;
    return it->second;
  }

  std::size_t undelivered(std::string& report) {
    std::size_t count = 0;
    std::ostringstream os;
    for (int dst = 0; dst < nranks_; ++dst) {
      auto& box = mailboxes_[static_cast<std::size_t>(dst)];
      std::lock_guard lock(box.mutex);
      for (const auto& [key, q] : box.queues) {
        if (q.empty()) continue;
        count += q.size();
        os << " (ctx " << std::get<0>(key) << ", " << std::get<1>(key) << "->" << dst
           << ", tag " << std::get<2>(key) << "): " << q.size();
      }
    }
    report = os.str();
    return count;
  }

  static Communicator make_comm(std::shared_ptr<CommState> state) { return Communicator(std::move(state)); }

 private:
  using Key = std::tuple<std::uint64_t, int, int>;  // (context, src, tag)

  struct Mailbox {
    std::mutex mutex;
    std::condition_variable cv;
    std::map<Key, std::deque<Bytes>> queues;
  };

  void check_rank(int r, const char* what) const {
    if (r < 0 || r >= nranks_)
      throw CommError(std::string(what) + ": rank " + std::to_string(r) + " outside [0," +
                      std::to_string(nranks_) + ")");
  }

  void wake_all() {
    for (auto& box : mailboxes_) {
      std::lock_guard lock(box.mutex);
      box.cv.notify_all();
    }
  }

  int nranks_;
  std::vector<Mailbox> mailboxes_;
  std::vector<std::atomic<bool>> finished_;
  std::atomic<bool> aborted_{false};

  std::mutex ctx_mutex_;
  std::map<std::pair<std::uint64_t, std::uint64_t>, std::uint64_t> contexts_;
  std::uint64_t next_context_ = 1;
};

struct CommState {
  std::shared_ptr<World> world;
  int rank = 0;
  std::uint64_t context = 0;
  std::uint64_t dup_count = 0;
  int next_tag = Communicator::kUserTagLimit;
};

void run_world(int nranks, const std::function<void(Communicator&)>& program) {
  auto world = std::make_shared<World>(nranks);

  std::mutex fail_mutex;
  int failed_rank = -1;
  std::string failure;

  std::vector<std::thread> workers;
  workers.reserve(static_cast<std::size_t>(nranks));
  for (int r = 0; r < nranks; ++r) {
    workers.emplace_back([&, r] {
      auto state = std::make_shared<CommState>();
      state->world = world;
      state->rank = r;
      Communicator comm = World::make_comm(state);
      try {
        program(comm);
      } catch (const std::exception& e) {
        {
          std::lock_guard lock(fail_mutex);
          if (failed_rank < 0) {
            failed_rank = r;
            failure = e.what();
          }
        }
        world->abort();
      } catch (...) {
        {
          std::lock_guard lock(fail_mutex);
          if (failed_rank < 0) {
            failed_rank = r;
            failure = "unknown exception";
          }
        }
        world->abort();
      }
      world->mark_finished(r);
    });
  }
  for (auto& t : workers) t.join();

  if (failed_rank >= 0) throw WorldError(failed_rank, failure);

  std::string report;
  if (auto n = world->undelivered(report); n > 0)
    throw CommError("world teardown: " + std::to_string(n) + " undelivered message(s):" + report);
}

}  // namespace detail

// ---------------------------------------------------------------------------

int Communicator::rank() const { return state_->rank; }
int Communicator::size() const { return state_->world->size(); }
std::uint64_t Communicator::context_id() const { return state_->context; }

void Communicator::send(int dest, int tag, Bytes payload) const {
  state_->world->post(state_->context, state_->rank, dest, tag, std::move(payload));
}

Bytes Communicator::recv(int src, int tag) const {
  return state_->world->take(state_->context, src, state_->rank, tag);
}

std::vector<double> Communicator::allreduce(std::span<const double> values, ReduceOp op) const {
  const int nranks = size();
  const int me = rank();
  if (nranks == 1) return {values.begin(), values.end()};

  if (me != 0) {
    send_values<double>(0, detail::kTagAllreduce, values);
    Bytes reply = recv(0, detail::kTagAllreduceResult);
    if (reply.empty()) throw CommError("allreduce: empty reply");
    if (reply[0] != std::byte{0}) {
      std::string msg(reinterpret_cast<const char*>(reply.data()) + 1, reply.size() - 1);
      throw CommError(msg);
    }
    std::vector<double> out((reply.size() - 1) / sizeof(double));
    std::memcpy(out.data(), reply.data() + 1, out.size() * sizeof(double));
    return out;
  }

  std::vector<double> acc(values.begin(), values.end());
  std::string error;
  for (int r = 1; r < nranks; ++r) {
    auto contrib = recv_values<double>(r, detail::kTagAllreduce);
    if (contrib.size() != acc.size()) {
      if (error.empty())
        error = "allreduce: length mismatch (rank 0 has " + std::to_string(acc.size()) +
                ", rank " + std::to_string(r) + " has " + std::to_string(contrib.size()) + ")";
      continue;
    }
    if (op == ReduceOp::Sum) {
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += contrib[i];
    } else {
      acc = std::move(contrib);
    }
  }

  Bytes reply;
  if (error.empty()) {
    reply.resize(1 + acc.size() * sizeof(double));
    reply[0] = std::byte{0};
    if (!acc.empty()) std::memcpy(reply.data() + 1, acc.data(), acc.size() * sizeof(double));
  } else {
    reply.resize(1 + error.size());
    reply[0] = std::byte{1};
    std::memcpy(reply.data() + 1, error.data(), error.size());
  }
  for (int r = 1; r < nranks; ++r) send(r, detail::kTagAllreduceResult, reply);
  if (!error.empty()) throw CommError(error);
  return acc;
}

double Communicator::allreduce(double value, ReduceOp op) const {
  return allreduce(std::span<const double>(&value, 1), op)[0];
}

Bytes Communicator::allreduce_bytes(Bytes mine,
                                    const std::function<void(Bytes& acc, const Bytes& in)>& combine) const {
  const int nranks = size();
  if (nranks == 1) return mine;
  if (rank() != 0) {
    send(0, detail::kTagAllreduce, std::move(mine));
    return recv(0, detail::kTagAllreduceResult);
  }
  for (int r = 1; r < nranks; ++r) combine(mine, recv(r, detail::kTagAllreduce));
  for (int r = 1; r < nranks; ++r) send(r, detail::kTagAllreduceResult, mine);
  return mine;
}

std::vector<Bytes> Communicator::allgather(Bytes mine) const {
  const int nranks = size();
  const int me = rank();
  std::vector<Bytes> out(static_cast<std::size_t>(nranks));
  for (int r = 0; r < nranks; ++r)
    if (r != me) send(r, detail::kTagAllgather, mine);
  for (int r = 0; r < nranks; ++r)
    out[static_cast<std::size_t>(r)] = (r == me) ? mine : recv(r, detail::kTagAllgather);
  return out;
}

std::vector<Bytes> Communicator::alltoall(std::vector<Bytes> outgoing) const {
  const int nranks = size();
  if (static_cast<int>(outgoing.size()) != nranks)
    throw CommError("alltoall: need one outgoing buffer per rank");
  const int me = rank();
  std::vector<Bytes> out(static_cast<std::size_t>(nranks));
  for (int r = 0; r < nranks; ++r)
    if (r != me) send(r, detail::kTagAlltoall, std::move(outgoing[static_cast<std::size_t>(r)]));
  out[static_cast<std::size_t>(me)] = std::move(outgoing[static_cast<std::size_t>(me)]);
  for (int r = 0; r < nranks; ++r)
    if (r != me) out[static_cast<std::size_t>(r)] = recv(r, detail::kTagAlltoall);
  return out;
}

Bytes Communicator::broadcast(Bytes payload, int root) const {
  const int nranks = size();
  if (rank() == root) {
    for (int r = 0; r < nranks; ++r)
      if (r != root) send(r, detail::kTagBroadcast, payload);
    return payload;
  }
  return recv(root, detail::kTagBroadcast);
}

void Communicator::barrier() const { (void)allgather({}); }

Communicator Communicator::dup() const {
  auto state = std::make_shared<detail::CommState>();
  state->world = state_->world;
  state->rank = state_->rank;
  state->context = state_->world->dup_context(state_->context, state_->dup_count++);
  return Communicator(std::move(state));
}

int Communicator::next_tag() const { return state_->next_tag++; }

}  // namespace sfla
