#include "sfla/stream.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <deque>
#include <random>

namespace sfla {

ObjectId new_object_id() {
  static std::atomic<ObjectId> next{1};
  return next.fetch_add(1, std::memory_order_relaxed);
}

namespace {
std::mutex g_options_mutex;
bool g_options_set = false;
DeviceOptions g_options;
}  // namespace

DeviceOptions default_device_options() {
  {
    std::lock_guard lock(g_options_mutex);
    if (g_options_set) return g_options;
  }
  DeviceOptions o;
  if (const char* w = std::getenv("SFLA_STREAM_WORKERS")) o.workers = static_cast<unsigned>(std::strtoul(w, nullptr, 10));
  if (const char* d = std::getenv("SFLA_STREAM_DETERMINISTIC")) o.deterministic = std::string(d) != "0";
  return o;
}

void set_default_device_options(const DeviceOptions& options) {
  std::lock_guard lock(g_options_mutex);
  g_options = options;
  g_options_set = true;
}

namespace detail {

struct TaskNode {
  std::function<void()> body;
  std::weak_ptr<ContextState> ctx;
  const ContextState* ctx_raw = nullptr;
  std::uint64_t ticket = 0;
  int pending = 0;
  bool done = false;
  std::exception_ptr error;
  std::vector<std::shared_ptr<TaskNode>> dependents;
};

struct Intent {
  ObjectId id;
  AccessMode mode;
  std::string description;
};

struct ContextState {
  DeviceImpl* device = nullptr;
  int id = 0;
  std::shared_ptr<TaskNode> last;
  std::vector<Intent> intents;
  std::exception_ptr first_error;  // guarded by the device mutex
  bool is_child = false;
  bool joined = false;
};

struct ScalarState {
  Device* device = nullptr;
  ObjectId id = new_object_id();
  double host = 0.0;
  double dev = 0.0;
  bool host_valid = true;
  bool device_valid = false;
  std::atomic<std::uint64_t> d2h{0};
  std::atomic<std::uint64_t> h2d{0};
};

namespace {
thread_local const ContextState* tl_running_context = nullptr;

bool writes(AccessMode m) { return m != AccessMode::Read; }

AccessMode merge(AccessMode a, AccessMode b) { return a == b ? a : AccessMode::ReadWrite; }
}  // namespace

class DeviceImpl {
 public:
  DeviceImpl(Device* owner, DeviceOptions options) : owner_(owner), options_(options) {
    unsigned n = options.workers;
    if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
    if (options.deterministic) n = 1;
    for (unsigned w = 0; w < n; ++w) threads_.emplace_back([this, w] { worker_loop(w); });
    default_ctx_ = make_context(false);
  }

  ~DeviceImpl() {
    drain();
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    work_cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  std::shared_ptr<ContextState> make_context(bool child) {
    auto s = std::make_shared<ContextState>();
    s->device = this;
    s->is_child = child;
    std::lock_guard lock(mu_);
    s->id = next_ctx_id_++;
    return s;
  }

  DeviceContext wrap(std::shared_ptr<ContextState> s) { return DeviceContext(std::move(s)); }
  std::shared_ptr<ContextState> default_context() { return default_ctx_; }
  Device& owner() { return *owner_; }
  unsigned workers() const { return static_cast<unsigned>(threads_.size()); }

  DeviceStats stats() {
    std::lock_guard lock(mu_);
    return stats_;
  }

  void enqueue(const std::shared_ptr<ContextState>& ctx, std::vector<Access> accesses,
               std::function<void()> body, std::span<const std::shared_ptr<TaskNode>> extra_deps = {}) {
    if (tl_running_context == ctx.get())
      throw StreamError("re-entrant enqueue: a task may not enqueue onto its own context");

    for (const auto& in : ctx->intents) accesses.push_back({in.id, in.mode});
    // One entry per object, modes merged.
    std::sort(accesses.begin(), accesses.end(), [](const Access& a, const Access& b) { return a.id < b.id; });
    std::vector<Access> merged;
    for (const auto& a : accesses) {
      if (!merged.empty() && merged.back().id == a.id)
        merged.back().mode = merge(merged.back().mode, a.mode);
      else
        merged.push_back(a);
    }

    auto node = std::make_shared<TaskNode>();
    node->body = std::move(body);
    node->ctx = ctx;
    node->ctx_raw = ctx.get();

    bool ready = false;
    {
      std::lock_guard lock(mu_);
      node->ticket = ticket_.fetch_add(1);
      std::vector<TaskNode*> seen;
      auto depend = [&](const std::shared_ptr<TaskNode>& dep) {
        if (!dep || dep->done || dep.get() == node.get()) return;
        if (std::find(seen.begin(), seen.end(), dep.get()) != seen.end()) return;
        seen.push_back(dep.get());
        dep->dependents.push_back(node);
        ++node->pending;
      };
      depend(ctx->last);
      for (const auto& d : extra_deps) depend(d);
      for (const auto& a : merged) {
        auto& rec = records_[a.id];
        depend(rec.last_write);
        if (writes(a.mode)) {
          for (const auto& r : rec.reads) depend(r);
          rec.reads.clear();
          rec.last_write = node;
        } else {
          std::erase_if(rec.reads, [](const std::shared_ptr<TaskNode>& r) { return r->done; });
          rec.reads.push_back(node);
        }
      }
      ctx->last = node;
      ++outstanding_;
      if (node->pending == 0) {
        ready_.push_back(node);
        ready = true;
      }
    }
    if (ready) work_cv_.notify_one();
  }

  void wait_node(const std::shared_ptr<TaskNode>& node) {
    if (tl_running_context != nullptr) throw StreamError("host wait issued from inside a task");
    std::unique_lock lock(mu_);
    ++stats_.sync_calls;
    if (!node || node->done) return;
    ++stats_.host_waits;
    done_cv_.wait(lock, [&] { return node->done; });
  }

  void synchronize(const std::shared_ptr<ContextState>& ctx) {
    wait_node(ctx->last);
    std::exception_ptr err;
    {
      std::lock_guard lock(mu_);
      err = std::exchange(ctx->first_error, nullptr);
    }
    if (err) std::rethrow_exception(err);
  }

  /// Waits for the last writer of id (and, for write modes, all readers
  /// since). Returns the last writer's failure, if any.
  std::exception_ptr wait_for_object(ObjectId id, AccessMode mode) {
    if (tl_running_context != nullptr) throw StreamError("host wait issued from inside a task");
    std::unique_lock lock(mu_);
    ++stats_.sync_calls;
    auto it = records_.find(id);
    if (it == records_.end()) return nullptr;
    std::vector<std::shared_ptr<TaskNode>> waits;
    if (it->second.last_write) waits.push_back(it->second.last_write);
    if (writes(mode))
      for (const auto& r : it->second.reads) waits.push_back(r);
    bool blocked = false;
    for (const auto& n : waits) {
      if (!n->done) {
        blocked = true;
        done_cv_.wait(lock, [&] { return n->done; });
      }
    }
    if (blocked) ++stats_.host_waits;
    return it->second.last_write ? it->second.last_write->error : nullptr;
  }

  void drain() {
    std::unique_lock lock(mu_);
    done_cv_.wait(lock, [&] { return outstanding_ == 0; });
  }

  void fork_join_barrier(const std::shared_ptr<ContextState>& parent,
                         std::span<const std::shared_ptr<TaskNode>> children_last) {
    enqueue(parent, {}, [] {}, children_last);
  }

  void record_error(const std::shared_ptr<ContextState>& ctx, std::exception_ptr e) {
    std::lock_guard lock(mu_);
    if (!ctx->first_error) ctx->first_error = e;
  }

  std::exception_ptr take_error(const std::shared_ptr<ContextState>& ctx) {
    std::lock_guard lock(mu_);
    return std::exchange(ctx->first_error, nullptr);
  }

  std::mutex& mutex() { return mu_; }

 private:
  struct Record {
    std::shared_ptr<TaskNode> last_write;
    std::vector<std::shared_ptr<TaskNode>> reads;
  };

  void worker_loop(unsigned index) {
    std::mt19937_64 rng(options_.jitter_seed * 7919 + index);
    for (;;) {
      std::shared_ptr<TaskNode> node;
      {
        std::unique_lock lock(mu_);
        work_cv_.wait(lock, [&] { return stop_ || !ready_.empty(); });
        if (ready_.empty()) return;
        node = std::move(ready_.front());
        ready_.pop_front();
      }
      if (options_.jitter_us > 0) {
        auto us = std::uniform_int_distribution<unsigned>(0, options_.jitter_us)(rng);
        if (us == 0)
          std::this_thread::yield();
        else
          std::this_thread::sleep_for(std::chrono::microseconds(us));
      }
      if (!node->error) {
        tl_running_context = node->ctx_raw;
        try {
          node->body();
        } catch (...) {
          node->error = std::current_exception();
        }
        tl_running_context = nullptr;
      }
      node->body = nullptr;

      std::size_t woke = 0;
      {
        std::lock_guard lock(mu_);
        node->done = true;
        ++stats_.tasks_run;
        --outstanding_;
        if (node->error) {
          if (auto ctx = node->ctx.lock(); ctx && !ctx->first_error) ctx->first_error = node->error;
        }
        for (auto& dep : node->dependents) {
          if (node->error && !dep->error) dep->error = node->error;
          if (--dep->pending == 0) {
            ready_.push_back(std::move(dep));
            ++woke;
          }
        }
        node->dependents.clear();
      }
      if (woke == 1)
        work_cv_.notify_one();
      else if (woke > 1)
        work_cv_.notify_all();
      done_cv_.notify_all();
    }
  }

  Device* owner_;
  DeviceOptions options_;
  std::mutex mu_;
  std::condition_variable work_cv_, done_cv_;
  std::deque<std::shared_ptr<TaskNode>> ready_;
  std::unordered_map<ObjectId, Record> records_;
  std::atomic<std::uint64_t> ticket_{0};
  std::size_t outstanding_ = 0;
  bool stop_ = false;
  int next_ctx_id_ = 0;
  DeviceStats stats_;
  std::vector<std::thread> threads_;
  std::shared_ptr<ContextState> default_ctx_;
};

}  // namespace detail

// ---------------------------------------------------------------------------

Device::Device(DeviceOptions options) : impl_(std::make_unique<detail::DeviceImpl>(this, options)) {}
Device::~Device() = default;

DeviceContext Device::current_context() { return impl_->wrap(impl_->default_context()); }
DeviceContext Device::create_context() { return impl_->wrap(impl_->make_context(false)); }
unsigned Device::workers() const { return impl_->workers(); }
DeviceStats Device::stats() const { return impl_->stats(); }
void Device::drain() { impl_->drain(); }

void Device::wait_for_object(ObjectId id, AccessMode mode) {
  if (auto err = impl_->wait_for_object(id, mode)) std::rethrow_exception(err);
}

int DeviceContext::id() const { return state_->id; }
Device& DeviceContext::device() const { return state_->device->owner(); }

void DeviceContext::mark_intent_begin(ObjectId id, AccessMode mode, std::string description) {
  state_->intents.push_back({id, mode, std::move(description)});
}

void DeviceContext::mark_intent_end(ObjectId id, AccessMode mode) {
  auto& in = state_->intents;
  for (auto it = in.rbegin(); it != in.rend(); ++it) {
    if (it->id == id && it->mode == mode) {
      in.erase(std::next(it).base());
      return;
    }
  }
  throw StreamError("mark_intent_end without matching begin for object " + std::to_string(id));
}

void DeviceContext::enqueue(std::function<void()> body) { state_->device->enqueue(state_, {}, std::move(body)); }

void DeviceContext::submit(std::span<const Access> accesses, std::function<void()> body) {
  state_->device->enqueue(state_, {accesses.begin(), accesses.end()}, std::move(body));
}

void DeviceContext::synchronize() { state_->device->synchronize(state_); }

std::vector<DeviceContext> DeviceContext::fork(int k) {
  if (k < 0) throw StreamError("fork: negative child count");
  std::vector<DeviceContext> children;
  children.reserve(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    auto s = state_->device->make_context(true);
    {
      std::lock_guard lock(state_->device->mutex());
      s->last = state_->last;
    }
    children.push_back(DeviceContext(std::move(s)));
  }
  return children;
}

void DeviceContext::join(std::vector<DeviceContext>& children) {
  std::vector<std::shared_ptr<detail::TaskNode>> lasts;
  for (auto& c : children) {
    if (!c.state_->is_child) throw StreamError("join: context was not created by fork");
    if (c.state_->joined) throw StreamError("join: context " + std::to_string(c.id()) + " already joined");
  }
  for (auto& c : children) {
    c.state_->joined = true;
    {
      std::lock_guard lock(state_->device->mutex());
      lasts.push_back(c.state_->last);
    }
    if (auto err = state_->device->take_error(c.state_)) state_->device->record_error(state_, err);
  }
  state_->device->fork_join_barrier(state_, lasts);
}

void task_submit(DeviceContext& ctx, std::span<const ObjectId> reads, std::span<const ObjectId> writes,
                 std::function<void()> body) {
  std::vector<Access> acc;
  acc.reserve(reads.size() + writes.size());
  for (auto id : reads) acc.push_back({id, AccessMode::Read});
  for (auto id : writes) acc.push_back({id, AccessMode::Write});
  ctx.submit(acc, std::move(body));
}

// ---------------------------------------------------------------------------

ManagedScalar::ManagedScalar() : state_(std::make_shared<detail::ScalarState>()) {}

ManagedScalar::ManagedScalar(Device& device, double host_value) : ManagedScalar() {
  state_->device = &device;
  state_->host = host_value;
}

double ManagedScalar::value() const {
  auto& s = *state_;
  if (s.device) s.device->wait_for_object(s.id, AccessMode::Read);
  if (!s.host_valid) {
    s.host = s.dev;
    s.host_valid = true;
    s.d2h.fetch_add(1);
  }
  return s.host;
}

void ManagedScalar::set(double v) {
  auto& s = *state_;
  if (s.device) s.device->wait_for_object(s.id, AccessMode::Write);
  s.host = v;
  s.host_valid = true;
  s.device_valid = false;
}

void ManagedScalar::bind(Device& device) {
  if (state_->device == nullptr)
    state_->device = &device;
  else if (state_->device != &device)
    throw StreamError("managed scalar is bound to a different device");
}

ObjectId ManagedScalar::id() const { return state_->id; }
Device* ManagedScalar::device() const { return state_->device; }
bool ManagedScalar::host_valid() const { return state_->host_valid; }
bool ManagedScalar::device_valid() const { return state_->device_valid; }
std::uint64_t ManagedScalar::device_to_host_copies() const { return state_->d2h.load(); }
std::uint64_t ManagedScalar::host_to_device_copies() const { return state_->h2d.load(); }
double ManagedScalar::device_value() const { return state_->dev; }
void ManagedScalar::set_device_value(double v) const { state_->dev = v; }

void ManagedScalar::prepare_device_read() const {
  auto& s = *state_;
  if (!s.device_valid) {
    s.dev = s.host;
    s.device_valid = true;
    s.h2d.fetch_add(1);
  }
}

void ManagedScalar::prepare_device_write() const {
  state_->host_valid = false;
  state_->device_valid = true;
}

// ---------------------------------------------------------------------------

ScalarExpr::ScalarExpr(double literal) {
  auto n = std::make_shared<Node>();
  n->kind = Kind::Literal;
  n->literal = literal;
  node_ = std::move(n);
}

ScalarExpr::ScalarExpr(const ManagedScalar& ref) {
  auto n = std::make_shared<Node>();
  n->kind = Kind::Ref;
  n->ref = ref;
  node_ = std::move(n);
}

ScalarExpr ScalarExpr::make(Kind kind, const ScalarExpr& a) {
  auto n = std::make_shared<Node>();
  n->kind = kind;
  n->lhs = a.node_;
  n->depth = a.depth() + 1;
  if (n->depth > kMaxDepth)
    throw StreamError("scalar expression depth " + std::to_string(n->depth) + " exceeds " +
                      std::to_string(kMaxDepth));
  return ScalarExpr(std::move(n));
}

ScalarExpr ScalarExpr::make(Kind kind, const ScalarExpr& a, const ScalarExpr& b) {
  auto n = std::make_shared<Node>();
  n->kind = kind;
  n->lhs = a.node_;
  n->rhs = b.node_;
  n->depth = std::max(a.depth(), b.depth()) + 1;
  if (n->depth > kMaxDepth)
    throw StreamError("scalar expression depth " + std::to_string(n->depth) + " exceeds " +
                      std::to_string(kMaxDepth));
  return ScalarExpr(std::move(n));
}

ScalarExpr ScalarExpr::require_positive(const ScalarExpr& a, std::string message) {
  ScalarExpr e = make(Kind::RequirePositive, a);
  auto n = std::const_pointer_cast<Node>(e.node_);
  n->message = std::move(message);
  return e;
}

ScalarExpr ScalarExpr::require_nonzero(const ScalarExpr& a, const ScalarExpr& guard, double threshold,
                                       std::string message) {
  ScalarExpr e = make(Kind::RequireNonzero, a, guard);
  auto n = std::const_pointer_cast<Node>(e.node_);
  n->literal = threshold;
  n->message = std::move(message);
  return e;
}

ScalarExpr operator+(const ScalarExpr& a, const ScalarExpr& b) { return ScalarExpr::make(ScalarExpr::Kind::Add, a, b); }
ScalarExpr operator-(const ScalarExpr& a, const ScalarExpr& b) { return ScalarExpr::make(ScalarExpr::Kind::Sub, a, b); }
ScalarExpr operator*(const ScalarExpr& a, const ScalarExpr& b) { return ScalarExpr::make(ScalarExpr::Kind::Mul, a, b); }
ScalarExpr operator/(const ScalarExpr& a, const ScalarExpr& b) { return ScalarExpr::make(ScalarExpr::Kind::Div, a, b); }
ScalarExpr operator-(const ScalarExpr& a) { return ScalarExpr::make(ScalarExpr::Kind::Neg, a); }
ScalarExpr sqrt(const ScalarExpr& a) { return ScalarExpr::make(ScalarExpr::Kind::Sqrt, a); }
ScalarExpr reciprocal(const ScalarExpr& a) { return ScalarExpr::make(ScalarExpr::Kind::Recip, a); }
ScalarExpr safe_div(const ScalarExpr& a, const ScalarExpr& b) { return ScalarExpr::make(ScalarExpr::Kind::SafeDiv, a, b); }

namespace {

using Node = ScalarExpr::Node;
using Kind = ScalarExpr::Kind;

void collect_refs(const Node& n, std::vector<ManagedScalar>& out) {
  if (n.kind == Kind::Ref) {
    if (std::none_of(out.begin(), out.end(), [&](const ManagedScalar& s) { return s.id() == n.ref.id(); }))
      out.push_back(n.ref);
    return;
  }
  if (n.lhs) collect_refs(*n.lhs, out);
  if (n.rhs) collect_refs(*n.rhs, out);
}

/// Host-only refs are folded to literals at enqueue time.
std::shared_ptr<const Node> bind_literals(const std::shared_ptr<const Node>& n) {
  if (n->kind == Kind::Ref) {
    if (n->ref.device() != nullptr) return n;
    auto lit = std::make_shared<Node>();
    lit->kind = Kind::Literal;
    lit->literal = n->ref.value();
    return lit;
  }
  if (!n->lhs) return n;
  auto copy = std::make_shared<Node>(*n);
  copy->lhs = bind_literals(n->lhs);
  if (n->rhs) copy->rhs = bind_literals(n->rhs);
  return copy;
}

double evaluate(const Node& n) {
  switch (n.kind) {
    case Kind::Literal: return n.literal;
    case Kind::Ref: return n.ref.device_value();
    case Kind::Neg: return -evaluate(*n.lhs);
    case Kind::Sqrt: {
      double v = evaluate(*n.lhs);
      if (v < 0.0) throw StreamError("scalar expression: square root of negative value");
      return std::sqrt(v);
    }
    case Kind::Recip: {
      double v = evaluate(*n.lhs);
      if (v == 0.0) throw StreamError("scalar expression: division by zero");
      return 1.0 / v;
    }
    case Kind::Add: return evaluate(*n.lhs) + evaluate(*n.rhs);
    case Kind::Sub: return evaluate(*n.lhs) - evaluate(*n.rhs);
    case Kind::Mul: return evaluate(*n.lhs) * evaluate(*n.rhs);
    case Kind::Div: {
      double num = evaluate(*n.lhs);
      double den = evaluate(*n.rhs);
      if (den == 0.0) throw StreamError("scalar expression: division by zero");
      return num / den;
    }
    case Kind::SafeDiv: {
      double num = evaluate(*n.lhs);
      if (num == 0.0) return 0.0;
      double den = evaluate(*n.rhs);
      if (den == 0.0) throw StreamError("scalar expression: division by zero");
      return num / den;
    }
    case Kind::RequirePositive: {
      double v = evaluate(*n.lhs);
      if (!(v > 0.0)) throw StreamError(n.message);
      return v;
    }
    case Kind::RequireNonzero: {
      double v = evaluate(*n.lhs);
      if (std::abs(v) < n.literal && evaluate(*n.rhs) != 0.0) throw StreamError(n.message);
      return v;
    }
  }
  return 0.0;
}

}  // namespace

ManagedScalar eval(const ScalarExpr& expr, DeviceContext& ctx) {
  Device& dev = ctx.device();
  auto bound = bind_literals(expr.node());
  std::vector<ManagedScalar> refs;
  collect_refs(*bound, refs);
  for (const auto& r : refs)
    if (r.device() != &dev) throw StreamError("scalar_eval: operand bound to a different device");

  ManagedScalar result(dev);
  std::vector<Access> acc;
  for (const auto& r : refs) {
    r.prepare_device_read();
    acc.push_back({r.id(), AccessMode::Read});
  }
  result.prepare_device_write();
  acc.push_back({result.id(), AccessMode::Write});
  ctx.submit(acc, [bound, result] { result.set_device_value(evaluate(*bound)); });
  return result;
}

// ---------------------------------------------------------------------------

double measure_submit_latency(Device& device, LaunchMode mode, std::size_t count) {
  if (count == 0) return 0.0;
  DeviceContext ctx = device.create_context();
  ctx.synchronize();
  auto t0 = std::chrono::steady_clock::now();
  if (mode == LaunchMode::Async) {
    for (std::size_t i = 0; i < count; ++i) ctx.enqueue([] {});
    ctx.synchronize();
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      ctx.enqueue([] {});
      ctx.synchronize();
    }
  }
  auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / static_cast<double>(count);
}

}  // namespace sfla
