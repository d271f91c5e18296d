#include "sfla/lbfgs.hpp"

#include <cmath>
#include <string>

namespace sfla {

namespace {

// Four interleaved partial sums so the loop vectorizes without reassociation flags.
double local_dot(std::span<const double> a, std::span<const double> b) {
  const std::size_t n = a.size(), n4 = n & ~std::size_t{3};
  double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
  for (std::size_t i = 0; i < n4; i += 4) {
    s0 += a[i] * b[i];
    s1 += a[i + 1] * b[i + 1];
    s2 += a[i + 2] * b[i + 2];
    s3 += a[i + 3] * b[i + 3];
  }
  for (std::size_t i = n4; i < n; ++i) s0 += a[i] * b[i];
  return (s0 + s1) + (s2 + s3);
}

// y += a x on the local slice
void local_axpy(std::span<double> y, double a, std::span<const double> x) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

void check_layout(const Layout& expected, const DistVector& v, const char* what) {
  if (!v.layout().valid() || v.layout().global_size() != expected.global_size() ||
      !v.layout().same_partition(expected))
    throw LinAlgError(std::string("lbfgs: dimension mismatch for ") + what);
}

}  // namespace

LbfgsState::LbfgsState(Layout layout, int m, BaseOperator h0, LbfgsOptions options)
    : layout_(std::move(layout)), m_(m), h0_(std::move(h0)), options_(options) {
  if (m_ < 1) throw LinAlgError("lbfgs: history capacity must be >= 1");
  if (!(options_.curvature_eps >= 0.0)) throw LinAlgError("lbfgs: curvature threshold must be >= 0");
  w_valid_ = options_.track_compact;
  S_.reserve(static_cast<std::size_t>(m_));
  Y_.reserve(static_cast<std::size_t>(m_));
  for (int j = 0; j < m_; ++j) {
    S_.emplace_back(layout_);
    Y_.emplace_back(layout_);
    if (options_.track_compact) W_.emplace_back(layout_);
  }
}

void LbfgsState::set_base(BaseOperator h0) {
  h0_ = std::move(h0);
  ++h0_version_;
}

void LbfgsState::base(const DistVector& in, DistVector& out, LbfgsCounters& c, bool refresh) {
  ++c.h0_calls;
  if (refresh) ++c.h0_refresh_calls;
  if (h0_) {
    h0_(in, out);
  } else {
    vec_copy(out, in);
  }
}

std::vector<double> LbfgsState::reduce(std::vector<double> partial, LbfgsCounters& c) const {
  ++c.reductions;
  return layout_.comm().allreduce(partial);
}

std::vector<double> LbfgsState::d() const {
  std::vector<double> out(static_cast<std::size_t>(k_));
  for (int j = 0; j < k_; ++j) out[static_cast<std::size_t>(j)] = sty_[static_cast<std::size_t>(j * k_ + j)];
  return out;
}

std::vector<double> LbfgsState::r_matrix() const {
  std::vector<double> r(sty_.size(), 0.0);
  for (int i = 0; i < k_; ++i)
    for (int j = i; j < k_; ++j) r[static_cast<std::size_t>(i * k_ + j)] = sty_[static_cast<std::size_t>(i * k_ + j)];
  return r;
}

std::vector<double> LbfgsState::recompute_sty() const {
  std::vector<double> partial(static_cast<std::size_t>(k_ * k_));
  for (int i = 0; i < k_; ++i) {
    auto si = s(i).host_read();
    for (int j = 0; j < k_; ++j) partial[static_cast<std::size_t>(i * k_ + j)] = local_dot(si, y(j).host_read());
  }
  return layout_.comm().allreduce(partial);
}

bool LbfgsState::update(const DistVector& s_new, const DistVector& y_new) {
  check_layout(layout_, s_new, "s");
  check_layout(layout_, y_new, "y");
  LbfgsCounters c;

  bool track_w = !W_.empty() && w_valid_ && w_version_ == h0_version_;
  DistVector w_new;
  if (track_w) {
    w_new = DistVector(layout_);
    base(y_new, w_new, c);
  }

  auto sn = s_new.host_read();
  auto yn = y_new.host_read();
  // [s^T y, s^T s, y^T y, s_new^T y_j (k), s_j^T y_new (k), w_j^T y_new (k), w_new^T y_new]
  std::vector<double> partial;
  partial.reserve(static_cast<std::size_t>(3 * k_ + 4));
  partial.push_back(local_dot(sn, yn));
  partial.push_back(local_dot(sn, sn));
  partial.push_back(local_dot(yn, yn));
  for (int j = 0; j < k_; ++j) partial.push_back(local_dot(sn, y(j).host_read()));
  for (int j = 0; j < k_; ++j) partial.push_back(local_dot(s(j).host_read(), yn));
  if (track_w) {
    for (int j = 0; j < k_; ++j) partial.push_back(local_dot(W_[slot(j)].host_read(), yn));
    partial.push_back(local_dot(w_new.host_read(), yn));
  }
  auto g = reduce(std::move(partial), c);

  double sty = g[0];
  double gate = options_.curvature_eps * std::sqrt(g[1]) * std::sqrt(g[2]);
  if (!(sty > gate)) {
    last_update_ = c;
    total_.reductions += c.reductions;
    total_.h0_calls += c.h0_calls;
    return false;
  }

  // Drop the oldest pair when full; the surviving block keeps logical order.
  int drop = (k_ == m_) ? 1 : 0;
  int kk = k_ - drop;
  int knew = kk + 1;
  std::vector<double> next(static_cast<std::size_t>(knew * knew));
  std::vector<double> next_wty(track_w ? static_cast<std::size_t>(knew * knew) : 0);
  for (int i = 0; i < kk; ++i)
    for (int j = 0; j < kk; ++j) {
      next[static_cast<std::size_t>(i * knew + j)] = sty_[static_cast<std::size_t>((i + drop) * k_ + (j + drop))];
      if (track_w)
        next_wty[static_cast<std::size_t>(i * knew + j)] = wty_[static_cast<std::size_t>((i + drop) * k_ + (j + drop))];
    }
  const double* row = g.data() + 3;            // s_new^T y_j
  const double* col = g.data() + 3 + k_;       // s_j^T y_new
  const double* wcol = g.data() + 3 + 2 * k_;  // w_j^T y_new
  for (int j = 0; j < kk; ++j) {
    next[static_cast<std::size_t>(kk * knew + j)] = row[j + drop];
    next[static_cast<std::size_t>(j * knew + kk)] = col[j + drop];
    if (track_w) {
      next_wty[static_cast<std::size_t>(kk * knew + j)] = wcol[j + drop];
      next_wty[static_cast<std::size_t>(j * knew + kk)] = wcol[j + drop];
    }
  }
  next[static_cast<std::size_t>(kk * knew + kk)] = sty;
  if (track_w) next_wty[static_cast<std::size_t>(kk * knew + kk)] = wcol[k_];

  // Write into the slot after the newest (the oldest slot when full).
  std::size_t target = static_cast<std::size_t>((head_ + k_) % m_);
  vec_copy(S_[target], s_new);
  vec_copy(Y_[target], y_new);
  if (track_w) vec_copy(W_[target], w_new);
  if (drop) head_ = (head_ + 1) % m_;
  k_ = knew;
  sty_ = std::move(next);
  if (track_w) {
    wty_ = std::move(next_wty);
  } else {
    w_valid_ = false;
  }

  last_update_ = c;
  total_.reductions += c.reductions;
  total_.h0_calls += c.h0_calls;
  return true;
}

std::vector<double> LbfgsState::solve_r(std::vector<double> a) const {
  for (int i = k_ - 1; i >= 0; --i) {
    double acc = a[static_cast<std::size_t>(i)];
    for (int j = i + 1; j < k_; ++j) acc -= sty_[static_cast<std::size_t>(i * k_ + j)] * a[static_cast<std::size_t>(j)];
    double rii = sty_[static_cast<std::size_t>(i * k_ + i)];
    if (rii == 0.0) throw LinAlgError("lbfgs: history degenerate");
    a[static_cast<std::size_t>(i)] = acc / rii;
  }
  return a;
}

std::vector<double> LbfgsState::solve_rt(std::vector<double> c) const {
  for (int i = 0; i < k_; ++i) {
    double acc = c[static_cast<std::size_t>(i)];
    for (int j = 0; j < i; ++j) acc -= sty_[static_cast<std::size_t>(j * k_ + i)] * c[static_cast<std::size_t>(j)];
    double rii = sty_[static_cast<std::size_t>(i * k_ + i)];
    if (rii == 0.0) throw LinAlgError("lbfgs: history degenerate");
    c[static_cast<std::size_t>(i)] = acc / rii;
  }
  return c;
}

void LbfgsState::apply(const DistVector& g, DistVector& p, Formulation f) {
  check_layout(layout_, g, "g");
  check_layout(layout_, p, "p");
  LbfgsCounters c;
  if (k_ == 0) {
    base(g, p, c);
  } else {
    switch (f) {
      case Formulation::Recursive: apply_recursive(g, p, c); break;
      case Formulation::CompactDense: apply_compact(g, p, c); break;
      case Formulation::IntermediateDense: apply_intermediate(g, p, c); break;
    }
  }
  last_ = c;
  total_.reductions += c.reductions;
  total_.h0_calls += c.h0_calls;
  total_.h0_refresh_calls += c.h0_refresh_calls;
}

void LbfgsState::apply_recursive(const DistVector& g, DistVector& p, LbfgsCounters& c) {
  DistVector q = g.duplicate();
  std::vector<double> alpha(static_cast<std::size_t>(k_));
  for (int j = k_ - 1; j >= 0; --j) {
    auto qs = q.host_read_write();
    double sq = reduce({local_dot(s(j).host_read(), qs)}, c)[0];
    double a = sq / sty_[static_cast<std::size_t>(j * k_ + j)];
    alpha[static_cast<std::size_t>(j)] = a;
    local_axpy(qs, -a, y(j).host_read());
  }
  base(q, p, c);
  for (int j = 0; j < k_; ++j) {
    auto ps = p.host_read_write();
    double yr = reduce({local_dot(y(j).host_read(), ps)}, c)[0];
    double beta = yr / sty_[static_cast<std::size_t>(j * k_ + j)];
    local_axpy(ps, alpha[static_cast<std::size_t>(j)] - beta, s(j).host_read());
  }
}

void LbfgsState::refresh_compact(LbfgsCounters& c) {
  if (W_.empty())
    for (int j = 0; j < m_; ++j) W_.emplace_back(layout_);
  for (int j = 0; j < k_; ++j) base(y(j), W_[slot(j)], c, true);
  std::vector<double> partial(static_cast<std::size_t>(k_ * k_));
  for (int i = 0; i < k_; ++i) {
    auto wi = W_[slot(i)].host_read();
    for (int j = 0; j < k_; ++j) partial[static_cast<std::size_t>(i * k_ + j)] = local_dot(wi, y(j).host_read());
  }
  wty_ = reduce(std::move(partial), c);
  w_version_ = h0_version_;
  w_valid_ = true;
}

void LbfgsState::apply_compact(const DistVector& g, DistVector& p, LbfgsCounters& c) {
  if (!w_valid_ || w_version_ != h0_version_) refresh_compact(c);

  // One fused reduction: a = S^T g, b = W^T g.
  auto gs = g.host_read();
  std::vector<double> partial(static_cast<std::size_t>(2 * k_));
  for (int j = 0; j < k_; ++j) {
    partial[static_cast<std::size_t>(j)] = local_dot(s(j).host_read(), gs);
    partial[static_cast<std::size_t>(k_ + j)] = local_dot(W_[slot(j)].host_read(), gs);
  }
  auto ab = reduce(std::move(partial), c);
  std::vector<double> a(ab.begin(), ab.begin() + k_);

  // t = R^{-1} a; u = R^{-T}((D + W^T Y) t - b)
  auto t = solve_r(std::move(a));
  std::vector<double> v(static_cast<std::size_t>(k_));
  for (int i = 0; i < k_; ++i) {
    double acc = sty_[static_cast<std::size_t>(i * k_ + i)] * t[static_cast<std::size_t>(i)];
    for (int j = 0; j < k_; ++j) acc += wty_[static_cast<std::size_t>(i * k_ + j)] * t[static_cast<std::size_t>(j)];
    v[static_cast<std::size_t>(i)] = acc - ab[static_cast<std::size_t>(k_ + i)];
  }
  auto u = solve_rt(std::move(v));

  base(g, p, c);
  auto ps = p.host_read_write();
  for (int j = 0; j < k_; ++j) {
    local_axpy(ps, u[static_cast<std::size_t>(j)], s(j).host_read());
    local_axpy(ps, -t[static_cast<std::size_t>(j)], W_[slot(j)].host_read());
  }
}

void LbfgsState::apply_intermediate(const DistVector& g, DistVector& p, LbfgsCounters& c) {
  auto gs = g.host_read();
  std::vector<double> partial(static_cast<std::size_t>(k_));
  for (int j = 0; j < k_; ++j) partial[static_cast<std::size_t>(j)] = local_dot(s(j).host_read(), gs);
  auto a = solve_r(reduce(std::move(partial), c));
  for (double& x : a) x = -x;

  DistVector q = g.duplicate();
  {
    auto qs = q.host_read_write();
    for (int j = 0; j < k_; ++j) local_axpy(qs, a[static_cast<std::size_t>(j)], y(j).host_read());
  }
  base(q, p, c);

  auto ps = p.host_read_write();
  std::vector<double> partial2(static_cast<std::size_t>(k_));
  for (int j = 0; j < k_; ++j) partial2[static_cast<std::size_t>(j)] = local_dot(y(j).host_read(), ps);
  auto cv = reduce(std::move(partial2), c);
  for (int j = 0; j < k_; ++j)
    cv[static_cast<std::size_t>(j)] += sty_[static_cast<std::size_t>(j * k_ + j)] * a[static_cast<std::size_t>(j)];
  auto u = solve_rt(std::move(cv));
  for (int j = 0; j < k_; ++j) local_axpy(ps, -u[static_cast<std::size_t>(j)], s(j).host_read());
}

double effective_bandwidth(double n, double m, double t_update, double t_solve) {
  if (!(t_update > 0.0) || !(t_solve > 0.0)) throw LinAlgError("effective_bandwidth: times must be positive");
  if (n < 0.0 || m < 0.0) throw LinAlgError("effective_bandwidth: n and m must be nonnegative");
  return n * (2.0 * m + 2.0) / (t_update + t_solve);
}

double effective_bandwidth_bytes(double n, double m, double t_update, double t_solve) {
  return 8.0 * effective_bandwidth(n, m, t_update, t_solve);
}

}  // namespace sfla
