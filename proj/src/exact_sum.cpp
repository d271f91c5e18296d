#include "sfla/exact_sum.hpp"

#include <bit>
#include <cmath>
#include <limits>

namespace sfla {

namespace {
constexpr std::int64_t kNormalizeEvery = std::int64_t{1} << 30;
constexpr int kMantBits = 53;
constexpr int kMinExp = -1074;  // weight of bit 0
}  // namespace

void ExactSum::add(double v) {
  if (v == 0.0) return;
  if (!std::isfinite(v)) {
    if (std::isnan(v))
      nan_ = true;
    else if (v > 0)
      pos_inf_ = true;
    else
      neg_inf_ = true;
    return;
  }
  const auto bits = std::bit_cast<std::uint64_t>(v);
  const bool negative = (bits >> 63) != 0;
  const int biased = static_cast<int>((bits >> 52) & 0x7ff);
  std::uint64_t mant = bits & ((std::uint64_t{1} << 52) - 1);
  int pos;  // bit position of the mantissa's least significant bit
  if (biased == 0) {
    pos = 0;
  } else {
    mant |= std::uint64_t{1} << 52;
    pos = biased - 1;
  }
  const int chunk = pos >> 5;
  const unsigned shift = static_cast<unsigned>(pos & 31);
  const unsigned __int128 wide = static_cast<unsigned __int128>(mant) << shift;
  const auto lo = static_cast<std::int64_t>(static_cast<std::uint64_t>(wide) & 0xffffffffu);
  const auto mid = static_cast<std::int64_t>(static_cast<std::uint64_t>(wide >> 32) & 0xffffffffu);
  const auto hi = static_cast<std::int64_t>(static_cast<std::uint64_t>(wide >> 64));
  if (negative) {
    chunks_[chunk] -= lo;
    chunks_[chunk + 1] -= mid;
    chunks_[chunk + 2] -= hi;
  } else {
    chunks_[chunk] += lo;
    chunks_[chunk + 1] += mid;
    chunks_[chunk + 2] += hi;
  }
  if (++adds_since_normalize_ >= kNormalizeEvery) normalize();
}

void ExactSum::normalize() {
  for (int i = 0; i + 1 < kChunks; ++i) {
    const std::int64_t carry = chunks_[i] >> 32;  // floor division
    chunks_[i] -= carry * (std::int64_t{1} << 32);
    chunks_[i + 1] += carry;
  }
  adds_since_normalize_ = 0;
}

void ExactSum::merge(const ExactSum& other) {
  ExactSum rhs = other;
  rhs.normalize();
  normalize();
  for (int i = 0; i < kChunks; ++i) chunks_[i] += rhs.chunks_[i];
  normalize();
  pos_inf_ = pos_inf_ || other.pos_inf_;
  neg_inf_ = neg_inf_ || other.neg_inf_;
  nan_ = nan_ || other.nan_;
}

double ExactSum::round() const {
  if (nan_ || (pos_inf_ && neg_inf_)) return std::numeric_limits<double>::quiet_NaN();
  if (pos_inf_) return std::numeric_limits<double>::infinity();
  if (neg_inf_) return -std::numeric_limits<double>::infinity();

  ExactSum m = *this;
  m.normalize();
  bool negative = m.chunks_[kChunks - 1] < 0;
  if (negative) {
    for (auto& c : m.chunks_) c = -c;
    m.normalize();
  }
  int top = kChunks - 1;
  while (top >= 0 && m.chunks_[top] == 0) --top;
  if (top < 0) return 0.0;

  auto bit = [&](int i) -> std::uint64_t {
    return (static_cast<std::uint64_t>(m.chunks_[i >> 5]) >> (i & 31)) & 1u;
  };
  const int high = top * 32 + (63 - std::countl_zero(static_cast<std::uint64_t>(m.chunks_[top])));
  int low = high - (kMantBits - 1);
  if (low < 0) low = 0;

  std::uint64_t mant = 0;
  for (int i = high; i >= low; --i) mant = (mant << 1) | bit(i);

  bool round_bit = false;
  bool sticky = false;
  if (low > 0) {
    round_bit = bit(low - 1) != 0;
    const int below = low - 1;  // bits [0, below) feed the sticky flag
    const int full = below >> 5;
    for (int c = 0; c < full && !sticky; ++c) sticky = m.chunks_[c] != 0;
    for (int i = full * 32; i < below && !sticky; ++i) sticky = bit(i) != 0;
  }
  if (round_bit && (sticky || (mant & 1u))) ++mant;

  double result = std::ldexp(static_cast<double>(mant), low + kMinExp);
  return negative ? -result : result;
}

ExactSum::Packed ExactSum::pack() const {
  ExactSum m = *this;
  m.normalize();
  Packed p{};
  p.chunks = m.chunks_;
  p.flags = (pos_inf_ ? 1 : 0) | (neg_inf_ ? 2 : 0) | (nan_ ? 4 : 0);
  return p;
}

ExactSum ExactSum::unpack(const Packed& p) {
  ExactSum s;
  s.chunks_ = p.chunks;
  s.pos_inf_ = (p.flags & 1) != 0;
  s.neg_inf_ = (p.flags & 2) != 0;
  s.nan_ = (p.flags & 4) != 0;
  return s;
}

}  // namespace sfla
