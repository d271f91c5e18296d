#pragma once

#include <array>
#include <cstdint>
#include <span>

namespace sfla {

/// Exact accumulator for IEEE doubles (a fixed-point "superaccumulator" of
/// 67 signed 32-bit-digit chunks). Any partition of the same terms, added in
/// any order and merged, rounds to the same correctly rounded double, which is
/// what makes distributed reductions independent of the rank count.
class ExactSum {
 public:
  static constexpr int kChunks = 67;

  void add(double v);
  void add(std::span<const double> values) {
    for (double v : values) add(v);
  }
  void merge(const ExactSum& other);

  /// Round-to-nearest-even of the exact sum.
  double round() const;

  struct Packed {
    std::array<std::int64_t, kChunks> chunks;
    std::int64_t flags;
  };
  Packed pack() const;
  static ExactSum unpack(const Packed& p);

 private:
  void normalize();

  std::array<std::int64_t, kChunks> chunks_{};
  std::int64_t adds_since_normalize_ = 0;
  bool pos_inf_ = false;
  bool neg_inf_ = false;
  bool nan_ = false;
};

}  // namespace sfla
