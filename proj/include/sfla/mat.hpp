#pragma once

// Row-distributed CSR matrix: owned rows split into a diagonal block (owned
// columns) and an off-diagonal block over compressed ghost columns, with a
// star forest fetching ghost values for SpMV. Assembly is two-phase COO.

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "sfla/sf.hpp"
#include "sfla/vec.hpp"

namespace sfla {

struct CsrBlock {
  std::int64_t nrows = 0;
  std::int64_t ncols = 0;
  std::vector<std::int64_t> rowptr{0};
  std::vector<std::int64_t> col;
  std::vector<double> val;

  std::int64_t nnz() const { return static_cast<std::int64_t>(col.size()); }
};

struct Triplet {
  std::int64_t i;
  std::int64_t j;
  double v;
};

namespace detail {
struct MatCooPlan;
}

class DistCsrMatrix {
 public:
  DistCsrMatrix();
  DistCsrMatrix(Layout rows, Layout cols);
  DistCsrMatrix(DistCsrMatrix&&) noexcept;
  DistCsrMatrix& operator=(DistCsrMatrix&&) noexcept;
  ~DistCsrMatrix();

  const Layout& row_layout() const { return rows_; }
  const Layout& col_layout() const { return cols_; }
  ObjectId id() const { return id_; }

  /// Collective. Entries with a negative i or j are dropped; entries for
  /// remote rows are routed to their owners; duplicates share one nonzero.
  /// Throws on every rank if any index is out of range, naming k.
  void set_preallocation_coo(std::span<const std::int64_t> i, std::span<const std::int64_t> j);

  /// Collective. Each nonzero accumulates its contributions in a fixed order:
  /// local entries by ascending k, then received entries by ascending source
  /// rank and k. Insert starts every stored nonzero from zero.
  void set_values_coo(std::span<const double> v, InsertMode mode);

  bool preallocated() const { return plan_ != nullptr; }
  /// Number of COO plans built over this matrix's lifetime.
  std::uint64_t plan_builds() const { return plan_builds_; }

  const CsrBlock& diag() const { return diag_; }
  const CsrBlock& offdiag() const { return offdiag_; }
  const std::vector<std::int64_t>& colmap() const { return colmap_; }
  const StarForest& halo() const { return *halo_; }
  /// Per owned row, the first off-diagonal slot whose column lies right of
  /// the owned column range.
  const std::vector<std::int64_t>& offdiag_split() const { return off_split_; }

  /// Collective: global number of stored nonzeros.
  std::int64_t global_nnz() const;
  /// Owned rows as (global row, global col, value), sorted by (row, col).
  std::vector<Triplet> local_entries() const;
  /// Throws LinAlgError when a structural invariant is violated.
  void check_invariants() const;

  /// Device binding used by the enqueued SpMV.
  void bind(Device& device);
  Device* device() const { return device_; }
  ObjectId ghost_id() const { return ghost_id_; }
  std::span<double> ghost_buffer() const { return *ghost_; }
  const Communicator& device_channel() const { return channel_; }

 private:
  void wait_device_idle() const;

  Layout rows_;
  Layout cols_;
  ObjectId id_ = new_object_id();
  ObjectId ghost_id_ = new_object_id();
  CsrBlock diag_;
  CsrBlock offdiag_;
  std::vector<std::int64_t> colmap_;
  std::vector<std::int64_t> off_split_;
  std::unique_ptr<StarForest> halo_;
  std::shared_ptr<std::vector<double>> ghost_ = std::make_shared<std::vector<double>>();
  Communicator channel_;
  std::unique_ptr<detail::MatCooPlan> plan_;
  std::uint64_t plan_builds_ = 0;
  Device* device_ = nullptr;
};

/// y = A x (collective). Each row sums its products in ascending global
/// column order, so results do not depend on the rank count.
void mat_mult(const DistCsrMatrix& A, const DistVector& x, DistVector& y);
/// Enqueued SpMV: halo exchange and product run as tasks on ctx.
void mat_mult_async(DeviceContext& ctx, DistCsrMatrix& A, DistVector& x, DistVector& y);

DistVector mat_get_diagonal(const DistCsrMatrix& A);

/// Reference assembly: routes triplets to their owning rank and sums them in a
/// map (owner's own triplets first, then by ascending source rank).
DistCsrMatrix mat_assemble_baseline(const Layout& rows, const Layout& cols, std::span<const Triplet> local);

/// Plain-text triplets: header "rows cols nnz", then nnz lines "i j v", 0-based.
struct TripletFile {
  std::int64_t rows = 0;
  std::int64_t cols = 0;
  std::vector<Triplet> entries;
};
TripletFile read_triplets(std::istream& in);
TripletFile read_triplets_file(const std::string& path);
void write_triplets(std::ostream& out, const TripletFile& file);

}  // namespace sfla
