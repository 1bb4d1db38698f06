#include "gemm.hpp"

#include <algorithm>
#include <cstring>

namespace robustq::detail {

namespace {

typedef double v8d __attribute__((vector_size(64)));

constexpr std::size_t kRows = 4;
constexpr std::size_t kCols = 16;

inline v8d load8(const double* p) {
  v8d v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store8(double* p, v8d v) { std::memcpy(p, &v, sizeof v); }

// Full 4 x 16 tile, accumulators in registers across the k loop. Products and
// sums are separate roundings (the library builds with fp contraction off), so
// lanes agree bit for bit with the scalar edge path.
inline void tile_full(const double* a, const double* b, double* c, std::size_t k, std::size_t lda,
                      std::size_t ldb, std::size_t ldc, bool accumulate) {
  v8d acc[kRows][2];
  for (std::size_t r = 0; r < kRows; ++r) {
    if (accumulate) {
      acc[r][0] = load8(c + r * ldc);
      acc[r][1] = load8(c + r * ldc + 8);
    } else {
      acc[r][0] = v8d{};
      acc[r][1] = v8d{};
    }
  }
  for (std::size_t p = 0; p < k; ++p) {
    const v8d b0 = load8(b + p * ldb);
    const v8d b1 = load8(b + p * ldb + 8);
    for (std::size_t r = 0; r < kRows; ++r) {
      const double av = a[r * lda + p];
      acc[r][0] += av * b0;
      acc[r][1] += av * b1;
    }
  }
  for (std::size_t r = 0; r < kRows; ++r) {
    store8(c + r * ldc, acc[r][0]);
    store8(c + r * ldc + 8, acc[r][1]);
  }
}

// Partial rows, full 16 columns.
inline void tile_rows(const double* a, const double* b, double* c, std::size_t rows, std::size_t k,
                      std::size_t lda, std::size_t ldb, std::size_t ldc, bool accumulate) {
  for (std::size_t r = 0; r < rows; ++r) {
    v8d acc0 = accumulate ? load8(c + r * ldc) : v8d{};
    v8d acc1 = accumulate ? load8(c + r * ldc + 8) : v8d{};
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[r * lda + p];
      acc0 += av * load8(b + p * ldb);
      acc1 += av * load8(b + p * ldb + 8);
    }
    store8(c + r * ldc, acc0);
    store8(c + r * ldc + 8, acc1);
  }
}

inline void tile_scalar(const double* a, const double* b, double* c, std::size_t rows, std::size_t cols,
                        std::size_t k, std::size_t lda, std::size_t ldb, std::size_t ldc, bool accumulate) {
  double acc[kRows][kCols];
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) acc[r][j] = accumulate ? c[r * ldc + j] : 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    const double* brow = b + p * ldb;
    for (std::size_t r = 0; r < rows; ++r) {
      const double av = a[r * lda + p];
      for (std::size_t j = 0; j < cols; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j) c[r * ldc + j] = acc[r][j];
}

}  // namespace

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate) {
  if (k == 0) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    return;
  }
  // column panels outermost so a k x 16 slab of B stays cached across row tiles
  for (std::size_t j = 0; j < n; j += kCols) {
    const std::size_t cols = std::min(kCols, n - j);
    for (std::size_t i = 0; i < m; i += kRows) {
      const std::size_t rows = std::min(kRows, m - i);
      const double* ap = a + i * k;
      double* cp = c + i * n + j;
      if (cols == kCols && rows == kRows)
        tile_full(ap, b + j, cp, k, k, n, n, accumulate);
      else if (cols == kCols)
        tile_rows(ap, b + j, cp, rows, k, k, n, n, accumulate);
      else
        tile_scalar(ap, b + j, cp, rows, cols, k, k, n, n, accumulate);
    }
  }
}

void transpose(const double* src, double* dst, std::size_t rows, std::size_t cols) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < rows; i0 += kBlock)
    for (std::size_t j0 = 0; j0 < cols; j0 += kBlock)
      for (std::size_t i = i0; i < std::min(rows, i0 + kBlock); ++i)
        for (std::size_t j = j0; j < std::min(cols, j0 + kBlock); ++j) dst[j * rows + i] = src[i * cols + j];
}

}  // namespace robustq::detail
