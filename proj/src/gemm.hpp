#pragma once

#include <cstddef>
#include <vector>

namespace robustq::detail {

// C[M x N] (+)= A[M x K] * B[K x N], all row-major.
// Every output element accumulates its K products strictly in increasing k
// order. Terms that are exactly zero therefore never change a result, which
// is what makes channel pruning bit-exact.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n,
          bool accumulate);

void transpose(const double* src, double* dst, std::size_t rows, std::size_t cols);

}  // namespace robustq::detail
