#pragma once

#include <cstdint>

namespace afford {

// C[M x N] = op(A) . op(B), row-major buffers. op is transpose when the flag
// is set; A is then stored K x M (and B as N x K). Accumulates into C when
// requested. Single-threaded and deterministic.
void gemm(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n,
          bool trans_a, bool trans_b, bool accumulate);

} // namespace afford
