#pragma once

// Dense kernels used by the tensor ops and the retrieval scan.
//
// Every kernel has an OpenMP-parallel version in `xrag::kernels` and a plain
// serial version in `xrag::kernels::serial`. Both compute each output element
// with the same summation order, so results are bitwise identical regardless
// of thread count; the serial versions are kept as the test reference.

#include <cstddef>
#include <span>

namespace xrag::kernels {

// Shape of a batch of G independent row-major products.
struct GemmShape {
  std::size_t groups = 1;
  std::size_t m = 0;
  std::size_t n = 0;
  std::size_t p = 0;
};

// c[g] (m x p) (+)= a[g] (m x n) * b[g] (n x p)
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
          bool accumulate = false);
// c[g] (m x p) (+)= a[g] (m x n) * b[g]^T, with b[g] stored p x n
void gemm_bt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
             bool accumulate = false);
// c[g] (n x p) (+)= a[g]^T * b[g], with a[g] stored m x n and b[g] m x p
void gemm_at(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
             bool accumulate = false);

// Scores of `query` against every row of `rows` (row-major, `dim` columns).
// Larger means more similar for all three.
void cosine_scan(std::span<const double> query, std::span<const double> rows, std::size_t dim,
                 std::span<double> out);
void neg_l2_scan(std::span<const double> query, std::span<const double> rows, std::size_t dim,
                 std::span<double> out);
void pearson_scan(std::span<const double> query, std::span<const double> rows, std::size_t dim,
                  std::span<double> out);

// Row-wise kernels shared by both variants.
double cosine(std::span<const double> a, std::span<const double> b);
double neg_l2(std::span<const double> a, std::span<const double> b);
double pearson(std::span<const double> a, std::span<const double> b);

inline constexpr double kCosineEpsilon = 1e-8;

namespace serial {
void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
          bool accumulate = false);
void gemm_bt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
             bool accumulate = false);
void gemm_at(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
             bool accumulate = false);
void cosine_scan(std::span<const double> query, std::span<const double> rows, std::size_t dim,
                 std::span<double> out);
void neg_l2_scan(std::span<const double> query, std::span<const double> rows, std::size_t dim,
                 std::span<double> out);
void pearson_scan(std::span<const double> query, std::span<const double> rows, std::size_t dim,
                  std::span<double> out);
}  // namespace serial

// Number of threads the parallel kernels will use.
int max_threads();

}  // namespace xrag::kernels
