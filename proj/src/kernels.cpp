#include "xrag/kernels.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <cstdint>

#include <omp.h>

namespace xrag::kernels {

namespace {

// Row r of the flattened (groups * m) output of c = a * b. Columns are done
// in register blocks of 8; every output element still sums over kk in order.
inline void gemm_row(const double* a, const double* b, double* c, const GemmShape& s, std::size_t r,
                     bool accumulate) {
  constexpr std::size_t W = 8;
  const std::size_t g = r / s.m;
  const double* arow = a + r * s.n;
  const double* bg = b + g * s.n * s.p;
  double* __restrict crow = c + r * s.p;
  std::size_t j0 = 0;
  // Long rows stream through b instead; blocking them defeats the prefetcher.
  const std::size_t blocked = s.p <= 256 ? s.p : 0;
  for (; j0 + W <= blocked; j0 += W) {
    double acc[W];
    for (std::size_t jj = 0; jj < W; ++jj) acc[jj] = accumulate ? crow[j0 + jj] : 0.0;
    for (std::size_t kk = 0; kk < s.n; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) continue;
      const double* brow = bg + kk * s.p + j0;
      for (std::size_t jj = 0; jj < W; ++jj) acc[jj] += av * brow[jj];
    }
    for (std::size_t jj = 0; jj < W; ++jj) crow[j0 + jj] = acc[jj];
  }
  if (j0 == s.p) return;
  if (!accumulate) {
    for (std::size_t j = j0; j < s.p; ++j) crow[j] = 0.0;
  }
  for (std::size_t kk = 0; kk < s.n; ++kk) {
    const double av = arow[kk];
    if (av == 0.0) continue;
    const double* __restrict brow = bg + kk * s.p;
#pragma omp simd
    for (std::size_t j = j0; j < s.p; ++j) crow[j] += av * brow[j];
  }
}

inline void gemm_bt_row(const double* a, const double* b, double* c, const GemmShape& s, std::size_t r,
                        bool accumulate) {
  const std::size_t g = r / s.m;
  const double* arow = a + r * s.n;
  const double* bg = b + g * s.p * s.n;
  double* crow = c + r * s.p;
  for (std::size_t j = 0; j < s.p; ++j) {
    const double* brow = bg + j * s.n;
    double acc = 0.0;
    for (std::size_t kk = 0; kk < s.n; ++kk) acc += arow[kk] * brow[kk];
    crow[j] = accumulate ? crow[j] + acc : acc;
  }
}

// Row r of the flattened (groups * n) output of c = a^T * b.
inline void gemm_at_row(const double* a, const double* b, double* c, const GemmShape& s, std::size_t r,
                        bool accumulate) {
  const std::size_t g = r / s.n;
  const std::size_t i = r % s.n;
  const double* ag = a + g * s.m * s.n;
  const double* bg = b + g * s.m * s.p;
  double* __restrict crow = c + r * s.p;
  if (!accumulate) {
    for (std::size_t j = 0; j < s.p; ++j) crow[j] = 0.0;
  }
  for (std::size_t kk = 0; kk < s.m; ++kk) {
    const double av = ag[kk * s.n + i];
    if (av == 0.0) continue;
    const double* __restrict brow = bg + kk * s.p;
    // Lanes are independent output elements, so each keeps its summation order.
#pragma omp simd
    for (std::size_t j = 0; j < s.p; ++j) crow[j] += av * brow[j];
  }
}

void check(std::span<const double> a, std::span<const double> b, std::span<double> c, std::size_t na,
           std::size_t nb, std::size_t nc) {
  assert(a.size() >= na && b.size() >= nb && c.size() >= nc);
  (void)a, (void)b, (void)c, (void)na, (void)nb, (void)nc;
}

template <typename RowFn>
void scan_parallel(std::size_t rows, RowFn fn) {
  const auto n = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::int64_t r = 0; r < n; ++r) fn(static_cast<std::size_t>(r));
}

template <typename RowFn>
void scan_serial(std::size_t rows, RowFn fn) {
  for (std::size_t r = 0; r < rows; ++r) fn(r);
}

// Small products are not worth a parallel region.
constexpr std::size_t kParallelFlops = 1 << 15;

}  // namespace

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / std::max(std::sqrt(na) * std::sqrt(nb), kCosineEpsilon);
}

double neg_l2(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    acc += d * d;
  }
  return -std::sqrt(acc);
}

double pearson(std::span<const double> a, std::span<const double> b) {
  const double n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double cov = 0.0, va = 0.0, vb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    cov += da * db;
    va += da * da;
    vb += db * db;
  }
  if (va == 0.0 || vb == 0.0) return 0.0;
  return cov / (std::sqrt(va) * std::sqrt(vb));
}

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
          bool accumulate) {
  check(a, b, c, s.groups * s.m * s.n, s.groups * s.n * s.p, s.groups * s.m * s.p);
  auto row = [&](std::size_t r) { gemm_row(a.data(), b.data(), c.data(), s, r, accumulate); };
  if (s.groups * s.m * s.n * s.p < kParallelFlops) {
    scan_serial(s.groups * s.m, row);
  } else {
    scan_parallel(s.groups * s.m, row);
  }
}

void gemm_bt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
             bool accumulate) {
  check(a, b, c, s.groups * s.m * s.n, s.groups * s.p * s.n, s.groups * s.m * s.p);
  auto row = [&](std::size_t r) { gemm_bt_row(a.data(), b.data(), c.data(), s, r, accumulate); };
  if (s.groups * s.m * s.n * s.p < kParallelFlops) {
    scan_serial(s.groups * s.m, row);
  } else {
    scan_parallel(s.groups * s.m, row);
  }
}

void gemm_at(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
             bool accumulate) {
  check(a, b, c, s.groups * s.m * s.n, s.groups * s.m * s.p, s.groups * s.n * s.p);
  auto row = [&](std::size_t r) { gemm_at_row(a.data(), b.data(), c.data(), s, r, accumulate); };
  if (s.groups * s.m * s.n * s.p < kParallelFlops) {
    scan_serial(s.groups * s.n, row);
  } else {
    scan_parallel(s.groups * s.n, row);
  }
}

void cosine_scan(std::span<const double> query, std::span<const double> rows, std::size_t dim,
                 std::span<double> out) {
  scan_parallel(out.size(), [&](std::size_t r) { out[r] = cosine(query, rows.subspan(r * dim, dim)); });
}

void neg_l2_scan(std::span<const double> query, std::span<const double> rows, std::size_t dim,
                 std::span<double> out) {
  scan_parallel(out.size(), [&](std::size_t r) { out[r] = neg_l2(query, rows.subspan(r * dim, dim)); });
}

void pearson_scan(std::span<const double> query, std::span<const double> rows, std::size_t dim,
                  std::span<double> out) {
  scan_parallel(out.size(), [&](std::size_t r) { out[r] = pearson(query, rows.subspan(r * dim, dim)); });
}

int max_threads() { return omp_get_max_threads(); }

namespace serial {

void gemm(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
          bool accumulate) {
  check(a, b, c, s.groups * s.m * s.n, s.groups * s.n * s.p, s.groups * s.m * s.p);
  scan_serial(s.groups * s.m, [&](std::size_t r) { gemm_row(a.data(), b.data(), c.data(), s, r, accumulate); });
}

void gemm_bt(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
             bool accumulate) {
  check(a, b, c, s.groups * s.m * s.n, s.groups * s.p * s.n, s.groups * s.m * s.p);
  scan_serial(s.groups * s.m,
              [&](std::size_t r) { gemm_bt_row(a.data(), b.data(), c.data(), s, r, accumulate); });
}

void gemm_at(std::span<const double> a, std::span<const double> b, std::span<double> c, GemmShape s,
             bool accumulate) {
  check(a, b, c, s.groups * s.m * s.n, s.groups * s.m * s.p, s.groups * s.n * s.p);
  scan_serial(s.groups * s.n,
              [&](std::size_t r) { gemm_at_row(a.data(), b.data(), c.data(), s, r, accumulate); });
}

void cosine_scan(std::span<const double> query, std::span<const double> rows, std::size_t dim,
                 std::span<double> out) {
  scan_serial(out.size(), [&](std::size_t r) { out[r] = cosine(query, rows.subspan(r * dim, dim)); });
}

void neg_l2_scan(std::span<const double> query, std::span<const double> rows, std::size_t dim,
                 std::span<double> out) {
  scan_serial(out.size(), [&](std::size_t r) { out[r] = neg_l2(query, rows.subspan(r * dim, dim)); });
}

void pearson_scan(std::span<const double> query, std::span<const double> rows, std::size_t dim,
                  std::span<double> out) {
  scan_serial(out.size(), [&](std::size_t r) { out[r] = pearson(query, rows.subspan(r * dim, dim)); });
}

}  // namespace serial

}  // namespace xrag::kernels
