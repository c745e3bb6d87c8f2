#include "ct/kernels.hpp"

#include <atomic>
#include <cassert>

namespace ct::kernels {

namespace {
std::atomic<Backend> g_backend{Backend::parallel};

// Below this many multiply-adds the OpenMP fork costs more than it saves.
constexpr long kParallelThreshold = 1L << 15;
}  // namespace

void set_backend(Backend b) { g_backend.store(b); }
Backend backend() { return g_backend.load(); }

namespace serial {

template <typename T>
void matmul_nt(std::span<T> c, std::span<const T> a, std::span<const T> b, const T* bias, int m,
               int n, int k, bool accumulate) {
  assert(c.size() >= std::size_t(m) * n && a.size() >= std::size_t(m) * k &&
         b.size() >= std::size_t(n) * k);
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) {
      T s = 0;
      for (int p = 0; p < k; ++p) s += a[i * k + p] * b[j * k + p];
      if (bias) s += bias[j];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
  }
}

template <typename T>
void matmul_nn(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int n, int k) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      T s = 0;
      for (int p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
      c[i * n + j] += s;
    }
}

template <typename T>
void matmul_tn(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int n, int k) {
  for (int p = 0; p < k; ++p)
    for (int j = 0; j < n; ++j) {
      T s = 0;
      for (int i = 0; i < m; ++i) s += a[i * k + p] * b[i * n + j];
      c[p * n + j] += s;
    }
}

}  // namespace serial

namespace parallel {

template <typename T>
void matmul_nt(std::span<T> c, std::span<const T> a, std::span<const T> b, const T* bias, int m,
               int n, int k, bool accumulate) {
  const T* A = a.data();
  const T* B = b.data();
  T* C = c.data();
  const bool par = long(m) * n * k >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (int i = 0; i < m; ++i) {
    const T* arow = A + std::size_t(i) * k;
    T* crow = C + std::size_t(i) * n;
    int j = 0;
    // Four output columns at a time share the loads of arow.
    for (; j + 4 <= n; j += 4) {
      const T* b0 = B + std::size_t(j) * k;
      const T* b1 = b0 + k;
      const T* b2 = b1 + k;
      const T* b3 = b2 + k;
      T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
#pragma omp simd reduction(+ : s0, s1, s2, s3)
      for (int p = 0; p < k; ++p) {
        const T x = arow[p];
        s0 += x * b0[p];
        s1 += x * b1[p];
        s2 += x * b2[p];
        s3 += x * b3[p];
      }
      T s[4] = {s0, s1, s2, s3};
      for (int q = 0; q < 4; ++q) {
        T v = s[q] + (bias ? bias[j + q] : T(0));
        crow[j + q] = accumulate ? crow[j + q] + v : v;
      }
    }
    for (; j < n; ++j) {
      T v = dot(arow, B + std::size_t(j) * k, k) + (bias ? bias[j] : T(0));
      crow[j] = accumulate ? crow[j] + v : v;
    }
  }
}

template <typename T>
void matmul_nn(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int n, int k) {
  const T* A = a.data();
  const T* B = b.data();
  T* C = c.data();
  const bool par = long(m) * n * k >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (int i = 0; i < m; ++i) {
    T* crow = C + std::size_t(i) * n;
    for (int p = 0; p < k; ++p) {
      const T x = A[std::size_t(i) * k + p];
      if (x == T(0)) continue;
      axpy(x, B + std::size_t(p) * n, crow, n);
    }
  }
}

template <typename T>
void matmul_tn(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int n, int k) {
  const T* A = a.data();
  const T* B = b.data();
  T* C = c.data();
  const bool par = long(m) * n * k >= kParallelThreshold;
#pragma omp parallel for schedule(static) if (par)
  for (int p = 0; p < k; ++p) {
    T* crow = C + std::size_t(p) * n;
    for (int i = 0; i < m; ++i) {
      const T x = A[std::size_t(i) * k + p];
      if (x == T(0)) continue;
      axpy(x, B + std::size_t(i) * n, crow, n);
    }
  }
}

}  // namespace parallel

#define CT_INSTANTIATE(T)                                                                     \
  template void serial::matmul_nt<T>(std::span<T>, std::span<const T>, std::span<const T>,    \
                                     const T*, int, int, int, bool);                          \
  template void serial::matmul_nn<T>(std::span<T>, std::span<const T>, std::span<const T>,    \
                                     int, int, int);                                          \
  template void serial::matmul_tn<T>(std::span<T>, std::span<const T>, std::span<const T>,    \
                                     int, int, int);                                          \
  template void parallel::matmul_nt<T>(std::span<T>, std::span<const T>, std::span<const T>,  \
                                       const T*, int, int, int, bool);                        \
  template void parallel::matmul_nn<T>(std::span<T>, std::span<const T>, std::span<const T>,  \
                                       int, int, int);                                        \
  template void parallel::matmul_tn<T>(std::span<T>, std::span<const T>, std::span<const T>,  \
                                       int, int, int);

CT_INSTANTIATE(float)
CT_INSTANTIATE(double)
#undef CT_INSTANTIATE

}  // namespace ct::kernels
