#pragma once

// Dense row-major matrix kernels. Every kernel has a plain serial reference
// (kernels::serial) and an OpenMP version (kernels::parallel); the unqualified
// entry points dispatch on the process-wide backend. Both versions compute each
// output element on one thread in a fixed order, so results do not depend on
// the thread count.

#include <span>

namespace ct::kernels {

enum class Backend { serial, parallel };

void set_backend(Backend b);
Backend backend();

namespace serial {
// C[M,N] = (accumulate ? C : 0) + A[M,K] * B[N,K]^T + bias[N]
template <typename T>
void matmul_nt(std::span<T> c, std::span<const T> a, std::span<const T> b, const T* bias, int m,
               int n, int k, bool accumulate);
// C[M,N] += A[M,K] * B[K,N]
template <typename T>
void matmul_nn(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int n, int k);
// C[K,N] += A[M,K]^T * B[M,N]
template <typename T>
void matmul_tn(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int n, int k);
}  // namespace serial

namespace parallel {
template <typename T>
void matmul_nt(std::span<T> c, std::span<const T> a, std::span<const T> b, const T* bias, int m,
               int n, int k, bool accumulate);
template <typename T>
void matmul_nn(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int n, int k);
template <typename T>
void matmul_tn(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int n, int k);
}  // namespace parallel

template <typename T>
void matmul_nt(std::span<T> c, std::span<const T> a, std::span<const T> b, const T* bias, int m,
               int n, int k, bool accumulate = false) {
  if (backend() == Backend::parallel)
    parallel::matmul_nt(c, a, b, bias, m, n, k, accumulate);
  else
    serial::matmul_nt(c, a, b, bias, m, n, k, accumulate);
}

template <typename T>
void matmul_nn(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int n, int k) {
  if (backend() == Backend::parallel)
    parallel::matmul_nn(c, a, b, m, n, k);
  else
    serial::matmul_nn(c, a, b, m, n, k);
}

template <typename T>
void matmul_tn(std::span<T> c, std::span<const T> a, std::span<const T> b, int m, int n, int k) {
  if (backend() == Backend::parallel)
    parallel::matmul_tn(c, a, b, m, n, k);
  else
    serial::matmul_tn(c, a, b, m, n, k);
}

template <typename T>
T dot(const T* a, const T* b, int n) {
  T s = 0;
#pragma omp simd reduction(+ : s)
  for (int i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

template <typename T>
void axpy(T alpha, const T* x, T* y, int n) {
#pragma omp simd
  for (int i = 0; i < n; ++i) y[i] += alpha * x[i];
}

}  // namespace ct::kernels
