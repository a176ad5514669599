#include "blas.hpp"

#include <cstdlib>
#include <mutex>

#if defined(__linux__)
#include <dlfcn.h>
#endif
#if defined(__x86_64__)
#include <cpuid.h>
#endif

namespace lbsac {

namespace {

using SgemmFn = void (*)(int, int, int, int, int, int, float, const float*, int,
                         const float*, int, float, float*, int);
using DgemmFn = void (*)(int, int, int, int, int, int, double, const double*, int,
                         const double*, int, double, double*, int);

constexpr int kRowMajor = 101;
constexpr int kNoTrans = 111;
constexpr int kTrans = 112;

SgemmFn g_sgemm = nullptr;
DgemmFn g_dgemm = nullptr;
const char* g_backend = "portable";

#if defined(__x86_64__)
bool cpu_has_skylakex_kernels() {
  unsigned eax, ebx, ecx, edx;
  if (!__get_cpuid_count(7, 0, &eax, &ebx, &ecx, &edx)) return false;
  const unsigned need = (1u << 16) | (1u << 17) | (1u << 30) | (1u << 31);  // f, dq, bw, vl
  if ((ebx & need) != need) return false;
  if (!__get_cpuid(1, &eax, &ebx, &ecx, &edx)) return false;
  if (!(ecx & (1u << 27))) return false;  // osxsave
  unsigned xlo, xhi;
  __asm__ volatile("xgetbv" : "=a"(xlo), "=d"(xhi) : "c"(0));
  return (xlo & 0xe6u) == 0xe6u;  // xmm + ymm + zmm state enabled
}
#else
bool cpu_has_skylakex_kernels() { return false; }
#endif

void init_backend() {
#if defined(__linux__)
  // OpenBLAS picks its kernel family from OPENBLAS_CORETYPE when its
  // constructor runs, and misdetects some newer CPUs (falling back to a
  // slow generic kernel). Loading it lazily lets us pin the kernel first.
  if (cpu_has_skylakex_kernels()) setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
  // One BLAS thread per run; parallelism happens across runs.
  setenv("OPENBLAS_NUM_THREADS", "1", 0);
  void* h = dlopen("libopenblas.so.0", RTLD_NOW | RTLD_LOCAL);
  if (!h) h = dlopen("libopenblas.so", RTLD_NOW | RTLD_LOCAL);
  if (h) {
    g_sgemm = reinterpret_cast<SgemmFn>(dlsym(h, "cblas_sgemm"));
    g_dgemm = reinterpret_cast<DgemmFn>(dlsym(h, "cblas_dgemm"));
    if (g_sgemm && g_dgemm) {
      g_backend = "openblas";
      return;
    }
    g_sgemm = nullptr;
    g_dgemm = nullptr;
  }
#endif
}

std::once_flag g_once;

void ensure_init() { std::call_once(g_once, init_backend); }

// Fallback: fixed k-ascending accumulation, blocked for locality.
template <typename T>
void gemm_portable(bool ta, bool tb, int m, int n, int k, const T* a, const T* b, T* c) {
  const auto A = [&](int i, int j) -> T {
    return ta ? a[static_cast<size_t>(j) * m + i] : a[static_cast<size_t>(i) * k + j];
  };
  const auto B = [&](int i, int j) -> T {
    return tb ? b[static_cast<size_t>(j) * k + i] : b[static_cast<size_t>(i) * n + j];
  };
  for (size_t i = 0; i < static_cast<size_t>(m) * n; i++) c[i] = T(0);
  constexpr int kBlock = 64;
  for (int i0 = 0; i0 < m; i0 += kBlock) {
    const int i1 = i0 + kBlock < m ? i0 + kBlock : m;
    for (int p0 = 0; p0 < k; p0 += kBlock) {
      const int p1 = p0 + kBlock < k ? p0 + kBlock : k;
      for (int i = i0; i < i1; i++) {
        T* crow = c + static_cast<size_t>(i) * n;
        for (int p = p0; p < p1; p++) {
          const T av = A(i, p);
          for (int j = 0; j < n; j++) crow[j] += av * B(p, j);
        }
      }
    }
  }
}

}  // namespace

void gemm_f32(bool ta, bool tb, int m, int n, int k, const float* a, const float* b,
              float* c) {
  ensure_init();
  if (g_sgemm) {
    g_sgemm(kRowMajor, ta ? kTrans : kNoTrans, tb ? kTrans : kNoTrans, m, n, k, 1.0f, a,
            ta ? m : k, b, tb ? k : n, 0.0f, c, n);
  } else {
    gemm_portable(ta, tb, m, n, k, a, b, c);
  }
}

void gemm_f64(bool ta, bool tb, int m, int n, int k, const double* a, const double* b,
              double* c) {
  ensure_init();
  if (g_dgemm) {
    g_dgemm(kRowMajor, ta ? kTrans : kNoTrans, tb ? kTrans : kNoTrans, m, n, k, 1.0, a,
            ta ? m : k, b, tb ? k : n, 0.0, c, n);
  } else {
    gemm_portable(ta, tb, m, n, k, a, b, c);
  }
}

const char* blas_backend() {
  ensure_init();
  return g_backend;
}

}  // namespace lbsac
