// Serial reference vs OpenMP kernels on the shapes the trainers use.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

#include <omp.h>

#include "ct/clt.hpp"
#include "ct/kernels.hpp"
#include "ct/tinylm.hpp"

using namespace ct;

namespace {

double seconds(const std::function<void()>& f, int reps) {
  f();  // warm up
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) f();
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / reps;
}

std::vector<float> random(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = float(rng.normal());
  return v;
}

double max_diff(const std::vector<float>& a, const std::vector<float>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, double(std::abs(a[i] - b[i])));
  return d;
}

void row(const char* name, double ts, double tp, double diff) {
  std::printf("%-34s %10.3f %10.3f %8.2fx %10.2e\n", name, ts * 1e3, tp * 1e3, ts / tp, diff);
}

}  // namespace

int main() {
  std::printf("threads: %d\n", omp_get_max_threads());
  std::printf("%-34s %10s %10s %9s %10s\n", "kernel", "serial ms", "omp ms", "speedup", "max diff");
  Rng rng(1);
  struct Shape {
    const char* name;
    int m, n, k;
  };
  for (const auto& s : {Shape{"nt 1024x512x64 (clt encode)", 1024, 512, 64},
                        Shape{"nt 2048x256x64 (lm fc)", 2048, 256, 64},
                        Shape{"nt 2048x1024x64 (lm unembed)", 2048, 1024, 64}}) {
    const auto a = random(std::size_t(s.m) * s.k, rng), b = random(std::size_t(s.n) * s.k, rng);
    std::vector<float> cs(std::size_t(s.m) * s.n), cp(cs.size());
    const double ts = seconds([&] { kernels::serial::matmul_nt<float>(cs, a, b, nullptr, s.m, s.n, s.k, false); }, 5);
    const double tp = seconds([&] { kernels::parallel::matmul_nt<float>(cp, a, b, nullptr, s.m, s.n, s.k, false); }, 5);
    row(s.name, ts, tp, max_diff(cs, cp));
  }
  {
    const int m = 1024, n = 64, k = 512;
    const auto a = random(std::size_t(m) * k, rng), b = random(std::size_t(k) * n, rng);
    std::vector<float> cs(std::size_t(m) * n), cp(cs.size());
    const double ts = seconds([&] { std::fill(cs.begin(), cs.end(), 0.f); kernels::serial::matmul_nn<float>(cs, a, b, m, n, k); }, 5);
    const double tp = seconds([&] { std::fill(cp.begin(), cp.end(), 0.f); kernels::parallel::matmul_nn<float>(cp, a, b, m, n, k); }, 5);
    row("nn 1024x64x512 (clt decode)", ts, tp, max_diff(cs, cp));
  }
  {
    const int m = 1024, n = 64, k = 512;
    const auto a = random(std::size_t(m) * k, rng), b = random(std::size_t(m) * n, rng);
    std::vector<float> cs(std::size_t(k) * n), cp(cs.size());
    const double ts = seconds([&] { std::fill(cs.begin(), cs.end(), 0.f); kernels::serial::matmul_tn<float>(cs, a, b, m, n, k); }, 5);
    const double tp = seconds([&] { std::fill(cp.begin(), cp.end(), 0.f); kernels::parallel::matmul_tn<float>(cp, a, b, m, n, k); }, 5);
    row("tn 1024x64x512 (decoder grad)", ts, tp, max_diff(cs, cp));
  }

  // End to end: one CLT loss-and-gradient step and one LM step per backend.
  {
    clt::CltConfig c;
    c.d_features = 512;
    auto p = clt::init_clt<float>(c);
    for (auto& v : p.values) v = float(0.05 * rng.normal());
    clt::Pairs<float> batch;
    batch.n = 1024;
    for (int l = 0; l < c.n_layers; ++l) {
      batch.h.push_back(random(std::size_t(batch.n) * c.d_model, rng));
      batch.m.push_back(random(std::size_t(batch.n) * c.d_model, rng));
    }
    std::vector<float> gs, gp;
    kernels::set_backend(kernels::Backend::serial);
    const double ts = seconds([&] { gs = clt::clt_loss_and_grads(p, batch, 2.0).grads.values; }, 3);
    kernels::set_backend(kernels::Backend::parallel);
    const double tp = seconds([&] { gp = clt::clt_loss_and_grads(p, batch, 2.0).grads.values; }, 3);
    row("clt loss+grads (1024 tokens)", ts, tp, max_diff(gs, gp));
  }
  {
    lm::ModelConfig c;
    const auto p = lm::init_model<float>(c);
    lm::Batch batch;
    for (int r = 0; r < 32; ++r) {
      std::vector<int> row(c.context_len + 1);
      for (auto& t : row) t = int(rng.index(c.vocab_size));
      batch.rows.push_back(row);
    }
    std::vector<float> gs, gp;
    kernels::set_backend(kernels::Backend::serial);
    const double ts = seconds([&] { gs = lm::loss_and_grads(p, batch).grads.values; }, 3);
    kernels::set_backend(kernels::Backend::parallel);
    const double tp = seconds([&] { gp = lm::loss_and_grads(p, batch).grads.values; }, 3);
    row("lm loss+grads (32 x 64 tokens)", ts, tp, max_diff(gs, gp));
  }
  return 0;
}
