#include "iclebm/threading.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace iclebm {

namespace {

int default_threads() {
  if (const char* env = std::getenv("ICLEBM_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(std::min(hw, 16u));
}

std::atomic<int>& thread_setting() {
  static std::atomic<int> n{default_threads()};
  return n;
}

}  // namespace

int num_threads() { return thread_setting().load(); }

void set_num_threads(int n) { thread_setting().store(n < 1 ? 1 : n); }

int max_chunks() { return num_threads(); }

void parallel_chunks(std::int64_t n, const std::function<void(std::int64_t, std::int64_t, int)>& body) {
  if (n <= 0) return;
  const int chunks = static_cast<int>(std::min<std::int64_t>(num_threads(), n));
  if (chunks == 1) {
    body(0, n, 0);
    return;
  }
  const std::int64_t per = (n + chunks - 1) / chunks;
#ifdef _OPENMP
#pragma omp parallel for num_threads(chunks) schedule(static, 1)
#endif
  for (int c = 0; c < chunks; ++c) {
    const std::int64_t begin = per * c;
    const std::int64_t end = std::min<std::int64_t>(begin + per, n);
    if (begin < end) body(begin, end, c);
  }
}

}  // namespace iclebm
