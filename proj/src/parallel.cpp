#include "hails/parallel.hpp"

#include <cstdlib>
#include <string>

#ifdef HAILS_WITH_OPENMP
#include <omp.h>
#endif

namespace hails {
namespace {

int& configured_threads() {
  static int n = [] {
    if (const char* env = std::getenv("HAILS_THREADS")) {
      try {
        const int v = std::stoi(env);
        if (v > 0) return v;
      } catch (...) {
      }
    }
#ifdef HAILS_WITH_OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
  }();
  return n;
}

}  // namespace

int worker_threads() { return configured_threads(); }

void set_worker_threads(int n) { configured_threads() = n > 0 ? n : 1; }

void parallel_for(int n, const std::function<void(int)>& body) {
#ifdef HAILS_WITH_OPENMP
  const int threads = worker_threads();
  if (threads > 1 && n > 1) {
#pragma omp parallel for num_threads(threads) schedule(static)
    for (int i = 0; i < n; ++i) body(i);
    return;
  }
#endif
  for (int i = 0; i < n; ++i) body(i);
}

}  // namespace hails
