#include "meshtrack/threading.hpp"

#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace meshtrack::threading {

namespace {

int resolve_default() {
#ifdef _OPENMP
  if (const char* env = std::getenv("MESHTRACK_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return omp_get_max_threads();
#else
  return 1;
#endif
}

int& cap() {
  static int value = resolve_default();
  return value;
}

}  // namespace

int max_threads() { return cap(); }

void set_max_threads(int n) { cap() = n < 1 ? 1 : n; }

bool parallel_enabled() {
#ifdef _OPENMP
  return max_threads() > 1;
#else
  return false;
#endif
}

}  // namespace meshtrack::threading
