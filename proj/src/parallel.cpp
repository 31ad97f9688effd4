#include "mvlab/parallel.hpp"

#include <omp.h>

namespace mvlab {
namespace {
Exec g_mode = Exec::Parallel;
}

Exec default_exec() noexcept { return g_mode; }
void set_default_exec(Exec mode) noexcept { g_mode = mode; }

int set_thread_count(int n) noexcept {
  if (n > 0) omp_set_num_threads(n);
  if (n == 1) {
    g_mode = Exec::Serial;
  } else {
    g_mode = Exec::Parallel;
  }
  return n > 0 ? n : omp_get_max_threads();
}

}  // namespace mvlab
