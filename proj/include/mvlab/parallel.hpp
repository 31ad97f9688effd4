#pragma once
#include <cstdint>

// Execution-mode dispatch for the hot loops. Every kernel writes results into
// slots indexed by the loop variable and never reduces across iterations
// inside the parallel region, so the serial and OpenMP paths produce
// bit-identical output at any thread count.

namespace mvlab {

enum class Exec { Serial, Parallel };

// Process-wide default used by the experiment drivers; set from --threads.
Exec default_exec() noexcept;
void set_default_exec(Exec mode) noexcept;

// Requested thread count (0 = library default). Returns the value applied.
int set_thread_count(int n) noexcept;

template <typename F>
void for_each_index(std::int64_t n, Exec mode, F&& body) {
  if (mode == Exec::Parallel) {
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) body(i);
  } else {
    for (std::int64_t i = 0; i < n; ++i) body(i);
  }
}

template <typename F>
void for_each_index(std::int64_t n, F&& body) {
  for_each_index(n, default_exec(), body);
}

}  // namespace mvlab
