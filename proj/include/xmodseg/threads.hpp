#pragma once

#include <algorithm>
#include <cstdlib>
#include <thread>

#include <Eigen/Core>
#include <omp.h>

namespace xmodseg {

/// Worker parallelism cap: XMODSEG_THREADS if set, else hardware concurrency.
inline int thread_count() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw <= 0) hw = 1;
  if (const char* env = std::getenv("XMODSEG_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return std::min(n, hw);
  }
  return hw;
}

/// Applies the cap to Eigen and OpenMP. Call once near program start.
inline void init_threads() {
  const int n = thread_count();
  Eigen::setNbThreads(n);
  omp_set_num_threads(n);
}

}  // namespace xmodseg
