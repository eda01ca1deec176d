#include "psep/threading.hpp"

#include <cstdlib>
#include <thread>

extern "C" void openblas_set_num_threads(int);

namespace psep {

int worker_cap() {
  int hw = static_cast<int>(std::thread::hardware_concurrency());
  if (hw < 1) hw = 1;
  const char* env = std::getenv("PSEP_THREADS");
  if (!env) return 1;
  const int requested = std::atoi(env);
  if (requested < 1) return 1;
  return requested < hw ? requested : hw;
}

void configure_blas_threads() { openblas_set_num_threads(worker_cap()); }

}  // namespace psep
