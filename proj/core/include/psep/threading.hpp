#pragma once

namespace psep {

// Worker cap from the PSEP_THREADS environment variable, clamped to
// [1, hardware_concurrency]. Defaults to 1 when unset or unparsable.
int worker_cap();

// Pins the BLAS thread pool to worker_cap(). Training calls this once so
// repeated runs on the same machine stay deterministic.
void configure_blas_threads();

}  // namespace psep
