#pragma once

namespace morphflow {

/// Applies the MORPHFLOW_THREADS cap (if set) to the OpenMP runtime.
/// Kernels parallelize over independent rows only, so results do not
/// depend on the thread count.
void configure_threads_from_env();

int thread_count();

}  // namespace morphflow
