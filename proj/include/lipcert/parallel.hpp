#pragma once

#include <cstddef>
#include <functional>

namespace lipcert {

/// Number of worker threads used by the library's parallel sections.
/// Initialised from LIPCERT_THREADS, else the logical CPU count.
int worker_count();
void set_worker_count(int n);

/// Runs fn(i) for i in [0, n). Jobs are claimed dynamically, but each job
/// writes only its own slot so results never depend on scheduling. The
/// first exception thrown by a job is rethrown on the calling thread.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace lipcert
