#pragma once

#include <functional>

namespace hails {

/// Worker count for per-node loops: HAILS_THREADS if set, otherwise the
/// OpenMP default (1 when built without OpenMP).
int worker_threads();
void set_worker_threads(int n);

/// Runs body(0..n-1). Iterations must write to disjoint state.
void parallel_for(int n, const std::function<void(int)>& body);

}  // namespace hails
