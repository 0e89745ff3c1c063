#pragma once

#include <cstdint>
#include <functional>

namespace mmfuse {

// Worker count for record-level parallelism (data generation, independent
// runs). MMFUSE_THREADS overrides hardware concurrency; always at least 1.
// Forward/backward passes stay single-threaded regardless.
int worker_threads();

// Runs fn(0..n-1) across worker_threads() threads with a shared atomic
// cursor. With one worker this degenerates to a plain sequential loop.
// The first exception thrown by any index is rethrown after all join.
void parallel_records(int64_t n, const std::function<void(int64_t)>& fn);

}  // namespace mmfuse
