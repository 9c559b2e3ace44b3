#pragma once

#include <functional>

namespace l2p {

/// Worker cap for row-parallel kernels. Resolves, in order: the per-thread
/// override (used by seed sweeps so nested work stays serial), the
/// L2P_THREADS environment variable, hardware concurrency.
int max_threads();

/// Force a thread cap for the calling thread (0 = clear the override).
void set_thread_override(int n);

/// Run fn(begin, end) over [0, n) split into contiguous chunks, one per
/// worker. Writers must touch disjoint rows; results are identical for any
/// worker count.
void parallel_rows(int n, const std::function<void(int, int)>& fn);

}  // namespace l2p
