#pragma once

namespace meshtrack::threading {

// Worker cap for the parallel kernels. Resolved once from the
// MESHTRACK_THREADS environment variable; defaults to the OpenMP limit.
// All parallel kernels produce bitwise-identical results for any thread
// count (they are written gather-style), so this only affects speed.
int max_threads();

// Override for tests and benchmarks.
void set_max_threads(int n);

// True when more than one worker is available and OpenMP was compiled in.
bool parallel_enabled();

}  // namespace meshtrack::threading
