#pragma once
// Deterministic work partitioning. Results must not depend on the thread
// count except through floating-point summation order, which is kept fixed
// for a fixed thread configuration: chunks are static and reductions are
// combined in chunk order by the caller.

#include <cstdint>
#include <functional>

namespace iclebm {

int num_threads();
void set_num_threads(int n);
int max_chunks();

// Splits [0, n) into at most max_chunks() contiguous chunks and invokes
// body(begin, end, chunk_index), possibly concurrently. Chunk boundaries
// depend only on n and the configured thread count.
void parallel_chunks(std::int64_t n, const std::function<void(std::int64_t, std::int64_t, int)>& body);

}  // namespace iclebm
