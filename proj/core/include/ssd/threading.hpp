#pragma once

#include <cstdint>
#include <functional>

namespace ssd {

/// Worker thread cap: SSD_THREADS if set (clamped to [1, 64]), otherwise
/// std::thread::hardware_concurrency().
int worker_threads();

/// Runs body(i) for i in [0, n). Splits into contiguous chunks across
/// worker_threads() threads; serial when n is small or the cap is 1.
/// body must be safe to call concurrently for distinct i.
void parallel_for(int64_t n, const std::function<void(int64_t)>& body);

}  // namespace ssd
