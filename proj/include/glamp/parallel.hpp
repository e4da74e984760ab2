#pragma once

#include <cstddef>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace glamp {

/// Runs fn(i) for i in [0, n) on up to `threads` workers with a static
/// strided partition.  Results must be written to pre-assigned slots, which
/// keeps output independent of scheduling.  If any call throws, the
/// exception from the lowest index is rethrown after all workers finish.
inline void parallel_for(std::size_t n, int threads,
                         const std::function<void(std::size_t)>& fn) {
  const std::size_t workers =
      threads <= 1 ? 1 : std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::size_t> error_index(workers, n);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += workers) {
          try {
            fn(i);
          } catch (...) {
            errors[w] = std::current_exception();
            error_index[w] = i;
            return;
          }
        }
      });
    }
  }
  std::size_t best = workers;
  for (std::size_t w = 0; w < workers; ++w) {
    if (errors[w] && (best == workers || error_index[w] < error_index[best])) best = w;
  }
  if (best != workers) std::rethrow_exception(errors[best]);
}

}  // namespace glamp
