#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace nsde {

/// Worker cap for embarrassingly parallel loops. Results never depend on it:
/// every task writes its own slot and reductions run afterwards in index order.
struct Exec {
  unsigned threads = 1;
};

/// Runs fn(i) for i in [0, n). If tasks throw, the exception of the lowest
/// failing index is rethrown, so error reporting is schedule independent.
template <typename Fn>
void parallel_for(std::size_t n, Exec exec, Fn&& fn) {
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, exec.threads), n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  auto body = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  std::vector<std::jthread> pool;
  pool.reserve(workers - 1);
  for (unsigned w = 1; w < workers; ++w) pool.emplace_back(body);
  body();
  pool.clear();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace nsde
