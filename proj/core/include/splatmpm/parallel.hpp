#pragma once

#include <algorithm>
#include <cstddef>
#include <thread>
#include <vector>

namespace splatmpm {

/// Splits [0, n) into `threads` contiguous chunks and runs
/// fn(begin, end, chunk) on each. Chunk boundaries depend only on n and
/// `threads`, so per-chunk reductions combined in chunk order are reproducible.
template <class Fn>
void parallel_chunks(std::size_t n, int threads, Fn&& fn) {
  const std::size_t t = static_cast<std::size_t>(std::max(1, threads));
  if (t == 1 || n < 2 * t) {
    fn(std::size_t{0}, n, std::size_t{0});
    return;
  }
  std::vector<std::jthread> workers;
  workers.reserve(t - 1);
  const std::size_t step = (n + t - 1) / t;
  for (std::size_t c = 1; c < t; ++c) {
    const std::size_t b = std::min(n, c * step), e = std::min(n, (c + 1) * step);
    workers.emplace_back([&fn, b, e, c] { fn(b, e, c); });
  }
  fn(std::size_t{0}, std::min(n, step), std::size_t{0});
}

template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  parallel_chunks(n, threads, [&fn](std::size_t b, std::size_t e, std::size_t) {
    for (std::size_t i = b; i < e; ++i) fn(i);
  });
}

}  // namespace splatmpm
