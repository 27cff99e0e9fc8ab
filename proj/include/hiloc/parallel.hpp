#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <thread>
#include <vector>

namespace hiloc {

// Splits [0, n) into a fixed number of chunks and processes each chunk on
// some worker thread. Chunk boundaries depend only on n and n_chunks, never
// on the thread count, so per-chunk partial results can be merged in chunk
// order to give run-to-run identical floating point sums.
template <typename Fn>
void parallel_chunks(std::size_t n, std::size_t n_chunks, Fn&& fn) {
  if (n == 0) return;
  if (n_chunks > n) n_chunks = n;
  std::size_t n_threads = std::thread::hardware_concurrency();
  if (n_threads == 0) n_threads = 1;
  if (n_threads > n_chunks) n_threads = n_chunks;

  auto run_chunk = [&](std::size_t c) {
    const std::size_t begin = n * c / n_chunks;
    const std::size_t end = n * (c + 1) / n_chunks;
    fn(c, begin, end);
  };

  if (n_threads == 1) {
    for (std::size_t c = 0; c < n_chunks; ++c) run_chunk(c);
    return;
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::thread> workers;
  workers.reserve(n_threads);
  for (std::size_t t = 0; t < n_threads; ++t) {
    workers.emplace_back([&] {
      for (;;) {
        const std::size_t c = next.fetch_add(1);
        if (c >= n_chunks) return;
        run_chunk(c);
      }
    });
  }
  for (auto& w : workers) w.join();
}

inline constexpr std::size_t kDefaultChunks = 64;

}  // namespace hiloc
