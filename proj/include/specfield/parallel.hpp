#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace specfield {

// Thread count: explicit value, else SPECFIELD_THREADS, else hardware.
inline unsigned resolve_threads(unsigned requested = 0) {
  if (requested > 0) return requested;
  if (const char* env = std::getenv("SPECFIELD_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return static_cast<unsigned>(n);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Splits [0, n) into `parts` contiguous chunks and runs fn(part, begin, end).
// Chunk boundaries depend only on (n, parts), never on scheduling.
template <typename Fn>
void parallel_chunks(std::size_t n, unsigned parts, Fn&& fn) {
  parts = std::max(1u, parts);
  auto bounds = [&](unsigned p) { return n * p / parts; };
  if (parts == 1) {
    fn(0u, std::size_t{0}, n);
    return;
  }
  std::vector<std::thread> workers;
  workers.reserve(parts - 1);
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto guarded = [&](unsigned p) {
    try {
      fn(p, bounds(p), bounds(p + 1));
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };
  for (unsigned p = 1; p < parts; ++p) workers.emplace_back(guarded, p);
  guarded(0);
  for (auto& w : workers) w.join();
  if (failure) std::rethrow_exception(failure);
}

}  // namespace specfield
