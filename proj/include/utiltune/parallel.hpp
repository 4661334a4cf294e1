#pragma once

#include <cstddef>
#include <cstdint>
#include <exception>

namespace utiltune {

enum class Exec { kSerial, kParallel };

/// Runs fn(i) for every i in [0, n). Callers only write per-index slots and
/// reduce serially afterwards, so both paths give bit-identical results.
/// The first exception thrown by any iteration is rethrown on the caller.
template <class Fn>
void parallel_for(std::size_t n, Exec exec, Fn&& fn) {
  if (exec == Exec::kSerial) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::exception_ptr error;
  const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(dynamic, 16)
  for (std::int64_t i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
#pragma omp critical(utiltune_parallel_for_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace utiltune
