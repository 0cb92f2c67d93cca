#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

namespace taxon {

/// Runtime failure in any pipeline stage (bad input files, invalid state).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller violated an operation's precondition.
class PreconditionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Rng = std::mt19937_64;

/// Independent stream for work item `ordinal` under a run-level seed, so that
/// results do not depend on processing order or thread count.
Rng derive_rng(std::uint64_t seed, std::uint64_t ordinal);

/// Runs fn(i) for i in [0, count) on up to `threads` workers. fn must only
/// write to per-index state. Exceptions from workers are rethrown.
void parallel_for(std::size_t count, int threads,
                  const std::function<void(std::size_t)>& fn);

}  // namespace taxon
