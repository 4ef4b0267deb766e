#pragma once

#include <stdexcept>
#include <string>

namespace spngd {

// Common base so callers can catch everything thrown by this library with one
// handler while still discriminating the specific failure when they care.
struct Error : std::runtime_error {
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Dimensions of an operand do not match what the operation requires.
struct ShapeMismatch : Error {
  explicit ShapeMismatch(const std::string& what) : Error(what) {}
};

// Cholesky factorization failed even after damping; the statistic is broken
// (NaNs, negative diagonal) or the damping term was non-positive.
struct NotPositiveDefinite : Error {
  explicit NotPositiveDefinite(const std::string& what) : Error(what) {}
};

// A 2x2 block has |det| below the singularity floor.
struct SingularBlock : Error {
  explicit SingularBlock(const std::string& what) : Error(what) {}
};

// Relative distance against a reference with zero norm is undefined.
struct ZeroReference : Error {
  explicit ZeroReference(const std::string& what) : Error(what) {}
};

// An estimator was asked to reduce over zero samples.
struct EmptyBatch : Error {
  explicit EmptyBatch(const std::string& what) : Error(what) {}
};

// OneMC statistics were requested but no sampled-label backward pass was run.
struct MissingMcPass : Error {
  explicit MissingMcPass(const std::string& what) : Error(what) {}
};

// A forward pass produced NaN or Inf; training has diverged.
struct NonFiniteActivation : Error {
  explicit NonFiniteActivation(const std::string& what) : Error(what) {}
};

// A preconditioner block was consumed before it was ever built.
struct StaleBeyondLimit : Error {
  explicit StaleBeyondLimit(const std::string& what) : Error(what) {}
};

// A statistic refresh was recorded at a step where none was scheduled.
struct RefreshOutOfTurn : Error {
  explicit RefreshOutOfTurn(const std::string& what) : Error(what) {}
};

// Global batch size is not divisible by the worker count.
struct IndivisibleBatch : Error {
  explicit IndivisibleBatch(const std::string& what) : Error(what) {}
};

// A statistic has no owning worker registered.
struct MissingOwner : Error {
  explicit MissingOwner(const std::string& what) : Error(what) {}
};

// A micro-step accumulation was finalized without any micro-steps.
struct EmptyAccumulation : Error {
  explicit EmptyAccumulation(const std::string& what) : Error(what) {}
};

// Input text is not syntactically valid (JSON, CSV, binary framing).
struct ParseError : Error {
  explicit ParseError(const std::string& what) : Error(what) {}
};

// Input parsed but a field value is out of contract; `field` names it.
struct ValidationError : Error {
  ValidationError(std::string field_, const std::string& what)
      : Error(what), field(std::move(field_)) {}
  std::string field;
};

}  // namespace spngd
