// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dha {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not agree.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Head counts or query-to-head maps are inconsistent with the parameters.
class TopologyError : public Error {
 public:
  using Error::Error;
};

/// A user-supplied configuration cannot be satisfied.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// An argument lies outside the domain of an operation.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// Similarity is undefined (e.g. a zero matrix was passed to CKA).
class UndefinedSimilarityError : public DomainError {
 public:
  using DomainError::DomainError;
};

/// Training produced a non-finite loss.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const noexcept { return step_; }

 private:
  std::size_t step_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint file is malformed or does not match what the caller expects.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

class UnsupportedVersionError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class ChecksumError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class BoundsError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

class VariantMismatchError : public CheckpointError {
 public:
  using CheckpointError::CheckpointError;
};

/// Wraps an error raised inside one pipeline stage with the stage name.
class StageError : public Error {
 public:
  StageError(const std::string& stage, const std::string& what)
      : Error("[" + stage + "] " + what), stage_(stage) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace dha
