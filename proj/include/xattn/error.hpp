#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace xattn {

/// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor extents that do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Token or coordinate outside its valid range.
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid ModelConfig / TrainConfig / experiment configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Parent and child cannot be related (incompatible shapes, vocabularies).
class TransferError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint composition refused (lineage or side mismatch).
class CompositionError : public Error {
 public:
  using Error::Error;
};

/// Nearest-neighbour retrieval with a degenerate query.
class RetrievalError : public Error {
 public:
  using Error::Error;
};

/// A score (BLEU, lexicon accuracy) is undefined on the given input.
class UndefinedScoreError : public Error {
 public:
  using Error::Error;
};

/// Synthetic data generation with incompatible language specs.
class GenerationError : public Error {
 public:
  using Error::Error;
};

/// Malformed checkpoint or corpus file. Carries the byte offset where
/// decoding stopped.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace xattn
