#pragma once

#include <stdexcept>
#include <string>

namespace capmine {

// Error taxonomy. The CLI maps these onto exit codes:
//   ConfigError/UsageError -> 2, NumericError -> 3, IoError/ParseError -> 4.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed input file (bad JSON line, bad checkpoint bytes).
struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Structurally valid input that violates a domain invariant.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GeometryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct SplitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EmptyCorpusError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NotIndexedError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TranslationCollisionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UndefinedMetricError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values during training or gradient computation.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct PipelineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace capmine
