// Copyright 2026 The brt Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace brt {

/// Base class for all library errors.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor shape / dimension mismatch.
struct ShapeError : Error {
  using Error::Error;
};

/// Non-finite values, degenerate softmax rows, zero-area boxes and the like.
struct NumericError : Error {
  using Error::Error;
};

/// Invalid configuration: missing depth maps, mismatched view sizes, bad
/// hyperparameters.
struct ConfigError : Error {
  using Error::Error;
};

/// Schema violation while reading a JSON artifact; message carries the
/// offending field path.
struct ParseError : ConfigError {
  using ConfigError::ConfigError;
};

/// Checkpoint does not match the parameter registry it is loaded into.
struct LoadError : ConfigError {
  using ConfigError::ConfigError;
};

/// A point lies behind the camera plane; callers typically drop the point.
struct BehindCameraError : Error {
  using Error::Error;
};

/// Synthetic scene generation could not satisfy its constraints.
struct GenerationError : Error {
  using Error::Error;
};

/// Filesystem-level failure.
struct IoError : Error {
  using Error::Error;
};

}  // namespace brt
