// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace cdmoe {

/// Tensor shape / dimension mismatch.
class ShapeError : public std::runtime_error {
public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid argument value (bad k, bad index, empty input, ...).
class ArgumentError : public std::runtime_error {
public:
  explicit ArgumentError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Operation applied to an object in the wrong state
/// (e.g. collecting gate stats on an already-condensed layer).
class StateError : public std::runtime_error {
public:
  explicit StateError(const std::string& msg) : std::runtime_error(msg) {}
};

/// An expert that never fired on the calibration data has no defined
/// fixed gate; the caller decides how to proceed.
class NeverActivatedError : public std::runtime_error {
public:
  explicit NeverActivatedError(const std::string& msg)
      : std::runtime_error(msg) {}
};

/// Non-finite value where a finite one is required.
class NumericError : public std::runtime_error {
public:
  explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Spectrum unusable for tail estimation (all-equal eigenvalues, fewer
/// than two positive ones).
class DegenerateSpectrumError : public std::runtime_error {
public:
  explicit DegenerateSpectrumError(const std::string& msg)
      : std::runtime_error(msg) {}
};

/// Missing or unreadable/unwritable file.
class IoError : public std::runtime_error {
public:
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Checkpoint bytes do not match their manifest (bad hash, truncation).
class CorruptionError : public std::runtime_error {
public:
  explicit CorruptionError(const std::string& msg)
      : std::runtime_error(msg) {}
};

/// Checkpoint manifest written by an unknown format version.
class VersionError : public std::runtime_error {
public:
  explicit VersionError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Configuration failed validation; message aggregates every problem found.
class ConfigError : public std::runtime_error {
public:
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace cdmoe
