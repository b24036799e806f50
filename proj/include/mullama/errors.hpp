// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace mullama {

// Bad user-provided data: empty audio, unknown token ids, malformed records.
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or configuration mismatch between components.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf where a finite value is required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint / cache / archive could not be read.
class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AudioFormatError : public InputError {
 public:
  using InputError::InputError;
};

class ResampleRequiredError : public InputError {
 public:
  ResampleRequiredError(int got, int want)
      : InputError("sample rate " + std::to_string(got) +
                   " Hz unsupported by encoder (expects " +
                   std::to_string(want) + " Hz); resample first"),
        got_rate(got),
        want_rate(want) {}
  int got_rate;
  int want_rate;
};

}  // namespace mullama
