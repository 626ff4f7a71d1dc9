/*
 * Copyright (c) 2026, The fp8rl Authors. All rights reserved.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <stdexcept>
#include <string>

namespace fp8rl {

// Base of every error raised by the library. Callers that only need to
// distinguish configuration problems from runtime failures catch ConfigError
// first and Error second.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration or invalid combination of options; reported before
// any compute starts.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Operand shapes or sequence positions that do not line up.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// A value left the E4M3 range on a path where scales should prevent it.
class OverflowError : public NumericError {
 public:
  using NumericError::NumericError;
};

// Protocol ordering violations: stale snapshots, unsynchronized engines,
// uncalibrated scales, batches tagged with the wrong step.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fp8rl
