// Copyright (c) 2026 The antkv Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef ANTKV_ERROR_HPP
#define ANTKV_ERROR_HPP

#include <stdexcept>
#include <string>

namespace antkv {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shape mismatch, bad configuration, violated precondition.
class InvalidArgument : public Error {
 public:
  using Error::Error;
};

/// Malformed tensor, codebook or cache snapshot file.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// A non-finite value was produced or consumed.
class NumericalError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

}  // namespace detail
}  // namespace antkv

#endif  // ANTKV_ERROR_HPP
