//
// Copyright 2026 The bkdp Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
//

#ifndef BKDP_STATUS_H_
#define BKDP_STATUS_H_

#include <stdexcept>
#include <string>

namespace bkdp {

// Error categories. Every failure in the library surfaces as one of these.

class DimensionError : public std::invalid_argument {
 public:
  explicit DimensionError(const std::string& what)
      : std::invalid_argument("dimension error: " + what) {}
};

class ParameterError : public std::invalid_argument {
 public:
  explicit ParameterError(const std::string& what)
      : std::invalid_argument("parameter error: " + what) {}
};

class StateError : public std::logic_error {
 public:
  explicit StateError(const std::string& what)
      : std::logic_error("state error: " + what) {}
};

class ConfigurationError : public std::invalid_argument {
 public:
  explicit ConfigurationError(const std::string& what)
      : std::invalid_argument("configuration error: " + what) {}
};

// Raised when a layer cannot be expressed in generalized linear form, or a
// composite decomposition is requested for a plain layer.
class CapabilityError : public std::invalid_argument {
 public:
  explicit CapabilityError(const std::string& what)
      : std::invalid_argument("capability error: " + what) {}
};

class SpecificationError : public std::invalid_argument {
 public:
  explicit SpecificationError(const std::string& what)
      : std::invalid_argument("specification error: " + what) {}
};

class ComparisonError : public std::invalid_argument {
 public:
  explicit ComparisonError(const std::string& what)
      : std::invalid_argument("comparison error: " + what) {}
};

}  // namespace bkdp

#endif  // BKDP_STATUS_H_
