// Copyright 2026 The BindCal Authors
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

#ifndef BINDCAL_ERROR_HPP_
#define BINDCAL_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace bindcal {

// Every rejection raised by the library carries one of these codes so that
// callers (and the CLI exit-code mapping) can tell failure classes apart
// without parsing messages.
enum class ErrorCode {
  kDimensionMismatch,
  kDegenerate,       // zero-norm embedding, rank-0 input, empty class
  kNonFinite,
  kInvalidArgument,
  kBadMagic,
  kTruncated,
  kInconsistent,     // header fields disagree with payload
  kTrailingBytes,
  kIo,
  kConfig,
  kMissingArtifact,
  kHashMismatch,
  kStageMismatch,
};

inline const char *error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDimensionMismatch: return "dimension mismatch";
    case ErrorCode::kDegenerate: return "degenerate input";
    case ErrorCode::kNonFinite: return "non-finite value";
    case ErrorCode::kInvalidArgument: return "invalid argument";
    case ErrorCode::kBadMagic: return "bad magic";
    case ErrorCode::kTruncated: return "truncated payload";
    case ErrorCode::kInconsistent: return "inconsistent header";
    case ErrorCode::kTrailingBytes: return "trailing bytes";
    case ErrorCode::kIo: return "i/o error";
    case ErrorCode::kConfig: return "config error";
    case ErrorCode::kMissingArtifact: return "missing artifact";
    case ErrorCode::kHashMismatch: return "hash mismatch";
    case ErrorCode::kStageMismatch: return "stage mismatch";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string &message)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace bindcal

#endif  // BINDCAL_ERROR_HPP_
