#pragma once

#include <stdexcept>
#include <string>

namespace mla {

// Stable error categories; the C API maps these 1:1 onto mla_status codes.
enum class ErrorCode {
  InvalidArgument,
  Shape,
  Vocab,
  Length,
  Language,
  Config,
  Data,
  Io,
  Parse,
  CkptVersion,
  CkptCorrupt,
  Schedule,
  Contract,
  Degenerate,
  Internal,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void raise(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace mla
