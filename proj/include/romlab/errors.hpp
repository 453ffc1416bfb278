#pragma once

#include <stdexcept>
#include <string>

namespace romlab {

enum class Errc {
  empty_input,
  invalid_config,
  invalid_input,
  schema_error,
  contract_violation,
  numeric_error,
  corrupt_checkpoint,
  version_error,
  config_error,
  missing_input,
  io_error,
};

inline const char* errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::empty_input: return "EmptyInput";
    case Errc::invalid_config: return "InvalidConfig";
    case Errc::invalid_input: return "InvalidInput";
    case Errc::schema_error: return "SchemaError";
    case Errc::contract_violation: return "ContractViolation";
    case Errc::numeric_error: return "NumericError";
    case Errc::corrupt_checkpoint: return "CorruptCheckpoint";
    case Errc::version_error: return "VersionError";
    case Errc::config_error: return "ConfigError";
    case Errc::missing_input: return "MissingInput";
    case Errc::io_error: return "IOError";
  }
  return "Error";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

#define ROMLAB_DEFINE_ERROR(Name, code_value)                           \
  class Name : public Error {                                           \
   public:                                                              \
    explicit Name(const std::string& what) : Error(code_value, what) {} \
  }

ROMLAB_DEFINE_ERROR(EmptyInput, Errc::empty_input);
ROMLAB_DEFINE_ERROR(InvalidConfig, Errc::invalid_config);
ROMLAB_DEFINE_ERROR(InvalidInput, Errc::invalid_input);
ROMLAB_DEFINE_ERROR(SchemaError, Errc::schema_error);
ROMLAB_DEFINE_ERROR(ContractViolation, Errc::contract_violation);
ROMLAB_DEFINE_ERROR(NumericError, Errc::numeric_error);
ROMLAB_DEFINE_ERROR(CorruptCheckpoint, Errc::corrupt_checkpoint);
ROMLAB_DEFINE_ERROR(VersionError, Errc::version_error);
ROMLAB_DEFINE_ERROR(ConfigError, Errc::config_error);
ROMLAB_DEFINE_ERROR(MissingInput, Errc::missing_input);
ROMLAB_DEFINE_ERROR(IoError, Errc::io_error);

#undef ROMLAB_DEFINE_ERROR

}  // namespace romlab
