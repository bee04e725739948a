#pragma once

#include <stdexcept>
#include <string>

namespace peerdistill {

// Error categories map onto CLI exit codes (see tools/peerdistill.cpp).
enum class ErrorKind {
  Config,      // 2
  Data,        // 3
  Numeric,     // 4
  Dimension,
  Index,
  Contract,
  Infeasible,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define PEERDISTILL_DEFINE_ERROR(Name, Kind)                          \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(Kind, what) {}     \
  };

PEERDISTILL_DEFINE_ERROR(ConfigError, ErrorKind::Config)
PEERDISTILL_DEFINE_ERROR(DataError, ErrorKind::Data)
PEERDISTILL_DEFINE_ERROR(NumericError, ErrorKind::Numeric)
PEERDISTILL_DEFINE_ERROR(DimensionError, ErrorKind::Dimension)
PEERDISTILL_DEFINE_ERROR(IndexError, ErrorKind::Index)
PEERDISTILL_DEFINE_ERROR(ContractError, ErrorKind::Contract)
PEERDISTILL_DEFINE_ERROR(InfeasibleError, ErrorKind::Infeasible)

#undef PEERDISTILL_DEFINE_ERROR

// Exit code for the CLI: 0 success, 2 config, 3 data, 4 numeric divergence.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Config:
    case ErrorKind::Infeasible:
      return 2;
    case ErrorKind::Data:
    case ErrorKind::Index:
      return 3;
    case ErrorKind::Numeric:
      return 4;
    default:
      return 1;
  }
}

}  // namespace peerdistill
