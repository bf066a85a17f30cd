#pragma once

#include <stdexcept>
#include <string>

namespace gazedecode {

// Every library failure derives from Error. ConfigError is reported separately
// by the CLI (exit code 2); everything else is a data/model failure (exit 3).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define GAZEDECODE_ERROR(Name)                   \
  class Name : public Error {                    \
   public:                                       \
    explicit Name(const std::string& what)       \
        : Error(std::string(#Name ": ") + what) {} \
  }

GAZEDECODE_ERROR(DimensionError);
GAZEDECODE_ERROR(IndexError);
GAZEDECODE_ERROR(FormatError);
GAZEDECODE_ERROR(IoError);
GAZEDECODE_ERROR(ParameterError);
GAZEDECODE_ERROR(StimulusError);
GAZEDECODE_ERROR(EmptyInputError);
GAZEDECODE_ERROR(DegenerateError);
GAZEDECODE_ERROR(NumericError);
GAZEDECODE_ERROR(ConditionError);
GAZEDECODE_ERROR(CoverageError);
GAZEDECODE_ERROR(ConfigError);

#undef GAZEDECODE_ERROR

class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, int epoch)
      : Error("TrainingError: " + what + " (epoch " + std::to_string(epoch) + ")"),
        epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

}  // namespace gazedecode
