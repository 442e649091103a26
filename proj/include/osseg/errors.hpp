#pragma once

#include <stdexcept>
#include <string>

namespace osseg {

// Shapes of operands do not agree.
class DimensionError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// A configuration value makes the requested computation ill-defined.
class ConfigError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

class ArgumentError : public std::invalid_argument {
   public:
    using std::invalid_argument::invalid_argument;
};

// NaN or otherwise non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Malformed file contents.
class FormatError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// Values that parse but violate a domain constraint (e.g. class id out of range).
class ValidationError : public std::runtime_error {
   public:
    using std::runtime_error::runtime_error;
};

// A caller broke a precondition that is not about shapes or values.
class ContractError : public std::logic_error {
   public:
    using std::logic_error::logic_error;
};

}  // namespace osseg
