#pragma once

#include <stdexcept>
#include <string>

namespace fuseclip {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Caller broke an operation's precondition.
class ContractError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Non-finite values detected during training.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Persisted artifact was produced for an incompatible world or model shape.
class CompatibilityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace fuseclip
