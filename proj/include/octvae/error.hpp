#pragma once

#include <stdexcept>
#include <string>

namespace octvae {

/// Violated precondition on shapes or arguments of an operation.
class ContractViolation : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Misuse of the recorded computation graph (double backward, non-scalar loss, ...).
class GraphError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or inaccessible data on disk: images, manifests, checkpoints.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

} // namespace octvae
