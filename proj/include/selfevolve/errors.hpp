#pragma once

#include <stdexcept>
#include <string>

namespace selfevolve {

// Invalid or inconsistent configuration. `field` names the offending key.
class ConfigError : public std::runtime_error {
public:
    ConfigError(std::string field, const std::string& what)
        : std::runtime_error(what), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }

private:
    std::string field_;
};

// A response that cannot be interpreted against its instance.
class MalformedResponse : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Argument outside an operation's mathematical domain.
class DomainError : public std::domain_error {
    using std::domain_error::domain_error;
};

// Operation undefined on empty input.
class UndefinedInput : public std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

class CorruptCheckpoint : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

// A metrics log written under a schema version this build cannot read.
class SchemaMismatch : public std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace selfevolve
