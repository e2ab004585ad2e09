#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace evai {

/// Base of every error raised by the toolkit. `code()` is the stable,
/// machine-readable name used in CLI error lines and HTTP error bodies.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

#define EVAI_DEFINE_ERROR(Name)                                                 \
    class Name : public Error {                                                 \
    public:                                                                     \
        explicit Name(const std::string& message) : Error(#Name, message) {}    \
    }

EVAI_DEFINE_ERROR(DecodeError);
EVAI_DEFINE_ERROR(ConfigError);
EVAI_DEFINE_ERROR(BackboneError);
EVAI_DEFINE_ERROR(LabelError);
EVAI_DEFINE_ERROR(DuplicateError);
EVAI_DEFINE_ERROR(DataError);
EVAI_DEFINE_ERROR(DomainError);
EVAI_DEFINE_ERROR(ShapeError);
EVAI_DEFINE_ERROR(IndexError);
EVAI_DEFINE_ERROR(SingularError);
EVAI_DEFINE_ERROR(IntegrityError);
EVAI_DEFINE_ERROR(IOError);
EVAI_DEFINE_ERROR(NotFoundError);

#undef EVAI_DEFINE_ERROR

/// Raised when a feature file cannot be parsed; carries the byte offset at
/// which parsing failed.
class FormatError : public Error {
public:
    FormatError(const std::string& message, std::uint64_t offset)
        : Error("FormatError", message + " (at byte " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

}  // namespace evai
