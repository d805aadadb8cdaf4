#pragma once

#include <stdexcept>
#include <string>

namespace afford {

// Error taxonomy shared by the library and the CLI. The CLI prints
// "E_<tag>: message" on one line and exits nonzero.
enum class ErrorCode {
    Dimension,      // shape / size mismatch
    Contract,       // precondition violated by the caller
    Input,          // invalid user-supplied value
    State,          // missing checkpoint, uninitialized statistics, ...
    Format,         // malformed file content
    NotFound,       // missing file or record
    Config,         // contradictory configuration
    Divergence,     // NaN loss during training
    Degenerate,     // degenerate pose / bounding box
    MetricUndefined,// metric reference length is zero for a sample
    Io,             // filesystem failure
};

const char* error_tag(ErrorCode code);

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

} // namespace afford
