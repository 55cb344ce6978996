#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace agp {

enum class ErrorKind {
    config,
    layout,
    mask_pairing,
    shape,
    numeric,
    load,
    usage,
    undefined_metric,
    io,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::config: return "configuration error";
    case ErrorKind::layout: return "layout error";
    case ErrorKind::mask_pairing: return "mask pairing error";
    case ErrorKind::shape: return "shape error";
    case ErrorKind::numeric: return "numeric error";
    case ErrorKind::load: return "load error";
    case ErrorKind::usage: return "usage error";
    case ErrorKind::undefined_metric: return "undefined metric";
    case ErrorKind::io: return "i/o error";
    }
    return "error";
}

/// Every failure raised by the library carries a kind so callers (the CLI in
/// particular) can map it to an exit code without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool condition, ErrorKind kind, const std::string& what) {
    if (!condition) fail(kind, what);
}

} // namespace agp
