#pragma once

#include <stdexcept>
#include <string>

namespace tinyvlm {

enum class ErrorCode {
    AllZeroVector,
    ZeroNorm,
    DimensionMismatch,
    DimensionTooLarge,
    EmptyTemplates,
    DuplicateClass,
    EmptyInput,
    NoFeasibleDimension,
    BadMagic,
    UnsupportedVersion,
    TruncatedFile,
    ChecksumMismatch,
    ParseError,
    ShapeMismatch,
    DegenerateActivation,
    NotCalibrated,
    AccumulatorOverflow,
    BadTemperature,
    NonFiniteLoss,
    EmptyCluster,
    UnresolvedShapes,
    InfeasibleBase,
    InvalidArgument,
    IoError,
};

const char* to_string(ErrorCode code) noexcept;

// Degenerate-input errors map to CLI exit code 2, everything else to 3.
bool is_degenerate_input(ErrorCode code) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace tinyvlm
