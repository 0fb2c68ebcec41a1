#include "tinyvlm/error.hpp"

namespace tinyvlm {

const char* to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::AllZeroVector: return "AllZeroVector";
        case ErrorCode::ZeroNorm: return "ZeroNorm";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::DimensionTooLarge: return "DimensionTooLarge";
        case ErrorCode::EmptyTemplates: return "EmptyTemplates";
        case ErrorCode::DuplicateClass: return "DuplicateClass";
        case ErrorCode::EmptyInput: return "EmptyInput";
        case ErrorCode::NoFeasibleDimension: return "NoFeasibleDimension";
        case ErrorCode::BadMagic: return "BadMagic";
        case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
        case ErrorCode::TruncatedFile: return "TruncatedFile";
        case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
        case ErrorCode::ParseError: return "ParseError";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::DegenerateActivation: return "DegenerateActivation";
        case ErrorCode::NotCalibrated: return "NotCalibrated";
        case ErrorCode::AccumulatorOverflow: return "AccumulatorOverflow";
        case ErrorCode::BadTemperature: return "BadTemperature";
        case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
        case ErrorCode::EmptyCluster: return "EmptyCluster";
        case ErrorCode::UnresolvedShapes: return "UnresolvedShapes";
        case ErrorCode::InfeasibleBase: return "InfeasibleBase";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

bool is_degenerate_input(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::AccumulatorOverflow:
        case ErrorCode::NonFiniteLoss:
            return false;
        default:
            return true;
    }
}

}  // namespace tinyvlm
