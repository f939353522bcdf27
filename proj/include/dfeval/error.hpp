#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dfeval {

/// Categorized failure reported by every module. The kind is what callers and
/// the CLI switch on; the message carries the human-readable detail.
enum class ErrorKind {
    MalformedRecord,
    EmptyFile,
    NoFaceFound,
    BackendUnavailable,
    DegenerateGeometry,
    CanvasMismatch,
    DuplicateVideoId,
    MissingField,
    EmptyManifest,
    TooFewIdentities,
    OverlappingLists,
    UnassignedVideo,
    UndecodableSource,
    IncompatibleWeights,
    EmptyDataset,
    NonFiniteLoss,
    ModeError,
    ShapeError,
    SingleClass,
    MixedLabelsWithinVideo,
    InconsistentRegions,
    NoConvLayer,
    MissingPrerequisite,
    ConfigError,
    RegistryConflict,
    IoError,
};

inline std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::MalformedRecord: return "MalformedRecord";
    case ErrorKind::EmptyFile: return "EmptyFile";
    case ErrorKind::NoFaceFound: return "NoFaceFound";
    case ErrorKind::BackendUnavailable: return "BackendUnavailable";
    case ErrorKind::DegenerateGeometry: return "DegenerateGeometry";
    case ErrorKind::CanvasMismatch: return "CanvasMismatch";
    case ErrorKind::DuplicateVideoId: return "DuplicateVideoId";
    case ErrorKind::MissingField: return "MissingField";
    case ErrorKind::EmptyManifest: return "EmptyManifest";
    case ErrorKind::TooFewIdentities: return "TooFewIdentities";
    case ErrorKind::OverlappingLists: return "OverlappingLists";
    case ErrorKind::UnassignedVideo: return "UnassignedVideo";
    case ErrorKind::UndecodableSource: return "UndecodableSource";
    case ErrorKind::IncompatibleWeights: return "IncompatibleWeights";
    case ErrorKind::EmptyDataset: return "EmptyDataset";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::ModeError: return "ModeError";
    case ErrorKind::ShapeError: return "ShapeError";
    case ErrorKind::SingleClass: return "SingleClass";
    case ErrorKind::MixedLabelsWithinVideo: return "MixedLabelsWithinVideo";
    case ErrorKind::InconsistentRegions: return "InconsistentRegions";
    case ErrorKind::NoConvLayer: return "NoConvLayer";
    case ErrorKind::MissingPrerequisite: return "MissingPrerequisite";
    case ErrorKind::ConfigError: return "ConfigError";
    case ErrorKind::RegistryConflict: return "RegistryConflict";
    case ErrorKind::IoError: return "IoError";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& detail)
        : std::runtime_error(std::string(to_string(kind)) + ": " + detail), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

} // namespace dfeval
