#pragma once
// Error types thrown across the library. Each maps to one rejection case of
// a public operation so tests can discriminate failures by type.

#include <stdexcept>
#include <string>

namespace nocrek {

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

struct EmptyDefinitionError : Error { using Error::Error; };
struct DuplicateTermError : Error { using Error::Error; };
struct ReservedTermError : Error { using Error::Error; };
struct UnknownTermError : Error { using Error::Error; };
struct IoFailureError : Error { using Error::Error; };
struct SchemaMismatchError : Error { using Error::Error; };

struct DimensionMismatchError : Error { using Error::Error; };
struct EmptyStoreError : Error { using Error::Error; };

struct TooManyTagsError : Error { using Error::Error; };
struct NonFiniteError : Error { using Error::Error; };
struct TooLargeError : Error { using Error::Error; };
struct InvalidAssignmentError : Error { using Error::Error; };

struct EmptyMaskSetError : Error { using Error::Error; };
struct EmptyCaptionError : Error { using Error::Error; };
struct EmptySequenceError : Error { using Error::Error; };

struct ShapeMismatchError : Error { using Error::Error; };
struct NoForwardRecordedError : Error { using Error::Error; };

struct CorpusTooSmallError : Error { using Error::Error; };
struct EmptyReferenceSetError : Error { using Error::Error; };
struct EmptySceneListError : Error { using Error::Error; };

struct ConfigInvalidError : Error { using Error::Error; };
struct TrainingDivergedError : Error { using Error::Error; };

} // namespace nocrek
