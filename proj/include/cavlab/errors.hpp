#ifndef CAVLAB_ERRORS_HPP
#define CAVLAB_ERRORS_HPP

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cavlab {

// Maps onto the CLI exit codes: usage → 1, data → 2, numeric → 3.
enum class ErrorCategory { Usage = 1, Data = 2, Numeric = 3 };

class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, const std::string& what)
        : std::runtime_error(what), category_(category) {}

    ErrorCategory category() const noexcept { return category_; }

private:
    ErrorCategory category_;
};

struct ShapeMismatch : Error {
    explicit ShapeMismatch(const std::string& what) : Error(ErrorCategory::Data, what) {}
};

struct InvalidArgument : Error {
    explicit InvalidArgument(const std::string& what) : Error(ErrorCategory::Usage, what) {}
};

struct DataError : Error {
    explicit DataError(const std::string& what) : Error(ErrorCategory::Data, what) {}
};

struct SchemaError : Error {
    SchemaError(const std::string& path, const std::string& what)
        : Error(ErrorCategory::Data, path + ": " + what), path_(path) {}
    const std::string& path() const noexcept { return path_; }

private:
    std::string path_;
};

struct NumericError : Error {
    explicit NumericError(const std::string& what) : Error(ErrorCategory::Numeric, what) {}
};

struct ZeroVector : NumericError {
    ZeroVector() : NumericError("cannot normalize a zero-norm vector") {}
};

struct TrainingDiverged : NumericError {
    explicit TrainingDiverged(const std::string& what) : NumericError(what) {}
};

struct DegeneratePattern : NumericError {
    DegeneratePattern() : NumericError("positive and negative centroids coincide") {}
};

struct DegenerateMasks : DataError {
    DegenerateMasks() : DataError("all segmentation masks are identical (all zero or all one)") {}
};

struct CollinearCavs : NumericError {
    CollinearCavs() : NumericError("cannot reject a CAV that is parallel to the rejected direction") {}
};

struct InsufficientFalsePositives : DataError {
    InsufficientFalsePositives(std::size_t found, std::size_t wanted)
        : DataError("buffer exhausted after " + std::to_string(found) + " of " +
                    std::to_string(wanted) + " false positives"),
          found(found), wanted(wanted) {}
    std::size_t found;
    std::size_t wanted;
};

/// Short machine-readable name of the most specific error type.
inline std::string error_tag(const std::exception& e) {
    if (dynamic_cast<const InsufficientFalsePositives*>(&e)) return "InsufficientFalsePositives";
    if (dynamic_cast<const DegenerateMasks*>(&e)) return "DegenerateMasks";
    if (dynamic_cast<const SchemaError*>(&e)) return "SchemaError";
    if (dynamic_cast<const ShapeMismatch*>(&e)) return "ShapeMismatch";
    if (dynamic_cast<const DataError*>(&e)) return "DataError";
    if (dynamic_cast<const InvalidArgument*>(&e)) return "InvalidArgument";
    if (dynamic_cast<const ZeroVector*>(&e)) return "ZeroVector";
    if (dynamic_cast<const DegeneratePattern*>(&e)) return "DegeneratePattern";
    if (dynamic_cast<const CollinearCavs*>(&e)) return "CollinearCavs";
    if (dynamic_cast<const TrainingDiverged*>(&e)) return "TrainingDiverged";
    if (dynamic_cast<const NumericError*>(&e)) return "NumericError";
    return "Error";
}

}  // namespace cavlab

#endif  // CAVLAB_ERRORS_HPP
