#pragma once

#include <stdexcept>
#include <string>

namespace resq {

// Error taxonomy shared by the library and the CLI. Every category maps to a
// stable name (machine-readable) and a distinct process exit code.
enum class ErrorCategory {
    dimension,
    contract,
    format,
    io,
    training,
    search,
    config,
    lineage,
};

const char* category_name(ErrorCategory c);
int category_exit_code(ErrorCategory c);

class Error : public std::runtime_error {
public:
    Error(ErrorCategory cat, const std::string& msg)
        : std::runtime_error(msg), category_(cat) {}
    ErrorCategory category() const { return category_; }

private:
    ErrorCategory category_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& msg) : Error(ErrorCategory::dimension, msg) {}
};

struct ContractError : Error {
    explicit ContractError(const std::string& msg) : Error(ErrorCategory::contract, msg) {}
};

struct FormatError : Error {
    explicit FormatError(const std::string& msg) : Error(ErrorCategory::format, msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(ErrorCategory::io, msg) {}
};

struct TrainingError : Error {
    TrainingError(const std::string& msg, int epoch)
        : Error(ErrorCategory::training, msg + " (epoch " + std::to_string(epoch) + ")"),
          epoch(epoch) {}
    int epoch;
};

// Raised when no bit width in the search range meets the accuracy threshold.
// Carries the best candidate probed so callers can inspect how close it came.
struct SearchError : Error {
    SearchError(const std::string& msg, int best_b, double best_accuracy)
        : Error(ErrorCategory::search, msg), best_b(best_b), best_accuracy(best_accuracy) {}
    int best_b;
    double best_accuracy;
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(ErrorCategory::config, msg) {}
};

struct LineageError : Error {
    explicit LineageError(const std::string& msg) : Error(ErrorCategory::lineage, msg) {}
};

}  // namespace resq
