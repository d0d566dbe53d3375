#pragma once

#include <stdexcept>
#include <string>

namespace prunescope {

// Base class for every error thrown by this library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Operand shapes do not agree (vector lengths, matrix dims, label counts).
class DimensionMismatch : public Error {
public:
    using Error::Error;
};

// A matrix required to be symmetric positive definite is not.
class NotPositiveDefinite : public Error {
public:
    using Error::Error;
};

// An iterative routine hit its iteration cap before reaching tolerance.
class ConvergenceFailure : public Error {
public:
    using Error::Error;
};

// A scalar or structural parameter is outside its documented domain.
class InvalidParameter : public Error {
public:
    using Error::Error;
};

// A Monte Carlo sample produced a non-finite log-density or summand.
class NonFiniteSample : public Error {
public:
    using Error::Error;
};

// A density ratio would overflow double range (log-ratio above 700).
class OverflowGuard : public Error {
public:
    using Error::Error;
};

// A class label is negative, non-integral, or out of range for the model.
class InvalidLabel : public Error {
public:
    using Error::Error;
};

// Training or evaluation produced a non-finite loss.
class NonFiniteLoss : public Error {
public:
    using Error::Error;
};

// A dataset split that must be non-empty has no rows.
class EmptySplit : public Error {
public:
    using Error::Error;
};

// Two evaluation results being compared come from different splits or datasets.
class SplitMismatch : public Error {
public:
    using Error::Error;
};

// A text input (CSV, config, container header) could not be parsed.
class ParseError : public Error {
public:
    using Error::Error;
};

// A CSV row has a different cell count than the header row.
class RaggedRows : public Error {
public:
    using Error::Error;
};

// A CSV cell that must be numeric is not.
class NonNumericCell : public Error {
public:
    using Error::Error;
};

// Too few data points for the requested statistic.
class InsufficientData : public Error {
public:
    using Error::Error;
};

}  // namespace prunescope
