#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tfpca {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Input violates a documented precondition or data invariant.
class ValidationError : public Error {
public:
    using Error::Error;
};

class DomainError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class ParseError : public ValidationError {
public:
    ParseError(const std::string& what, std::size_t line)
        : ValidationError("line " + std::to_string(line) + ": " + what), line_(line) {}

    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

class DuplicateError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class LookupError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class CollinearityError : public ValidationError {
public:
    CollinearityError(const std::string& what, std::vector<std::string> columns)
        : ValidationError(what), columns_(std::move(columns)) {}

    const std::vector<std::string>& columns() const noexcept { return columns_; }

private:
    std::vector<std::string> columns_;
};

/// A numerical procedure could not produce a usable answer.
class NumericalError : public Error {
public:
    using Error::Error;
};

class ConditioningError : public NumericalError {
public:
    ConditioningError(const std::string& what, double smallest_eigenvalue)
        : NumericalError(what), smallest_eigenvalue_(smallest_eigenvalue) {}

    double smallest_eigenvalue() const noexcept { return smallest_eigenvalue_; }

private:
    double smallest_eigenvalue_;
};

class ConvergenceError : public NumericalError {
public:
    ConvergenceError(const std::string& what, Eigen::MatrixXd last_iterate)
        : NumericalError(what), last_iterate_(std::move(last_iterate)) {}

    const Eigen::MatrixXd& last_iterate() const noexcept { return last_iterate_; }

private:
    Eigen::MatrixXd last_iterate_;
};

class DegenerateRegionError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class EmptyWindowError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class NonIdentifiedError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class CurveFitError : public NumericalError {
public:
    CurveFitError(const std::string& what, std::vector<double> gridpoints)
        : NumericalError(what), gridpoints_(std::move(gridpoints)) {}

    const std::vector<double>& gridpoints() const noexcept { return gridpoints_; }

private:
    std::vector<double> gridpoints_;
};

class PsdError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

}  // namespace tfpca
