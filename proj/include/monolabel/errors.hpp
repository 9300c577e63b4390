#pragma once

#include <stdexcept>
#include <string>

namespace monolabel {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class LookupError : public Error {
public:
    using Error::Error;
};

class GeometryError : public Error {
public:
    using Error::Error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class DegenerateFitError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Parse failure carrying its source location.
class ParseError : public Error {
public:
    ParseError(std::string file, int line, int column, const std::string& what)
        : Error(format(file, line, column, what)), file_(std::move(file)), line_(line), column_(column) {}

    const std::string& file() const noexcept { return file_; }
    int line() const noexcept { return line_; }
    int column() const noexcept { return column_; }

private:
    static std::string format(const std::string& file, int line, int column, const std::string& what) {
        std::string out = file.empty() ? std::string("<input>") : file;
        out += ":" + std::to_string(line) + ":" + std::to_string(column) + ": " + what;
        return out;
    }

    std::string file_;
    int line_;
    int column_;
};

class IoError : public Error {
public:
    using Error::Error;
};

}  // namespace monolabel
