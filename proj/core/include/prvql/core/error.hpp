#pragma once

#include <stdexcept>
#include <string>

namespace prvql {

// Every failure raised by the library derives from Error. `code()` is a short
// stable token that the CLI prints in its single-line error report.
class Error : public std::runtime_error {
   public:
    Error(std::string code, const std::string& what) : std::runtime_error(what), code_(std::move(code)) {}
    const std::string& code() const noexcept { return code_; }

   private:
    std::string code_;
};

class DimensionError : public Error {
   public:
    explicit DimensionError(const std::string& what) : Error("dimension", what) {}
};

class ConfigError : public Error {
   public:
    explicit ConfigError(const std::string& what) : Error("config", what) {}
};

class ContractError : public Error {
   public:
    explicit ContractError(const std::string& what) : Error("contract", what) {}
};

class ParseError : public Error {
   public:
    explicit ParseError(const std::string& what) : Error("parse", what) {}
};

class IoError : public Error {
   public:
    explicit IoError(const std::string& what) : Error("io", what) {}
};

class NumericError : public Error {
   public:
    explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

}  // namespace prvql
