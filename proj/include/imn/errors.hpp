#pragma once

#include <stdexcept>
#include <string>

namespace imn {

// Bad or inconsistent run configuration (CLI exit code 2).
class config_error : public std::runtime_error {
public:
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Data / file problems (CLI exit code 3).
class data_error : public std::runtime_error {
public:
    explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

class format_error : public data_error {
public:
    explicit format_error(const std::string& msg) : data_error(msg) {}
};

class version_error : public data_error {
public:
    explicit version_error(const std::string& msg) : data_error(msg) {}
};

class truncated_error : public data_error {
public:
    explicit truncated_error(const std::string& msg) : data_error(msg) {}
};

class checksum_error : public data_error {
public:
    explicit checksum_error(const std::string& msg) : data_error(msg) {}
};

// Non-finite values during optimization (CLI exit code 4).
class numeric_error : public std::runtime_error {
public:
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace imn
