#pragma once

#include <stdexcept>
#include <string>

namespace geoformer {

// Error categories map onto CLI exit codes: usage 2, data 3, numeric 4.
struct usage_error : std::runtime_error {
  explicit usage_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct data_error : std::runtime_error {
  explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct numeric_error : std::runtime_error {
  explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct shape_error : usage_error {
  explicit shape_error(const std::string& msg) : usage_error(msg) {}
};

}  // namespace geoformer
