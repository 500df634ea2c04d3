#pragma once

#include <stdexcept>
#include <string>

namespace scalenet {

// Base class for everything this library throws on purpose.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Incompatible tensor shapes. Messages name both shapes.
struct shape_error : error {
  using error::error;
};

// A precondition on arguments or object state was violated.
struct contract_error : error {
  using error::error;
};

// Out-of-range element, label or layer index.
struct index_error : error {
  using error::error;
};

// Malformed file contents (bad magic, version, duplicate entries).
struct format_error : error {
  using error::error;
};

// Filesystem-level failure; message carries the offending path.
struct io_error : error {
  using error::error;
};

// Invalid or unknown experiment configuration.
struct config_error : error {
  using error::error;
};

}  // namespace scalenet
