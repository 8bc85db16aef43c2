#pragma once

#include <stdexcept>
#include <string>

namespace badpatch {

// Invalid configuration, arguments, or inputs detected before any compute.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A model backend (diffusion or detector) failed while running.
class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical breakdown: non-finite latents, divergence that cannot be recovered.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace badpatch
