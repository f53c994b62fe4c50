#pragma once

#include <stdexcept>
#include <string>

namespace dfm {

/// Raised when a scale/resolution description cannot be honoured.
class InvalidSpec : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an input does not match the shape or range an operation expects.
class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for inconsistent model, sampler or run configuration.
class InvalidConfig : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised by the training loop when the loss stops being finite.
class NonFiniteLoss : public std::runtime_error {
 public:
  NonFiniteLoss(long step, double loss, double grad_norm)
      : std::runtime_error("non-finite loss at step " + std::to_string(step) +
                           ": loss=" + std::to_string(loss) +
                           " grad_norm=" + std::to_string(grad_norm)),
        step(step),
        loss(loss),
        grad_norm(grad_norm) {}

  long step;
  double loss;
  double grad_norm;
};

}  // namespace dfm
