#pragma once

#include <stdexcept>
#include <string>

namespace cubeformer {

/// Invalid hyper-parameters or shapes that cannot be made to agree
/// (divisibility, channel counts, ...).
class ConfigurationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Tensor extents disagree with what an operation requires.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Transform sizes outside what the algorithm supports (e.g. non power-of-two FFT).
class SizeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// API misuse: wrong color space, non-scalar loss, misaligned patch pairs.
class UsageError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite loss during training.
class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace cubeformer
