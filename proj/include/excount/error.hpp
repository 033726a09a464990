#pragma once

#include <stdexcept>
#include <string>

namespace excount {

// Base of every error thrown by the library. Subclasses identify the failure
// family so callers can react without parsing messages.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GeometryError : public Error { public: using Error::Error; };
class ShapeError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };
class ProtocolError : public Error { public: using Error::Error; };
class TransportError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class UsageError : public Error { public: using Error::Error; };
class GenerationError : public Error { public: using Error::Error; };

// Raised by the training loop when a loss component turns non-finite.
class NumericError : public Error { public: using Error::Error; };

}  // namespace excount
