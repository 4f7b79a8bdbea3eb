// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_ERRORS_HPP
#define APMA_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace apma {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Operand shapes do not fit the operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// A documented precondition was violated by the caller.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// An iterative numeric routine failed to converge.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, double residual)
      : Error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

/// Heads of one layer keep different numbers of channels.
class MisalignmentError : public Error {
 public:
  MisalignmentError(const std::string& what, std::string layer)
      : Error(what), layer_(std::move(layer)) {}
  const std::string& layer() const { return layer_; }

 private:
  std::string layer_;
};

/// Malformed or corrupted file payload.
class FormatError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Compacted and masked models disagree beyond tolerance.
class VerificationError : public Error {
 public:
  VerificationError(const std::string& what, std::string block)
      : Error(what), block_(std::move(block)) {}
  const std::string& block() const { return block_; }

 private:
  std::string block_;
};

}  // namespace apma

#endif  // APMA_ERRORS_HPP
