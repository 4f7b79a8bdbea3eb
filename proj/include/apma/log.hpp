// Copyright 2026 The APMA Authors.
// SPDX-License-Identifier: Apache-2.0

#ifndef APMA_LOG_HPP
#define APMA_LOG_HPP

#include <functional>
#include <iostream>
#include <string>

namespace apma::log {

using Sink = std::function<void(const std::string&)>;

inline Sink& warning_sink() {
  static Sink sink = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}

inline void warn(const std::string& msg) {
  if (warning_sink()) warning_sink()(msg);
}

/// Replaces the warning sink for the lifetime of the guard.
class ScopedSink {
 public:
  explicit ScopedSink(Sink sink) : previous_(std::move(warning_sink())) {
    warning_sink() = std::move(sink);
  }
  ~ScopedSink() { warning_sink() = std::move(previous_); }
  ScopedSink(const ScopedSink&) = delete;
  ScopedSink& operator=(const ScopedSink&) = delete;

 private:
  Sink previous_;
};

}  // namespace apma::log

#endif  // APMA_LOG_HPP
