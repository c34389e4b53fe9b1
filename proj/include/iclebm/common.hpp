#pragma once
// Shared small types and error classes.

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace iclebm {

using i64 = std::int64_t;
using u64 = std::uint64_t;

// Closed interval [lo, hi].
struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
  bool contains(double x) const { return x >= lo && x <= hi; }
  bool contains(const Interval& other) const { return other.lo >= lo && other.hi <= hi; }
};

// Per-axis box; a single interval is broadcast to every axis.
std::vector<Interval> box_for_dim(const std::vector<Interval>& box, int dim);

// Config file / key errors. `line` is 0 when the error is not tied to a file line.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, int line, const std::string& msg)
      : std::runtime_error(msg), key_(std::move(key)), line_(line) {}
  const std::string& key() const { return key_; }
  int line() const { return line_; }

 private:
  std::string key_;
  int line_;
};

// Malformed or incompatible on-disk data (checkpoints, task files, CSVs).
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void check_arg(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace iclebm
