#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ct {

// Error taxonomy. The CLI maps each kind onto its exit code.
enum class ErrorKind { validation = 1, io = 2, numerical = 3 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

// Configuration and input-validation failures share an exit code.
struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error(ErrorKind::validation, w) {}
};
struct ValidationError : Error {
  explicit ValidationError(const std::string& w) : Error(ErrorKind::validation, w) {}
};
struct IoError : Error {
  explicit IoError(const std::string& w) : Error(ErrorKind::io, w) {}
};
struct NumericalError : Error {
  explicit NumericalError(const std::string& w) : Error(ErrorKind::numerical, w) {}
};

// 64-bit FNV-1a. Used for payload checksums and artifact digests.
class Digest {
 public:
  Digest& update(const void* data, std::size_t n) {
    auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
    return *this;
  }
  Digest& update(std::string_view s) { return update(s.data(), s.size()); }
  template <typename T>
  Digest& update_span(std::span<const T> v) {
    return update(v.data(), v.size_bytes());
  }
  std::uint64_t value() const { return h_; }
  std::string hex() const;

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

// Seeded generator with portable derived distributions (the std::*_distribution
// algorithms are implementation-defined, the mt19937_64 stream is not).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}
  std::uint64_t next() { return eng_(); }
  // Uniform in [0, n).
  std::uint64_t index(std::uint64_t n) {
    if (n <= 1) return 0;
    const std::uint64_t limit = ~std::uint64_t(0) - (~std::uint64_t(0) % n);
    std::uint64_t v;
    do v = eng_();
    while (v >= limit);
    return v % n;
  }
  // Uniform in [0, 1).
  double uniform() { return double(eng_() >> 11) * 0x1.0p-53; }
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform(), u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }
  template <typename V>
  void shuffle(V& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[index(i)]);
  }

 private:
  std::mt19937_64 eng_;
  double spare_ = 0;
  bool has_spare_ = false;
};

std::string to_hex(std::uint64_t v);
std::string digest_hex(std::string_view bytes);

// One line on stderr, prefixed "warning: ".
void warn(std::string_view message);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace ct
