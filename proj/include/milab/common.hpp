#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace milab {

inline constexpr const char* kToolVersion = "0.1.0";

// Thrown for bad arguments, malformed files, contract violations. CLI exit 2.
struct validation_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when a computation produces NaN/Inf or diverges. CLI exit 3.
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// All floats in reports are serialized with 17 significant digits.
std::string format_float(double v);

std::string to_hex(const unsigned char* bytes, size_t n);

// SHA-256 of a byte buffer, hex-encoded (64 chars).
std::string sha256_hex(const void* data, size_t n);
std::string sha256_hex(const std::string& s);
// Raw 32-byte digest.
std::vector<unsigned char> sha256_raw(const void* data, size_t n);

std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& bytes);

// Deterministic RNG: mt19937_64 engine (fully specified by the standard) with
// our own bounded-int and normal draws, since std distributions are
// implementation-defined.
class Rng {
public:
    explicit Rng(uint64_t seed) : eng_(seed) {}

    uint64_t next_u64() { return eng_(); }

    // Uniform in [0, n), n > 0. Rejection sampling, unbiased.
    uint64_t uniform(uint64_t n);

    // Uniform in [0, 1) with 53 bits.
    double uniform_real();

    // Box-Muller normal.
    double normal(double mu, double sigma);

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace milab
