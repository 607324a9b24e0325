#include "milab/common.hpp"

#include <openssl/evp.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace milab {

std::string format_float(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string to_hex(const unsigned char* bytes, size_t n) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    out.reserve(2 * n);
    for (size_t i = 0; i < n; ++i) {
        out.push_back(digits[bytes[i] >> 4]);
        out.push_back(digits[bytes[i] & 0xf]);
    }
    return out;
}

std::vector<unsigned char> sha256_raw(const void* data, size_t n) {
    std::vector<unsigned char> digest(32);
    unsigned int len = 0;
    if (!EVP_Digest(data, n, digest.data(), &len, EVP_sha256(), nullptr) || len != 32) {
        throw std::runtime_error("sha256 failed");
    }
    return digest;
}

std::string sha256_hex(const void* data, size_t n) {
    auto d = sha256_raw(data, n);
    return to_hex(d.data(), d.size());
}

std::string sha256_hex(const std::string& s) { return sha256_hex(s.data(), s.size()); }

std::string read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw validation_error("cannot open file: " + path);
    std::string out((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return out;
}

void write_file_atomic(const std::string& path, const std::string& bytes) {
    namespace fs = std::filesystem;
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    fs::path tmp = p;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw validation_error("cannot write file: " + path);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw validation_error("short write: " + path);
    }
    fs::rename(tmp, p);
}

uint64_t Rng::uniform(uint64_t n) {
    if (n == 0) throw validation_error("Rng::uniform(0)");
    uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
        x = eng_();
    } while (x >= limit);
    return x % n;
}

double Rng::uniform_real() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double Rng::normal(double mu, double sigma) {
    if (has_spare_) {
        has_spare_ = false;
        return mu + spare_ * sigma;
    }
    double u = 1.0 - uniform_real();  // (0, 1]
    double v = uniform_real();
    double r = std::sqrt(-2.0 * std::log(u));
    double a = 2.0 * M_PI * v;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return mu + r * std::cos(a) * sigma;
}

}  // namespace milab
