#pragma once

#include <algorithm>
#include <chrono>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pcseg {

// Error raised by file readers/writers (bad format, truncation, missing file).
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

[[noreturn]] inline void fail(const std::string& msg) { throw std::runtime_error(msg); }
[[noreturn]] inline void fail_io(const std::string& msg) { throw IoError(msg); }

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n == 0 ? 0.0 : (n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]));
}

}  // namespace detail

// Monotonic wall-clock in milliseconds.
inline double now_ms() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double, std::milli>(clock::now().time_since_epoch()).count();
}

class Stopwatch {
public:
    Stopwatch() : start_(now_ms()) {}
    double elapsed_ms() const { return now_ms() - start_; }
    void reset() { start_ = now_ms(); }

private:
    double start_;
};

}  // namespace pcseg

// Streaming check macro: PCSEG_CHECK(cond, "got " << n << " items").
#define PCSEG_CHECK(cond, msg)                        \
    do {                                              \
        if (!(cond)) {                                \
            std::ostringstream oss_;                  \
            oss_ << msg;                              \
            ::pcseg::detail::fail(oss_.str());        \
        }                                             \
    } while (0)

#define PCSEG_CHECK_IO(cond, msg)                     \
    do {                                              \
        if (!(cond)) {                                \
            std::ostringstream oss_;                  \
            oss_ << msg;                              \
            ::pcseg::detail::fail_io(oss_.str());     \
        }                                             \
    } while (0)
