#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dzsi {

// Error taxonomy shared by library and CLI. Exit codes: 0 ok, 2 config,
// 3 missing upstream artifact, 4 numeric failure.
struct config_error : std::runtime_error {
    using std::runtime_error::runtime_error;
    static constexpr int exit_code = 2;
};

struct contract_error : std::logic_error {
    using std::logic_error::logic_error;
    static constexpr int exit_code = 2;
};

struct artifact_error : std::runtime_error {
    using std::runtime_error::runtime_error;
    static constexpr int exit_code = 3;
};

struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
    static constexpr int exit_code = 4;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw contract_error(msg);
}

inline void require_config(bool cond, const std::string& msg) {
    if (!cond) throw config_error(msg);
}

template <typename S>
inline void require_finite(S x, const char* what) {
    if (!std::isfinite(static_cast<double>(x)))
        throw numeric_error(std::string("non-finite value in ") + what);
}

}  // namespace dzsi
