#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace qcount {

// Every failure raised by the library carries a short machine-readable code
// ("packing_failure", "no_physical_root", ...) next to the human message.
// The CLI serializes both into its stderr error document.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& message)
        : std::runtime_error(message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

inline void require(bool cond, const char* code, const std::string& message) {
    if (!cond) throw Error(code, message);
}

} // namespace qcount
