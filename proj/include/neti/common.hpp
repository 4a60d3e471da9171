#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace neti {

template <typename... Args>
std::string msg_cat(Args&&... args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

template <typename... Args>
[[noreturn]] void fail(Args&&... args) {
    throw std::runtime_error(msg_cat(std::forward<Args>(args)...));
}

template <typename... Args>
void require(bool cond, Args&&... args) {
    if (!cond) {
        throw std::invalid_argument(msg_cat(std::forward<Args>(args)...));
    }
}

} // namespace neti
