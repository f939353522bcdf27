#pragma once

#include <functional>
#include <iostream>
#include <string>

namespace dfeval {

/// Process-wide warning sink. Defaults to stderr; tests and the CLI may
/// replace it.
inline std::function<void(const std::string&)>& warning_sink() {
    static std::function<void(const std::string&)> sink = [](const std::string& msg) {
        std::clog << "warning: " << msg << '\n';
    };
    return sink;
}

inline void warn(const std::string& msg) {
    if (auto& sink = warning_sink()) sink(msg);
}

} // namespace dfeval
