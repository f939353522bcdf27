#pragma once

#include <string>
#include <string_view>

#include "dfeval/error.hpp"

namespace dfeval {

enum class Label { Real = 0, Fake = 1 };

inline std::string_view label_name(Label l) { return l == Label::Fake ? "fake" : "real"; }

inline Label parse_label(std::string_view s) {
    if (s == "real") return Label::Real;
    if (s == "fake") return Label::Fake;
    throw Error(ErrorKind::MalformedRecord, "label must be 'real' or 'fake', got '" + std::string(s) + "'");
}

} // namespace dfeval
