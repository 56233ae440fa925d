#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace distill {

std::string trim(std::string_view text);

/// Trim, collapse internal whitespace runs to one space, lowercase ASCII.
/// Multi-byte UTF-8 sequences pass through untouched.
std::string normalize(std::string_view text);

/// Whitespace-separated words of normalize(text).
std::vector<std::string> split_words(std::string_view text);

}  // namespace distill
