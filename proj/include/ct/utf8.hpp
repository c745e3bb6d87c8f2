#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace ct::utf8 {

// Decodes UTF-8 into code points. Throws ValidationError naming the byte offset
// of the first malformed sequence.
std::vector<char32_t> decode(std::string_view bytes);

void append(std::string& out, char32_t cp);
std::string encode(std::u32string_view cps);

// Byte offset of the first malformed sequence, or npos when valid.
std::size_t first_invalid(std::string_view bytes);

}  // namespace ct::utf8
