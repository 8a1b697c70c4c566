#pragma once

#include <string>
#include <string_view>

namespace cofs {

// Reads a whole file; throws std::runtime_error if it cannot be opened.
std::string read_text_file(const std::string& path);

// Writes `content` to `path` through a sibling temporary file and a rename, so
// a failure never leaves a partially written output behind.
void write_file_atomic(const std::string& path, std::string_view content);

}  // namespace cofs
