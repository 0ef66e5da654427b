#pragma once

#include <string>

namespace ebmlab::io {

// Writes to a sibling temporary file and renames it into place, so readers
// never observe a partially written file.
void write_text_atomic(const std::string& path, const std::string& contents);
std::string read_text(const std::string& path);
void ensure_directory(const std::string& path);

// Round-trip-exact decimal rendering of a double.
std::string format_double(double v);

}  // namespace ebmlab::io
