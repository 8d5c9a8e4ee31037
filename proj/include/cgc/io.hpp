#pragma once

#include "cgc/types.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cgc::io {

std::string read_file(const std::filesystem::path& path);

/// Writes to a sibling temporary file then renames it over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);

/// Shortest text that parses back to the same double.
std::string format_real(Real value);

std::vector<std::string> split(std::string_view line, char sep);
std::string_view trim(std::string_view s);

/// Parses a full numeric cell; throws DataError naming `where` on failure.
Real parse_real(std::string_view cell, const std::string& where);

} // namespace cgc::io
