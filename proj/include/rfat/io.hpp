#pragma once

#include <filesystem>
#include <string>

namespace rfat {

/// Whole-file binary read; throws IoError.
std::string read_file(const std::filesystem::path& file);
/// Creates parent directories, truncates; throws IoError.
void write_file(const std::filesystem::path& file, const std::string& bytes);

}  // namespace rfat
