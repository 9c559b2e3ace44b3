#pragma once

#include <string>

namespace l2p {

bool file_exists(const std::string& path);

/// Whole-file read. Missing or unreadable file raises DatasetError.
std::string read_file(const std::string& path);

/// Write via temp file + rename so readers never observe a partial file.
/// Parent directories are created as needed.
void write_file_atomic(const std::string& path, const std::string& content);

}  // namespace l2p
