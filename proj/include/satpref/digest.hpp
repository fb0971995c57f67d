#pragma once

#include <filesystem>
#include <string>
#include <string_view>

namespace satpref {

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

// Git blob object id ("blob <len>\0" + content, SHA-1), as `git hash-object` prints.
std::string git_blob_id(std::string_view bytes);
std::string git_blob_id_file(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace satpref
