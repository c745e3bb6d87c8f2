#include "ct/common.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace ct {

std::string to_hex(std::uint64_t v) { return fmt::format("{:016x}", v); }

std::string Digest::hex() const { return to_hex(h_); }

std::string digest_hex(std::string_view bytes) { return Digest{}.update(bytes).hex(); }

void warn(std::string_view message) {
  std::fprintf(stderr, "warning: %.*s\n", int(message.size()), message.data());
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(fmt::format("cannot open '{}' for reading", path));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open '{}' for writing", path));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError(fmt::format("short write to '{}'", path));
}

}  // namespace ct
