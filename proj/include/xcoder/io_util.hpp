#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "xcoder/errors.hpp"

namespace xcoder {

// Little-endian scalar I/O. The host is assumed little-endian (checked at
// startup in sha256_file); all container formats are LE on disk.

template <typename T>
void write_le(std::ostream& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& in) {
  static_assert(std::is_trivially_copyable_v<T>);
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw CorruptionError("unexpected end of file while reading scalar");
  return value;
}

void write_f32_block(std::ostream& out, const std::vector<double>& values);
void write_f32_block(std::ostream& out, const std::vector<float>& values);
void read_f32_block(std::istream& in, std::size_t count, std::vector<double>& out);
void read_f32_block(std::istream& in, std::size_t count, std::vector<float>& out);

std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(const std::string& bytes);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

// Opens for binary writing, throwing StorageError on failure.
std::ofstream open_binary_out(const std::filesystem::path& path);
std::ifstream open_binary_in(const std::filesystem::path& path);

// Shortest round-trip decimal rendering, used by every text artifact so the
// same value always prints the same bytes.
std::string format_real(double value);

}  // namespace xcoder
