#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "knitcity/error.hpp"

namespace knitcity::io {

/// Little-endian fixed-layout binary writer used by every checkpoint format.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::filesystem::path& path);

  void magic(std::string_view tag);
  template <typename T>
    requires std::is_trivially_copyable_v<T>
  void put(const T& value) {
    out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
  }
  template <typename T>
  void put_span(std::span<const T> values) {
    put<std::uint64_t>(values.size());
    out_.write(reinterpret_cast<const char*>(values.data()),
               static_cast<std::streamsize>(values.size_bytes()));
  }
  void put_raw(std::span<const double> values) {
    out_.write(reinterpret_cast<const char*>(values.data()),
               static_cast<std::streamsize>(values.size_bytes()));
  }
  void put_string(std::string_view s);
  void close();

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path);

  /// Throws CheckpointError if the next bytes differ from `tag`.
  void expect_magic(std::string_view tag);
  template <typename T>
    requires std::is_trivially_copyable_v<T>
  T get() {
    T value{};
    read(&value, sizeof(T));
    return value;
  }
  template <typename T>
  std::vector<T> get_vector(std::size_t max_size = std::size_t{1} << 32) {
    const auto n = get<std::uint64_t>();
    if (n > max_size) fail("array length out of range");
    std::vector<T> values(n);
    read(values.data(), n * sizeof(T));
    return values;
  }
  void get_raw(std::span<double> values) { read(values.data(), values.size_bytes()); }
  std::string get_string();
  /// Throws unless the whole file was consumed.
  void expect_end();

 private:
  void read(void* dst, std::size_t n);
  [[noreturn]] void fail(const std::string& what) const;

  std::filesystem::path path_;
  std::ifstream in_;
};

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);

/// Lowercase hex SHA-256 digest.
std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

/// Shortest decimal form that round-trips to the same double.
std::string format_double(double value);
/// Fixed number of significant digits, for human-facing tables.
std::string format_fixed(double value, int significant = 10);

}  // namespace knitcity::io
