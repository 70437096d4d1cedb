#include "knitcity/io.hpp"

#include <openssl/evp.h>

#include <array>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace knitcity::io {

BinaryWriter::BinaryWriter(const std::filesystem::path& path)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw DataError("cannot open " + path.string() + " for writing");
}

void BinaryWriter::magic(std::string_view tag) {
  out_.write(tag.data(), static_cast<std::streamsize>(tag.size()));
}

void BinaryWriter::put_string(std::string_view s) {
  put<std::uint64_t>(s.size());
  out_.write(s.data(), static_cast<std::streamsize>(s.size()));
}

void BinaryWriter::close() {
  out_.flush();
  if (!out_) throw DataError("write to " + path_.string() + " failed");
  out_.close();
}

BinaryReader::BinaryReader(const std::filesystem::path& path)
    : path_(path), in_(path, std::ios::binary) {
  if (!in_) throw CheckpointError("cannot open " + path.string());
}

void BinaryReader::expect_magic(std::string_view tag) {
  std::string got(tag.size(), '\0');
  read(got.data(), got.size());
  if (got != tag) fail("bad magic, expected " + std::string(tag));
}

std::string BinaryReader::get_string() {
  const auto n = get<std::uint64_t>();
  if (n > (std::uint64_t{1} << 28)) fail("string length out of range");
  std::string s(n, '\0');
  read(s.data(), n);
  return s;
}

void BinaryReader::expect_end() {
  if (in_.peek() != std::char_traits<char>::eof()) fail("trailing bytes");
}

void BinaryReader::read(void* dst, std::size_t n) {
  in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in_.gcount()) != n) fail("truncated file");
}

void BinaryReader::fail(const std::string& what) const {
  throw CheckpointError(path_.string() + ": " + what);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw DataError("write to " + path.string() + " failed");
}

std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text(path)); }

std::string format_double(double value) {
  std::array<char, 32> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), value);
  return std::string(buf.data(), res.ptr);
}

std::string format_fixed(double value, int significant) {
  if (std::isnan(value)) return "NA";
  std::array<char, 48> buf{};
  std::snprintf(buf.data(), buf.size(), "%.*g", significant, value);
  return buf.data();
}

}  // namespace knitcity::io
