// SPDX-License-Identifier: Apache-2.0
#include "mixcomp/container.hpp"

#include <bit>
#include <cmath>
#include <cstdlib>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mixcomp/error.hpp"

namespace mixcomp {
namespace {

static_assert(std::endian::native == std::endian::little, "containers assume a little-endian host");

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_le(std::span<const std::uint8_t> bytes, std::size_t at, int width) {
  std::uint64_t v = 0;
  for (int i = 0; i < width; ++i) v |= static_cast<std::uint64_t>(bytes[at + i]) << (8 * i);
  return v;
}

}  // namespace

void write_container(const std::string& path, const Container& c) {
  if (c.magic.size() != 4) throw ArgumentError("container magic must be 4 bytes");
  const std::string dir = c.directory.dump();
  std::vector<std::uint8_t> head(c.magic.begin(), c.magic.end());
  put_u32(head, c.version);
  put_u64(head, dir.size());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out.write(reinterpret_cast<const char*>(head.data()), static_cast<std::streamsize>(head.size()));
  out.write(dir.data(), static_cast<std::streamsize>(dir.size()));
  out.write(reinterpret_cast<const char*>(c.payload.data()), static_cast<std::streamsize>(c.payload.size()));
  if (!out) throw IoError("write failed: " + path);
}

Container read_container(const std::string& path, const std::string& expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 16) throw FormatError(path + ": truncated container header");
  Container c;
  c.magic.assign(bytes.begin(), bytes.begin() + 4);
  if (c.magic != expected_magic) {
    throw FormatError(path + ": bad magic '" + c.magic + "', expected '" + expected_magic + "'");
  }
  c.version = static_cast<std::uint32_t>(get_le(bytes, 4, 4));
  const std::uint64_t dir_len = get_le(bytes, 8, 8);
  if (16 + dir_len > bytes.size()) throw FormatError(path + ": directory runs past end of file");
  try {
    c.directory = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(dir_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed directory: " + e.what());
  }
  c.payload.assign(bytes.begin() + 16 + static_cast<std::ptrdiff_t>(dir_len), bytes.end());
  return c;
}

std::uint64_t append_floats(std::vector<std::uint8_t>& payload, std::span<const float> values) {
  const std::uint64_t off = payload.size();
  payload.resize(off + values.size() * sizeof(float));
  if (!values.empty()) std::memcpy(payload.data() + off, values.data(), values.size() * sizeof(float));
  return off;
}

std::vector<float> read_floats(std::span<const std::uint8_t> payload, std::uint64_t offset, std::size_t count) {
  if (offset + count * sizeof(float) > payload.size()) throw FormatError("float block runs past payload end");
  std::vector<float> out(count);
  if (count) std::memcpy(out.data(), payload.data() + offset, count * sizeof(float));
  return out;
}

std::uint64_t append_bytes(std::vector<std::uint8_t>& payload, std::span<const std::uint8_t> bytes) {
  const std::uint64_t off = payload.size();
  payload.insert(payload.end(), bytes.begin(), bytes.end());
  return off;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

double round9(double x) {
  if (!std::isfinite(x)) return x;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", x);
  return std::strtod(buf, nullptr);
}

}  // namespace mixcomp
