// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace mixcomp {

/// Shared framing for the binary containers:
///   4-byte magic | u32 version | u64 directory length | UTF-8 JSON directory | payload
/// Integers are little-endian; payload offsets in the directory are relative
/// to the first payload byte.
struct Container {
  std::string magic;
  std::uint32_t version = 1;
  nlohmann::json directory;
  std::vector<std::uint8_t> payload;
};

void write_container(const std::string& path, const Container& c);
Container read_container(const std::string& path, const std::string& expected_magic);

/// Appends little-endian float32 values, returning the starting offset.
std::uint64_t append_floats(std::vector<std::uint8_t>& payload, std::span<const float> values);
std::vector<float> read_floats(std::span<const std::uint8_t> payload, std::uint64_t offset, std::size_t count);

std::uint64_t append_bytes(std::vector<std::uint8_t>& payload, std::span<const std::uint8_t> bytes);

/// Reads/writes a whole text file; throws IoError on failure.
std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

/// Float rounded to 9 significant digits, as written to JSON artifacts.
double round9(double x);

}  // namespace mixcomp
