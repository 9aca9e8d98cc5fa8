// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace namelearn {

/// Writes to a sibling temporary file and renames it over `path`, so readers
/// never observe a partially written file.
void atomic_write_file(const std::filesystem::path& path, std::string_view bytes);

std::string read_file_bytes(const std::filesystem::path& path);

/// Fixed-point text of `v` with `digits` decimals ("nan"/"inf" spelled out).
std::string format_real(double v, int digits = 6);

/// Quotes a CSV field when it holds a comma, quote or newline.
std::string csv_field(const std::string& s);

/// Little-endian append/consume helpers for the binary formats.
class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void f32(float v);
  void bytes(std::string_view s) { out_.append(s); }
  const std::string& str() const noexcept { return out_; }

 private:
  std::string out_;
};

class ByteReader {
 public:
  ByteReader(std::string_view data, std::string context)
      : data_(data), context_(std::move(context)) {}

  std::uint32_t u32(std::string_view what);
  float f32(std::string_view what);
  std::string_view bytes(std::size_t n, std::string_view what);
  bool at_end() const noexcept { return pos_ == data_.size(); }
  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

 private:
  std::string_view data_;
  std::string context_;
  std::size_t pos_ = 0;
};

}  // namespace namelearn
