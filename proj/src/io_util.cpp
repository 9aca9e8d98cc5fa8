// SPDX-License-Identifier: Apache-2.0
#include "namelearn/io_util.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <system_error>

#include <unistd.h>

#include "namelearn/errors.hpp"

namespace namelearn {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swapping");

void atomic_write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw FormatError("failed writing " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp);
    throw FormatError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
  }
}

std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string format_real(double v, int digits) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void ByteWriter::u32(std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out_.append(buf, 4);
}

void ByteWriter::f32(float v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out_.append(buf, 4);
}

std::string_view ByteReader::bytes(std::size_t n, std::string_view what) {
  if (remaining() < n) {
    throw FormatError(context_ + ": truncated while reading " + std::string(what) + " at byte " +
                      std::to_string(pos_) + " (need " + std::to_string(n) + ", have " +
                      std::to_string(remaining()) + ")");
  }
  auto out = data_.substr(pos_, n);
  pos_ += n;
  return out;
}

std::uint32_t ByteReader::u32(std::string_view what) {
  std::uint32_t v;
  std::memcpy(&v, bytes(4, what).data(), 4);
  return v;
}

float ByteReader::f32(std::string_view what) {
  float v;
  std::memcpy(&v, bytes(4, what).data(), 4);
  return v;
}

}  // namespace namelearn
