#ifndef CARDIOFIB_BINARY_FORMAT_HPP
#define CARDIOFIB_BINARY_FORMAT_HPP

// Shared container layout for every bulk file the pipeline writes: one UTF-8
// JSON header line terminated by '\n', then a little-endian binary payload.

#include "core.hpp"

#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace cardiofib::io {

using Json = nlohmann::json;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFFu));
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

/// Cursor over an in-memory payload with bounds-checked little-endian reads.
class Reader {
 public:
  Reader(const std::string& path, std::string bytes, std::size_t pos)
      : path_(path), bytes_(std::move(bytes)), pos_(pos) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + b])) << (8 * b);
    pos_ += 4;
    return v;
  }

  float f32() { return std::bit_cast<float>(u32()); }

  /// Reads a float and rejects NaN/Inf, naming the element index in the error.
  float finite_f32(std::size_t index) {
    const float f = f32();
    if (!std::isfinite(f))
      throw DataError(path_ + ": non-finite value at payload element " + std::to_string(index));
    return f;
  }

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[pos_++]);
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

  void expect_end() const {
    if (remaining() != 0)
      throw DataError(path_ + ": payload size mismatch (" + std::to_string(remaining()) +
                      " trailing bytes)");
  }

  const std::string& path() const { return path_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw DataError(path_ + ": payload size mismatch (truncated at byte " +
                      std::to_string(pos_) + ")");
  }

  std::string path_;
  std::string bytes_;
  std::size_t pos_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path);
}

/// Writes header + payload as one file.
inline void write_container(const std::string& path, const Json& header, const std::string& payload) {
  std::string bytes = header.dump();
  bytes.push_back('\n');
  bytes += payload;
  write_file(path, bytes);
}

/// Splits a container into its parsed header and a payload reader.
inline std::pair<Json, Reader> read_container(const std::string& path) {
  std::string bytes = read_file(path);
  const auto nl = bytes.find('\n');
  if (nl == std::string::npos) throw DataError(path + ": malformed header (no newline)");
  Json header;
  try {
    header = Json::parse(bytes.substr(0, nl));
  } catch (const Json::exception& e) {
    throw DataError(path + ": malformed header: " + e.what());
  }
  if (!header.is_object()) throw DataError(path + ": malformed header (not an object)");
  return {std::move(header), Reader(path, std::move(bytes), nl + 1)};
}

template <typename T>
T header_field(const Json& header, const char* key, const std::string& path) {
  if (!header.contains(key)) throw DataError(path + ": malformed header (missing '" + key + "')");
  try {
    return header.at(key).get<T>();
  } catch (const Json::exception&) {
    throw DataError(path + ": malformed header (bad '" + key + "')");
  }
}

}  // namespace cardiofib::io

#endif  // CARDIOFIB_BINARY_FORMAT_HPP
