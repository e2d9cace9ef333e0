#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace nsde {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace io {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b{};
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b.data(), 4);
}

inline void put_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b{};
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
  os.write(b.data(), 8);
}

inline void put_f64(std::ostream& os, double v) { put_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline std::uint64_t get_le(std::istream& is, int bytes) {
  std::array<unsigned char, 8> b{};
  is.read(reinterpret_cast<char*>(b.data()), bytes);
  if (is.gcount() != bytes) throw FormatError("unexpected end of stream");
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint32_t get_u32(std::istream& is) { return static_cast<std::uint32_t>(get_le(is, 4)); }
inline std::uint64_t get_u64(std::istream& is) { return get_le(is, 8); }
inline double get_f64(std::istream& is) { return std::bit_cast<double>(get_u64(is)); }

}  // namespace io

inline constexpr std::uint32_t kParamBlobVersion = 1;

/// Binary parameter blob: "NSDE", u32 version, u64 count, then count
/// little-endian IEEE-754 doubles.
inline void write_param_blob(std::ostream& os, const Eigen::VectorXd& params) {
  os.write("NSDE", 4);
  io::put_u32(os, kParamBlobVersion);
  io::put_u64(os, static_cast<std::uint64_t>(params.size()));
  for (Eigen::Index i = 0; i < params.size(); ++i) io::put_f64(os, params(i));
  if (!os) throw FormatError("failed to write parameter blob");
}

inline Eigen::VectorXd read_param_blob(std::istream& is) {
  std::array<char, 4> magic{};
  is.read(magic.data(), 4);
  if (is.gcount() != 4 || std::memcmp(magic.data(), "NSDE", 4) != 0) throw FormatError("parameter blob: bad magic");
  const auto version = io::get_u32(is);
  if (version != kParamBlobVersion) throw FormatError("parameter blob: unsupported version " + std::to_string(version));
  const auto count = io::get_u64(is);
  if (count > (std::uint64_t{1} << 32)) throw FormatError("parameter blob: implausible length");
  Eigen::VectorXd params(static_cast<Eigen::Index>(count));
  for (Eigen::Index i = 0; i < params.size(); ++i) params(i) = io::get_f64(is);
  return params;
}

/// Debug format: one value per line, 17 significant digits.
inline void write_param_text(std::ostream& os, const Eigen::VectorXd& params) {
  os.precision(17);
  for (Eigen::Index i = 0; i < params.size(); ++i) os << params(i) << '\n';
}

inline Eigen::VectorXd read_param_text(std::istream& is) {
  std::vector<double> values;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    double v = 0.0;
    if (!(ls >> v)) throw FormatError("parameter text: bad value on line " + std::to_string(line_no));
    values.push_back(v);
  }
  return Eigen::Map<Eigen::VectorXd>(values.data(), static_cast<Eigen::Index>(values.size()));
}

}  // namespace nsde
