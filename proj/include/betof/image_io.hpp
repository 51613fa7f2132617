#pragma once

// Readers and writers for single-channel Portable FloatMap (PFM) and binary
// PGM images. PFM rows are stored bottom-to-top on disk as the format
// requires; in memory every Grid has its origin at the top-left.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "betof/core.hpp"

namespace betof::io {

namespace detail {

inline std::vector<unsigned char> read_all(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Cursor over a netpbm-style ASCII header.
class HeaderCursor {
 public:
  explicit HeaderCursor(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  std::string token(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    while (pos_ < bytes_.size() && !is_space(bytes_[pos_])) ++pos_;
    if (pos_ == start) throw ParseError(std::string("missing ") + what, start);
    return std::string(bytes_.begin() + static_cast<std::ptrdiff_t>(start),
                       bytes_.begin() + static_cast<std::ptrdiff_t>(pos_));
  }

  long integer(const char* what) {
    const std::size_t at = peek_offset();
    const std::string t = token(what);
    long v = 0;
    auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (res.ec != std::errc{} || res.ptr != t.data() + t.size())
      throw ParseError(std::string("malformed ") + what + " '" + t + "'", at);
    return v;
  }

  double real(const char* what) {
    const std::size_t at = peek_offset();
    const std::string t = token(what);
    double v = 0;
    auto res = std::from_chars(t.data(), t.data() + t.size(), v);
    if (res.ec != std::errc{} || res.ptr != t.data() + t.size())
      throw ParseError(std::string("malformed ") + what + " '" + t + "'", at);
    return v;
  }

  // Exactly one whitespace byte separates the header from the raster.
  void end_of_header() {
    if (pos_ >= bytes_.size() || !is_space(bytes_[pos_]))
      throw ParseError("expected single whitespace before raster", pos_);
    ++pos_;
  }

  std::size_t offset() const { return pos_; }

 private:
  static bool is_space(unsigned char c) { return c == ' ' || c == '\n' || c == '\r' || c == '\t'; }

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (is_space(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::size_t peek_offset() {
    skip_space_and_comments();
    return pos_;
  }

  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

inline void check_dims(long w, long h, std::size_t at) {
  if (w <= 0 || h <= 0 || w > (1L << 20) || h > (1L << 20))
    throw ParseError("invalid image dimensions " + std::to_string(w) + "x" + std::to_string(h), at);
}

inline void write_bytes(const std::string& path, const std::string& header,
                        const std::vector<unsigned char>& raster) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(raster.data()), static_cast<std::streamsize>(raster.size()));
  if (!out) throw IoError("write failed for '" + path + "'");
}

}  // namespace detail

inline Grid<float> read_pfm(const std::string& path) {
  const auto bytes = detail::read_all(path);
  detail::HeaderCursor cur(bytes);
  const std::string magic = cur.token("magic");
  if (magic == "PF") throw ParseError("three-channel PFM is not supported", 0);
  if (magic != "Pf") throw ParseError("not a PFM file (magic '" + magic + "')", 0);
  const std::size_t dim_at = cur.offset();
  const long w = cur.integer("width");
  const long h = cur.integer("height");
  detail::check_dims(w, h, dim_at);
  const std::size_t scale_at = cur.offset();
  const double scale = cur.real("scale");
  if (scale == 0.0) throw ParseError("PFM scale must be non-zero", scale_at);
  cur.end_of_header();
  const bool little = scale < 0.0;

  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 4;
  const std::size_t start = cur.offset();
  if (bytes.size() - start < need)
    throw ParseError("truncated PFM raster: need " + std::to_string(need) + " bytes, have " +
                         std::to_string(bytes.size() - start),
                     bytes.size());

  Grid<float> g(static_cast<int>(w), static_cast<int>(h));
  std::size_t p = start;
  for (long row = 0; row < h; ++row) {
    const int y = static_cast<int>(h - 1 - row);
    for (long x = 0; x < w; ++x, p += 4) {
      std::uint32_t u = 0;
      if (little) {
        u = std::uint32_t(bytes[p]) | std::uint32_t(bytes[p + 1]) << 8 |
            std::uint32_t(bytes[p + 2]) << 16 | std::uint32_t(bytes[p + 3]) << 24;
      } else {
        u = std::uint32_t(bytes[p]) << 24 | std::uint32_t(bytes[p + 1]) << 16 |
            std::uint32_t(bytes[p + 2]) << 8 | std::uint32_t(bytes[p + 3]);
      }
      g(static_cast<int>(x), y) = std::bit_cast<float>(u);
    }
  }
  return g;
}

/// Writes a little-endian single-channel PFM.
template <typename T>
void write_pfm(const std::string& path, const Grid<T>& img) {
  std::string header = "Pf\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n-1.0\n";
  std::vector<unsigned char> raster;
  raster.reserve(img.size() * 4);
  for (int y = img.height() - 1; y >= 0; --y) {
    for (int x = 0; x < img.width(); ++x) {
      const auto u = std::bit_cast<std::uint32_t>(static_cast<float>(img(x, y)));
      raster.push_back(static_cast<unsigned char>(u & 0xFF));
      raster.push_back(static_cast<unsigned char>((u >> 8) & 0xFF));
      raster.push_back(static_cast<unsigned char>((u >> 16) & 0xFF));
      raster.push_back(static_cast<unsigned char>((u >> 24) & 0xFF));
    }
  }
  detail::write_bytes(path, header, raster);
}

struct PgmImage {
  Grid<std::uint16_t> pixels;
  int maxval = 0;
};

/// Reads a binary (P5) PGM with 8- or 16-bit samples; 16-bit samples are big-endian.
inline PgmImage read_pgm(const std::string& path) {
  const auto bytes = detail::read_all(path);
  detail::HeaderCursor cur(bytes);
  const std::string magic = cur.token("magic");
  if (magic != "P5") throw ParseError("not a binary PGM file (magic '" + magic + "')", 0);
  const std::size_t dim_at = cur.offset();
  const long w = cur.integer("width");
  const long h = cur.integer("height");
  detail::check_dims(w, h, dim_at);
  const std::size_t max_at = cur.offset();
  const long maxval = cur.integer("maxval");
  if (maxval <= 0 || maxval > 65535) throw ParseError("PGM maxval out of range", max_at);
  cur.end_of_header();

  const std::size_t bps = maxval > 255 ? 2 : 1;
  const std::size_t need = static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * bps;
  const std::size_t start = cur.offset();
  if (bytes.size() - start < need)
    throw ParseError("truncated PGM raster: need " + std::to_string(need) + " bytes, have " +
                         std::to_string(bytes.size() - start),
                     bytes.size());

  PgmImage img{Grid<std::uint16_t>(static_cast<int>(w), static_cast<int>(h)), static_cast<int>(maxval)};
  std::size_t p = start;
  for (std::size_t i = 0; i < img.pixels.size(); ++i, p += bps) {
    img.pixels[i] = bps == 2 ? static_cast<std::uint16_t>(bytes[p] << 8 | bytes[p + 1]) : bytes[p];
  }
  return img;
}

inline void write_pgm(const std::string& path, const Grid<std::uint16_t>& img, int maxval = 65535) {
  if (maxval <= 0 || maxval > 65535) throw ConfigError("PGM maxval out of range");
  const std::string header =
      "P5\n" + std::to_string(img.width()) + " " + std::to_string(img.height()) + "\n" + std::to_string(maxval) + "\n";
  std::vector<unsigned char> raster;
  const bool wide = maxval > 255;
  raster.reserve(img.size() * (wide ? 2 : 1));
  for (std::size_t i = 0; i < img.size(); ++i) {
    const auto v = std::min<int>(img[i], maxval);
    if (wide) raster.push_back(static_cast<unsigned char>(v >> 8));
    raster.push_back(static_cast<unsigned char>(v & 0xFF));
  }
  detail::write_bytes(path, header, raster);
}

}  // namespace betof::io
