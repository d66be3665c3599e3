#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "serpent/error.hpp"

namespace serpent {

/// Single-channel image, row-major, values nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.f) : height(h), width(w), pixels(static_cast<std::size_t>(h) * w, fill) {}

  float& at(int y, int x) { return pixels[static_cast<std::size_t>(y) * width + x]; }
  float at(int y, int x) const { return pixels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return pixels.size(); }
  friend bool operator==(const Image&, const Image&) = default;
};

inline std::vector<unsigned char> encode_pgm(const Image& img) {
  const std::string header = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  for (float v : img.pixels) {
    const float c = std::clamp(std::isfinite(v) ? v : 0.f, 0.f, 1.f);
    out.push_back(static_cast<unsigned char>(std::lround(c * 255.f)));
  }
  return out;
}

/// Parses binary PGM (P5) with maxval <= 255; comments allowed in the header.
inline Image decode_pgm(const std::vector<unsigned char>& bytes, const std::string& path = "<memory>") {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) -> void {
    throw DataError(path + ": " + what + " at byte " + std::to_string(pos));
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* field) {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) fail(std::string("expected ") + field);
    long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (v > 1000000) fail(std::string(field) + " too large");
    }
    return static_cast<int>(v);
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '5') fail("not a binary PGM (missing P5 magic)");
  pos = 2;
  const int w = number("width");
  const int h = number("height");
  const int maxval = number("maxval");
  if (w < 1 || h < 1) fail("empty image dimensions");
  if (maxval < 1 || maxval > 255) fail("unsupported maxval " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail("missing whitespace after header");
  ++pos;
  const std::size_t n = static_cast<std::size_t>(w) * h;
  if (bytes.size() - pos < n) fail("truncated payload (" + std::to_string(bytes.size() - pos) + " of " + std::to_string(n) + " bytes)");
  if (bytes.size() - pos > n) {
    pos += n;
    fail("trailing bytes after payload");
  }
  Image img(h, w);
  for (std::size_t i = 0; i < n; ++i) img.pixels[i] = static_cast<float>(bytes[pos + i]) / static_cast<float>(maxval);
  return img;
}

inline void save_pgm(const std::filesystem::path& path, const Image& img) {
  const auto bytes = encode_pgm(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing: " + path.string());
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline Image load_pgm(const std::filesystem::path& path) { return decode_pgm(read_bytes(path), path.string()); }

/// Pixels >= threshold become 1, the rest 0.
inline Image binarize(Image img, float threshold = 0.5f) {
  for (auto& v : img.pixels) v = v >= threshold ? 1.f : 0.f;
  return img;
}

}  // namespace serpent
