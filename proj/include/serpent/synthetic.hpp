#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "serpent/error.hpp"
#include "serpent/image.hpp"
#include "serpent/rng.hpp"

namespace serpent {

enum class Difficulty { kEasy, kHard };

inline Difficulty parse_difficulty(const std::string& s) {
  if (s == "easy") return Difficulty::kEasy;
  if (s == "hard") return Difficulty::kHard;
  throw ConfigError("unknown difficulty '" + s + "' (expected easy or hard)");
}

inline const char* difficulty_name(Difficulty d) { return d == Difficulty::kEasy ? "easy" : "hard"; }

struct Curve {
  std::array<double, 6> control{};  ///< x0 y0 x1 y1 x2 y2
  double width = 1;
};

struct SampleMeta {
  std::vector<Curve> curves;
  double noise = 0;
};

struct Sample {
  Image image;
  Image mask;
  std::uint64_t seed = 0;
  SampleMeta meta;
};

inline constexpr int kMinSampleSize = 32;

namespace detail {

inline constexpr int kBezierSegments = 96;

/// Squared distance from (px,py) to segment (ax,ay)-(bx,by).
inline double segment_dist2(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax, dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = ax + t * dx - px, ey = ay + t * dy - py;
  return ex * ex + ey * ey;
}

}  // namespace detail

/// Pixels whose center lies within width/2 of the curve (densely sampled
/// as a polyline) are set to 1.
inline void rasterize_curve(const Curve& c, Image& mask) {
  std::array<double, 2 * (detail::kBezierSegments + 1)> pts{};
  for (int s = 0; s <= detail::kBezierSegments; ++s) {
    const double t = static_cast<double>(s) / detail::kBezierSegments, u = 1 - t;
    pts[2 * s] = u * u * c.control[0] + 2 * u * t * c.control[2] + t * t * c.control[4];
    pts[2 * s + 1] = u * u * c.control[1] + 2 * u * t * c.control[3] + t * t * c.control[5];
  }
  const double r = c.width / 2, r2 = r * r + 1e-9;
  for (int s = 0; s < detail::kBezierSegments; ++s) {
    const double ax = pts[2 * s], ay = pts[2 * s + 1], bx = pts[2 * s + 2], by = pts[2 * s + 3];
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - r)));
    const int x1 = std::min(mask.width - 1, static_cast<int>(std::ceil(std::max(ax, bx) + r)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - r)));
    const int y1 = std::min(mask.height - 1, static_cast<int>(std::ceil(std::max(ay, by) + r)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (detail::segment_dist2(x, y, ax, ay, bx, by) <= r2) mask.at(y, x) = 1.f;
  }
}

/// Deterministic crack-like sample: 1-3 quadratic Bezier curves of width
/// 1-4 px darkening a smooth gradient background, plus Gaussian noise
/// (sigma 0.05 easy; 0.15 plus distractor blobs hard).
inline Sample generate_sample(std::uint64_t seed, int height, int width, Difficulty difficulty) {
  if (height < kMinSampleSize || width < kMinSampleSize)
    detail::contract_fail("generate_sample: dims " + std::to_string(height) + "x" + std::to_string(width) + " below " +
                          std::to_string(kMinSampleSize));
  CounterRng rng(derive_seed(seed, 0x5eed));
  Sample s;
  s.seed = seed;
  s.mask = Image(height, width);
  const int curves = static_cast<int>(rng.uniform_int(1, 3));
  // Curves span a bounded window so long thick strokes cannot flood the image.
  const double span = 0.6 * std::min(height, width);
  for (int k = 0; k < curves; ++k) {
    Curve c;
    const double cx = rng.uniform(2 + span / 2, width - 3 - span / 2);
    const double cy = rng.uniform(2 + span / 2, height - 3 - span / 2);
    for (int i = 0; i < 3; ++i) {
      c.control[2 * i] = cx + rng.uniform(-span / 2, span / 2);
      c.control[2 * i + 1] = cy + rng.uniform(-span / 2, span / 2);
    }
    c.width = rng.uniform(1.0, 4.0);
    rasterize_curve(c, s.mask);
    s.meta.curves.push_back(c);
  }

  const bool hard = difficulty == Difficulty::kHard;
  s.meta.noise = hard ? 0.15 : 0.05;
  const double base = rng.uniform(0.55, 0.75);
  const double gx = rng.uniform(-0.15, 0.15), gy = rng.uniform(-0.15, 0.15);
  const double contrast = rng.uniform(0.35, 0.55);
  s.image = Image(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      s.image.at(y, x) = static_cast<float>(base + gx * (x / static_cast<double>(width) - 0.5) +
                                            gy * (y / static_cast<double>(height) - 0.5) - contrast * s.mask.at(y, x));
  if (hard) {
    const int blobs = static_cast<int>(rng.uniform_int(2, 4));
    for (int b = 0; b < blobs; ++b) {
      const double bx = rng.uniform(0, width - 1), by = rng.uniform(0, height - 1);
      const double rad = rng.uniform(2.0, 5.0), depth = rng.uniform(0.1, 0.3);
      for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
          const double d2 = (x - bx) * (x - bx) + (y - by) * (y - by);
          s.image.at(y, x) -= static_cast<float>(depth * std::exp(-d2 / (2 * rad * rad)));
        }
    }
  }
  for (auto& v : s.image.pixels) v = std::clamp(v + static_cast<float>(s.meta.noise * rng.normal()), 0.f, 1.f);
  return s;
}

namespace detail {

/// Bilinear sample with border clamping.
inline float sample_clamped(const Image& img, double x, double y) {
  x = std::clamp(x, 0.0, img.width - 1.0);
  y = std::clamp(y, 0.0, img.height - 1.0);
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  const int x1 = std::min(x0 + 1, img.width - 1), y1 = std::min(y0 + 1, img.height - 1);
  const double fx = x - x0, fy = y - y0;
  const double top = (1 - fx) * img.at(y0, x0) + fx * img.at(y0, x1);
  const double bot = (1 - fx) * img.at(y1, x0) + fx * img.at(y1, x1);
  return static_cast<float>((1 - fy) * top + fy * bot);
}

inline Image flip(const Image& img, bool horizontal) {
  Image out(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      out.at(y, x) = horizontal ? img.at(y, img.width - 1 - x) : img.at(img.height - 1 - y, x);
  return out;
}

inline float sample_nearest(const Image& img, double x, double y) {
  const int xi = static_cast<int>(std::lround(std::clamp(x, 0.0, img.width - 1.0)));
  const int yi = static_cast<int>(std::lround(std::clamp(y, 0.0, img.height - 1.0)));
  return img.at(yi, xi);
}

/// Output pixel p samples input at center + A (p - center).
inline Image warp(const Image& img, const std::array<double, 4>& A, bool nearest = false) {
  Image out(img.height, img.width);
  const double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double sx = cx + A[0] * dx + A[1] * dy, sy = cy + A[2] * dx + A[3] * dy;
      out.at(y, x) = nearest ? sample_nearest(img, sx, sy) : sample_clamped(img, sx, sy);
    }
  return out;
}

}  // namespace detail

struct AugmentDraw {
  bool hflip = false;
  bool vflip = false;
  bool rotate = false;
  double angle_deg = 0;
  bool shear = false;
  double shear_amount = 0;
};

inline AugmentDraw draw_augment(std::uint64_t seed) {
  CounterRng rng(derive_seed(seed, 0xa06));
  AugmentDraw d;
  d.hflip = rng.bernoulli(0.5);
  d.vflip = rng.bernoulli(0.5);
  d.rotate = rng.bernoulli(0.5);
  d.angle_deg = rng.uniform(-15.0, 15.0);
  d.shear = rng.bernoulli(0.5);
  d.shear_amount = rng.uniform(-0.1, 0.1);
  return d;
}

/// Applies the same geometric transform to image and mask. The image is
/// resampled bilinearly, the mask by nearest neighbour (then re-binarized at
/// 0.5); bilinear thresholding erodes 1 px curves.
inline Sample apply_augment(const Sample& in, const AugmentDraw& d) {
  Sample out = in;
  if (d.hflip) {
    out.image = detail::flip(out.image, true);
    out.mask = detail::flip(out.mask, true);
  }
  if (d.vflip) {
    out.image = detail::flip(out.image, false);
    out.mask = detail::flip(out.mask, false);
  }
  if (d.rotate || d.shear) {
    const double a = d.rotate ? d.angle_deg * std::numbers::pi / 180.0 : 0.0;
    const double s = d.shear ? d.shear_amount : 0.0;
    // inverse of rotation followed by a horizontal shear
    const double c = std::cos(a), sn = std::sin(a);
    const std::array<double, 4> A = {c, sn - c * s, -sn, c + sn * s};
    out.image = detail::warp(out.image, A);
    out.mask = binarize(detail::warp(out.mask, A, true), 0.5f);
    for (auto& v : out.image.pixels) v = std::clamp(v, 0.f, 1.f);
  }
  return out;
}

inline Sample augment(const Sample& in, std::uint64_t seed) { return apply_augment(in, draw_augment(seed)); }

// --- dataset files ---------------------------------------------------------

struct ManifestEntry {
  std::filesystem::path image;
  std::filesystem::path mask;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> train;
  std::vector<ManifestEntry> test;
};

inline constexpr const char* kManifestName = "manifest.txt";

inline std::uint64_t train_sample_seed(std::uint64_t seed, std::uint64_t i) { return (seed << 32) + i; }
inline std::uint64_t test_sample_seed(std::uint64_t seed, std::uint64_t i) { return (seed << 32) + (1ull << 31) + i; }

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write manifest: " + path.string());
  for (const auto& [tag, list] : {std::pair{"train", &m.train}, std::pair{"test", &m.test}}) {
    out << "split=" << tag << "\n";
    for (const auto& e : *list) out << e.image.generic_string() << "\t" << e.mask.generic_string() << "\n";
  }
  if (!out) throw DataError("failed writing manifest: " + path.string());
}

/// Writes n_train + n_test image/mask PGM pairs and manifest.txt under out_dir.
inline DatasetManifest build_dataset(int n_train, int n_test, std::uint64_t seed, const std::filesystem::path& out_dir,
                                     Difficulty difficulty, int height = 64, int width = 64) {
  detail::require(n_train >= 0 && n_test >= 0, "build_dataset: negative sample count");
  if (seed >= (1ull << 32)) throw ConfigError("dataset seed must be below 2^32");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "train", ec);
  std::filesystem::create_directories(out_dir / "test", ec);
  if (ec) throw DataError("cannot create dataset directory " + out_dir.string() + ": " + ec.message());
  DatasetManifest m;
  m.root = out_dir;
  auto emit = [&](const char* split, int i, std::uint64_t sample_seed, std::vector<ManifestEntry>& list) {
    const Sample s = generate_sample(sample_seed, height, width, difficulty);
    char idx[16];
    std::snprintf(idx, sizeof idx, "%05d", i);
    ManifestEntry e{std::filesystem::path(split) / ("image_" + std::string(idx) + ".pgm"),
                    std::filesystem::path(split) / ("mask_" + std::string(idx) + ".pgm")};
    save_pgm(out_dir / e.image, s.image);
    save_pgm(out_dir / e.mask, s.mask);
    list.push_back(e);
  };
  for (int i = 0; i < n_train; ++i) emit("train", i, train_sample_seed(seed, i), m.train);
  for (int i = 0; i < n_test; ++i) emit("test", i, test_sample_seed(seed, i), m.test);
  write_manifest(out_dir / kManifestName, m);
  return m;
}

/// Parses a manifest; relative paths resolve against the manifest's directory.
inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest: " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::vector<ManifestEntry>* current = nullptr;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line == "split=train") {
      current = &m.train;
    } else if (line == "split=test") {
      current = &m.test;
    } else {
      const auto tab = line.find('\t');
      if (!current || tab == std::string::npos)
        throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected split header or image<TAB>mask");
      current->push_back({line.substr(0, tab), line.substr(tab + 1)});
    }
  }
  for (const auto* list : {&m.train, &m.test})
    for (const auto& e : *list)
      for (const auto& f : {e.image, e.mask})
        if (!std::filesystem::exists(m.root / f)) throw DataError("manifest entry not found: " + (m.root / f).string());
  return m;
}

struct LabeledImage {
  Image image;
  Image mask;
};

inline std::vector<LabeledImage> load_split(const DatasetManifest& m, const std::vector<ManifestEntry>& entries) {
  std::vector<LabeledImage> out;
  for (const auto& e : entries) {
    LabeledImage li{load_pgm(m.root / e.image), binarize(load_pgm(m.root / e.mask))};
    if (li.image.height != li.mask.height || li.image.width != li.mask.width)
      throw DataError("image/mask size mismatch: " + (m.root / e.image).string());
    out.push_back(std::move(li));
  }
  return out;
}

}  // namespace serpent
