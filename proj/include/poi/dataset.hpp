#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "poi/config.hpp"
#include "poi/prior.hpp"

namespace poi {

/// One synthetic face. `label` may be noise-flipped; `clean_label` never is.
struct Sample {
  std::vector<float> image;  // 1 x H x W, values in [0, 1]
  std::size_t label = 0;
  std::size_t clean_label = 0;
  std::vector<bool> eye_aus;    // generator ground truth, eye AU order
  std::vector<bool> mouth_aus;  // generator ground truth, mouth AU order
  float ambiguity = 0.0f;       // share of the face drawn from a second class

  friend bool operator==(const Sample&, const Sample&) = default;
};

/// splitmix64 finaliser; derives independent stream seeds from a run seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t { kTrainData = 1, kTestData = 2, kNoise = 3, kInit = 4, kShuffle = 5, kAugment = 6 };

namespace glyphs {

inline constexpr std::size_t kSize = 5;
using Pattern = std::array<const char*, kSize>;

// Left-right symmetric 5x5 patterns so mirrored quadrants keep the same
// glyph. One per AU; eye patterns first, then mouth, in table order.
inline constexpr std::array<Pattern, 13> kPatterns{{
    // eye: AU1, AU2, AU4, AU5, AU6, AU9
    {".....", ".....", "#####", ".....", "....."},
    {"..#..", "..#..", "..#..", "..#..", "..#.."},
    {"..#..", "..#..", "#####", "..#..", "..#.."},
    {"#...#", ".#.#.", "..#..", ".#.#.", "#...#"},
    {"#####", "#...#", "#...#", "#...#", "#####"},
    {"#...#", "#...#", ".#.#.", ".#.#.", "..#.."},
    // mouth: AU10, AU12, AU14, AU15, AU17, AU24, AU26
    {"#####", "..#..", "..#..", "..#..", "..#.."},
    {"#...#", "#...#", "#...#", "#...#", "#####"},
    {".#.#.", ".#.#.", ".#.#.", ".#.#.", ".#.#."},
    {"..#..", "..#..", "..#..", "..#..", "#####"},
    {".....", ".###.", ".###.", ".###.", "....."},
    {".....", "#####", ".....", "#####", "....."},
    {"..#..", ".#.#.", "#...#", ".#.#.", "..#.."},
}};

/// Pattern for the m-th AU of a region; regions with more AUs than the
/// built-in set reuse patterns cyclically.
inline const Pattern& pattern(Region r, std::size_t m) {
  const std::size_t idx = r == Region::Eye ? m % 6 : 6 + m % 7;
  return kPatterns[idx];
}

/// Integer upscale of the 5x5 pattern for a quadrant of side q.
inline std::size_t scale_for(std::size_t q) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(0.088 * static_cast<double>(q)));
}

/// Top-left anchors (row, col) of the three glyph slots inside the
/// image-left quadrant of side q.
inline std::array<std::array<std::size_t, 2>, 3> slots(std::size_t q) {
  const auto at = [q](double f) { return static_cast<std::size_t>(std::lround(f * static_cast<double>(q))); };
  return {{{at(0.08), at(0.08)}, {at(0.08), at(0.56)}, {at(0.56), at(0.32)}}};
}

}  // namespace glyphs

inline constexpr float kBackground = 0.1f;

/// Renders a face whose upper quadrants show the eye AUs of `upper_class`
/// and lower quadrants the mouth AUs of `lower_class`; the image-right half
/// mirrors the image-left half before pixel noise.
inline Sample render_sample(const DataSpec& spec, const AUPriorTable& table, std::size_t upper_class,
                            std::size_t lower_class, std::mt19937_64& rng) {
  const std::size_t S = spec.image_size, Q = S / 2;
  const std::size_t scale = glyphs::scale_for(Q);
  const std::size_t g = glyphs::kSize * scale;
  const auto slot = glyphs::slots(Q);

  Sample s;
  s.label = s.clean_label = upper_class;
  s.ambiguity = upper_class == lower_class ? 0.0f : 0.5f;
  s.image.assign(S * S, kBackground);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_int_distribution<int> jitter(-static_cast<int>(spec.glyph_jitter), static_cast<int>(spec.glyph_jitter));

  for (Region region : {Region::Eye, Region::Mouth}) {
    const std::size_t cls = region == Region::Eye ? upper_class : lower_class;
    const std::size_t row0 = region == Region::Eye ? 0 : Q;
    auto& truth = region == Region::Eye ? s.eye_aus : s.mouth_aus;
    truth.assign(table.num_aus(region), false);
    std::size_t k = 0;
    for (std::size_t m = 0; m < table.num_aus(region); ++m) {
      if (!table.is_active(cls, region, m)) continue;
      truth[m] = true;
      const auto& pat = glyphs::pattern(region, m);
      const float ink = static_cast<float>(kBackground + 0.8 * (1.0 - spec.intensity_jitter * unit(rng)));
      const auto& anchor = slot[k++ % slot.size()];
      const int hi = static_cast<int>(Q - std::min(Q, g));
      const int r = std::clamp(static_cast<int>(anchor[0]) + jitter(rng), 0, hi);
      const int c = std::clamp(static_cast<int>(anchor[1]) + jitter(rng), 0, hi);
      for (std::size_t y = 0; y < g && y < Q; ++y)
        for (std::size_t x = 0; x < g && x < Q; ++x)
          if (pat[y / scale][x / scale] == '#') s.image[(row0 + r + y) * S + c + x] = ink;
    }
  }
  for (std::size_t y = 0; y < S; ++y)
    for (std::size_t x = Q; x < S; ++x) s.image[y * S + x] = s.image[y * S + (S - 1 - x)];

  if (spec.pixel_noise > 0.0) {
    std::normal_distribution<double> noise(0.0, spec.pixel_noise);
    for (float& v : s.image) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
  }
  return s;
}

/// `per_class` samples per expression in class-major order. A fraction
/// `spec.ambiguity` (rounded) draws its lower half from a different class;
/// those keep the upper-half class as label.
inline std::vector<Sample> generate_dataset(const DataSpec& spec, const AUPriorTable& table, std::uint64_t seed,
                                            std::size_t per_class) {
  spec.validate();
  const std::size_t C = table.num_classes();
  if (spec.classes != C) throw ConfigError("data.classes does not match the prior table");
  const std::size_t N = per_class * C;
  std::mt19937_64 rng(seed);

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_amb = static_cast<std::size_t>(std::llround(spec.ambiguity * static_cast<double>(N)));
  std::vector<bool> ambiguous(N, false);
  for (std::size_t k = 0; k < n_amb; ++k) ambiguous[order[k]] = true;

  std::vector<Sample> out;
  out.reserve(N);
  std::uniform_int_distribution<std::size_t> other(0, C - 2);
  for (std::size_t i = 0; i < N; ++i) {
    const std::size_t cls = i / per_class;
    std::size_t lower = cls;
    if (ambiguous[i]) {
      lower = other(rng);
      if (lower >= cls) ++lower;
    }
    out.push_back(render_sample(spec, table, cls, lower, rng));
  }
  return out;
}

/// Flips exactly round(ratio * N) labels, chosen without replacement, each
/// to a uniformly drawn class other than the clean one.
inline std::vector<Sample> inject_label_noise(std::vector<Sample> samples, double ratio, std::size_t classes,
                                              std::uint64_t seed) {
  if (!(ratio >= 0.0 && ratio < 1.0)) throw ConfigError("noise ratio must lie in [0, 1)");
  if (classes < 2) throw ConfigError("label noise needs at least two classes");
  const std::size_t N = samples.size();
  const auto k = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(N)));
  if (k == 0) return samples;
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> idx(N);
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  std::uniform_int_distribution<std::size_t> other(0, classes - 2);
  for (std::size_t j = 0; j < k; ++j) {
    Sample& s = samples[idx[j]];
    std::size_t y = other(rng);
    if (y >= s.clean_label) ++y;
    s.label = y;
  }
  return samples;
}

// Binary cache: header "POID", version, C, N, H, W (u32 LE) followed by
// per-sample records of H*W f32 pixels, i32 label, i32 clean_label,
// u32 AU bitmask (eye AUs in bits 0-15, mouth AUs in bits 16-31) and
// f32 ambiguity.
namespace cache {

inline constexpr char kMagic[4] = {'P', 'O', 'I', 'D'};
inline constexpr std::uint32_t kVersion = 1;

inline void put_u32(std::ostream& os, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("dataset cache: truncated file");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
inline float get_f32(std::istream& is) { return std::bit_cast<float>(get_u32(is)); }

}  // namespace cache

struct DatasetFile {
  std::size_t classes = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t eye_aus = 0;
  std::size_t mouth_aus = 0;
  std::vector<Sample> samples;
};

inline void write_dataset(const std::string& path, const std::vector<Sample>& samples, std::size_t classes,
                          std::size_t height, std::size_t width) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write dataset cache " + path);
  os.write(cache::kMagic, 4);
  cache::put_u32(os, cache::kVersion);
  cache::put_u32(os, static_cast<std::uint32_t>(classes));
  cache::put_u32(os, static_cast<std::uint32_t>(samples.size()));
  cache::put_u32(os, static_cast<std::uint32_t>(height));
  cache::put_u32(os, static_cast<std::uint32_t>(width));
  for (const Sample& s : samples) {
    if (s.image.size() != height * width) throw DimensionError("write_dataset: image size mismatch");
    if (s.eye_aus.size() > 16 || s.mouth_aus.size() > 16) throw DimensionError("write_dataset: too many AUs for mask");
    for (float v : s.image) cache::put_f32(os, v);
    cache::put_u32(os, static_cast<std::uint32_t>(static_cast<std::int32_t>(s.label)));
    cache::put_u32(os, static_cast<std::uint32_t>(static_cast<std::int32_t>(s.clean_label)));
    std::uint32_t mask = 0;
    for (std::size_t m = 0; m < s.eye_aus.size(); ++m)
      if (s.eye_aus[m]) mask |= 1u << m;
    for (std::size_t m = 0; m < s.mouth_aus.size(); ++m)
      if (s.mouth_aus[m]) mask |= 1u << (16 + m);
    cache::put_u32(os, mask);
    cache::put_f32(os, s.ambiguity);
  }
  if (!os) throw IoError("failed writing dataset cache " + path);
}

/// Reads a cache written by write_dataset. The AU mask does not record
/// region sizes, so the caller supplies them.
inline DatasetFile read_dataset(const std::string& path, std::size_t eye_aus, std::size_t mouth_aus) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset cache " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, cache::kMagic, 4) != 0) throw IoError(path + " is not a dataset cache");
  if (cache::get_u32(is) != cache::kVersion) throw IoError(path + ": unsupported cache version");
  DatasetFile f;
  f.classes = cache::get_u32(is);
  const std::size_t N = cache::get_u32(is);
  f.height = cache::get_u32(is);
  f.width = cache::get_u32(is);
  f.eye_aus = eye_aus;
  f.mouth_aus = mouth_aus;
  f.samples.resize(N);
  for (Sample& s : f.samples) {
    s.image.resize(f.height * f.width);
    for (float& v : s.image) v = cache::get_f32(is);
    s.label = static_cast<std::size_t>(static_cast<std::int32_t>(cache::get_u32(is)));
    s.clean_label = static_cast<std::size_t>(static_cast<std::int32_t>(cache::get_u32(is)));
    if (s.label >= f.classes || s.clean_label >= f.classes) throw IoError(path + ": label out of range");
    const std::uint32_t mask = cache::get_u32(is);
    s.eye_aus.assign(eye_aus, false);
    s.mouth_aus.assign(mouth_aus, false);
    for (std::size_t m = 0; m < eye_aus; ++m) s.eye_aus[m] = (mask >> m) & 1u;
    for (std::size_t m = 0; m < mouth_aus; ++m) s.mouth_aus[m] = (mask >> (16 + m)) & 1u;
    s.ambiguity = cache::get_f32(is);
  }
  return f;
}

/// Stacks samples into a B x 1 x H x W tensor. With `rng`, applies the
/// training augmentation: random horizontal flip and +-translate pixel
/// shifts with edge replication.
inline Tensor make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> idx, std::size_t size,
                         std::size_t translate = 0, std::mt19937_64* rng = nullptr) {
  const std::size_t B = idx.size(), HW = size * size;
  std::vector<double> data(B * HW);
  for (std::size_t b = 0; b < B; ++b) {
    const auto& img = samples[idx[b]].image;
    double* out = &data[b * HW];
    if (!rng) {
      std::copy(img.begin(), img.end(), out);
      continue;
    }
    std::bernoulli_distribution flip(0.5);
    std::uniform_int_distribution<int> shift(-static_cast<int>(translate), static_cast<int>(translate));
    const bool f = flip(*rng);
    const int dy = shift(*rng), dx = shift(*rng);
    const int n = static_cast<int>(size);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const int sy = std::clamp(y - dy, 0, n - 1);
        int sx = std::clamp(x - dx, 0, n - 1);
        if (f) sx = n - 1 - sx;
        out[y * n + x] = img[static_cast<std::size_t>(sy * n + sx)];
      }
  }
  return Tensor({B, 1, size, size}, std::move(data));
}

}  // namespace poi
