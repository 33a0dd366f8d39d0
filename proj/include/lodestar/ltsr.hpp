#pragma once

// LTSR tensor files: "LTSR", u32 version, u32 ndim, u32 dims[ndim], then a
// row-major little-endian float32 payload. Images are stored as H x W x C
// (channels interleaved); frame stacks as T x H x W x C.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "lodestar/tensor.hpp"

namespace lodestar::ltsr {

inline constexpr char kMagic[4] = {'L', 'T', 'S', 'R'};
inline constexpr std::uint32_t kVersion = 1;

struct Array {
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

namespace detail {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

inline void put_u32(std::ostream& os, std::uint32_t v) {
  v = to_le(v);
  os.write(reinterpret_cast<const char*>(&v), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), 4)) throw Error("LTSR: truncated header");
  return to_le(v);
}

inline void put_f32(std::ostream& os, float f) { put_u32(os, std::bit_cast<std::uint32_t>(f)); }

}  // namespace detail

inline void write(std::ostream& os, const Array& a) {
  if (a.values.size() != a.element_count()) throw Error("LTSR: payload does not match dims");
  os.write(kMagic, 4);
  detail::put_u32(os, kVersion);
  detail::put_u32(os, static_cast<std::uint32_t>(a.dims.size()));
  for (auto d : a.dims) detail::put_u32(os, d);
  if constexpr (std::endian::native == std::endian::little) {
    os.write(reinterpret_cast<const char*>(a.values.data()),
             static_cast<std::streamsize>(a.values.size() * sizeof(float)));
  } else {
    for (float f : a.values) detail::put_f32(os, f);
  }
  if (!os) throw Error("LTSR: write failed");
}

inline Array read(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0) {
    throw Error("LTSR: bad magic (expected \"LTSR\")");
  }
  const auto version = detail::get_u32(is);
  if (version != kVersion) {
    throw Error("LTSR: unsupported version " + std::to_string(version));
  }
  const auto ndim = detail::get_u32(is);
  if (ndim == 0 || ndim > 8) throw Error("LTSR: invalid ndim " + std::to_string(ndim));
  Array a;
  a.dims.resize(ndim);
  for (auto& d : a.dims) d = detail::get_u32(is);
  const std::size_t n = a.element_count();
  if (n > (std::size_t{1} << 32)) throw Error("LTSR: payload too large");
  a.values.resize(n);
  if (!is.read(reinterpret_cast<char*>(a.values.data()),
               static_cast<std::streamsize>(n * sizeof(float)))) {
    throw Error("LTSR: truncated payload");
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (auto& f : a.values) {
      f = std::bit_cast<float>(detail::to_le(std::bit_cast<std::uint32_t>(f)));
    }
  }
  return a;
}

inline void save(const std::string& path, const Array& a) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("LTSR: cannot open " + path + " for writing");
  write(os, a);
}

inline Array load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("LTSR: cannot open " + path);
  return read(is);
}

/// Planar tensor -> H x W x C array.
template <class T>
Array from_tensor(const Tensor<T>& t) {
  Array a;
  a.dims = {static_cast<std::uint32_t>(t.height()), static_cast<std::uint32_t>(t.width()),
            static_cast<std::uint32_t>(t.channels())};
  a.values.resize(t.size());
  std::size_t k = 0;
  for (int y = 0; y < t.height(); ++y)
    for (int x = 0; x < t.width(); ++x)
      for (int c = 0; c < t.channels(); ++c) a.values[k++] = static_cast<float>(t(c, y, x));
  return a;
}

/// Frame `index` of a T x H x W x C stack, or the whole array for ndim 2/3.
template <class T = double>
Tensor<T> to_tensor(const Array& a, std::size_t index = 0) {
  std::uint32_t h = 0, w = 0, c = 1;
  std::size_t frames = 1;
  switch (a.dims.size()) {
    case 2: h = a.dims[0]; w = a.dims[1]; break;
    case 3: h = a.dims[0]; w = a.dims[1]; c = a.dims[2]; break;
    case 4: frames = a.dims[0]; h = a.dims[1]; w = a.dims[2]; c = a.dims[3]; break;
    default: throw Error("LTSR: expected 2, 3 or 4 dims, got " + std::to_string(a.dims.size()));
  }
  if (index >= frames) throw Error("LTSR: frame index out of range");
  Tensor<T> t(static_cast<int>(c), static_cast<int>(h), static_cast<int>(w));
  std::size_t k = index * static_cast<std::size_t>(h) * w * c;
  for (std::uint32_t y = 0; y < h; ++y)
    for (std::uint32_t x = 0; x < w; ++x)
      for (std::uint32_t ch = 0; ch < c; ++ch) t(ch, y, x) = static_cast<T>(a.values[k++]);
  return t;
}

inline std::size_t frame_count(const Array& a) { return a.dims.size() == 4 ? a.dims[0] : 1; }

template <class T>
Array stack(const std::vector<Tensor<T>>& frames) {
  if (frames.empty()) throw Error("LTSR: cannot stack zero frames");
  Array a;
  const auto& f0 = frames.front();
  a.dims = {static_cast<std::uint32_t>(frames.size()), static_cast<std::uint32_t>(f0.height()),
            static_cast<std::uint32_t>(f0.width()), static_cast<std::uint32_t>(f0.channels())};
  a.values.reserve(frames.size() * f0.size());
  for (const auto& f : frames) {
    if (!f.same_shape(f0)) throw Error("LTSR: frames in a stack must share a shape");
    auto one = from_tensor(f);
    a.values.insert(a.values.end(), one.values.begin(), one.values.end());
  }
  return a;
}

}  // namespace lodestar::ltsr
