#pragma once

// PNG output (8-bit RGB, zlib-compressed, no filtering) and two small raster
// plots: the alpha_m trade-off curve and the 2x2 disentanglement heat table.

#include "drc/toyworld.hpp"

#include <zlib.h>

#include <filesystem>

namespace drc::img {

struct Raster {
  int width = 0, height = 0;
  std::vector<uint8_t> rgb;  // row-major, 3 bytes per pixel

  Raster() = default;
  Raster(int w, int h, world::detail::Rgb fill = {255, 255, 255}) : width(w), height(h), rgb(std::size_t(w) * h * 3) {
    for (std::size_t i = 0; i < rgb.size(); i += 3) std::copy(fill.begin(), fill.end(), rgb.begin() + static_cast<long>(i));
  }

  void set(int x, int y, world::detail::Rgb c) {
    if (x < 0 || y < 0 || x >= width || y >= height) return;
    const std::size_t o = (static_cast<std::size_t>(y) * width + x) * 3;
    rgb[o] = c[0];
    rgb[o + 1] = c[1];
    rgb[o + 2] = c[2];
  }

  void fill_rect(int x0, int y0, int w, int h, world::detail::Rgb c) {
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) set(x, y, c);
  }
};

inline Raster from_image(const world::ToyImage& im, int scale = 1) {
  require(scale >= 1, "from_image: scale must be >= 1");
  const auto bytes = im.to_bytes();
  Raster r(world::kImageSize * scale, world::kImageSize * scale);
  for (int y = 0; y < r.height; ++y)
    for (int x = 0; x < r.width; ++x) {
      const std::size_t s = (static_cast<std::size_t>(y / scale) * world::kImageSize + x / scale) * 3;
      r.set(x, y, {bytes[s], bytes[s + 1], bytes[s + 2]});
    }
  return r;
}

namespace detail {

inline void put_be32(std::vector<uint8_t>& b, uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<uint8_t>(v >> s));
}

inline void chunk(std::vector<uint8_t>& out, const char* type, const std::vector<uint8_t>& data) {
  put_be32(out, static_cast<uint32_t>(data.size()));
  const std::size_t start = out.size();
  out.insert(out.end(), type, type + 4);
  out.insert(out.end(), data.begin(), data.end());
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, out.data() + start, static_cast<uInt>(out.size() - start));
  put_be32(out, static_cast<uint32_t>(crc));
}

}  // namespace detail

inline std::vector<uint8_t> encode_png(const Raster& r) {
  require(r.width > 0 && r.height > 0 && r.rgb.size() == std::size_t(r.width) * r.height * 3, "encode_png: bad raster");
  std::vector<uint8_t> raw;
  raw.reserve((std::size_t(r.width) * 3 + 1) * r.height);
  for (int y = 0; y < r.height; ++y) {
    raw.push_back(0);
    const auto* row = r.rgb.data() + std::size_t(y) * r.width * 3;
    raw.insert(raw.end(), row, row + std::size_t(r.width) * 3);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::vector<uint8_t> z(zlen);
  if (compress2(z.data(), &zlen, raw.data(), static_cast<uLong>(raw.size()), 9) != Z_OK)
    throw std::runtime_error("zlib compression failed");
  z.resize(zlen);

  std::vector<uint8_t> out{0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  std::vector<uint8_t> ihdr;
  detail::put_be32(ihdr, static_cast<uint32_t>(r.width));
  detail::put_be32(ihdr, static_cast<uint32_t>(r.height));
  ihdr.insert(ihdr.end(), {8, 2, 0, 0, 0});  // 8-bit RGB
  detail::chunk(out, "IHDR", ihdr);
  detail::chunk(out, "IDAT", z);
  detail::chunk(out, "IEND", {});
  return out;
}

inline void write_png(const std::filesystem::path& p, const Raster& r) { world::detail::write_file(p, encode_png(r)); }

// ----------------------------------------------------------------------------
// Plots
// ----------------------------------------------------------------------------

inline void line(Raster& r, int x0, int y0, int x1, int y1, world::detail::Rgb c) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    r.fill_rect(x0 - 1, y0 - 1, 2, 2, c);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

// Series over x in [0,1], y in [0,1]. Style in blue, semantics in red.
inline Raster alpha_curve(const std::vector<double>& alpha, const std::vector<std::vector<double>>& series) {
  constexpr int W = 440, H = 320, M = 40;
  const std::array<world::detail::Rgb, 4> colors{{{30, 90, 200}, {220, 60, 50}, {40, 150, 60}, {120, 120, 120}}};
  Raster r(W, H);
  auto px = [&](double a) { return M + static_cast<int>(std::lround(a * (W - 2 * M))); };
  auto py = [&](double v) { return H - M - static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * (H - 2 * M))); };
  for (int i = 0; i <= 10; ++i) {
    const int gx = px(i / 10.0), gy = py(i / 10.0);
    for (int y = M; y <= H - M; y += 2) r.set(gx, y, {225, 225, 225});
    for (int x = M; x <= W - M; x += 2) r.set(x, gy, {225, 225, 225});
  }
  r.fill_rect(M, H - M, W - 2 * M + 1, 1, {0, 0, 0});
  r.fill_rect(M, M, 1, H - 2 * M, {0, 0, 0});
  for (std::size_t s = 0; s < series.size(); ++s) {
    require(series[s].size() == alpha.size(), "alpha_curve: series length mismatch");
    for (std::size_t i = 1; i < alpha.size(); ++i)
      line(r, px(alpha[i - 1]), py(series[s][i - 1]), px(alpha[i]), py(series[s][i]), colors[s % colors.size()]);
    for (std::size_t i = 0; i < alpha.size(); ++i) r.fill_rect(px(alpha[i]) - 3, py(series[s][i]) - 3, 7, 7, colors[s % colors.size()]);
  }
  return r;
}

// Grayscale-to-blue cells, value 0 white, value 1 dark blue.
inline Raster heat_table(const std::vector<std::vector<double>>& cells, int cell = 80) {
  require(!cells.empty() && !cells[0].empty(), "heat_table: empty table");
  const int rows = static_cast<int>(cells.size()), cols = static_cast<int>(cells[0].size());
  Raster r(cols * cell + 2, rows * cell + 2, {0, 0, 0});
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) {
      const double v = std::clamp(cells[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)], 0.0, 1.0);
      const world::detail::Rgb c{static_cast<uint8_t>(255 - v * 225), static_cast<uint8_t>(255 - v * 165),
                                 static_cast<uint8_t>(255 - v * 55)};
      r.fill_rect(j * cell + 2, i * cell + 2, cell - 2, cell - 2, c);
    }
  return r;
}

}  // namespace drc::img
