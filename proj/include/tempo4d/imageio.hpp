// Copyright 2026 The Tempo4D Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// 8-bit grayscale mask images. PGM (P2/P5) is always available; PNG needs
// TEMPO4D_WITH_PNG and libpng.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#ifdef TEMPO4D_WITH_PNG
#include <png.h>
#endif

#include "tempo4d/errors.hpp"

namespace tempo4d {

struct MaskImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;  // row-major, in [0, 1]

  MaskImage() = default;
  MaskImage(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}

  double& at(std::size_t row, std::size_t col) { return values[row * width + col]; }
  double at(std::size_t row, std::size_t col) const { return values[row * width + col]; }

  double mass() const {
    double s = 0.0;
    for (auto v : values) s += v;
    return s;
  }

  void validate() const {
    if (values.size() != height * width) throw ShapeError("mask data does not match its size");
    for (auto v : values) {
      if (!(v >= 0.0 && v <= 1.0)) throw InputError("mask value outside [0,1]");
    }
  }
};

struct GrayImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;
};

namespace detail {

inline std::string next_pnm_token(std::istream& in) {
  std::string tok;
  while (in >> tok) {
    if (tok[0] == '#') {
      std::string rest;
      std::getline(in, rest);
      continue;
    }
    return tok;
  }
  throw InputError("truncated PGM header");
}

}  // namespace detail

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const auto magic = detail::next_pnm_token(in);
  if (magic != "P5" && magic != "P2") throw InputError(path.string() + ": not a PGM file");
  GrayImage img;
  img.width = std::stoul(detail::next_pnm_token(in));
  img.height = std::stoul(detail::next_pnm_token(in));
  const auto maxval = std::stoul(detail::next_pnm_token(in));
  if (maxval == 0 || maxval > 255) throw InputError(path.string() + ": only 8-bit PGM is supported");
  img.pixels.resize(img.width * img.height);
  if (magic == "P5") {
    in.get();
    in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
    if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw InputError(path.string() + ": truncated");
  } else {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(std::stoul(detail::next_pnm_token(in)));
  }
  if (maxval != 255) {
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(std::lround(p * 255.0 / static_cast<double>(maxval)));
  }
  return img;
}

inline void write_pgm(const std::filesystem::path& path, const GrayImage& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

#ifdef TEMPO4D_WITH_PNG
inline GrayImage read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw InputError(path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_GRAY;
  GrayImage img;
  img.width = image.width;
  img.height = image.height;
  img.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, img.pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw InputError(path.string() + ": " + image.message);
  }
  return img;
}
#endif

// Values >= 128 become 1.0, others 0.0.
inline MaskImage binarize(const GrayImage& img) {
  MaskImage m(img.height, img.width);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) m.values[i] = img.pixels[i] >= 128 ? 1.0 : 0.0;
  return m;
}

inline MaskImage read_mask(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".pgm") return binarize(read_pgm(path));
#ifdef TEMPO4D_WITH_PNG
  if (ext == ".png") return binarize(read_png(path));
#endif
  throw InputError("unsupported mask format: " + path.string());
}

inline GrayImage to_gray(const MaskImage& m) {
  GrayImage img{m.height, m.width, std::vector<std::uint8_t>(m.values.size())};
  for (std::size_t i = 0; i < m.values.size(); ++i) {
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(std::clamp(m.values[i], 0.0, 1.0) * 255.0));
  }
  return img;
}

}  // namespace tempo4d
