#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "sttr/error.hpp"
#include "sttr/tensor.hpp"

namespace sttr {

class ImageError : public Error {
 public:
  enum class Kind { io, malformed_header, unexpected_eof, unsupported_maxval, unsupported_format, size };

  ImageError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Row-major RGB raster with channels in [0, 1].
struct ImageBuffer {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> pixels;  // (y * width + x) * 3 + channel

  ImageBuffer() = default;
  ImageBuffer(std::size_t w, std::size_t h, float fill = 0.0f) : width(w), height(h), pixels(w * h * 3, fill) {}

  float& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * 3 + c]; }
  float at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * 3 + c]; }

  bool operator==(const ImageBuffer&) const = default;
};

inline unsigned char to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<unsigned char>(std::lround(c * 255.0f));
}

/// Binary PPM (P6, maxval 255).
inline ImageBuffer decode_ppm(const std::vector<unsigned char>& bytes) {
  using Kind = ImageError::Kind;
  std::size_t pos = 0;
  auto eof = [&]() { return pos >= bytes.size(); };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw ImageError(Kind::malformed_header, "not a binary PPM (missing P6 magic)");
  }
  pos = 2;
  auto skip_space = [&]() {
    bool any = false;
    while (!eof()) {
      const unsigned char c = bytes[pos];
      if (c == '#') {
        while (!eof() && bytes[pos] != '\n' && bytes[pos] != '\r') ++pos;
        any = true;
      } else if (std::isspace(c)) {
        ++pos;
        any = true;
      } else {
        break;
      }
    }
    if (eof()) throw ImageError(Kind::unexpected_eof, "unexpected end of file in PPM header");
    if (!any) throw ImageError(Kind::malformed_header, "expected whitespace in PPM header");
  };
  auto number = [&](const char* what) {
    if (eof()) throw ImageError(Kind::unexpected_eof, std::string("unexpected end of file reading ") + what);
    if (!std::isdigit(bytes[pos])) throw ImageError(Kind::malformed_header, std::string("bad PPM ") + what);
    std::size_t v = 0;
    while (!eof() && std::isdigit(bytes[pos])) {
      v = v * 10 + static_cast<std::size_t>(bytes[pos] - '0');
      if (v > (1u << 24)) throw ImageError(Kind::malformed_header, std::string("PPM ") + what + " too large");
      ++pos;
    }
    return v;
  };
  skip_space();
  const std::size_t width = number("width");
  skip_space();
  const std::size_t height = number("height");
  skip_space();
  const std::size_t maxval = number("maxval");
  if (eof()) throw ImageError(Kind::unexpected_eof, "unexpected end of file after PPM maxval");
  if (!std::isspace(bytes[pos])) throw ImageError(Kind::malformed_header, "expected whitespace after PPM maxval");
  ++pos;
  if (width == 0 || height == 0) throw ImageError(Kind::malformed_header, "PPM has zero size");
  if (maxval != 255) {
    throw ImageError(Kind::unsupported_maxval, "unsupported PPM maxval " + std::to_string(maxval) + " (only 255)");
  }
  const std::size_t need = width * height * 3;
  if (bytes.size() - pos < need) throw ImageError(Kind::unexpected_eof, "PPM raster truncated");
  ImageBuffer img(width, height);
  for (std::size_t i = 0; i < need; ++i) img.pixels[i] = static_cast<float>(bytes[pos + i]) / 255.0f;
  return img;
}

inline std::vector<unsigned char> encode_ppm(const ImageBuffer& img) {
  const std::string header = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<unsigned char> out(header.begin(), header.end());
  out.reserve(out.size() + img.pixels.size());
  for (float v : img.pixels) out.push_back(to_byte(v));
  return out;
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError(ImageError::Kind::io, "cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Reads an image file; only binary PPM is supported.
inline ImageBuffer decode_image(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  static constexpr unsigned char png_sig[] = {0x89, 'P', 'N', 'G'};
  if (bytes.size() >= 4 && std::equal(std::begin(png_sig), std::end(png_sig), bytes.begin())) {
    throw ImageError(ImageError::Kind::unsupported_format, path.string() + ": PNG input is not supported; convert to PPM (P6)");
  }
  try {
    return decode_ppm(bytes);
  } catch (const ImageError& e) {
    throw ImageError(e.kind(), path.string() + ": " + e.what());
  }
}

inline void encode_image(const ImageBuffer& img, const std::filesystem::path& path) {
  const auto bytes = encode_ppm(img);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageError(ImageError::Kind::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageError(ImageError::Kind::io, "failed writing " + path.string());
}

inline ImageBuffer center_crop(const ImageBuffer& img, std::size_t width, std::size_t height) {
  if (width > img.width || height > img.height || width == 0 || height == 0) {
    throw ImageError(ImageError::Kind::size, "cannot crop " + std::to_string(img.width) + "x" +
                                             std::to_string(img.height) + " to " + std::to_string(width) +
                                             "x" + std::to_string(height));
  }
  const std::size_t x0 = (img.width - width) / 2;
  const std::size_t y0 = (img.height - height) / 2;
  ImageBuffer out(width, height);
  for (std::size_t y = 0; y < height; ++y)
    for (std::size_t x = 0; x < width; ++x)
      for (std::size_t c = 0; c < 3; ++c) out.at(x, y, c) = img.at(x0 + x, y0 + y, c);
  return out;
}

/// Center-crops each side down to a multiple of `multiple`, optionally capped at `max_side`.
inline ImageBuffer crop_to_multiple(const ImageBuffer& img, std::size_t multiple, std::size_t max_side = 0) {
  std::size_t w = img.width;
  std::size_t h = img.height;
  if (max_side) {
    w = std::min(w, max_side);
    h = std::min(h, max_side);
  }
  w -= w % multiple;
  h -= h % multiple;
  if (w == 0 || h == 0) {
    throw ImageError(ImageError::Kind::size, "image " + std::to_string(img.width) + "x" +
                                             std::to_string(img.height) + " is smaller than " +
                                             std::to_string(multiple) + "x" + std::to_string(multiple));
  }
  if (w == img.width && h == img.height) return img;
  return center_crop(img, w, h);
}

/// [1,3,H,W] tensor from an image.
template <typename T = float>
BasicTensor<T> to_tensor(const ImageBuffer& img) {
  const std::size_t hw = img.width * img.height;
  std::vector<T> data(3 * hw);
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c) data[c * hw + i] = static_cast<T>(img.pixels[i * 3 + c]);
  return BasicTensor<T>({1, 3, img.height, img.width}, std::move(data));
}

template <typename T>
ImageBuffer from_tensor(const BasicTensor<T>& t) {
  if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 3) {
    throw ShapeError("from_tensor expects [1,3,H,W], got " + shape_str(t.shape()));
  }
  ImageBuffer img(t.dim(3), t.dim(2));
  const std::size_t hw = img.width * img.height;
  for (std::size_t i = 0; i < hw; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      img.pixels[i * 3 + c] = std::clamp(static_cast<float>(t[c * hw + i]), 0.0f, 1.0f);
  return img;
}

/// Mean absolute difference over all pixels and channels.
inline double mean_abs_difference(const ImageBuffer& a, const ImageBuffer& b) {
  if (a.width != b.width || a.height != b.height) {
    throw ImageError(ImageError::Kind::size, "image sizes differ");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) acc += std::abs(static_cast<double>(a.pixels[i]) - b.pixels[i]);
  return acc / static_cast<double>(a.pixels.size());
}

}  // namespace sttr
