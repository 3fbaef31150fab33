#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "csdm/linalg.hpp"
#include "csdm/vendor_json.hpp"

namespace csdm::io {

// Flattened row-major images with values in [0, 1].
struct ImageDataset {
  std::vector<Vector> images;
  std::size_t width = 0;
  std::size_t height = 0;

  void validate() const;
};

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;

// IDX image container: big-endian magic, count, rows, cols, then one byte
// per pixel. Bytes are scaled by 1/255.
ImageDataset parse_idx_images(const std::string& bytes);
ImageDataset load_idx_images(const std::string& path);
// Pixels are rounded to the nearest byte.
std::string idx_image_bytes(const ImageDataset& ds);
void write_idx_images(const std::string& path, const ImageDataset& ds);

ImageDataset upscale_nearest(const ImageDataset& ds, std::size_t new_width, std::size_t new_height);
// Fraction of pixels below `threshold` over the whole dataset.
double near_zero_fraction(const ImageDataset& ds, double threshold = 0.05);

// Handwriting-like test images: a few thick strokes with soft edges on a
// black background.
ImageDataset synth_stroke_images(std::size_t n, std::size_t width, std::size_t height, std::uint64_t seed);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

// Rows of comma-separated numbers, no header; every row must have the same
// length.
std::vector<Vector> parse_numeric_rows(const std::string& text);
std::vector<Vector> load_numeric_rows(const std::string& path);

// Writes report.json plus each (file name, contents) companion into `dir`,
// creating it if needed. Returns the paths written, report first.
std::vector<std::string> emit_report(const std::string& dir, const nlohmann::json& report,
                                     const std::vector<std::pair<std::string, std::string>>& companions = {});

}  // namespace csdm::io
