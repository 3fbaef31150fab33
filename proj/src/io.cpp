#include "csdm/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "csdm/error.hpp"
#include "csdm/rng.hpp"

namespace csdm::io {

namespace fs = std::filesystem;

void ImageDataset::validate() const {
  if (width == 0 || height == 0) throw InvalidArgument("image dataset: zero width or height");
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].size() != width * height)
      throw InvalidArgument("image " + std::to_string(i) + ": length " + std::to_string(images[i].size()) +
                            " != width * height = " + std::to_string(width * height));
    for (double v : images[i])
      if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("image " + std::to_string(i) + ": value outside [0, 1]");
  }
}

namespace {

std::uint32_t read_be32(const std::string& b, std::size_t at) {
  return (std::uint32_t(std::uint8_t(b[at])) << 24) | (std::uint32_t(std::uint8_t(b[at + 1])) << 16) |
         (std::uint32_t(std::uint8_t(b[at + 2])) << 8) | std::uint32_t(std::uint8_t(b[at + 3]));
}

void put_be32(std::string& b, std::uint32_t v) {
  b.push_back(char((v >> 24) & 0xff));
  b.push_back(char((v >> 16) & 0xff));
  b.push_back(char((v >> 8) & 0xff));
  b.push_back(char(v & 0xff));
}

}  // namespace

ImageDataset parse_idx_images(const std::string& bytes) {
  if (bytes.size() < 16)
    throw IoError("idx: header needs 16 bytes, got " + std::to_string(bytes.size()));
  const std::uint32_t magic = read_be32(bytes, 0);
  if (magic != kIdxImageMagic) {
    std::ostringstream os;
    os << "idx: bad magic 0x" << std::hex << magic << ", expected 0x00000803";
    throw IoError(os.str());
  }
  const std::size_t count = read_be32(bytes, 4), rows = read_be32(bytes, 8), cols = read_be32(bytes, 12);
  if (rows == 0 || cols == 0) throw IoError("idx: zero image dimension");
  const std::size_t expected = count * rows * cols;
  if (bytes.size() - 16 != expected)
    throw IoError("idx: expected " + std::to_string(expected) + " bytes of pixel data, got " +
                  std::to_string(bytes.size() - 16));
  ImageDataset ds;
  ds.width = cols;
  ds.height = rows;
  ds.images.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    Vector& img = ds.images[i];
    img.resize(rows * cols);
    const std::size_t base = 16 + i * rows * cols;
    for (std::size_t p = 0; p < rows * cols; ++p) img[p] = std::uint8_t(bytes[base + p]) / 255.0;
  }
  return ds;
}

ImageDataset load_idx_images(const std::string& path) { return parse_idx_images(read_text_file(path)); }

std::string idx_image_bytes(const ImageDataset& ds) {
  ds.validate();
  std::string b;
  b.reserve(16 + ds.images.size() * ds.width * ds.height);
  put_be32(b, kIdxImageMagic);
  put_be32(b, static_cast<std::uint32_t>(ds.images.size()));
  put_be32(b, static_cast<std::uint32_t>(ds.height));
  put_be32(b, static_cast<std::uint32_t>(ds.width));
  for (const auto& img : ds.images)
    for (double v : img) b.push_back(char(static_cast<std::uint8_t>(std::lround(v * 255.0))));
  return b;
}

void write_idx_images(const std::string& path, const ImageDataset& ds) { write_text_file(path, idx_image_bytes(ds)); }

ImageDataset upscale_nearest(const ImageDataset& ds, std::size_t new_width, std::size_t new_height) {
  ds.validate();
  if (new_width < ds.width || new_height < ds.height)
    throw InvalidArgument("upscale_nearest: target " + std::to_string(new_width) + "x" + std::to_string(new_height) +
                          " is smaller than " + std::to_string(ds.width) + "x" + std::to_string(ds.height));
  ImageDataset out;
  out.width = new_width;
  out.height = new_height;
  out.images.reserve(ds.images.size());
  std::vector<std::size_t> src_col(new_width), src_row(new_height);
  for (std::size_t x = 0; x < new_width; ++x) src_col[x] = x * ds.width / new_width;
  for (std::size_t y = 0; y < new_height; ++y) src_row[y] = y * ds.height / new_height;
  for (const auto& img : ds.images) {
    Vector big(new_width * new_height);
    for (std::size_t y = 0; y < new_height; ++y)
      for (std::size_t x = 0; x < new_width; ++x) big[y * new_width + x] = img[src_row[y] * ds.width + src_col[x]];
    out.images.push_back(std::move(big));
  }
  return out;
}

double near_zero_fraction(const ImageDataset& ds, double threshold) {
  std::size_t total = 0, small = 0;
  for (const auto& img : ds.images) {
    total += img.size();
    small += static_cast<std::size_t>(std::count_if(img.begin(), img.end(), [&](double v) { return v < threshold; }));
  }
  return total == 0 ? 0.0 : static_cast<double>(small) / static_cast<double>(total);
}

ImageDataset synth_stroke_images(std::size_t n, std::size_t width, std::size_t height, std::uint64_t seed) {
  if (width < 4 || height < 4) throw InvalidArgument("synth_stroke_images: images must be at least 4x4");
  ImageDataset ds;
  ds.width = width;
  ds.height = height;
  const RngStream root(seed);
  const double scale = static_cast<double>(std::min(width, height));
  for (std::size_t i = 0; i < n; ++i) {
    RngStream rng = root.split(i);
    Vector img(width * height, 0.0);
    const std::size_t strokes = 2 + rng.below(3);
    const double thickness = scale * rng.uniform(0.04, 0.08);
    for (std::size_t s = 0; s < strokes; ++s) {
      // Segment inside the central 60% of the frame.
      const double x0 = width * rng.uniform(0.2, 0.8), y0 = height * rng.uniform(0.2, 0.8);
      const double x1 = width * rng.uniform(0.2, 0.8), y1 = height * rng.uniform(0.2, 0.8);
      const double dx = x1 - x0, dy = y1 - y0, len2 = dx * dx + dy * dy;
      for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
          const double px = x + 0.5, py = y + 0.5;
          const double u = len2 > 0.0 ? std::clamp(((px - x0) * dx + (py - y0) * dy) / len2, 0.0, 1.0) : 0.0;
          const double ex = px - (x0 + u * dx), ey = py - (y0 + u * dy);
          const double dist = std::sqrt(ex * ex + ey * ey);
          const double v = std::clamp(1.0 - (dist - thickness) / 1.0, 0.0, 1.0);
          double& p = img[y * width + x];
          p = std::max(p, v);
        }
    }
    ds.images.push_back(std::move(img));
  }
  return ds;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path + ": cannot open for reading");
  std::ostringstream os;
  os << in.rdbuf();
  if (in.bad()) throw IoError(path + ": read failed");
  return os.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path + ": cannot open for writing");
  out << text;
  out.flush();
  if (!out) throw IoError(path + ": write failed");
}

std::vector<Vector> parse_numeric_rows(const std::string& text) {
  std::vector<Vector> rows;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    Vector row;
    std::size_t start = 0;
    while (true) {
      const std::size_t end = std::min(line.find(',', start), line.size());
      std::string cell = line.substr(start, end - start);
      const auto a = cell.find_first_not_of(" \t"), b = cell.find_last_not_of(" \t");
      cell = a == std::string::npos ? "" : cell.substr(a, b - a + 1);
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size() || !std::isfinite(v))
        throw IoError("line " + std::to_string(line_no) + ": '" + cell + "' is not a finite number");
      row.push_back(v);
      if (end == line.size()) break;
      start = end + 1;
    }
    if (!rows.empty() && row.size() != rows.front().size())
      throw IoError("line " + std::to_string(line_no) + ": expected " + std::to_string(rows.front().size()) +
                    " values, got " + std::to_string(row.size()));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<Vector> load_numeric_rows(const std::string& path) {
  try {
    return parse_numeric_rows(read_text_file(path));
  } catch (const IoError& e) {
    const std::string what = e.what();
    if (what.rfind(path, 0) == 0) throw;
    throw IoError(path + ": " + what);
  }
}

std::vector<std::string> emit_report(const std::string& dir, const nlohmann::json& report,
                                     const std::vector<std::pair<std::string, std::string>>& companions) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError(dir + ": cannot create directory: " + ec.message());
  std::vector<std::string> written;
  const std::string report_path = (fs::path(dir) / "report.json").string();
  write_text_file(report_path, report.dump(1) + "\n");
  written.push_back(report_path);
  for (const auto& [name, body] : companions) {
    const std::string p = (fs::path(dir) / name).string();
    write_text_file(p, body);
    written.push_back(p);
  }
  return written;
}

}  // namespace csdm::io
