#pragma once

// Binary matrix files: one line of JSON
//   {"dims":[rows,cols],"dtype":"f64","endianness":"little","layout":"row-major"}
// terminated by '\n', followed by rows*cols IEEE-754 little-endian doubles.
// One-dimensional arrays use "dims":[n].

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "spat/error.hpp"
#include "spat/geometry.hpp"
#include "spat/solver.hpp"
#include "spat/types.hpp"

namespace spat {

static_assert(std::endian::native == std::endian::little,
              "binary matrix I/O assumes a little-endian host");

namespace detail {

inline void write_binary(const std::filesystem::path& path,
                         const std::vector<std::int64_t>& dims,
                         const std::vector<double>& data) {
  nlohmann::json header = {{"dims", dims},
                           {"dtype", "f64"},
                           {"layout", "row-major"},
                           {"endianness", "little"}};
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::string line = header.dump() + "\n";
  out.write(line.data(), std::streamsize(line.size()));
  out.write(reinterpret_cast<const char*>(data.data()),
            std::streamsize(data.size() * sizeof(double)));
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace detail

inline void write_matrix(const std::filesystem::path& path, const Matrix& m) {
  std::vector<double> data(std::size_t(m.size()));
  std::size_t k = 0;
  for (Index r = 0; r < m.rows(); ++r)
    for (Index c = 0; c < m.cols(); ++c) data[k++] = m(r, c);
  detail::write_binary(path, {m.rows(), m.cols()}, data);
}

inline void write_vector(const std::filesystem::path& path, const Vector& v) {
  detail::write_binary(path, {v.size()}, std::vector<double>(v.begin(), v.end()));
}

/// Reads a binary matrix file; 1-D arrays come back as an n x 1 matrix.
inline Matrix read_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError(path.string() + ": missing header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad header: " + e.what());
  }
  if (header.value("dtype", "") != "f64" ||
      header.value("layout", "") != "row-major" ||
      header.value("endianness", "") != "little")
    throw IoError(path.string() + ": unsupported dtype/layout/endianness");
  const auto dims = header.at("dims").get<std::vector<std::int64_t>>();
  if (dims.empty() || dims.size() > 2 ||
      std::any_of(dims.begin(), dims.end(), [](auto d) { return d < 0; }))
    throw IoError(path.string() + ": dims must have 1 or 2 nonnegative entries");
  const Index rows = dims[0], cols = dims.size() == 2 ? dims[1] : 1;
  std::vector<double> data(std::size_t(rows * cols));
  in.read(reinterpret_cast<char*>(data.data()),
          std::streamsize(data.size() * sizeof(double)));
  if (in.gcount() != std::streamsize(data.size() * sizeof(double)))
    throw IoError(path.string() + ": truncated data");
  Matrix m(rows, cols);
  std::size_t k = 0;
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = data[k++];
  return m;
}

inline Vector read_vector(const std::filesystem::path& path) {
  const Matrix m = read_matrix(path);
  if (m.cols() != 1 && m.rows() != 1)
    throw IoError(path.string() + ": expected a one-dimensional array");
  return m.reshaped();
}

/// Field stored as an n_y x n_x image.
inline void write_field(const std::filesystem::path& path, const ObjectField& f) {
  write_matrix(path, f.as_image());
}

/// 8-bit binary PGM of an image, min-max normalized (after optional
/// clamping of negatives to 0). Constant images map to mid gray.
inline void write_pgm(const std::filesystem::path& path, const Matrix& image,
                      bool clamp_negative) {
  if (!image.allFinite()) throw InvalidArgument("image has non-finite values");
  Matrix img = clamp_negative ? Matrix(image.cwiseMax(0.0)) : image;
  const double lo = img.size() ? img.minCoeff() : 0.0;
  const double hi = img.size() ? img.maxCoeff() : 0.0;
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << img.cols() << " " << img.rows() << "\n255\n";
  for (Index r = 0; r < img.rows(); ++r)
    for (Index c = 0; c < img.cols(); ++c) {
      const double t = hi > lo ? (img(r, c) - lo) / (hi - lo) : 0.5;
      const auto px = static_cast<unsigned char>(std::lround(255.0 * t));
      out.put(static_cast<char>(px));
    }
  if (!out) throw IoError("failed writing " + path.string());
}

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<unsigned char> pixels;  // row-major
};

inline GrayImage read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  int maxval = 0;
  GrayImage img;
  in >> magic >> img.width >> img.height >> maxval;
  if (magic != "P5" || maxval != 255 || img.width < 0 || img.height < 0)
    throw IoError(path.string() + ": not an 8-bit P5 image");
  in.get();
  img.pixels.resize(std::size_t(img.width) * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()),
          std::streamsize(img.pixels.size()));
  if (in.gcount() != std::streamsize(img.pixels.size()))
    throw IoError(path.string() + ": truncated image");
  return img;
}

/// Writes `path` as a PGM and the raw field next to it with extension .bin.
inline void export_image(const ObjectField& field, const std::filesystem::path& path,
                         bool clamp_negative) {
  write_pgm(path, field.as_image(), clamp_negative);
  auto raw = path;
  raw.replace_extension(".bin");
  write_field(raw, field);
}

inline void save_factorization(const std::filesystem::path& dir,
                               const RidgeFactorization& f) {
  std::filesystem::create_directories(dir);
  write_matrix(dir / "q_top.bin", f.q_top());
  write_matrix(dir / "r.bin", f.r());
  std::ofstream meta(dir / "factorization.json", std::ios::trunc);
  if (!meta) throw IoError("cannot write " + (dir / "factorization.json").string());
  meta << nlohmann::json{{"lambda", f.lambda()},
                         {"rows", f.rows()},
                         {"cols", f.cols()}}
              .dump()
       << "\n";
}

inline RidgeFactorization load_factorization(const std::filesystem::path& dir) {
  std::ifstream meta(dir / "factorization.json");
  if (!meta) throw IoError("no factorization in " + dir.string());
  const auto j = nlohmann::json::parse(meta);
  return RidgeFactorization::from_parts(read_matrix(dir / "q_top.bin"),
                                        read_matrix(dir / "r.bin"),
                                        j.at("lambda").get<double>());
}

}  // namespace spat
