#include "mecq/matrix_io.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>

#include "mecq/binary_io.hpp"

namespace mecq {

namespace {
constexpr std::array<char, 4> kMagic = {'M', 'E', 'C', 'M'};
}

void write_matrix(std::ostream& out, const Matrix& m) {
  out.write(kMagic.data(), kMagic.size());
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
  io::put<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) io::put<double>(out, m(i, j));
}

void write_matrix(const std::filesystem::path& path, const Matrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  write_matrix(out, m);
}

Matrix read_matrix(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic)
    throw DataError("matrix dump: bad magic (expected MECM)");
  const auto rows = io::get<std::uint32_t>(in, "matrix rows");
  const auto cols = io::get<std::uint32_t>(in, "matrix cols");
  Matrix m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i) {
    for (std::uint32_t j = 0; j < cols; ++j) {
      const double v = io::get<double>(in, "matrix payload");
      if (!std::isfinite(v)) throw DataError("matrix dump: non-finite entry");
      m(i, j) = v;
    }
  }
  return m;
}

Matrix read_matrix(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return read_matrix(in);
}

}  // namespace mecq
