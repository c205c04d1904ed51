#pragma once

#include <filesystem>
#include <iosfwd>

#include "mecq/linalg.hpp"

namespace mecq {

// Binary matrix dump: "MECM", u32 rows, u32 cols, row-major f64, all
// little-endian.
void write_matrix(std::ostream& out, const Matrix& m);
void write_matrix(const std::filesystem::path& path, const Matrix& m);

// Throws DataError on a bad magic, truncated payload or non-finite entry.
Matrix read_matrix(std::istream& in);
Matrix read_matrix(const std::filesystem::path& path);

}  // namespace mecq
