#include "matrix_io.hpp"

#include "mnkit/errors.hpp"

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace mnkit::cli {

namespace {

constexpr std::size_t header_bytes = 24;
constexpr std::uint32_t binary_version = 1;

template <typename T>
T load_le(std::string_view bytes, std::size_t offset) {
  std::uint64_t raw = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    raw |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  }
  if constexpr (std::is_same_v<T, double>) {
    return std::bit_cast<double>(raw);
  } else {
    return static_cast<T>(raw);
  }
}

template <typename T>
void store_le(std::string& out, T value) {
  std::uint64_t raw;
  if constexpr (std::is_same_v<T, double>) {
    raw = std::bit_cast<std::uint64_t>(value);
  } else {
    raw = static_cast<std::uint64_t>(value);
  }
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((raw >> (8 * i)) & 0xff));
}

std::string where(std::string_view source) { return std::string(source) + ": "; }

}  // namespace

MatrixFormat format_for_path(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? MatrixFormat::csv : MatrixFormat::binary;
}

MatrixXd decode_binary(std::string_view bytes, std::string_view source) {
  if (bytes.size() < header_bytes) {
    throw InputError(where(source) + "truncated header: " + std::to_string(bytes.size()) +
                     " bytes, need 24 (failed at byte offset " + std::to_string(bytes.size()) + ")");
  }
  if (bytes.substr(0, 4) != "MNM1") throw InputError(where(source) + "bad magic at byte offset 0 (expected MNM1)");
  const auto version = load_le<std::uint32_t>(bytes, 4);
  if (version != binary_version) {
    throw InputError(where(source) + "unsupported version " + std::to_string(version) + " at byte offset 4");
  }
  const auto rows = load_le<std::uint64_t>(bytes, 8);
  const auto cols = load_le<std::uint64_t>(bytes, 16);
  if (rows == 0 || cols == 0) throw InputError(where(source) + "empty matrix declared at byte offset 8");
  const std::uint64_t limit = (std::numeric_limits<std::uint64_t>::max() - header_bytes) / 8;
  if (rows > limit / cols) throw InputError(where(source) + "dimensions at byte offset 8 overflow the payload size");
  const std::uint64_t expected = header_bytes + 8 * rows * cols;
  if (bytes.size() < expected) {
    throw InputError(where(source) + "truncated payload: expected " + std::to_string(expected) + " bytes, file ends at byte offset " +
                     std::to_string(bytes.size()));
  }
  if (bytes.size() > expected) {
    throw InputError(where(source) + "trailing data after byte offset " + std::to_string(expected));
  }
  MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  std::size_t offset = header_bytes;
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      m(i, j) = load_le<double>(bytes, offset);
      offset += 8;
    }
  }
  return m;
}

std::string encode_binary(const MatrixXd& m) {
  if (m.size() == 0) throw InputError("cannot write an empty matrix");
  std::string out = "MNM1";
  out.reserve(header_bytes + 8 * static_cast<std::size_t>(m.size()));
  store_le(out, binary_version);
  store_le(out, static_cast<std::uint64_t>(m.rows()));
  store_le(out, static_cast<std::uint64_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) store_le(out, m(i, j));
  return out;
}

MatrixXd decode_csv(std::string_view text, std::string_view source) {
  std::vector<std::vector<double>> rows;
  std::size_t pos = 0;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    const std::size_t row = rows.size() + 1;
    if (line.empty()) {
      if (pos >= text.size()) break;
      throw InputError(where(source) + "row " + std::to_string(row) + " is empty");
    }
    std::vector<double>& values = rows.emplace_back();
    std::size_t cell_start = 0;
    while (true) {
      std::size_t cell_end = line.find(',', cell_start);
      if (cell_end == std::string_view::npos) cell_end = line.size();
      std::string_view cell = line.substr(cell_start, cell_end - cell_start);
      while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
      while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t')) cell.remove_suffix(1);
      if (!cell.empty() && cell.front() == '+') cell.remove_prefix(1);
      double value = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
      if (cell.empty() || ec != std::errc() || ptr != cell.data() + cell.size()) {
        throw InputError(where(source) + "row " + std::to_string(row) + ", column " +
                         std::to_string(values.size() + 1) + ": non-numeric cell '" + std::string(cell) + "'");
      }
      values.push_back(value);
      if (cell_end == line.size()) break;
      cell_start = cell_end + 1;
    }
    if (values.size() != rows.front().size()) {
      throw InputError(where(source) + "row " + std::to_string(row) + " has " + std::to_string(values.size()) +
                       " columns, row 1 has " + std::to_string(rows.front().size()));
    }
  }
  if (rows.empty()) throw InputError(where(source) + "no data rows");
  MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  return m;
}

std::string encode_csv(const MatrixXd& m) {
  if (m.size() == 0) throw InputError("cannot write an empty matrix");
  std::string out;
  char buf[32];
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      std::snprintf(buf, sizeof(buf), "%.17g", m(i, j));
      if (j > 0) out.push_back(',');
      out += buf;
    }
    out.push_back('\n');
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + path.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw InputError("write failed for " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

MatrixXd read_matrix(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  return format_for_path(path) == MatrixFormat::csv ? decode_csv(bytes, path.string())
                                                    : decode_binary(bytes, path.string());
}

void write_matrix(const std::filesystem::path& path, const MatrixXd& m) {
  write_file(path, format_for_path(path) == MatrixFormat::csv ? encode_csv(m) : encode_binary(m));
}

}  // namespace mnkit::cli
