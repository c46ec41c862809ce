#pragma once

// Matrix files. Binary layout (all little-endian):
//
//   "MNM1" | u32 version = 1 | u64 rows | u64 cols | rows·cols f64, row-major
//
// CSV is plain numeric rows separated by newlines, no header. A path ending
// in ".csv" selects CSV; anything else is binary.

#include <Eigen/Dense>

#include <filesystem>
#include <string>
#include <string_view>

namespace mnkit::cli {

using Eigen::MatrixXd;

enum class MatrixFormat { binary, csv };

MatrixFormat format_for_path(const std::filesystem::path& path);

// Throws InputError naming the file and the byte offset, row or column at
// fault. Empty matrices are rejected.
MatrixXd read_matrix(const std::filesystem::path& path);
void write_matrix(const std::filesystem::path& path, const MatrixXd& m);

MatrixXd decode_binary(std::string_view bytes, std::string_view source = "<memory>");
std::string encode_binary(const MatrixXd& m);
MatrixXd decode_csv(std::string_view text, std::string_view source = "<memory>");
std::string encode_csv(const MatrixXd& m);

// Whole-file helpers. write_file goes through a temporary and a rename so a
// reader never sees a partial file.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace mnkit::cli
