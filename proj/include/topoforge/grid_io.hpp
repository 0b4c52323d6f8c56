#pragma once

// Binary density grid file:
//   "TOPO" | u8 version = 1 | u32 nely | u32 nelx | nelx*nely float32
// All integers and floats little-endian; values row-major, row 0 on top.

#include <cstdint>
#include <filesystem>
#include <string>

#include "topoforge/density_field.hpp"

namespace topoforge::io {

inline constexpr std::uint8_t kGridFormatVersion = 1;

std::string encode_grid(const DensityField& field);
/// Throws LoadError naming `source` on a bad magic, version, size, or payload.
DensityField decode_grid(const std::string& bytes, const std::string& source = "<memory>");

/// Writes via a temporary sibling file and rename. Throws IoError.
void write_grid(const std::filesystem::path& path, const DensityField& field);
/// Throws LoadError naming the path.
DensityField read_grid(const std::filesystem::path& path);

/// Whole-file helpers shared by the binary formats.
std::string read_file(const std::filesystem::path& path);
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

}  // namespace topoforge::io
