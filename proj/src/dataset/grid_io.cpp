#include "topoforge/grid_io.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "../binary_codec.hpp"
#include "topoforge/errors.hpp"

namespace topoforge::io {

std::string encode_grid(const DensityField& field) {
  field.check_shape();
  std::string out;
  out.reserve(13 + 4 * field.size());
  out.append("TOPO");
  detail::put_u8(out, kGridFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(field.nely));
  detail::put_u32(out, static_cast<std::uint32_t>(field.nelx));
  for (double v : field.values) detail::put_f32(out, static_cast<float>(v));
  return out;
}

DensityField decode_grid(const std::string& bytes, const std::string& source) {
  detail::Reader r(bytes, source);
  if (r.str(4) != "TOPO") throw LoadError(source + ": bad magic, not a TOPO grid file");
  const auto version = r.u8();
  if (version != kGridFormatVersion) {
    throw LoadError(source + ": unsupported grid format version " + std::to_string(version));
  }
  const auto nely = r.u32();
  const auto nelx = r.u32();
  if (nelx < 1 || nely < 1 || nelx > 1u << 15 || nely > 1u << 15) {
    throw LoadError(source + ": implausible grid dimensions " + std::to_string(nelx) + "x" + std::to_string(nely));
  }
  const std::size_t n = static_cast<std::size_t>(nelx) * nely;
  if (r.remaining() != 4 * n) {
    throw LoadError(source + ": payload holds " + std::to_string(r.remaining()) + " bytes, expected " +
                    std::to_string(4 * n));
  }
  DensityField f(static_cast<int>(nelx), static_cast<int>(nely));
  for (std::size_t i = 0; i < n; ++i) {
    const float v = r.f32();
    if (!std::isfinite(v)) throw LoadError(source + ": non-finite value at index " + std::to_string(i));
    f.values[i] = v;
  }
  return f;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(path.string() + ": cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw LoadError(path.string() + ": read failed");
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError(tmp.string() + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError(tmp.string() + ": write failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError(path.string() + ": rename failed: " + ec.message());
}

void write_grid(const std::filesystem::path& path, const DensityField& field) {
  write_file_atomic(path, encode_grid(field));
}

DensityField read_grid(const std::filesystem::path& path) { return decode_grid(read_file(path), path.string()); }

}  // namespace topoforge::io
