#pragma once

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "specfield/cube.hpp"
#include "specfield/error.hpp"
#include "specfield/field.hpp"
#include "specfield/geometry.hpp"
#include "specfield/renderer.hpp"

namespace specfield {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

namespace detail {

// Little-endian byte buffer helpers.
class ByteWriter {
 public:
  void magic(const char (&m)[5]) { bytes_.insert(bytes_.end(), m, m + 4); }
  void u16(std::uint16_t v) { put(v); }
  void u32(std::uint32_t v) { put(v); }
  void u64(std::uint64_t v) { put(v); }
  void f32(float v) { put(std::bit_cast<std::uint32_t>(v)); }
  void f32s(std::span<const float> v) {
    for (float x : v) f32(x);
  }
  const std::vector<char>& bytes() const { return bytes_; }

 private:
  template <typename T>
  void put(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  std::vector<char> bytes_;
};

class ByteReader {
 public:
  ByteReader(std::vector<char> bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  void expect_magic(const char (&m)[5]) {
    need(4);
    if (std::memcmp(bytes_.data() + pos_, m, 4) != 0) {
      throw IoError(path_ + ": bad magic, expected '" + std::string(m) + "'");
    }
    pos_ += 4;
  }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  void f32s(std::span<float> out) {
    need(4 * out.size());
    for (auto& v : out) v = f32();
  }
  // Fails unless exactly `payload` bytes remain.
  void expect_remaining(std::size_t payload) const {
    if (bytes_.size() - pos_ != payload) {
      throw IoError(path_ + ": expected " + std::to_string(pos_ + payload) + " bytes, file has " +
                    std::to_string(bytes_.size()));
    }
  }
  void expect_end() const { expect_remaining(0); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) {
      throw IoError(path_ + ": truncated, expected at least " + std::to_string(pos_ + n) + " bytes, file has " +
                    std::to_string(bytes_.size()));
    }
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<T>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i));
    }
    pos_ += sizeof(T);
    return v;
  }
  std::vector<char> bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

inline void write_file(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path);
}

inline std::uint32_t checked_u32(std::size_t v, const char* what) {
  if (v > std::numeric_limits<std::uint32_t>::max()) throw UsageError(std::string(what) + " exceeds 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// HSC1 spectral cubes

inline std::vector<char> encode_cube(const SpectralCube& cube) {
  detail::require_dims(cube.width * cube.height * cube.bands, cube.data.size(), "cube payload length");
  detail::ByteWriter w;
  w.magic("HSC1");
  w.u32(detail::checked_u32(cube.width, "cube width"));
  w.u32(detail::checked_u32(cube.height, "cube height"));
  w.u32(detail::checked_u32(cube.bands, "cube bands"));
  w.f32s(cube.data);
  return w.bytes();
}

inline SpectralCube decode_cube(std::vector<char> bytes, const std::string& path) {
  detail::ByteReader r(std::move(bytes), path);
  r.expect_magic("HSC1");
  SpectralCube cube;
  cube.width = r.u32();
  cube.height = r.u32();
  cube.bands = r.u32();
  const std::size_t n = cube.width * cube.height * cube.bands;
  r.expect_remaining(4 * n);
  cube.data.resize(n);
  r.f32s(cube.data);
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(cube.data[i])) throw IoError(path + ": non-finite value at index " + std::to_string(i));
  }
  return cube;
}

inline void write_cube(const SpectralCube& cube, const std::string& path) { detail::write_file(path, encode_cube(cube)); }
inline SpectralCube read_cube(const std::string& path) { return decode_cube(detail::read_file(path), path); }

// ---------------------------------------------------------------------------
// SEG1 label maps

inline void write_labels(const LabelMap& map, const std::string& path) {
  detail::require_dims(map.width * map.height, map.labels.size(), "label map length");
  detail::ByteWriter w;
  w.magic("SEG1");
  w.u32(detail::checked_u32(map.width, "label width"));
  w.u32(detail::checked_u32(map.height, "label height"));
  for (auto v : map.labels) w.u16(v);
  detail::write_file(path, w.bytes());
}

inline LabelMap read_labels(const std::string& path) {
  detail::ByteReader r(detail::read_file(path), path);
  r.expect_magic("SEG1");
  LabelMap map;
  map.width = r.u32();
  map.height = r.u32();
  r.expect_remaining(2 * map.width * map.height);
  map.labels.resize(map.width * map.height);
  for (auto& v : map.labels) v = r.u16();
  return map;
}

// ---------------------------------------------------------------------------
// Netpbm previews

inline void write_pgm(const std::vector<std::uint8_t>& gray, std::size_t width, std::size_t height, const std::string& path) {
  detail::require_dims(width * height, gray.size(), "PGM pixel count");
  std::string header = "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<char> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), gray.begin(), gray.end());
  detail::write_file(path, bytes);
}

inline void write_ppm(const std::vector<std::uint8_t>& rgb, std::size_t width, std::size_t height, const std::string& path) {
  detail::require_dims(width * height * 3, rgb.size(), "PPM sample count");
  std::string header = "P6\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n";
  std::vector<char> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), rgb.begin(), rgb.end());
  detail::write_file(path, bytes);
}

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

// ---------------------------------------------------------------------------
// Poses

struct PoseFrame {
  std::string path;
  Mat4 camera_to_world;
};

struct PoseFile {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;
  std::size_t width = 0, height = 0;
  double near = 0.0, far = 1.0;
  std::vector<PoseFrame> frames;

  Camera camera(std::size_t i) const { return Camera{fx, fy, cx, cy, width, height, frames.at(i).camera_to_world}; }
};

inline void write_poses(const PoseFile& poses, const std::string& path) {
  std::ostringstream out;
  out << std::setprecision(std::numeric_limits<double>::max_digits10);
  out << "intrinsics " << poses.fx << ' ' << poses.fy << ' ' << poses.cx << ' ' << poses.cy << ' ' << poses.width << ' '
      << poses.height << '\n';
  out << "clip " << poses.near << ' ' << poses.far << '\n';
  for (const auto& f : poses.frames) {
    out << "frame " << f.path << '\n';
    for (int r = 0; r < 4; ++r) {
      out << f.camera_to_world(r, 0) << ' ' << f.camera_to_world(r, 1) << ' ' << f.camera_to_world(r, 2) << ' '
          << f.camera_to_world(r, 3) << '\n';
    }
  }
  const std::string s = out.str();
  detail::write_file(path, std::vector<char>(s.begin(), s.end()));
}

inline PoseFile read_poses(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open pose file " + path);
  PoseFile p;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) -> void {
    throw UsageError(path + ":" + std::to_string(line_no) + ": " + msg);
  };
  auto next_line = [&]() -> bool {
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") != std::string::npos) return true;
    }
    return false;
  };

  if (!next_line()) {
    line_no = 1;
    fail("missing 'intrinsics' line");
  }
  {
    std::istringstream ss(line);
    std::string key;
    if (!(ss >> key >> p.fx >> p.fy >> p.cx >> p.cy >> p.width >> p.height) || key != "intrinsics") {
      fail("expected 'intrinsics fx fy cx cy w h'");
    }
  }
  if (!next_line()) {
    ++line_no;
    fail("missing 'clip near far' line");
  }
  {
    std::istringstream ss(line);
    std::string key;
    if (!(ss >> key >> p.near >> p.far) || key != "clip") fail("expected 'clip near far'");
    if (!(p.near >= 0.0 && p.near < p.far)) fail("clip range must satisfy 0 <= near < far");
  }
  while (next_line()) {
    std::istringstream ss(line);
    std::string key;
    PoseFrame f;
    if (!(ss >> key >> f.path) || key != "frame") fail("expected 'frame <path>'");
    const std::size_t frame_line = line_no;
    for (int r = 0; r < 4; ++r) {
      if (!next_line()) fail("frame matrix truncated");
      std::istringstream row(line);
      for (int c = 0; c < 4; ++c) {
        if (!(row >> f.camera_to_world(r, c))) fail("expected 4 decimals in matrix row");
      }
    }
    const double err = f.camera_to_world.orthonormality_error();
    if (!(err <= 1e-4)) {
      line_no = frame_line;
      fail("rotation of frame '" + f.path + "' is not orthonormal (|R^T R - I| = " + std::to_string(err) + ")");
    }
    p.frames.push_back(std::move(f));
  }
  return p;
}

// ---------------------------------------------------------------------------
// UMF1 checkpoints

inline std::vector<char> encode_checkpoint(const VoxelField& field) {
  const auto& res = field.resolution();
  const auto& lay = field.layout();
  const std::size_t v = res.voxels(), k = lay.endmembers, b = lay.bands, p = lay.per_voxel();
  detail::ByteWriter w;
  w.magic("UMF1");
  w.u32(1);
  w.u32(detail::checked_u32(res.nx, "nx"));
  w.u32(detail::checked_u32(res.ny, "ny"));
  w.u32(detail::checked_u32(res.nz, "nz"));
  w.u32(detail::checked_u32(k, "K"));
  w.u32(detail::checked_u32(b, "B"));
  w.u32(static_cast<std::uint32_t>(kShDegree));
  const auto& bx = field.bounds();
  for (double c : {bx.lo.x, bx.lo.y, bx.lo.z, bx.hi.x, bx.hi.y, bx.hi.z}) w.f32(static_cast<float>(c));
  w.f32(static_cast<float>(field.tau()));
  w.f32(static_cast<float>(field.density_scale()));
  w.f32s(field.endmembers().raw());
  const auto params = field.params();
  auto channel = [&](std::size_t offset, std::size_t width) {
    for (std::size_t i = 0; i < v; ++i)
      for (std::size_t j = 0; j < width; ++j) w.f32(params[i * p + offset + j]);
  };
  channel(lay.density(), 1);
  channel(lay.abundance(), k);
  channel(lay.scaling(), k);
  channel(lay.tint(), 1);
  channel(lay.specular(), b * kShCoeffs);
  return w.bytes();
}

inline VoxelField decode_checkpoint(std::vector<char> bytes, const std::string& path) {
  detail::ByteReader r(std::move(bytes), path);
  r.expect_magic("UMF1");
  if (const auto version = r.u32(); version != 1) throw IoError(path + ": unsupported UMF version " + std::to_string(version));
  GridResolution res;
  res.nx = r.u32();
  res.ny = r.u32();
  res.nz = r.u32();
  const std::size_t k = r.u32(), b = r.u32();
  if (const auto deg = r.u32(); deg != static_cast<std::uint32_t>(kShDegree)) {
    throw IoError(path + ": unsupported SH degree " + std::to_string(deg));
  }
  float bounds[6];
  for (auto& c : bounds) c = r.f32();
  const float tau = r.f32();
  const float density_scale = r.f32();
  VoxelField field(res, Aabb{{bounds[0], bounds[1], bounds[2]}, {bounds[3], bounds[4], bounds[5]}}, k, b, tau, density_scale);
  const auto& lay = field.layout();
  const std::size_t v = res.voxels(), p = lay.per_voxel();
  r.expect_remaining(4 * (b * k + v * p));
  r.f32s(field.endmembers().raw());
  auto params = field.params();
  auto channel = [&](std::size_t offset, std::size_t width) {
    for (std::size_t i = 0; i < v; ++i)
      for (std::size_t j = 0; j < width; ++j) params[i * p + offset + j] = r.f32();
  };
  channel(lay.density(), 1);
  channel(lay.abundance(), k);
  channel(lay.scaling(), k);
  channel(lay.tint(), 1);
  channel(lay.specular(), b * kShCoeffs);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!std::isfinite(params[i])) {
      throw NumericError(path + ": non-finite parameter in voxel " + std::to_string(i / p));
    }
  }
  return field;
}

inline void write_checkpoint(const VoxelField& field, const std::string& path) {
  detail::write_file(path, encode_checkpoint(field));
}
inline VoxelField read_checkpoint(const std::string& path) { return decode_checkpoint(detail::read_file(path), path); }

// ---------------------------------------------------------------------------
// Text spectra

/// One spectrum as whitespace-separated values.
inline Spectrum read_spectrum(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open spectrum file " + path);
  Spectrum s;
  std::string tok;
  while (in >> tok) {
    try {
      std::size_t used = 0;
      s.values.push_back(std::stod(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw UsageError(path + ": not a number: '" + tok + "'");
    }
  }
  if (s.values.empty()) throw UsageError(path + ": empty spectrum");
  return s;
}

/// "B K" header then one line of B values per endmember.
inline void write_endmembers(const EndmemberDictionary& e, const std::string& path) {
  std::ostringstream out;
  out << std::setprecision(std::numeric_limits<float>::max_digits10);
  out << e.band_count() << ' ' << e.endmember_count() << '\n';
  for (std::size_t k = 0; k < e.endmember_count(); ++k) {
    for (std::size_t b = 0; b < e.band_count(); ++b) out << (b ? " " : "") << static_cast<float>(e(b, k));
    out << '\n';
  }
  const std::string s = out.str();
  detail::write_file(path, std::vector<char>(s.begin(), s.end()));
}

inline EndmemberDictionary read_endmembers(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open endmember file " + path);
  std::size_t b = 0, k = 0;
  if (!(in >> b >> k) || b == 0 || k == 0) throw UsageError(path + ": expected 'B K' header with positive sizes");
  EndmemberDictionary e(b, k);
  for (std::size_t kk = 0; kk < k; ++kk) {
    for (std::size_t bb = 0; bb < b; ++bb) {
      double v = 0.0;
      if (!(in >> v)) throw UsageError(path + ": truncated at endmember " + std::to_string(kk) + ", band " + std::to_string(bb));
      e.set(bb, kk, v);
    }
  }
  return e;
}

// ---------------------------------------------------------------------------
// Manifest

inline std::string sha256_hex(const std::vector<char>& bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256 computation failed");
  }
  std::ostringstream out;
  for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return out.str();
}

inline std::string sha256_file(const std::string& path) { return sha256_hex(detail::read_file(path)); }

/// `key = value` lines plus one `file <path> <sha256>` line per artifact.
struct Manifest {
  std::vector<std::pair<std::string, std::string>> entries;
  std::vector<std::pair<std::string, std::string>> files;  // relative path, sha256

  void set(const std::string& key, const std::string& value) { entries.emplace_back(key, value); }
  std::string get(const std::string& key) const {
    for (const auto& [k, v] : entries)
      if (k == key) return v;
    throw UsageError("manifest has no key '" + key + "'");
  }
};

inline void write_manifest(const Manifest& m, const std::string& path) {
  std::ostringstream out;
  for (const auto& [k, v] : m.entries) out << k << " = " << v << '\n';
  for (const auto& [f, h] : m.files) out << "file " << f << ' ' << h << '\n';
  const std::string s = out.str();
  detail::write_file(path, std::vector<char>(s.begin(), s.end()));
}

inline Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path);
  Manifest m;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("file ", 0) == 0) {
      std::istringstream ss(line.substr(5));
      std::string f, h;
      if (!(ss >> f >> h)) throw UsageError(path + ":" + std::to_string(line_no) + ": malformed file entry");
      m.files.emplace_back(f, h);
      continue;
    }
    const auto eq = line.find(" = ");
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(line_no) + ": expected 'key = value'");
    m.entries.emplace_back(line.substr(0, eq), line.substr(eq + 3));
  }
  return m;
}

/// Checks every listed file's digest relative to the manifest's directory.
inline void verify_manifest(const Manifest& m, const std::filesystem::path& root) {
  for (const auto& [f, h] : m.files) {
    const auto full = (root / f).string();
    const auto actual = sha256_file(full);
    if (actual != h) throw IoError("checksum mismatch for " + full + ": manifest " + h + ", file " + actual);
  }
}

}  // namespace specfield
