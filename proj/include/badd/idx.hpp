// Copyright 2026 The badd-mnist Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// IDX (MNIST) reader. Unsigned-byte payloads only: 0x00000803 for image
// stacks and 0x00000801 for label vectors. Files may be gzip-compressed.

#pragma once

#include <zlib.h>

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "badd/tensor.hpp"

namespace badd {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxFile {
  std::uint32_t magic = 0;
  Shape dims;
  std::vector<std::uint8_t> values;

  std::size_t count() const { return dims.empty() ? 0 : dims[0]; }

  /// (N, rows, cols) with values scaled to [0, 1].
  template <typename T = Real>
  Tensor<T> images() const {
    if (magic != kIdxImagesMagic) throw RuntimeError("IDX file does not hold images");
    Tensor<T> t(dims);
    for (std::size_t i = 0; i < values.size(); ++i) t[i] = static_cast<T>(values[i]) / T{255};
    return t;
  }

  std::vector<int> labels() const {
    if (magic != kIdxLabelsMagic) throw RuntimeError("IDX file does not hold labels");
    return {values.begin(), values.end()};
  }
};

inline std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline IdxFile parse_idx(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4) throw RuntimeError("truncated payload: IDX header shorter than 4 bytes");
  IdxFile f;
  f.magic = read_be32(bytes, 0);
  std::size_t rank = 0;
  if (f.magic == kIdxImagesMagic) rank = 3;
  else if (f.magic == kIdxLabelsMagic) rank = 1;
  else {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", f.magic);
    throw RuntimeError(std::string("bad magic ") + buf + " (expected 0x00000801 or 0x00000803)");
  }
  const std::size_t header = 4 + 4 * rank;
  if (bytes.size() < header) throw RuntimeError("truncated payload: IDX header incomplete");
  std::size_t total = 1;
  for (std::size_t d = 0; d < rank; ++d) {
    const std::size_t e = read_be32(bytes, 4 + 4 * d);
    if (e == 0) throw RuntimeError("dimension overflow: zero extent in IDX dimension " + std::to_string(d));
    if (total > std::numeric_limits<std::size_t>::max() / e)
      throw RuntimeError("dimension overflow: IDX extents exceed addressable size");
    total *= e;
    f.dims.push_back(e);
  }
  if (total > bytes.size() - header)
    throw RuntimeError("truncated payload: expected " + std::to_string(total) + " bytes, found " +
                       std::to_string(bytes.size() - header));
  f.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header),
                  bytes.begin() + static_cast<std::ptrdiff_t>(header + total));
  return f;
}

/// Whole file contents; gzip streams (1f 8b) are inflated transparently.
inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  gzFile gz = gzopen(path.string().c_str(), "rb");
  if (!gz) throw RuntimeError("cannot open " + path.string());
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  for (;;) {
    const int n = gzread(gz, buf, sizeof buf);
    if (n < 0) {
      int code = 0;
      std::string msg = gzerror(gz, &code);
      gzclose(gz);
      throw RuntimeError("read error in " + path.string() + ": " + msg);
    }
    if (n == 0) break;
    out.insert(out.end(), buf, buf + n);
  }
  gzclose(gz);
  return out;
}

inline IdxFile read_idx(const std::filesystem::path& path) {
  try {
    return parse_idx(read_file_bytes(path));
  } catch (const RuntimeError& e) {
    throw RuntimeError(path.string() + ": " + e.what());
  }
}

/// One MNIST split held as raw bytes (exact), 28x28 per image.
struct MnistSplit {
  std::vector<std::uint8_t> pixels;
  std::vector<int> labels;
  std::size_t rows = 28, cols = 28;

  std::size_t size() const { return labels.size(); }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * rows * cols, rows * cols};
  }
};

/// Finds `<prefix>-images-idx3-ubyte[.gz]` and `<prefix>-labels-idx1-ubyte[.gz]`
/// in `dir`; prefix is "train" or "t10k".
inline MnistSplit load_mnist(const std::filesystem::path& dir, const std::string& prefix) {
  auto find = [&](const std::string& stem) {
    for (const auto& cand : {dir / stem, dir / (stem + ".gz")})
      if (std::filesystem::exists(cand)) return cand;
    throw RuntimeError("missing MNIST file " + (dir / stem).string() + "[.gz]");
  };
  const auto img = read_idx(find(prefix + "-images-idx3-ubyte"));
  const auto lab = read_idx(find(prefix + "-labels-idx1-ubyte"));
  if (img.magic != kIdxImagesMagic) throw RuntimeError("images file has label magic");
  if (lab.magic != kIdxLabelsMagic) throw RuntimeError("labels file has image magic");
  if (img.count() != lab.count())
    throw RuntimeError("image count " + std::to_string(img.count()) + " != label count " + std::to_string(lab.count()));
  MnistSplit s;
  s.rows = img.dims[1];
  s.cols = img.dims[2];
  s.pixels = img.values;
  s.labels = lab.labels();
  for (int l : s.labels)
    if (l < 0 || l > 9) throw RuntimeError("label " + std::to_string(l) + " outside [0,10)");
  return s;
}

}  // namespace badd
