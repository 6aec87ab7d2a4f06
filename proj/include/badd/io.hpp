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

// On-disk formats.
//
// Dataset directory ("badd-ds-v1"):
//   manifest.json                 spec, counts, per-class alignment audits
//   <split>_images.f32            N x 3 x 28 x 28 little-endian float32
//   <split>_gray.u8               N x 28 x 28 raw MNIST bytes
//   <split>_samples.csv           index,digit,bg_index,fg_index,aligned_bg,aligned_fg,aligned
//
// Checkpoint ("badd-ckpt-v1"): the line "badd-ckpt-v1\n", a little-endian
// u64 header length, a JSON header (network spec, tensor index, seed,
// optional bias-source section) and the float32 payload in index order.

#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "badd/training.hpp"

namespace badd {

using json = nlohmann::json;

inline constexpr const char* kDatasetFormat = "badd-ds-v1";
inline constexpr const char* kCheckpointFormat = "badd-ckpt-v1";

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

inline void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw RuntimeError("cannot write " + p.string());
  f << s;
  if (!f) throw RuntimeError("write failed for " + p.string());
}

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  if (!f) throw RuntimeError("cannot open " + p.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

template <typename T>
void write_raw(const std::filesystem::path& p, const std::vector<T>& v) {
  std::ofstream f(p, std::ios::binary);
  if (!f) throw RuntimeError("cannot write " + p.string());
  f.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(T)));
  if (!f) throw RuntimeError("write failed for " + p.string());
}

template <typename T>
std::vector<T> read_raw(const std::filesystem::path& p, std::size_t expected) {
  const auto bytes = read_text(p);
  if (bytes.size() != expected * sizeof(T))
    throw RuntimeError(p.string() + ": expected " + std::to_string(expected * sizeof(T)) + " bytes, found " +
                       std::to_string(bytes.size()));
  std::vector<T> v(expected);
  std::memcpy(v.data(), bytes.data(), bytes.size());
  return v;
}

// ---------------------------------------------------------------------------
// JSON mappings.

inline json palette_to_json(const ColorPalette& p) {
  json a = json::array();
  for (const auto& c : p.colors) a.push_back({c[0], c[1], c[2]});
  return a;
}

inline ColorPalette palette_from_json(const json& j) {
  ColorPalette p;
  for (const auto& c : j) {
    if (!c.is_array() || c.size() != 3) throw ConfigError("palette entries must be RGB triples");
    p.colors.push_back({c[0].get<Real>(), c[1].get<Real>(), c[2].get<Real>()});
  }
  p.validate();
  return p;
}

inline json audit_to_json(const CorrelationAudit& a) {
  json j;
  j["bg_rate"] = a.bg_rate;
  j["class_count"] = a.class_count;
  j["overall_bg"] = a.overall_bg;
  if (a.fg_rate) j["fg_rate"] = *a.fg_rate;
  if (a.overall_fg) j["overall_fg"] = *a.overall_fg;
  j["overall_aligned"] = a.overall_aligned;
  j["n_aligned"] = a.n_aligned;
  j["n_conflicting"] = a.n_conflicting;
  return j;
}

inline json network_spec_to_json(const NetworkSpec& s) {
  json layers = json::array();
  for (const auto& l : s.layers)
    layers.push_back({{"kind", to_string(l.kind)},
                      {"name", l.name},
                      {"in_channels", l.in_channels},
                      {"out_channels", l.out_channels},
                      {"kernel", l.kernel},
                      {"stride", l.stride},
                      {"padding", l.padding}});
  return {{"layers", layers},
          {"feature_dim", s.feature_dim},
          {"num_classes", s.num_classes},
          {"concat_dim", s.concat_dim}};
}

inline NetworkSpec network_spec_from_json(const json& j) {
  NetworkSpec s;
  for (const auto& l : j.at("layers"))
    s.layers.push_back({layer_kind_from_string(l.at("kind").get<std::string>()), l.at("name").get<std::string>(),
                        l.at("in_channels").get<std::size_t>(), l.at("out_channels").get<std::size_t>(),
                        l.at("kernel").get<std::size_t>(), l.at("stride").get<std::size_t>(),
                        l.at("padding").get<std::size_t>()});
  s.feature_dim = j.at("feature_dim").get<std::size_t>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.concat_dim = j.at("concat_dim").get<std::size_t>();
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Dataset container.

struct DatasetBundle {
  std::string variant;  // "biased-mnist" or "fb-biased-mnist"
  BiasedDataset train;
  BiasedDataset test;
};

namespace detail {
inline json split_manifest(const BiasedDataset& ds) {
  json j{{"count", ds.size()}, {"q", ds.spec.q}, {"seed", ds.spec.seed}};
  if (ds.size() && ds.has_attributes()) j["audit"] = audit_to_json(audit_correlation(ds));
  return j;
}

inline void write_split(const std::filesystem::path& dir, const BiasedDataset& ds) {
  const std::string s = to_string(ds.split);
  write_raw(dir / (s + "_images.f32"), ds.images);
  write_raw(dir / (s + "_gray.u8"), ds.gray);
  std::ostringstream csv;
  csv << "index,digit,bg_index,fg_index,aligned_bg,aligned_fg,aligned\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    csv << i << ',' << ds.digits[i] << ',' << (ds.has_attributes() ? ds.bg_index[i] : -1) << ','
        << (ds.has_fg() ? ds.fg_index[i] : -1) << ',' << (ds.has_attributes() ? int(ds.aligned_bg[i]) : -1) << ','
        << (ds.has_fg() ? int(ds.aligned_fg[i]) : -1) << ',' << (ds.has_attributes() ? int(ds.aligned[i]) : -1)
        << '\n';
  }
  write_text(dir / (s + "_samples.csv"), csv.str());
}

inline BiasedDataset read_split(const std::filesystem::path& dir, Split split, const json& meta, BiasSpec spec) {
  const std::string s = to_string(split);
  BiasedDataset ds;
  ds.split = split;
  spec.q = meta.at("q").get<double>();
  spec.seed = meta.at("seed").get<std::uint64_t>();
  ds.spec = spec;
  const auto n = meta.at("count").get<std::size_t>();
  ds.images = read_raw<Real>(dir / (s + "_images.f32"), n * 3 * kImagePixels);
  ds.gray = read_raw<std::uint8_t>(dir / (s + "_gray.u8"), n * kImagePixels);
  std::istringstream csv(read_text(dir / (s + "_samples.csv")));
  std::string line;
  std::getline(csv, line);
  if (line != "index,digit,bg_index,fg_index,aligned_bg,aligned_fg,aligned")
    throw RuntimeError((dir / (s + "_samples.csv")).string() + ": unexpected header");
  bool attrs = true, fg = true;
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::getline(csv, line)) throw RuntimeError(s + "_samples.csv: truncated at row " + std::to_string(i));
    std::array<long, 7> v{};
    std::istringstream ls(line);
    for (auto& x : v) {
      std::string cell;
      if (!std::getline(ls, cell, ',')) throw RuntimeError(s + "_samples.csv: short row " + std::to_string(i));
      x = std::stol(cell);
    }
    if (static_cast<std::size_t>(v[0]) != i) throw RuntimeError(s + "_samples.csv: row index mismatch");
    if (v[1] < 0 || v[1] > 9) throw RuntimeError(s + "_samples.csv: digit out of range");
    ds.digits.push_back(static_cast<int>(v[1]));
    attrs = attrs && v[2] >= 0;
    fg = fg && v[3] >= 0;
    if (attrs) {
      ds.bg_index.push_back(static_cast<int>(v[2]));
      ds.aligned_bg.push_back(static_cast<std::uint8_t>(v[4]));
      ds.aligned.push_back(static_cast<std::uint8_t>(v[6]));
    }
    if (fg) {
      ds.fg_index.push_back(static_cast<int>(v[3]));
      ds.aligned_fg.push_back(static_cast<std::uint8_t>(v[5]));
    }
  }
  if (!attrs) ds = strip_attributes(ds);
  else if (!fg) {
    ds.fg_index.clear();
    ds.aligned_fg.clear();
  }
  for (std::size_t i = 0; i < ds.bg_index.size(); ++i) {
    bool a = is_aligned(ds.digits[i], ds.bg_index[i]);
    if (ds.has_fg()) a = a && is_aligned(ds.digits[i], ds.fg_index[i]);
    if (a != bool(ds.aligned[i])) throw RuntimeError(s + "_samples.csv: alignment flag disagrees with indices");
  }
  return ds;
}
}  // namespace detail

inline json dataset_manifest(const DatasetBundle& b) {
  json spec{{"bg_palette", palette_to_json(b.train.spec.bg_palette)}};
  if (b.train.spec.fg_palette) spec["fg_palette"] = palette_to_json(*b.train.spec.fg_palette);
  return {{"format", kDatasetFormat},
          {"variant", b.variant},
          {"fg_threshold", kForegroundThreshold},
          {"spec", spec},
          {"splits", {{"train", detail::split_manifest(b.train)}, {"test", detail::split_manifest(b.test)}}}};
}

inline void save_dataset(const std::filesystem::path& dir, const DatasetBundle& b) {
  std::filesystem::create_directories(dir);
  write_text(dir / "manifest.json", dataset_manifest(b).dump(2) + "\n");
  detail::write_split(dir, b.train);
  detail::write_split(dir, b.test);
}

inline DatasetBundle load_dataset(const std::filesystem::path& dir) {
  json m;
  try {
    m = json::parse(read_text(dir / "manifest.json"));
  } catch (const json::exception& e) {
    throw RuntimeError((dir / "manifest.json").string() + ": " + e.what());
  }
  if (m.value("format", "") != kDatasetFormat)
    throw RuntimeError((dir / "manifest.json").string() + ": not a " + kDatasetFormat + " manifest");
  DatasetBundle b;
  b.variant = m.at("variant").get<std::string>();
  BiasSpec spec;
  spec.bg_palette = palette_from_json(m.at("spec").at("bg_palette"));
  if (m.at("spec").contains("fg_palette")) spec.fg_palette = palette_from_json(m.at("spec").at("fg_palette"));
  b.train = detail::read_split(dir, Split::train, m.at("splits").at("train"), spec);
  b.test = detail::read_split(dir, Split::test, m.at("splits").at("test"), spec);
  return b;
}

// ---------------------------------------------------------------------------
// Checkpoints.

struct Checkpoint {
  Model<Real> model;
  std::uint64_t seed = 0;
  std::optional<BiasSource> source;
  json extra = json::object();
};

namespace detail {
struct TensorWriter {
  json index = json::array();
  std::string payload;

  void add(const std::string& name, const std::string& role, const Tensor<Real>& t) {
    index.push_back({{"name", name}, {"role", role}, {"shape", t.shape()}, {"offset", payload.size() / sizeof(float)}});
    const auto* p = reinterpret_cast<const char*>(t.data());
    payload.append(p, t.size() * sizeof(float));
  }
  void add_state(const std::string& prefix, const ModelState<Real>& s) {
    for (const auto& [k, v] : s.params) add(prefix + k, "param", v);
    for (const auto& [k, v] : s.buffers) add(prefix + k, "buffer", v);
  }
};

struct TensorReader {
  std::map<std::string, std::pair<std::string, Tensor<Real>>> tensors;

  Tensor<Real> take(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw RuntimeError("checkpoint lacks tensor '" + name + "'");
    auto t = std::move(it->second.second);
    tensors.erase(it);
    return t;
  }
  ModelState<Real> take_state(const std::string& prefix, const NetworkSpec& spec) {
    ModelState<Real> s;
    for (const auto& p : parameter_layout(spec)) s.params.emplace(p.name, take(prefix + p.name));
    for (const auto& b : buffer_layout(spec)) s.buffers.emplace(b.name, take(prefix + b.name));
    validate_state(spec, s);
    return s;
  }
};
}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& c) {
  detail::TensorWriter w;
  w.add_state("", c.model.state);
  json header{{"format", kCheckpointFormat},
              {"spec", network_spec_to_json(c.model.spec)},
              {"seed", c.seed},
              {"extra", c.extra}};
  if (c.source) {
    const auto& s = *c.source;
    json bs{{"kind", to_string(s.kind)},
            {"block", s.block},
            {"dim", s.dim},
            {"projection_seed", s.projection_seed},
            {"has_fg", s.has_fg},
            {"frozen", s.frozen}};
    if (s.kind == BiasSourceKind::label_embedding) w.add("bias.embedding", "bias", s.embedding);
    json cls = json::array();
    for (std::size_t i = 0; i < s.classifiers.size(); ++i) {
      const auto& bc = s.classifiers[i];
      const std::string prefix = "bias." + std::to_string(i) + ".";
      cls.push_back({{"attribute", to_string(bc.attribute)}, {"spec", network_spec_to_json(bc.model.spec)},
                     {"prefix", prefix}, {"projected", bc.projection.has_value()}});
      w.add_state(prefix, bc.model.state);
      if (bc.projection) w.add(prefix + "projection", "bias", *bc.projection);
    }
    bs["classifiers"] = cls;
    header["bias_source"] = bs;
  }
  header["tensors"] = w.index;
  const std::string h = header.dump();
  std::string out = std::string(kCheckpointFormat) + "\n";
  const std::uint64_t len = h.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof len);
  out += h;
  out += w.payload;
  return out;
}

namespace detail {
inline Checkpoint parse_checkpoint(const std::string& bytes) {
  const std::string magic = std::string(kCheckpointFormat) + "\n";
  if (bytes.compare(0, magic.size(), magic) != 0) throw RuntimeError("not a badd-ckpt-v1 checkpoint");
  std::size_t pos = magic.size();
  if (bytes.size() < pos + 8) throw RuntimeError("checkpoint truncated in header length");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + pos, sizeof len);
  pos += 8;
  if (bytes.size() - pos < len) throw RuntimeError("checkpoint truncated in header");
  json header;
  try {
    header = json::parse(bytes.substr(pos, len));
  } catch (const json::exception& e) {
    throw RuntimeError(std::string("checkpoint header: ") + e.what());
  }
  pos += len;
  const std::size_t floats = (bytes.size() - pos) / sizeof(float);
  std::size_t used = 0;
  detail::TensorReader r;
  for (const auto& e : header.at("tensors")) {
    const Shape shape = e.at("shape").get<Shape>();
    const auto off = e.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(shape);
    if (off + n > floats) throw RuntimeError("checkpoint payload truncated at '" + e.at("name").get<std::string>() + "'");
    used = std::max(used, off + n);
    std::vector<Real> v(n);
    std::memcpy(v.data(), bytes.data() + pos + off * sizeof(float), n * sizeof(float));
    Tensor<Real> t(shape, std::move(v));
    require_finite(t, "checkpoint tensor " + e.at("name").get<std::string>());
    r.tensors.emplace(e.at("name").get<std::string>(), std::make_pair(e.at("role").get<std::string>(), std::move(t)));
  }
  if (bytes.size() - pos != used * sizeof(float))
    throw RuntimeError("checkpoint payload has " + std::to_string(bytes.size() - pos - used * sizeof(float)) +
                       " trailing bytes");
  Checkpoint c;
  c.seed = header.at("seed").get<std::uint64_t>();
  c.extra = header.value("extra", json::object());
  c.model.spec = network_spec_from_json(header.at("spec"));
  c.model.state = r.take_state("", c.model.spec);
  if (header.contains("bias_source")) {
    const auto& bs = header.at("bias_source");
    BiasSource s;
    s.kind = bias_source_kind_from_string(bs.at("kind").get<std::string>());
    s.block = bs.at("block").get<std::size_t>();
    s.dim = bs.at("dim").get<std::size_t>();
    s.projection_seed = bs.at("projection_seed").get<std::uint64_t>();
    s.has_fg = bs.at("has_fg").get<bool>();
    s.frozen = bs.at("frozen").get<bool>();
    if (s.kind == BiasSourceKind::label_embedding) s.embedding = r.take("bias.embedding");
    for (const auto& cj : bs.at("classifiers")) {
      BiasClassifier bc;
      bc.attribute = attribute_from_string(cj.at("attribute").get<std::string>());
      bc.model.spec = network_spec_from_json(cj.at("spec"));
      const auto prefix = cj.at("prefix").get<std::string>();
      bc.model.state = r.take_state(prefix, bc.model.spec);
      if (cj.at("projected").get<bool>()) bc.projection = r.take(prefix + "projection");
      s.classifiers.push_back(std::move(bc));
    }
    c.source = std::move(s);
  }
  if (!r.tensors.empty()) throw RuntimeError("checkpoint has unexpected tensor '" + r.tensors.begin()->first + "'");
  return c;
}
}  // namespace detail

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  try {
    return detail::parse_checkpoint(bytes);
  } catch (const json::exception& e) {
    throw RuntimeError(std::string("malformed checkpoint header: ") + e.what());
  }
}

inline void save_checkpoint(const std::filesystem::path& p, const Checkpoint& c) {
  write_text(p, serialize_checkpoint(c));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& p) {
  try {
    return deserialize_checkpoint(read_text(p));
  } catch (const RuntimeError& e) {
    throw RuntimeError(p.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Trace CSV.

inline std::string trace_csv(const TrainTrace& t) {
  std::ostringstream o;
  o.precision(17);
  o << "epoch,step,loss,loss_aligned,loss_conflicting,n_aligned,n_conflicting\n";
  for (const auto& b : t.batches) {
    o << b.epoch << ',' << b.step << ',' << b.loss << ',';
    if (b.grouped) o << b.loss_aligned << ',' << b.loss_conflicting << ',' << b.n_aligned << ',' << b.n_conflicting;
    else o << ",,,";
    o << '\n';
  }
  return o.str();
}

}  // namespace badd
