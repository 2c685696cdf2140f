#pragma once

// On-disk dataset layout:
//   <dir>/manifest.json   spec, pattern-bank hash, per-split labels and motif placements
//   <dir>/<split>.ltcl    "LTCL" | u16 version | u16 rank | u32 dims[rank] | f32 pixels
// All integers and floats little-endian; dims are N, H, W, C.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dscl/json_util.hpp"
#include "dscl/synthdata.hpp"

namespace dscl {

inline constexpr std::uint16_t kSplitFormatVersion = 1;

inline Json dataset_spec_to_json(const DatasetSpec& s) {
  return Json{{"class_counts", s.class_counts}, {"image_size", s.image_size},     {"channels", s.channels},
              {"test_per_class", s.test_per_class}, {"seed", s.seed},             {"num_motifs", s.num_motifs},
              {"sharing_degree", s.sharing_degree}, {"motif_size", s.motif_size}};
}

// Accepts either explicit class_counts or the exponential profile triple
// (classes, head_count, imbalance_ratio).
inline DatasetSpec dataset_spec_from_json(const Json& j) {
  require_known_keys(j, "dataset",
                     {"class_counts", "classes", "head_count", "imbalance_ratio", "image_size", "channels",
                      "test_per_class", "seed", "num_motifs", "sharing_degree", "motif_size"});
  DatasetSpec s = DatasetSpec::desk_default();
  if (j.contains("class_counts")) {
    if (j.contains("classes") || j.contains("head_count") || j.contains("imbalance_ratio")) {
      throw ConfigError("dataset: give either class_counts or the exponential profile, not both");
    }
    read_opt(j, "class_counts", s.class_counts, "dataset");
  } else if (j.contains("classes") || j.contains("head_count") || j.contains("imbalance_ratio")) {
    std::size_t k = s.num_classes();
    std::size_t n1 = s.class_counts.front();
    double ratio = s.imbalance_ratio();
    read_opt(j, "classes", k, "dataset");
    read_opt(j, "head_count", n1, "dataset");
    read_opt(j, "imbalance_ratio", ratio, "dataset");
    try {
      s.class_counts = DatasetSpec::exponential(k, n1, ratio).class_counts;
    } catch (const SpecError& e) {
      throw ConfigError(std::string("dataset: ") + e.what());
    }
  }
  read_opt(j, "image_size", s.image_size, "dataset");
  read_opt(j, "channels", s.channels, "dataset");
  read_opt(j, "test_per_class", s.test_per_class, "dataset");
  read_opt(j, "seed", s.seed, "dataset");
  read_opt(j, "num_motifs", s.num_motifs, "dataset");
  read_opt(j, "sharing_degree", s.sharing_degree, "dataset");
  read_opt(j, "motif_size", s.motif_size, "dataset");
  try {
    s.validate();
  } catch (const SpecError& e) {
    throw ConfigError(std::string("dataset: ") + e.what());
  }
  return s;
}

namespace detail {

template <typename T>
void put_le(std::string& buf, T v) {
  using U = std::conditional_t<sizeof(T) == 2, std::uint16_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
  const U u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) buf.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& buf, std::size_t& pos) {
  using U = std::conditional_t<sizeof(T) == 2, std::uint16_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
  if (pos + sizeof(T) > buf.size()) throw FormatError("truncated file");
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  pos += sizeof(T);
  return std::bit_cast<T>(u);
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + p.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

}  // namespace detail

inline std::string encode_split(const std::vector<SynthImage>& images) {
  std::string buf = "LTCL";
  detail::put_le<std::uint16_t>(buf, kSplitFormatVersion);
  detail::put_le<std::uint16_t>(buf, 4);
  const std::uint32_t n = static_cast<std::uint32_t>(images.size());
  const std::uint32_t h = n ? static_cast<std::uint32_t>(images[0].height()) : 0;
  const std::uint32_t w = n ? static_cast<std::uint32_t>(images[0].width()) : 0;
  const std::uint32_t c = n ? static_cast<std::uint32_t>(images[0].channels()) : 0;
  for (std::uint32_t d : {n, h, w, c}) detail::put_le<std::uint32_t>(buf, d);
  buf.reserve(buf.size() + std::size_t{n} * h * w * c * 4);
  for (const auto& im : images) {
    if (im.height() != h || im.width() != w || im.channels() != c) throw StructuralError("split mixes image shapes");
    for (double p : im.pixels.values()) detail::put_le<float>(buf, static_cast<float>(p));
  }
  return buf;
}

inline std::vector<Tensor> decode_split(const std::string& buf) {
  if (buf.size() < 8 || buf.compare(0, 4, "LTCL") != 0) throw FormatError("missing LTCL magic");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint16_t>(buf, pos);
  if (version != kSplitFormatVersion) throw FormatError("unsupported split version " + std::to_string(version));
  const auto rank = detail::get_le<std::uint16_t>(buf, pos);
  if (rank != 4) throw FormatError("expected rank-4 split tensor, got rank " + std::to_string(rank));
  std::array<std::uint32_t, 4> dims{};
  for (auto& d : dims) d = detail::get_le<std::uint32_t>(buf, pos);
  const std::size_t per = std::size_t{dims[1]} * dims[2] * dims[3];
  if (buf.size() - pos != std::size_t{dims[0]} * per * 4) throw FormatError("split payload size does not match header");
  std::vector<Tensor> out(dims[0]);
  for (auto& t : out) {
    t = Tensor(Shape{dims[1], dims[2], dims[3]});
    for (double& p : t.values()) p = static_cast<double>(detail::get_le<float>(buf, pos));
  }
  return out;
}

inline Json split_manifest(const std::vector<SynthImage>& images, const std::string& file) {
  Json labels = Json::array();
  Json placements = Json::array();
  for (const auto& im : images) {
    labels.push_back(im.label);
    Json pl = Json::array();
    for (const auto& p : im.placements) pl.push_back({p.motif, p.box.cx, p.box.cy, p.box.w, p.box.h});
    placements.push_back(std::move(pl));
  }
  return {{"file", file}, {"count", images.size()}, {"labels", labels}, {"placements", placements}};
}

inline void save_dataset(const SynthDataset& ds, const std::filesystem::path& dir, Json extra = Json::object()) {
  std::filesystem::create_directories(dir);
  Json manifest{{"format", "ltcl-dataset"},
                {"version", kSplitFormatVersion},
                {"spec", dataset_spec_to_json(ds.spec)},
                {"bank_hash", detail::hex64(ds.bank_hash)},
                {"imbalance_ratio", ds.spec.imbalance_ratio()},
                {"splits", {{"train", split_manifest(ds.train, "train.ltcl")}, {"test", split_manifest(ds.test, "test.ltcl")}}}};
  for (auto& [k, v] : extra.items()) manifest[k] = v;
  detail::write_file(dir / "train.ltcl", encode_split(ds.train));
  detail::write_file(dir / "test.ltcl", encode_split(ds.test));
  detail::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline std::vector<SynthImage> load_split(const Json& m, const std::filesystem::path& dir) {
  std::vector<Tensor> pixels = decode_split(detail::read_file(dir / m.at("file").get<std::string>()));
  const auto& labels = m.at("labels");
  const auto& placements = m.at("placements");
  if (labels.size() != pixels.size() || placements.size() != pixels.size()) {
    throw FormatError("manifest split lists disagree with the tensor file");
  }
  std::vector<SynthImage> out(pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].pixels = std::move(pixels[i]);
    out[i].label = labels[i].get<ClassId>();
    for (const auto& p : placements[i]) {
      out[i].placements.push_back(
          {p.at(0).get<std::size_t>(), PatchBox{p.at(1).get<double>(), p.at(2).get<double>(), p.at(3).get<double>(),
                                                p.at(4).get<double>()}});
    }
  }
  return out;
}

inline SynthDataset load_dataset(const std::filesystem::path& dir) {
  const Json manifest = Json::parse(detail::read_file(dir / "manifest.json"));
  if (manifest.value("format", "") != "ltcl-dataset") throw FormatError("not a dataset manifest: " + dir.string());
  SynthDataset ds;
  ds.spec = dataset_spec_from_json(manifest.at("spec"));
  ds.bank_hash = std::stoull(manifest.at("bank_hash").get<std::string>(), nullptr, 16);
  ds.train = load_split(manifest.at("splits").at("train"), dir);
  ds.test = load_split(manifest.at("splits").at("test"), dir);
  return ds;
}

}  // namespace dscl
