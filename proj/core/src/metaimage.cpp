#include "pulsereg/metaimage.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

namespace pulsereg {

namespace {

namespace fs = std::filesystem;

constexpr bool kHostBigEndian = std::endian::native == std::endian::big;

std::size_t element_size(ElementType t) {
  switch (t) {
    case ElementType::UChar: return 1;
    case ElementType::Short: return 2;
    case ElementType::Float: return 4;
  }
  return 0;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_words(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

double parse_double(const std::string& s, const std::string& key) {
  double v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw IoError("MetaImage: bad number '" + s + "' for " + key);
  return v;
}

std::int64_t parse_int(const std::string& s, const std::string& key) {
  std::int64_t v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) throw IoError("MetaImage: bad integer '" + s + "' for " + key);
  return v;
}

template <typename V, typename Parse>
std::vector<V> parse_list(const std::string& value, const std::string& key, std::size_t n, Parse parse) {
  const auto words = split_words(value);
  if (words.size() != n)
    throw IoError("MetaImage: " + key + " needs " + std::to_string(n) + " values, got '" + value + "'");
  std::vector<V> out;
  for (const auto& w : words) out.push_back(parse(w, key));
  return out;
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "True" || v == "true" || v == "1") return true;
  if (v == "False" || v == "false" || v == "0") return false;
  throw IoError("MetaImage: " + key + " must be True or False, got '" + v + "'");
}

ElementType parse_type(const std::string& v) {
  if (v == "MET_UCHAR") return ElementType::UChar;
  if (v == "MET_SHORT") return ElementType::Short;
  if (v == "MET_FLOAT") return ElementType::Float;
  throw IoError("MetaImage: unsupported ElementType '" + v + "' (MET_UCHAR, MET_SHORT, MET_FLOAT)");
}

const std::set<std::string>& ignored_keys() {
  static const std::set<std::string> keys{"ObjectType",      "BinaryData",       "TransformMatrix", "CenterOfRotation",
                                          "AnatomicalOrientation", "ElementMin", "ElementMax", "Comment",
                                          "Rotation",        "Orientation"};
  return keys;
}

const std::set<std::string>& extra_keys() {
  static const std::set<std::string> keys{"ComponentOrder", "DisplacementUnits"};
  return keys;
}

template <typename V>
void decode(const char* bytes, std::size_t count, bool swap, float* out) {
  for (std::size_t i = 0; i < count; ++i) {
    char buf[sizeof(V)];
    std::memcpy(buf, bytes + i * sizeof(V), sizeof(V));
    if (swap) std::reverse(buf, buf + sizeof(V));
    V v;
    std::memcpy(&v, buf, sizeof(V));
    out[i] = static_cast<float>(v);
  }
}

template <typename V>
void encode(const float* in, std::size_t count, bool swap, std::string& out) {
  out.resize(count * sizeof(V));
  for (std::size_t i = 0; i < count; ++i) {
    const float f = in[i];
    if constexpr (!std::is_same_v<V, float>) {
      if (f != std::nearbyint(f) || f < static_cast<float>(std::numeric_limits<V>::min()) ||
          f > static_cast<float>(std::numeric_limits<V>::max()))
        throw InvalidArgument("MetaImage: value " + std::to_string(f) + " does not fit the integer element type");
    }
    const V v = static_cast<V>(f);
    char buf[sizeof(V)];
    std::memcpy(buf, &v, sizeof(V));
    if (swap) std::reverse(buf, buf + sizeof(V));
    std::memcpy(out.data() + i * sizeof(V), buf, sizeof(V));
  }
}

std::string read_all(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace

const char* element_type_name(ElementType t) {
  switch (t) {
    case ElementType::UChar: return "MET_UCHAR";
    case ElementType::Short: return "MET_SHORT";
    case ElementType::Float: return "MET_FLOAT";
  }
  return "?";
}

MetaVolume read_volume(const fs::path& path) {
  const std::string file = read_all(path);
  MetaVolume mv;
  VolumeHeader& h = mv.header;
  std::set<std::string> seen;
  std::size_t pos = 0, data_offset = std::string::npos;
  int line_no = 0;
  while (pos < file.size()) {
    const auto eol = file.find('\n', pos);
    const std::string line = file.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
    pos = eol == std::string::npos ? file.size() : eol + 1;
    ++line_no;
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw IoError(path.string() + ":" + std::to_string(line_no) + ": expected 'Key = Value'");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    seen.insert(key);
    if (key == "NDims") {
      if (parse_int(value, key) != 3) throw IoError("MetaImage: only NDims = 3 is supported, got " + value);
    } else if (key == "DimSize") {
      const auto d = parse_list<std::int64_t>(value, key, 3, parse_int);
      for (const auto v : d)
        if (v <= 0) throw IoError("MetaImage: DimSize must be positive");
      h.grid.dims = {d[0], d[1], d[2]};
    } else if (key == "ElementSpacing" || key == "ElementSize") {
      const auto s = parse_list<double>(value, key, 3, parse_double);
      for (const auto v : s)
        if (!(v > 0)) throw IoError("MetaImage: " + key + " must be positive");
      if (key == "ElementSpacing" || !seen.count("ElementSpacing")) h.grid.spacing = {s[0], s[1], s[2]};
    } else if (key == "Offset" || key == "Origin" || key == "Position") {
      const auto o = parse_list<double>(value, key, 3, parse_double);
      h.grid.origin = {o[0], o[1], o[2]};
    } else if (key == "ElementType") {
      h.type = parse_type(value);
    } else if (key == "ElementByteOrderMSB" || key == "BinaryDataByteOrderMSB") {
      h.big_endian = parse_bool(value, key);
    } else if (key == "ElementNumberOfChannels") {
      const auto c = parse_int(value, key);
      if (c < 1) throw IoError("MetaImage: ElementNumberOfChannels must be >= 1");
      h.channels = static_cast<int>(c);
    } else if (key == "CompressedData") {
      if (parse_bool(value, key)) throw IoError("MetaImage: compressed data is not supported");
    } else if (key == "HeaderSize") {
      if (parse_int(value, key) != 0) throw IoError("MetaImage: HeaderSize other than 0 is not supported");
    } else if (key == "ElementDataFile") {
      h.data_file = value;
      data_offset = pos;
      break;
    } else if (extra_keys().count(key)) {
      h.extra[key] = value;
    } else if (!ignored_keys().count(key)) {
      h.warnings.push_back("unknown key '" + key + "'");
      spdlog::warn("{}: unknown MetaImage key '{}' ignored", path.string(), key);
    }
  }
  for (const char* k : {"NDims", "DimSize", "ElementType", "ElementDataFile"})
    if (!seen.count(k)) throw IoError(path.string() + ": missing mandatory key " + k);

  const std::size_t count = static_cast<std::size_t>(h.grid.dims.count()) * static_cast<std::size_t>(h.channels);
  const std::size_t expected = count * element_size(h.type);
  std::string external;
  const char* bytes = nullptr;
  std::size_t available = 0;
  if (h.data_file == "LOCAL") {
    bytes = file.data() + data_offset;
    available = file.size() - data_offset;
  } else {
    if (h.data_file == "LIST" || h.data_file.find('%') != std::string::npos)
      throw IoError(path.string() + ": multi-file ElementDataFile is not supported");
    external = read_all(path.parent_path() / h.data_file);
    bytes = external.data();
    available = external.size();
  }
  if (available != expected)
    throw IoError(path.string() + ": payload has " + std::to_string(available) + " bytes, header implies " +
                  std::to_string(expected));

  std::vector<float> interleaved(count);
  const bool swap = h.big_endian != kHostBigEndian;
  switch (h.type) {
    case ElementType::UChar: decode<std::uint8_t>(bytes, count, false, interleaved.data()); break;
    case ElementType::Short: decode<std::int16_t>(bytes, count, swap, interleaved.data()); break;
    case ElementType::Float: decode<float>(bytes, count, swap, interleaved.data()); break;
  }
  const auto& d = h.grid.dims;
  mv.data = Array<float>(Shape{h.channels, d.z, d.y, d.x});
  const std::size_t vox = static_cast<std::size_t>(d.count());
  for (std::size_t i = 0; i < vox; ++i)
    for (std::size_t c = 0; c < static_cast<std::size_t>(h.channels); ++c)
      mv.data.values[c * vox + i] = interleaved[i * static_cast<std::size_t>(h.channels) + c];
  return mv;
}

void write_volume(const fs::path& path, const Array<float>& data, VolumeHeader h) {
  if (data.rank() != 4) throw InvalidArgument("write_volume: data must be C x D x H x W");
  h.channels = static_cast<int>(data.dim(0));
  h.grid.dims = {data.dim(3), data.dim(2), data.dim(1)};
  const bool embedded = path.extension() == ".mha";
  if (!embedded && path.extension() != ".mhd")
    throw InvalidArgument("write_volume: extension must be .mha or .mhd, got '" + path.extension().string() + "'");
  const fs::path raw_path = fs::path(path).replace_extension(".raw");
  h.data_file = embedded ? "LOCAL" : raw_path.filename().string();

  const std::size_t vox = static_cast<std::size_t>(h.grid.dims.count());
  const auto ch = static_cast<std::size_t>(h.channels);
  std::vector<float> interleaved(vox * ch);
  for (std::size_t i = 0; i < vox; ++i)
    for (std::size_t c = 0; c < ch; ++c) interleaved[i * ch + c] = data.values[c * vox + i];
  std::string payload;
  const bool swap = h.big_endian != kHostBigEndian;
  switch (h.type) {
    case ElementType::UChar: encode<std::uint8_t>(interleaved.data(), interleaved.size(), false, payload); break;
    case ElementType::Short: encode<std::int16_t>(interleaved.data(), interleaved.size(), swap, payload); break;
    case ElementType::Float: encode<float>(interleaved.data(), interleaved.size(), swap, payload); break;
  }

  std::ostringstream hs;
  hs << std::setprecision(17);
  const auto& g = h.grid;
  hs << "ObjectType = Image\nNDims = 3\nBinaryData = True\n"
     << "BinaryDataByteOrderMSB = " << (h.big_endian ? "True" : "False") << "\nCompressedData = False\n"
     << "Offset = " << g.origin.x << ' ' << g.origin.y << ' ' << g.origin.z << '\n'
     << "ElementSpacing = " << g.spacing.x << ' ' << g.spacing.y << ' ' << g.spacing.z << '\n'
     << "DimSize = " << g.dims.x << ' ' << g.dims.y << ' ' << g.dims.z << '\n';
  if (h.channels > 1) hs << "ElementNumberOfChannels = " << h.channels << '\n';
  for (const auto& [k, v] : h.extra) hs << k << " = " << v << '\n';
  hs << "ElementType = " << element_type_name(h.type) << "\nElementDataFile = " << h.data_file << '\n';

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << hs.str();
  if (embedded) os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!os) throw IoError("failed writing " + path.string());
  if (!embedded) {
    std::ofstream raw(raw_path, std::ios::binary);
    raw.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!raw) throw IoError("failed writing " + raw_path.string());
  }
}

Mask read_mask(const fs::path& path, Grid* grid) {
  const MetaVolume mv = read_volume(path);
  if (mv.header.channels != 1) throw IoError(path.string() + ": a mask must have one channel");
  Mask m(mv.data.shape, 0);
  for (std::size_t i = 0; i < m.values.size(); ++i) m.values[i] = mv.data.values[i] != 0.0f ? 1 : 0;
  if (grid) *grid = mv.header.grid;
  return m;
}

void write_mask(const fs::path& path, const Mask& mask, const Grid& grid) {
  VolumeHeader h;
  h.grid = grid;
  h.type = ElementType::UChar;
  write_volume(path, mask.cast<float>(), h);
}

void write_field(const fs::path& path, const Array<float>& field, const Grid& grid, DisplacementUnits units) {
  if (field.rank() != 4 || field.dim(0) != 3) throw InvalidArgument("write_field: field must be 3 x D x H x W");
  VolumeHeader h;
  h.grid = grid;
  h.type = ElementType::Float;
  h.extra["ComponentOrder"] = "xyz";
  h.extra["DisplacementUnits"] = units == DisplacementUnits::Voxel ? "voxel" : "mm";
  write_volume(path, field, h);
}

FieldFile read_field(const fs::path& path) {
  MetaVolume mv = read_volume(path);
  if (mv.header.channels != 3)
    throw IoError(path.string() + ": a displacement field needs 3 channels, got " + std::to_string(mv.header.channels));
  const auto order = mv.header.extra.find("ComponentOrder");
  if (order != mv.header.extra.end() && order->second != "xyz")
    throw IoError(path.string() + ": unsupported ComponentOrder '" + order->second + "'");
  FieldFile f;
  f.grid = mv.header.grid;
  f.field = std::move(mv.data);
  const auto units = mv.header.extra.find("DisplacementUnits");
  if (units == mv.header.extra.end() || units->second == "voxel") {
    f.units = DisplacementUnits::Voxel;
  } else if (units->second == "mm") {
    f.units = DisplacementUnits::Millimeter;
  } else {
    throw IoError(path.string() + ": unknown DisplacementUnits '" + units->second + "'");
  }
  return f;
}

Array<float> field_to_voxels(const FieldFile& f) {
  Array<float> out = f.field;
  if (f.units == DisplacementUnits::Voxel) return out;
  const std::int64_t v = out.voxels();
  for (int c = 0; c < 3; ++c)
    for (std::int64_t i = 0; i < v; ++i) out.values[c * v + i] = static_cast<float>(out.values[c * v + i] / f.grid.spacing[c]);
  return out;
}

}  // namespace pulsereg
