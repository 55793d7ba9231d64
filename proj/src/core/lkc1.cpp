#include "lkc/core/lkc1.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lkc {

namespace {

constexpr std::string_view kMagic = "LKC1";
constexpr std::string_view kHeader = "name,dtype,shape,byte_offset";

template <typename U>
U to_little(U v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(U)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<U>(bytes);
  }
  return v;
}

template <Real T>
void append_payload(std::string& out, const Tensor<T>& t) {
  using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
  const std::size_t start = out.size();
  out.resize(start + t.size() * sizeof(T));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const Bits b = to_little(std::bit_cast<Bits>(t[i]));
    std::memcpy(out.data() + start + i * sizeof(T), &b, sizeof(T));
  }
}

template <Real T>
Tensor<T> read_payload(std::string_view payload, Shape shape) {
  using Bits = std::conditional_t<std::is_same_v<T, float>, std::uint32_t, std::uint64_t>;
  std::vector<T> data(payload.size() / sizeof(T));
  for (std::size_t i = 0; i < data.size(); ++i) {
    Bits b;
    std::memcpy(&b, payload.data() + i * sizeof(T), sizeof(T));
    data[i] = std::bit_cast<T>(to_little(b));
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

void check_name(const std::string& name) {
  require(!name.empty() && name.find_first_of(",\n\r") == std::string::npos, "invalid_argument",
          "archive entry names must be non-empty without commas or newlines: '" + name + "'");
}

std::size_t parse_size(std::string_view s, const char* what) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(ec == std::errc() && ptr == s.data() + s.size(), "format",
          std::string("LKC1 manifest: bad ") + what + " '" + std::string(s) + "'");
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    parts.push_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

std::string shape_field(const Shape& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

}  // namespace

void TensorArchive::put(const std::string& name, Tensor<float> tensor) {
  check_name(name);
  require(!contains(name), "invalid_argument", "duplicate archive entry '" + name + "'");
  entries_.emplace_back(name, std::move(tensor));
}

void TensorArchive::put(const std::string& name, Tensor<double> tensor) {
  check_name(name);
  require(!contains(name), "invalid_argument", "duplicate archive entry '" + name + "'");
  entries_.emplace_back(name, std::move(tensor));
}

void TensorArchive::put_text(const std::string& name, std::string text) {
  check_name(name);
  require(!contains(name), "invalid_argument", "duplicate archive entry '" + name + "'");
  entries_.emplace_back(name, std::move(text));
}

bool TensorArchive::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const auto& e) { return e.first == name; });
}

const TensorArchive::Value& TensorArchive::at(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.first == name) return e.second;
  throw Error("missing_tensor", "archive has no entry '" + name + "'");
}

const std::string& TensorArchive::text(const std::string& name) const {
  const auto* s = std::get_if<std::string>(&at(name));
  require(s != nullptr, "format", "entry '" + name + "' is not text");
  return *s;
}

std::vector<std::string> TensorArchive::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

std::string encode_lkc1(const TensorArchive& archive) {
  std::string manifest(kHeader);
  manifest += '\n';
  std::string payload;
  for (const std::string& name : archive.names()) {
    const auto& value = archive.at(name);
    const std::size_t offset = payload.size();
    std::string dtype, shape;
    if (const auto* f = std::get_if<Tensor<float>>(&value)) {
      dtype = "f32";
      shape = shape_field(f->shape());
      append_payload(payload, *f);
    } else if (const auto* d = std::get_if<Tensor<double>>(&value)) {
      dtype = "f64";
      shape = shape_field(d->shape());
      append_payload(payload, *d);
    } else {
      const auto& text = std::get<std::string>(value);
      dtype = "txt";
      shape = std::to_string(text.size());
      payload += text;
    }
    manifest += name + "," + dtype + "," + shape + "," + std::to_string(offset) + "\n";
  }
  std::string out(kMagic);
  const std::uint32_t m = to_little(static_cast<std::uint32_t>(manifest.size()));
  out.append(reinterpret_cast<const char*>(&m), sizeof(m));
  out += manifest;
  out += payload;
  return out;
}

TensorArchive decode_lkc1(std::string_view bytes) {
  require(bytes.size() >= 8 && bytes.substr(0, 4) == kMagic, "format", "not an LKC1 container");
  std::uint32_t m = 0;
  std::memcpy(&m, bytes.data() + 4, sizeof(m));
  m = to_little(m);
  require(bytes.size() >= 8 + static_cast<std::size_t>(m), "format", "LKC1 manifest truncated");
  const std::string_view manifest = bytes.substr(8, m);
  const std::string_view payload = bytes.substr(8 + m);

  TensorArchive archive;
  auto lines = split(manifest, '\n');
  require(!lines.empty() && lines.front() == kHeader, "format", "LKC1 manifest header missing");
  for (std::size_t li = 1; li < lines.size(); ++li) {
    const std::string_view line = lines[li];
    if (line.empty()) continue;
    const auto fields = split(line, ',');
    require(fields.size() == 4, "format", "LKC1 manifest: malformed line '" + std::string(line) + "'");
    const std::string name(fields[0]);
    const std::string_view dtype = fields[1];
    const std::size_t offset = parse_size(fields[3], "offset");
    if (dtype == "txt") {
      const std::size_t len = parse_size(fields[2], "length");
      require(offset + len <= payload.size(), "format", "LKC1 payload truncated for '" + name + "'");
      archive.put_text(name, std::string(payload.substr(offset, len)));
      continue;
    }
    Shape shape;
    for (std::string_view d : split(fields[2], 'x')) shape.push_back(parse_size(d, "shape"));
    const std::size_t elem = dtype == "f32" ? 4 : dtype == "f64" ? 8 : 0;
    require(elem != 0, "format", "LKC1 manifest: unknown dtype '" + std::string(dtype) + "'");
    const std::size_t len = numel(shape) * elem;
    require(offset + len <= payload.size(), "format", "LKC1 payload truncated for '" + name + "'");
    if (elem == 4)
      archive.put(name, read_payload<float>(payload.substr(offset, len), std::move(shape)));
    else
      archive.put(name, read_payload<double>(payload.substr(offset, len), std::move(shape)));
  }
  return archive;
}

void save_tensors(const TensorArchive& archive, const std::filesystem::path& path) {
  const std::string bytes = encode_lkc1(archive);
  std::ofstream out(path, std::ios::binary);
  require(static_cast<bool>(out), "io", "cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), "io", "failed writing '" + path.string() + "'");
}

TensorArchive load_tensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), "io", "cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_lkc1(ss.str());
}

}  // namespace lkc
