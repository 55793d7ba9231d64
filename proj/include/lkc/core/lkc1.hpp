#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "lkc/core/tensor_map.hpp"

namespace lkc {

/// Named tensors and text blobs stored in an LKC1 container.
///
/// Layout:
///   bytes 0-3     magic "LKC1"
///   bytes 4-7     little-endian u32 manifest length M
///   bytes 8..8+M  UTF-8 manifest, one line per entry after a header line
///                   name,dtype,shape,byte_offset
///                 dtype is f32, f64 or txt; shape is extents joined by 'x'
///                 (a txt entry's shape is its byte length); byte_offset is
///                 relative to the first payload byte (8 + M)
///   remainder     concatenated little-endian payloads, in manifest order
class TensorArchive {
 public:
  using Value = std::variant<Tensor<float>, Tensor<double>, std::string>;

  void put(const std::string& name, Tensor<float> tensor);
  void put(const std::string& name, Tensor<double> tensor);
  void put_text(const std::string& name, std::string text);

  template <Real T>
  void put_all(const TensorMap<T>& map, const std::string& prefix = "") {
    for (const auto& e : map.entries()) put(prefix + e.name, e.tensor);
  }

  bool contains(const std::string& name) const;
  const Value& at(const std::string& name) const;

  /// Tensor converted to T whatever its stored dtype.
  template <Real T>
  Tensor<T> tensor(const std::string& name) const {
    const Value& v = at(name);
    if (const auto* f = std::get_if<Tensor<float>>(&v)) return f->template cast<T>();
    if (const auto* d = std::get_if<Tensor<double>>(&v)) return d->template cast<T>();
    throw Error("format", "entry '" + name + "' is text, not a tensor");
  }
  const std::string& text(const std::string& name) const;

  std::vector<std::string> names() const;
  std::size_t size() const { return entries_.size(); }

  bool operator==(const TensorArchive&) const = default;

 private:
  std::vector<std::pair<std::string, Value>> entries_;
};

std::string encode_lkc1(const TensorArchive& archive);
TensorArchive decode_lkc1(std::string_view bytes);

void save_tensors(const TensorArchive& archive, const std::filesystem::path& path);
TensorArchive load_tensors(const std::filesystem::path& path);

}  // namespace lkc
