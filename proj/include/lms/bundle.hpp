#pragma once

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <variant>
#include <vector>

#include "lms/array.hpp"
#include "lms/errors.hpp"

namespace lms {

using BoolArray = Array<std::uint8_t>;

/// Named arrays persisted as a directory: manifest.json plus one raw
/// little-endian row-major blob per array. Free-form metadata rides along in
/// the manifest under "attributes".
class ArrayBundle {
 public:
  using Entry = std::variant<RealArray, ComplexArray, BoolArray>;

  void put(const std::string& name, RealArray a) { insert(name, std::move(a)); }
  void put(const std::string& name, ComplexArray a) { insert(name, std::move(a)); }
  void put_bool(const std::string& name, BoolArray a) {
    for (auto& v : a.data()) v = v ? 1 : 0;
    insert(name, std::move(a));
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const std::vector<std::string>& names() const { return order_; }
  std::string dtype(const std::string& name) const { return dtype_of(at(name)); }

  const RealArray& real(const std::string& name) const { return get<RealArray>(name, "f64"); }
  const ComplexArray& complex(const std::string& name) const { return get<ComplexArray>(name, "c128"); }
  const BoolArray& boolean(const std::string& name) const { return get<BoolArray>(name, "bool"); }

  nlohmann::json attributes = nlohmann::json::object();

  static std::string dtype_of(const Entry& e) {
    switch (e.index()) {
      case 0: return "f64";
      case 1: return "c128";
      default: return "bool";
    }
  }

  const Entry& at(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw IoError("bundle has no array named '" + name + "'");
    return entries_[it->second];
  }

 private:
  void insert(const std::string& name, Entry e) {
    if (name.empty() || name.find_first_not_of("abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.-") !=
                            std::string::npos || name.front() == '.') {
      throw IoError("invalid array name '" + name + "'");
    }
    const auto it = index_.find(name);
    if (it != index_.end()) {
      entries_[it->second] = std::move(e);
      return;
    }
    index_[name] = entries_.size();
    entries_.push_back(std::move(e));
    order_.push_back(name);
  }

  template <typename A>
  const A& get(const std::string& name, const char* want) const {
    const Entry& e = at(name);
    if (!std::holds_alternative<A>(e)) throw IoError("array '" + name + "' is " + dtype_of(e) + ", expected " + want);
    return std::get<A>(e);
  }

  std::vector<Entry> entries_;
  std::vector<std::string> order_;
  std::map<std::string, std::size_t> index_;
};

namespace detail {

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f64") return 8;
  if (dtype == "c128") return 16;
  if (dtype == "bool") return 1;
  throw IoError("unknown dtype '" + dtype + "'");
}

// Byte images of 8-byte words in little-endian order.
inline void to_little(char* bytes, std::size_t words) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t w = 0; w < words; ++w) std::reverse(bytes + 8 * w, bytes + 8 * w + 8);
  } else {
    (void)bytes;
    (void)words;
  }
}

inline std::vector<char> encode_blob(const ArrayBundle::Entry& e) {
  return std::visit(
      [](const auto& a) {
        using T = typename std::decay_t<decltype(a)>::value_type;
        std::vector<char> out(a.size() * sizeof(T));
        if (!out.empty()) std::memcpy(out.data(), a.vec().data(), out.size());
        if constexpr (!std::is_same_v<T, std::uint8_t>) to_little(out.data(), out.size() / 8);
        return out;
      },
      e);
}

template <typename A>
A decode_blob(std::vector<char> bytes, Shape shape) {
  using T = typename A::value_type;
  if constexpr (!std::is_same_v<T, std::uint8_t>) to_little(bytes.data(), bytes.size() / 8);
  std::vector<T> data(bytes.size() / sizeof(T));
  if (!bytes.empty()) std::memcpy(data.data(), bytes.data(), bytes.size());
  return A(std::move(shape), std::move(data));
}

}  // namespace detail

inline void write_bundle(const std::filesystem::path& dir, const ArrayBundle& bundle) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create bundle directory " + dir.string());
  nlohmann::json arrays = nlohmann::json::array();
  for (const auto& name : bundle.names()) {
    const auto& entry = bundle.at(name);
    const std::string file = name + ".bin";
    const auto bytes = detail::encode_blob(entry);
    std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + (dir / file).string());
    const Shape shape = std::visit([](const auto& a) { return a.shape(); }, entry);
    arrays.push_back({{"name", name},
                      {"dtype", ArrayBundle::dtype_of(entry)},
                      {"shape", shape},
                      {"byte_order", "little"},
                      {"file", file}});
  }
  nlohmann::json manifest{{"arrays", arrays}, {"attributes", bundle.attributes}};
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  out << manifest.dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest in " + dir.string());
}

inline ArrayBundle read_bundle(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const fs::path manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw IoError("missing manifest " + manifest_path.string());
  nlohmann::json manifest;
  try {
    in >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  ArrayBundle bundle;
  try {
    if (manifest.contains("attributes")) bundle.attributes = manifest.at("attributes");
    for (const auto& a : manifest.at("arrays")) {
      const auto name = a.at("name").get<std::string>();
      const auto dtype = a.at("dtype").get<std::string>();
      const auto shape = a.at("shape").get<Shape>();
      if (a.at("byte_order").get<std::string>() != "little") throw IoError("array '" + name + "' is not little-endian");
      if (bundle.contains(name)) throw IoError("duplicate array name '" + name + "'");
      const fs::path file = dir / a.at("file").get<std::string>();
      const std::size_t expected = shape_size(shape) * detail::dtype_size(dtype);
      std::error_code ec;
      const auto actual = fs::file_size(file, ec);
      if (ec) throw IoError("missing blob " + file.string());
      if (actual != expected) {
        throw IoError("blob " + file.string() + " has " + std::to_string(actual) + " bytes, expected " +
                      std::to_string(expected));
      }
      std::vector<char> bytes(expected);
      std::ifstream blob(file, std::ios::binary);
      blob.read(bytes.data(), static_cast<std::streamsize>(expected));
      if (!blob && expected > 0) throw IoError("failed reading " + file.string());
      if (dtype == "f64") {
        bundle.put(name, detail::decode_blob<RealArray>(std::move(bytes), shape));
      } else if (dtype == "c128") {
        bundle.put(name, detail::decode_blob<ComplexArray>(std::move(bytes), shape));
      } else {
        bundle.put_bool(name, detail::decode_blob<BoolArray>(std::move(bytes), shape));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  return bundle;
}

}  // namespace lms
