#pragma once

// Tensor record format: one line of JSON {"shape":[...],"dtype":"f32"|"f64","name":"..."}
// terminated by '\n', followed by product(shape) little-endian IEEE-754 scalars.
// Files may hold any number of consecutive records.

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ssta/tensor.hpp"

namespace ssta {

static_assert(std::endian::native == std::endian::little, "tensor records assume a little-endian host");

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <Real T>
constexpr const char* dtype_name() {
  return std::is_same_v<T, float> ? "f32" : "f64";
}

template <Real T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <Real T>
void write_tensor(std::ostream& os, const Tensor<T>& t, const std::string& name) {
  nlohmann::json header = {{"shape", t.shape()}, {"dtype", dtype_name<T>()}, {"name", name}};
  os << header.dump() << '\n';
  os.write(reinterpret_cast<const char*>(t.data().data()),
           static_cast<std::streamsize>(t.size() * sizeof(T)));
  if (!os) throw FormatError("failed writing tensor '" + name + "'");
}

/// Reads one record; returns false at clean end of stream. Converts f32/f64 to T.
template <Real T>
bool read_tensor(std::istream& is, NamedTensor<T>& out) {
  std::string line;
  if (!std::getline(is, line)) return false;
  if (line.empty()) return false;
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad tensor header: ") + e.what());
  }
  if (!header.contains("shape") || !header.contains("dtype"))
    throw FormatError("tensor header missing shape or dtype: " + line);
  Shape shape = header.at("shape").get<Shape>();
  const std::string dtype = header.at("dtype").get<std::string>();
  const std::size_t n = shape_numel(shape);
  std::vector<T> data(n);
  auto read_as = [&]<typename U>(U) {
    std::vector<U> raw(n);
    is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * sizeof(U)));
    if (static_cast<std::size_t>(is.gcount()) != n * sizeof(U))
      throw FormatError("truncated tensor payload for '" + header.value("name", "") + "'");
    std::copy(raw.begin(), raw.end(), data.begin());
  };
  if (dtype == "f64")
    read_as(double{});
  else if (dtype == "f32")
    read_as(float{});
  else
    throw FormatError("unknown dtype '" + dtype + "'");
  out.name = header.value("name", "");
  out.tensor = Tensor<T>(std::move(shape), std::move(data));
  return true;
}

template <Real T>
std::string to_bytes(const Tensor<T>& t, const std::string& name) {
  std::ostringstream os(std::ios::binary);
  write_tensor(os, t, name);
  return std::move(os).str();
}

template <Real T>
NamedTensor<T> from_bytes(const std::string& bytes) {
  std::istringstream is(bytes, std::ios::binary);
  NamedTensor<T> nt;
  if (!read_tensor(is, nt)) throw FormatError("empty tensor record");
  return nt;
}

template <Real T>
void save_tensors(const std::filesystem::path& path, const std::vector<NamedTensor<T>>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  for (const auto& nt : tensors) write_tensor(os, nt.tensor, nt.name);
}

template <Real T>
std::vector<NamedTensor<T>> load_tensors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  std::vector<NamedTensor<T>> out;
  NamedTensor<T> nt;
  while (read_tensor(is, nt)) out.push_back(std::move(nt));
  return out;
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  os << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace ssta
