#pragma once

// Flat binary tensor format and directory-based checkpoints.
//
// Tensor file layout: 4-byte magic "HTNS", u8 dtype code (0 = f32, 1 = f64),
// u8 rank, rank x u64 little-endian dims, then raw little-endian scalars.
// A checkpoint is a directory with a plain-text `manifest.txt` of
// name=filename lines, one HTNS file per named parameter.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hlip/tensor.hpp"

namespace hlip {

namespace detail {
template <class T>
constexpr uint8_t dtype_code();
template <>
constexpr uint8_t dtype_code<float>() {
  return 0;
}
template <>
constexpr uint8_t dtype_code<double>() {
  return 1;
}
}  // namespace detail

template <class T>
void save_tensor(const Tensor<T>& t, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("save_tensor: cannot open " + path);
  f.write("HTNS", 4);
  uint8_t code = detail::dtype_code<T>();
  uint8_t rank = static_cast<uint8_t>(t.rank());
  f.write(reinterpret_cast<const char*>(&code), 1);
  f.write(reinterpret_cast<const char*>(&rank), 1);
  for (int64_t d : t.shape()) {
    uint64_t u = static_cast<uint64_t>(d);
    f.write(reinterpret_cast<const char*>(&u), 8);
  }
  f.write(reinterpret_cast<const char*>(t.data()),
          static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!f) throw std::runtime_error("save_tensor: write failed for " + path);
}

template <class T>
Tensor<T> load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("load_tensor: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::string(magic, 4) != "HTNS")
    throw std::runtime_error("load_tensor: bad magic in " + path);
  uint8_t code = 0, rank = 0;
  f.read(reinterpret_cast<char*>(&code), 1);
  f.read(reinterpret_cast<char*>(&rank), 1);
  if (code != detail::dtype_code<T>())
    throw std::runtime_error("load_tensor: dtype mismatch in " + path);
  Shape shape(rank);
  for (auto& d : shape) {
    uint64_t u = 0;
    f.read(reinterpret_cast<char*>(&u), 8);
    d = static_cast<int64_t>(u);
  }
  Tensor<T> t = Tensor<T>::zeros(shape);
  f.read(reinterpret_cast<char*>(t.data()),
         static_cast<std::streamsize>(t.numel() * sizeof(T)));
  if (!f) throw std::runtime_error("load_tensor: truncated file " + path);
  return t;
}

template <class T>
void save_checkpoint(const std::map<std::string, Tensor<T>>& params, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir + "/manifest.txt");
  if (!manifest) throw std::runtime_error("save_checkpoint: cannot open manifest in " + dir);
  for (const auto& [name, t] : params) {
    std::string fname = name + ".htns";
    manifest << name << "=" << fname << "\n";
    save_tensor(t, dir + "/" + fname);
  }
}

template <class T>
std::map<std::string, Tensor<T>> load_checkpoint(const std::string& dir) {
  std::ifstream manifest(dir + "/manifest.txt");
  if (!manifest) throw std::runtime_error("load_checkpoint: cannot open manifest in " + dir);
  std::map<std::string, Tensor<T>> params;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("load_checkpoint: malformed manifest line: " + line);
    params.emplace(line.substr(0, eq), load_tensor<T>(dir + "/" + line.substr(eq + 1)));
  }
  return params;
}

}  // namespace hlip
