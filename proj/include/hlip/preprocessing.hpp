#pragma once

// Study ingestion and normalization: through-plane axis alignment,
// trilinear resize + center crop, percentile clipping, CT Hounsfield
// windows, u8 quantization, and the on-disk study container
// (manifest.json + one raw little-endian volume per scan).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "hlip/tensor.hpp"

namespace hlip {

struct Volume {
  std::array<int64_t, 3> dims{0, 0, 0};  // (D, H, W), row-major
  std::vector<float> voxels;

  int64_t numel() const { return dims[0] * dims[1] * dims[2]; }
  float& at(int64_t z, int64_t y, int64_t x) {
    return voxels[static_cast<size_t>((z * dims[1] + y) * dims[2] + x)];
  }
  float at(int64_t z, int64_t y, int64_t x) const {
    return voxels[static_cast<size_t>((z * dims[1] + y) * dims[2] + x)];
  }
  static Volume zeros(int64_t d, int64_t h, int64_t w) {
    Volume v;
    v.dims = {d, h, w};
    v.voxels.assign(static_cast<size_t>(d * h * w), 0.0f);
    return v;
  }
};

enum class Plane { Axial, Coronal, Sagittal };

inline const char* plane_name(Plane p) {
  switch (p) {
    case Plane::Axial: return "axial";
    case Plane::Coronal: return "coronal";
    default: return "sagittal";
  }
}

inline Plane parse_plane(const std::string& s) {
  if (s == "axial") return Plane::Axial;
  if (s == "coronal") return Plane::Coronal;
  if (s == "sagittal") return Plane::Sagittal;
  throw std::invalid_argument("unknown plane: " + s);
}

struct RawScan {
  Volume vol;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};  // mm per voxel along each axis
  Plane plane = Plane::Axial;
  int through_axis = 0;

  void validate() const {
    for (int64_t d : vol.dims)
      if (d < 5) throw ShapeError("RawScan: every dimension must be >= 5");
    for (double s : spacing)
      if (s <= 0) throw std::invalid_argument("RawScan: spacing must be positive");
    if (through_axis < 0 || through_axis > 2)
      throw std::invalid_argument("RawScan: through_axis must be 0, 1 or 2");
  }
};

// --- geometric transforms --------------------------------------------------

// Permutes axes so axis 0 is the through-plane axis; the two in-plane axes
// keep their original relative order. Idempotent once aligned.
inline RawScan align_depth(const RawScan& scan) {
  scan.validate();
  if (scan.through_axis == 0) return scan;
  std::array<int, 3> order{scan.through_axis, -1, -1};
  int slot = 1;
  for (int a = 0; a < 3; ++a)
    if (a != scan.through_axis) order[static_cast<size_t>(slot++)] = a;
  RawScan out = scan;
  out.through_axis = 0;
  for (int i = 0; i < 3; ++i) {
    out.vol.dims[static_cast<size_t>(i)] = scan.vol.dims[static_cast<size_t>(order[static_cast<size_t>(i)])];
    out.spacing[static_cast<size_t>(i)] = scan.spacing[static_cast<size_t>(order[static_cast<size_t>(i)])];
  }
  out.vol.voxels.assign(scan.vol.voxels.size(), 0.0f);
  std::array<int64_t, 3> src_strides{scan.vol.dims[1] * scan.vol.dims[2], scan.vol.dims[2], 1};
  for (int64_t z = 0; z < out.vol.dims[0]; ++z)
    for (int64_t y = 0; y < out.vol.dims[1]; ++y)
      for (int64_t x = 0; x < out.vol.dims[2]; ++x) {
        std::array<int64_t, 3> c{z, y, x};
        int64_t src = 0;
        for (int i = 0; i < 3; ++i)
          src += c[static_cast<size_t>(i)] * src_strides[static_cast<size_t>(order[static_cast<size_t>(i)])];
        out.vol.at(z, y, x) = scan.vol.voxels[static_cast<size_t>(src)];
      }
  return out;
}

// Trilinear resize with edge clamping, half-pixel sampling convention.
inline Volume trilinear_resize(const Volume& vol, int64_t d, int64_t h, int64_t w) {
  if (vol.dims == std::array<int64_t, 3>{d, h, w}) return vol;
  Volume out = Volume::zeros(d, h, w);
  auto coord = [](int64_t oi, int64_t osize, int64_t isize) {
    double scale = static_cast<double>(isize) / static_cast<double>(osize);
    double c = (static_cast<double>(oi) + 0.5) * scale - 0.5;
    return std::min(std::max(c, 0.0), static_cast<double>(isize - 1));
  };
  for (int64_t z = 0; z < d; ++z) {
    double cz = coord(z, d, vol.dims[0]);
    int64_t z0 = static_cast<int64_t>(cz), z1 = std::min(z0 + 1, vol.dims[0] - 1);
    double fz = cz - static_cast<double>(z0);
    for (int64_t y = 0; y < h; ++y) {
      double cy = coord(y, h, vol.dims[1]);
      int64_t y0 = static_cast<int64_t>(cy), y1 = std::min(y0 + 1, vol.dims[1] - 1);
      double fy = cy - static_cast<double>(y0);
      for (int64_t x = 0; x < w; ++x) {
        double cx = coord(x, w, vol.dims[2]);
        int64_t x0 = static_cast<int64_t>(cx), x1 = std::min(x0 + 1, vol.dims[2] - 1);
        double fx = cx - static_cast<double>(x0);
        double v000 = vol.at(z0, y0, x0), v001 = vol.at(z0, y0, x1);
        double v010 = vol.at(z0, y1, x0), v011 = vol.at(z0, y1, x1);
        double v100 = vol.at(z1, y0, x0), v101 = vol.at(z1, y0, x1);
        double v110 = vol.at(z1, y1, x0), v111 = vol.at(z1, y1, x1);
        double v = (1 - fz) * ((1 - fy) * ((1 - fx) * v000 + fx * v001) +
                               fy * ((1 - fx) * v010 + fx * v011)) +
                   fz * ((1 - fy) * ((1 - fx) * v100 + fx * v101) +
                         fy * ((1 - fx) * v110 + fx * v111));
        out.at(z, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

// Center crop; dimensions short of the target are padded with zeros
// symmetrically (extra voxel goes after).
inline Volume center_crop_or_pad(const Volume& vol, int64_t d, int64_t h, int64_t w) {
  Volume out = Volume::zeros(d, h, w);
  std::array<int64_t, 3> target{d, h, w};
  std::array<int64_t, 3> src_off{}, dst_off{}, span{};
  for (int i = 0; i < 3; ++i) {
    int64_t in = vol.dims[static_cast<size_t>(i)], to = target[static_cast<size_t>(i)];
    if (in >= to) {
      src_off[static_cast<size_t>(i)] = (in - to) / 2;
      dst_off[static_cast<size_t>(i)] = 0;
      span[static_cast<size_t>(i)] = to;
    } else {
      src_off[static_cast<size_t>(i)] = 0;
      dst_off[static_cast<size_t>(i)] = (to - in) / 2;
      span[static_cast<size_t>(i)] = in;
    }
  }
  for (int64_t z = 0; z < span[0]; ++z)
    for (int64_t y = 0; y < span[1]; ++y)
      for (int64_t x = 0; x < span[2]; ++x)
        out.at(dst_off[0] + z, dst_off[1] + y, dst_off[2] + x) =
            vol.at(src_off[0] + z, src_off[1] + y, src_off[2] + x);
  return out;
}

inline Volume resize_then_crop(const Volume& vol,
                               std::array<int64_t, 3> target = {48, 256, 256},
                               std::array<int64_t, 3> crop = {48, 224, 224}) {
  return center_crop_or_pad(trilinear_resize(vol, target[0], target[1], target[2]), crop[0],
                            crop[1], crop[2]);
}

// --- intensity transforms --------------------------------------------------

// Exact percentile via sort with linear interpolation between order
// statistics (index p/100 * (n-1)).
inline double exact_percentile(std::vector<float> values, double p) {
  if (values.empty()) throw std::invalid_argument("exact_percentile: empty input");
  std::sort(values.begin(), values.end());
  double idx = p / 100.0 * static_cast<double>(values.size() - 1);
  int64_t lo = static_cast<int64_t>(idx);
  int64_t hi = std::min<int64_t>(lo + 1, static_cast<int64_t>(values.size()) - 1);
  double frac = idx - static_cast<double>(lo);
  return (1.0 - frac) * values[static_cast<size_t>(lo)] + frac * values[static_cast<size_t>(hi)];
}

// Clips to the [lo, hi] percentiles and rescales to [0,1]. A degenerate
// range (constant volume) maps to all zeros.
inline Volume percentile_clip(const Volume& vol, double lo = 0.5, double hi = 99.5) {
  if (lo >= hi) throw std::invalid_argument("percentile_clip: lo must be < hi");
  double plo = exact_percentile(vol.voxels, lo);
  double phi = exact_percentile(vol.voxels, hi);
  Volume out = vol;
  if (phi <= plo) {
    std::fill(out.voxels.begin(), out.voxels.end(), 0.0f);
    return out;
  }
  double inv = 1.0 / (phi - plo);
  for (auto& v : out.voxels) {
    double c = std::min(std::max(static_cast<double>(v), plo), phi);
    v = static_cast<float>((c - plo) * inv);
  }
  return out;
}

// Clamp to [lo, hi] then rescale to [0,1].
inline Volume window_rescale(const Volume& vol, double lo, double hi) {
  Volume out = vol;
  double inv = 1.0 / (hi - lo);
  for (auto& v : out.voxels) {
    double c = std::min(std::max(static_cast<double>(v), lo), hi);
    v = static_cast<float>((c - lo) * inv);
  }
  return out;
}

// Head-CT window expansion: soft tissue [0,120], blood vessels [-20,180],
// bone [-800,2000], each as its own scan.
inline std::vector<Volume> hu_window_expand(const Volume& ct_vol) {
  return {window_rescale(ct_vol, 0, 120), window_rescale(ct_vol, -20, 180),
          window_rescale(ct_vol, -800, 2000)};
}

// --- quantization ----------------------------------------------------------

// round(v*255), round-half-up. Input must lie in [0,1].
inline std::vector<uint8_t> quantize_u8(const Volume& vol) {
  std::vector<uint8_t> out(vol.voxels.size());
  for (size_t i = 0; i < vol.voxels.size(); ++i) {
    float v = vol.voxels[i];
    if (v < 0.0f || v > 1.0f)
      throw std::out_of_range("quantize_u8: value " + std::to_string(v) + " outside [0,1]");
    out[i] = static_cast<uint8_t>(std::floor(v * 255.0f + 0.5f));
  }
  return out;
}

inline Volume dequantize(const std::vector<uint8_t>& data, std::array<int64_t, 3> dims) {
  Volume v;
  v.dims = dims;
  v.voxels.resize(data.size());
  if (static_cast<int64_t>(data.size()) != v.numel())
    throw ShapeError("dequantize: size does not match dims");
  for (size_t i = 0; i < data.size(); ++i) v.voxels[i] = static_cast<float>(data[i]) / 255.0f;
  return v;
}

// --- chest CT pipeline -----------------------------------------------------

// Resample to (3mm,1mm,1mm) spacing, window HU to [-1150,350], center
// crop/pad to (112,336,336).
inline Volume chest_pipeline(const RawScan& scan) {
  RawScan aligned = align_depth(scan);
  std::array<double, 3> target_spacing{3.0, 1.0, 1.0};
  std::array<int64_t, 3> new_dims;
  for (int i = 0; i < 3; ++i)
    new_dims[static_cast<size_t>(i)] = std::max<int64_t>(
        1, static_cast<int64_t>(std::llround(static_cast<double>(aligned.vol.dims[static_cast<size_t>(i)]) *
                                             aligned.spacing[static_cast<size_t>(i)] /
                                             target_spacing[static_cast<size_t>(i)])));
  Volume resampled = trilinear_resize(aligned.vol, new_dims[0], new_dims[1], new_dims[2]);
  Volume windowed = window_rescale(resampled, -1150, 350);
  return center_crop_or_pad(windowed, 112, 336, 336);
}

// --- study container -------------------------------------------------------

struct ScanRecord {
  std::string file;
  std::array<int64_t, 3> dims{};
  std::string dtype = "u8";  // "u8" or "f32"
  Plane plane = Plane::Axial;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
};

struct StudyManifest {
  std::string study_id;
  std::string modality;  // "MRI" or "CT"
  std::vector<ScanRecord> scans;
  std::string report;
};

struct LoadedStudy {
  std::string id;
  std::string modality;
  std::string report;
  std::vector<Volume> scans;  // [0,1] floats
};

inline void write_study_container(const StudyManifest& manifest,
                                  const std::vector<Volume>& volumes, const std::string& dir) {
  if (manifest.scans.size() != volumes.size())
    throw std::invalid_argument("write_study_container: record/volume count mismatch");
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  j["study_id"] = manifest.study_id;
  j["modality"] = manifest.modality;
  j["report"] = manifest.report;
  j["scans"] = nlohmann::json::array();
  for (size_t i = 0; i < manifest.scans.size(); ++i) {
    const auto& rec = manifest.scans[i];
    const auto& vol = volumes[i];
    if (vol.dims != rec.dims) throw ShapeError("write_study_container: dims mismatch");
    nlohmann::json js;
    js["file"] = rec.file;
    js["dims"] = {rec.dims[0], rec.dims[1], rec.dims[2]};
    js["dtype"] = rec.dtype;
    js["plane"] = plane_name(rec.plane);
    js["spacing"] = {rec.spacing[0], rec.spacing[1], rec.spacing[2]};
    j["scans"].push_back(js);
    std::ofstream f(dir + "/" + rec.file, std::ios::binary);
    if (!f) throw std::runtime_error("write_study_container: cannot open " + rec.file);
    if (rec.dtype == "u8") {
      auto q = quantize_u8(vol);
      f.write(reinterpret_cast<const char*>(q.data()), static_cast<std::streamsize>(q.size()));
    } else {
      f.write(reinterpret_cast<const char*>(vol.voxels.data()),
              static_cast<std::streamsize>(vol.voxels.size() * sizeof(float)));
    }
  }
  std::ofstream mf(dir + "/manifest.json");
  mf << j.dump(2) << "\n";
}

inline LoadedStudy read_study_container(const std::string& dir) {
  std::ifstream mf(dir + "/manifest.json");
  if (!mf) throw std::runtime_error("read_study_container: no manifest.json in " + dir);
  nlohmann::json j;
  mf >> j;
  LoadedStudy out;
  out.id = j.at("study_id").get<std::string>();
  out.modality = j.at("modality").get<std::string>();
  out.report = j.at("report").get<std::string>();
  for (const auto& js : j.at("scans")) {
    std::array<int64_t, 3> dims{js.at("dims")[0].get<int64_t>(), js.at("dims")[1].get<int64_t>(),
                                js.at("dims")[2].get<int64_t>()};
    std::string dtype = js.at("dtype").get<std::string>();
    std::string path = dir + "/" + js.at("file").get<std::string>();
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_study_container: missing scan file " + path);
    int64_t n = dims[0] * dims[1] * dims[2];
    if (dtype == "u8") {
      std::vector<uint8_t> buf(static_cast<size_t>(n));
      f.read(reinterpret_cast<char*>(buf.data()), n);
      if (!f) throw std::runtime_error("read_study_container: truncated scan file " + path);
      out.scans.push_back(dequantize(buf, dims));
    } else if (dtype == "f32") {
      Volume v;
      v.dims = dims;
      v.voxels.resize(static_cast<size_t>(n));
      f.read(reinterpret_cast<char*>(v.voxels.data()),
             static_cast<std::streamsize>(n * sizeof(float)));
      if (!f) throw std::runtime_error("read_study_container: truncated scan file " + path);
      out.scans.push_back(std::move(v));
    } else {
      throw std::runtime_error("read_study_container: unknown dtype " + dtype);
    }
  }
  return out;
}

}  // namespace hlip
