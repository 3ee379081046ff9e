#pragma once

// Synthetic multi-scan MRI study generator: five study-level classes over
// procedurally generated volumes (smooth Gaussian-blob background + noise,
// with bright, dark, or ring lesions). One class is a cross-scan
// conjunction — a bright lesion in one scan and a dark lesion in another —
// so no single scan determines the study label.

#include <array>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hlip/preprocessing.hpp"
#include "hlip/rng.hpp"

namespace hlip {

enum class StudyClass { Healthy = 0, Bright = 1, Dark = 2, Ring = 3, Mixed = 4 };
constexpr int kNumClasses = 5;

inline const char* class_phrase(StudyClass c) {
  switch (c) {
    case StudyClass::Healthy: return "no abnormal findings";
    case StudyClass::Bright: return "a solitary hyperintense lesion";
    case StudyClass::Dark: return "a solitary hypointense lesion";
    case StudyClass::Ring: return "a ring enhancing lesion";
    default: return "multifocal hyperintense and hypointense lesions across scans";
  }
}

inline std::string class_report(StudyClass c) {
  return std::string("This MRI study shows: ") + class_phrase(c) + ".";
}

struct Lesion {
  int scan = 0;
  std::array<double, 3> center{};  // voxel coordinates
  double radius = 0.0;
  double delta = 0.0;  // additive intensity, sign gives polarity
  bool shell = false;
};

struct SyntheticStudy {
  std::vector<Volume> scans;
  int label = 0;
  std::string report;
  std::vector<Lesion> lesions;
};

namespace detail {

// Smooth background: a few anisotropic Gaussian blobs rescaled into
// [0.3, 0.5], plus white noise with sigma 0.05, clamped to [0,1].
inline Volume synth_background(std::array<int64_t, 3> dims, Rng& rng) {
  Volume v = Volume::zeros(dims[0], dims[1], dims[2]);
  int blobs = 3 + static_cast<int>(rng.uniform_int(4));
  std::vector<std::array<double, 3>> centers, inv2s;
  std::vector<double> amps;
  for (int b = 0; b < blobs; ++b) {
    std::array<double, 3> c, i2;
    for (int a = 0; a < 3; ++a) {
      double dim = static_cast<double>(dims[static_cast<size_t>(a)]);
      c[static_cast<size_t>(a)] = rng.uniform() * dim;
      double sigma = (0.15 + 0.2 * rng.uniform()) * dim;
      i2[static_cast<size_t>(a)] = 1.0 / (2.0 * sigma * sigma);
    }
    centers.push_back(c);
    inv2s.push_back(i2);
    amps.push_back(0.3 + 0.7 * rng.uniform());
  }
  double lo = 1e300, hi = -1e300;
  for (int64_t z = 0; z < dims[0]; ++z)
    for (int64_t y = 0; y < dims[1]; ++y)
      for (int64_t x = 0; x < dims[2]; ++x) {
        double s = 0.0;
        for (int b = 0; b < blobs; ++b) {
          double dz = static_cast<double>(z) - centers[static_cast<size_t>(b)][0];
          double dy = static_cast<double>(y) - centers[static_cast<size_t>(b)][1];
          double dx = static_cast<double>(x) - centers[static_cast<size_t>(b)][2];
          s += amps[static_cast<size_t>(b)] *
               std::exp(-(dz * dz * inv2s[static_cast<size_t>(b)][0] +
                          dy * dy * inv2s[static_cast<size_t>(b)][1] +
                          dx * dx * inv2s[static_cast<size_t>(b)][2]));
        }
        v.at(z, y, x) = static_cast<float>(s);
        lo = std::min(lo, s);
        hi = std::max(hi, s);
      }
  double scale = hi > lo ? 0.2 / (hi - lo) : 0.0;
  for (auto& x : v.voxels) {
    double base = 0.3 + (static_cast<double>(x) - lo) * scale;
    double n = base + 0.05 * rng.normal();
    x = static_cast<float>(std::min(std::max(n, 0.0), 1.0));
  }
  return v;
}

inline Lesion random_lesion(int scan, std::array<int64_t, 3> dims, double delta, bool shell,
                            Rng& rng) {
  double min_dim = static_cast<double>(std::min({dims[0], dims[1], dims[2]}));
  Lesion l;
  l.scan = scan;
  l.radius = (0.32 + 0.12 * rng.uniform()) * min_dim;
  l.delta = delta;
  l.shell = shell;
  for (int a = 0; a < 3; ++a) {
    double dim = static_cast<double>(dims[static_cast<size_t>(a)]);
    double margin = std::min(l.radius + 1.0, dim / 2.0 - 1.0);
    l.center[static_cast<size_t>(a)] = margin + rng.uniform() * (dim - 2.0 * margin);
  }
  return l;
}

inline void paint_lesion(Volume& v, const Lesion& l) {
  double r2 = l.radius * l.radius;
  double inner = l.shell ? 0.55 * l.radius : 0.0;
  double inner2 = inner * inner;
  for (int64_t z = 0; z < v.dims[0]; ++z)
    for (int64_t y = 0; y < v.dims[1]; ++y)
      for (int64_t x = 0; x < v.dims[2]; ++x) {
        double dz = static_cast<double>(z) - l.center[0];
        double dy = static_cast<double>(y) - l.center[1];
        double dx = static_cast<double>(x) - l.center[2];
        double d2 = dz * dz + dy * dy + dx * dx;
        if (d2 <= r2 && d2 >= inner2) {
          double nv = static_cast<double>(v.at(z, y, x)) + l.delta;
          v.at(z, y, x) = static_cast<float>(std::min(std::max(nv, 0.0), 1.0));
        }
      }
}

}  // namespace detail

constexpr double kLesionDelta = 1.0;

inline SyntheticStudy generate_study(StudyClass cls, int scans, std::array<int64_t, 3> dims,
                                     Rng& rng) {
  if (scans < 1) throw std::invalid_argument("generate_study: need at least one scan");
  if (cls == StudyClass::Mixed && scans < 2)
    throw std::invalid_argument("generate_study: the conjunction class needs >= 2 scans");
  SyntheticStudy s;
  s.label = static_cast<int>(cls);
  s.report = class_report(cls);
  for (int m = 0; m < scans; ++m) s.scans.push_back(detail::synth_background(dims, rng));

  switch (cls) {
    case StudyClass::Healthy:
      break;
    case StudyClass::Bright:
      s.lesions.push_back(
          detail::random_lesion(static_cast<int>(rng.uniform_int(scans)), dims, kLesionDelta, false, rng));
      break;
    case StudyClass::Dark:
      s.lesions.push_back(
          detail::random_lesion(static_cast<int>(rng.uniform_int(scans)), dims, -kLesionDelta, false, rng));
      break;
    case StudyClass::Ring:
      s.lesions.push_back(
          detail::random_lesion(static_cast<int>(rng.uniform_int(scans)), dims, kLesionDelta, true, rng));
      break;
    case StudyClass::Mixed: {
      auto picks = rng.sample_without_replacement(scans, 2);
      s.lesions.push_back(detail::random_lesion(static_cast<int>(picks[0]), dims, kLesionDelta, false, rng));
      s.lesions.push_back(detail::random_lesion(static_cast<int>(picks[1]), dims, -kLesionDelta, false, rng));
      break;
    }
  }
  for (const auto& l : s.lesions) detail::paint_lesion(s.scans[static_cast<size_t>(l.scan)], l);
  return s;
}

// --- dataset generation ----------------------------------------------------

struct DatasetSpec {
  int64_t num_studies = 100;
  std::array<int64_t, 3> dims{24, 64, 64};
  int m_min = 2;
  int m_max = 6;
  uint64_t seed = 0;
  double val_frac = 0.1;
  double test_frac = 0.2;
};

struct DatasetIndexRow {
  std::string id;
  int label = 0;
  std::string split;
};

inline std::string study_dir_name(int64_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "study_%05lld", static_cast<long long>(index));
  return buf;
}

// Writes one container per study plus labels.tsv (id, label, split).
// Classes are balanced; each study's content depends only on (seed, index).
inline std::vector<DatasetIndexRow> generate_dataset(const DatasetSpec& spec,
                                                     const std::string& out_dir) {
  if (spec.m_min < 2 || spec.m_max < spec.m_min)
    throw std::invalid_argument("generate_dataset: need 2 <= m_min <= m_max");
  std::filesystem::create_directories(out_dir);

  Rng master(spec.seed);
  std::vector<int> labels(static_cast<size_t>(spec.num_studies));
  for (int64_t i = 0; i < spec.num_studies; ++i)
    labels[static_cast<size_t>(i)] = static_cast<int>(i % kNumClasses);
  master.shuffle(labels);
  std::vector<int64_t> order(static_cast<size_t>(spec.num_studies));
  std::iota(order.begin(), order.end(), 0);
  master.shuffle(order);
  int64_t n_test = static_cast<int64_t>(std::llround(spec.test_frac * static_cast<double>(spec.num_studies)));
  int64_t n_val = static_cast<int64_t>(std::llround(spec.val_frac * static_cast<double>(spec.num_studies)));
  std::vector<std::string> split(static_cast<size_t>(spec.num_studies), "train");
  for (int64_t i = 0; i < n_test; ++i) split[static_cast<size_t>(order[static_cast<size_t>(i)])] = "test";
  for (int64_t i = n_test; i < n_test + n_val; ++i)
    split[static_cast<size_t>(order[static_cast<size_t>(i)])] = "val";

  std::vector<DatasetIndexRow> index;
  for (int64_t i = 0; i < spec.num_studies; ++i) {
    Rng rng(Rng::derive(spec.seed, static_cast<uint64_t>(i)));
    int m = spec.m_min + static_cast<int>(rng.uniform_int(spec.m_max - spec.m_min + 1));
    auto cls = static_cast<StudyClass>(labels[static_cast<size_t>(i)]);
    SyntheticStudy s = generate_study(cls, m, spec.dims, rng);

    StudyManifest manifest;
    manifest.study_id = study_dir_name(i);
    manifest.modality = "MRI";
    manifest.report = s.report;
    for (size_t k = 0; k < s.scans.size(); ++k) {
      char f[32];
      std::snprintf(f, sizeof(f), "scan_%03zu.raw", k);
      manifest.scans.push_back({f, spec.dims, "u8", Plane::Axial, {1.0, 1.0, 1.0}});
    }
    write_study_container(manifest, s.scans, out_dir + "/" + manifest.study_id);
    index.push_back({manifest.study_id, s.label, split[static_cast<size_t>(i)]});
  }

  std::ofstream f(out_dir + "/labels.tsv");
  for (const auto& row : index) f << row.id << "\t" << row.label << "\t" << row.split << "\n";
  return index;
}

inline std::vector<DatasetIndexRow> load_dataset_index(const std::string& out_dir) {
  std::ifstream f(out_dir + "/labels.tsv");
  if (!f) throw std::runtime_error("load_dataset_index: no labels.tsv in " + out_dir);
  std::vector<DatasetIndexRow> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    DatasetIndexRow row;
    if (!(ss >> row.id >> row.label >> row.split))
      throw std::runtime_error("load_dataset_index: malformed line: " + line);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace hlip
