#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <map>

#include "hlip/synthetic.hpp"

using namespace hlip;

namespace {

// Mean intensity within a sphere around a lesion center.
double sphere_mean(const Volume& v, const Lesion& l) {
  double sum = 0.0;
  int64_t n = 0;
  double r2 = l.radius * l.radius;
  for (int64_t z = 0; z < v.dims[0]; ++z)
    for (int64_t y = 0; y < v.dims[1]; ++y)
      for (int64_t x = 0; x < v.dims[2]; ++x) {
        double dz = static_cast<double>(z) - l.center[0];
        double dy = static_cast<double>(y) - l.center[1];
        double dx = static_cast<double>(x) - l.center[2];
        if (dz * dz + dy * dy + dx * dx <= r2) {
          sum += v.at(z, y, x);
          ++n;
        }
      }
  return sum / static_cast<double>(n);
}

}  // namespace

TEST_CASE("generation is deterministic in the seed") {
  Rng a(42), b(42), c(43);
  SyntheticStudy s1 = generate_study(StudyClass::Mixed, 3, {16, 32, 32}, a);
  SyntheticStudy s2 = generate_study(StudyClass::Mixed, 3, {16, 32, 32}, b);
  SyntheticStudy s3 = generate_study(StudyClass::Mixed, 3, {16, 32, 32}, c);
  REQUIRE(s1.scans.size() == 3);
  for (size_t m = 0; m < 3; ++m) CHECK(s1.scans[m].voxels == s2.scans[m].voxels);
  bool differs = false;
  for (size_t m = 0; m < 3; ++m) differs |= (s1.scans[m].voxels != s3.scans[m].voxels);
  CHECK(differs);
}

TEST_CASE("class structure: lesion counts, polarity, and reports") {
  std::array<int64_t, 3> dims{16, 32, 32};
  for (int c = 0; c < kNumClasses; ++c) {
    Rng rng(100 + static_cast<uint64_t>(c));
    auto cls = static_cast<StudyClass>(c);
    SyntheticStudy s = generate_study(cls, 4, dims, rng);
    CHECK(s.label == c);
    CHECK(s.report == class_report(cls));
    CHECK(s.report.rfind("This MRI study shows: ", 0) == 0);
    for (const auto& v : s.scans) {
      CHECK(v.dims == dims);
      for (float x : v.voxels) {
        CHECK(x >= 0.0f);
        CHECK(x <= 1.0f);
      }
    }
    switch (cls) {
      case StudyClass::Healthy: CHECK(s.lesions.empty()); break;
      case StudyClass::Bright:
        REQUIRE(s.lesions.size() == 1);
        CHECK(s.lesions[0].delta > 0);
        CHECK_FALSE(s.lesions[0].shell);
        break;
      case StudyClass::Dark:
        REQUIRE(s.lesions.size() == 1);
        CHECK(s.lesions[0].delta < 0);
        break;
      case StudyClass::Ring:
        REQUIRE(s.lesions.size() == 1);
        CHECK(s.lesions[0].shell);
        break;
      case StudyClass::Mixed:
        REQUIRE(s.lesions.size() == 2);
        CHECK(s.lesions[0].delta * s.lesions[1].delta < 0);
        CHECK(s.lesions[0].scan != s.lesions[1].scan);
        break;
    }
  }
}

TEST_CASE("lesions measurably move local intensity") {
  std::array<int64_t, 3> dims{20, 40, 40};
  int bright_pass = 0, dark_pass = 0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng r1(seed), r2(seed);
    SyntheticStudy b = generate_study(StudyClass::Bright, 2, dims, r1);
    SyntheticStudy d = generate_study(StudyClass::Dark, 2, dims, r2);
    const Lesion& lb = b.lesions[0];
    const Lesion& ld = d.lesions[0];
    // compare the lesion sphere against the same scan's global mean
    const Volume& vb = b.scans[static_cast<size_t>(lb.scan)];
    const Volume& vd = d.scans[static_cast<size_t>(ld.scan)];
    double gb = 0, gd = 0;
    for (float x : vb.voxels) gb += x;
    for (float x : vd.voxels) gd += x;
    gb /= static_cast<double>(vb.numel());
    gd /= static_cast<double>(vd.numel());
    if (sphere_mean(vb, lb) > gb + 0.15) ++bright_pass;
    if (sphere_mean(vd, ld) < gd - 0.15) ++dark_pass;
  }
  CHECK(bright_pass == 10);
  CHECK(dark_pass == 10);
}

TEST_CASE("no single scan of a conjunction study determines its label") {
  // per-scan ground truth: a scan holds at most one solitary lesion, whose
  // polarity matches either the bright-only or dark-only class exactly
  std::array<int64_t, 3> dims{16, 32, 32};
  for (uint64_t seed = 0; seed < 8; ++seed) {
    Rng rng(seed);
    SyntheticStudy s = generate_study(StudyClass::Mixed, 4, dims, rng);
    std::map<int, double> per_scan;
    for (const auto& l : s.lesions) per_scan[l.scan] = l.delta;
    for (size_t m = 0; m < s.scans.size(); ++m) {
      auto it = per_scan.find(static_cast<int>(m));
      if (it == per_scan.end()) continue;  // looks exactly like a healthy scan
      // a lone bright scan mimics the bright class; a lone dark one the dark
      // class, so a scan-wise classifier cannot separate Mixed from either
      CHECK(std::abs(std::abs(it->second) - kLesionDelta) < 1e-12);
    }
    CHECK(per_scan.size() == 2);
  }
  Rng rng(5);
  CHECK_THROWS_AS(generate_study(StudyClass::Mixed, 1, dims, rng), std::invalid_argument);
}

TEST_CASE("generate_dataset writes balanced, split, loadable containers") {
  std::string dir = "synth_ds_test";
  std::filesystem::remove_all(dir);
  DatasetSpec spec;
  spec.num_studies = 20;
  spec.dims = {8, 16, 16};
  spec.m_min = 2;
  spec.m_max = 4;
  spec.seed = 11;

  auto index = generate_dataset(spec, dir);
  REQUIRE(static_cast<int64_t>(index.size()) == spec.num_studies);

  std::map<int, int> per_class;
  std::map<std::string, int> per_split;
  for (const auto& row : index) {
    ++per_class[row.label];
    ++per_split[row.split];
  }
  for (int c = 0; c < kNumClasses; ++c) CHECK(per_class[c] == 4);
  CHECK(per_split["test"] == 4);
  CHECK(per_split["val"] == 2);
  CHECK(per_split["train"] == 14);

  auto loaded_index = load_dataset_index(dir);
  REQUIRE(loaded_index.size() == index.size());
  for (size_t i = 0; i < index.size(); ++i) {
    CHECK(loaded_index[i].id == index[i].id);
    CHECK(loaded_index[i].label == index[i].label);
    CHECK(loaded_index[i].split == index[i].split);
  }

  LoadedStudy s = read_study_container(dir + "/" + index[0].id);
  CHECK(s.modality == "MRI");
  CHECK(s.report == class_report(static_cast<StudyClass>(index[0].label)));
  CHECK(static_cast<int>(s.scans.size()) >= spec.m_min);
  CHECK(static_cast<int>(s.scans.size()) <= spec.m_max);
  CHECK(s.scans[0].dims == spec.dims);

  // regeneration with the same seed is byte-identical
  std::string dir2 = "synth_ds_test2";
  std::filesystem::remove_all(dir2);
  generate_dataset(spec, dir2);
  LoadedStudy s2 = read_study_container(dir2 + "/" + index[0].id);
  CHECK(s2.scans[0].voxels == s.scans[0].voxels);

  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}
