#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hlip/preprocessing.hpp"
#include "hlip/rng.hpp"

using namespace hlip;

namespace {

struct RunResult {
  int code = -1;
  std::string out;  // stdout + stderr
};

std::string cli_path() {
  const char* p = std::getenv("HLIP_CLI");
  REQUIRE_MESSAGE(p != nullptr, "HLIP_CLI must point at the hlip binary");
  return p;
}

RunResult run(const std::string& args) {
  std::string cmd = cli_path() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  RunResult r;
  char buf[4096];
  while (size_t n = fread(buf, 1, sizeof(buf), pipe)) r.out.append(buf, n);
  int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

const char* kMiniCfg = R"(vision_layers=2
vision_width=32
vision_heads=2
mlp_ratio=2
input_d=16
input_h=32
input_w=32
token_d=8
token_h=16
token_w=16
attn_schedule=1
attn_fine_level=scan
attn_coarse_level=study
patch_dropout=0.0
scans_per_study=3
m_max=8
embed_dim=16
text_layers=1
text_width=32
text_heads=2
context_length=12
batch_size=4
base_lr=1e-3
warmup_steps=2
total_steps=8
epochs=2
num_studies=16
scans_min=2
scans_max=4
)";

struct Workdir {
  std::string dir;
  explicit Workdir(const std::string& name) : dir(name) {
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
  }
  ~Workdir() { std::filesystem::remove_all(dir); }
  std::string path(const std::string& f) const { return dir + "/" + f; }
};

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path);
  f << content;
}

std::string read_file(const std::string& path) {
  std::ifstream f(path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("--help is stable and exits 0") {
  RunResult r = run("--help");
  CHECK(r.code == 0);
  // golden: the full usage surface
  for (const char* needle :
       {"hlip: hierarchical language-image pre-training for multi-scan studies",
        "Usage:", "gen-data", "preprocess", "train", "eval", "bench", "gradcheck", "--threads"})
    CHECK_MESSAGE(r.out.find(needle) != std::string::npos, "missing: " << needle);
}

TEST_CASE("usage errors exit 1 with help on stderr") {
  CHECK(run("bogus-subcommand").code == 1);
  CHECK(run("").code == 1);
  CHECK(run("train").code == 1);                 // missing required flags
  CHECK(run("--threads 2 gradcheck").code == 1); // only single-threaded
  RunResult r = run("bogus-subcommand");
  CHECK(r.out.find("Usage:") != std::string::npos);
}

TEST_CASE("gradcheck passes its threshold") {
  RunResult r = run("gradcheck --seed 7");
  CHECK(r.code == 0);
  CHECK(r.out.find("max_rel_error") != std::string::npos);
  CHECK(r.out.find("PASS") != std::string::npos);
}

TEST_CASE("a bad config key is a runtime failure (exit 2)") {
  Workdir wd("cli_badcfg");
  write_file(wd.path("bad.cfg"), "vision_layers=2\nno_such_key=5\n");
  RunResult r = run("gen-data --config " + wd.path("bad.cfg") + " --out " + wd.path("ds"));
  CHECK(r.code == 2);
  CHECK(r.out.find("no_such_key") != std::string::npos);
}

TEST_CASE("gen-data is deterministic under --seed") {
  Workdir wd("cli_gendata");
  write_file(wd.path("mini.cfg"), kMiniCfg);
  std::string base = "gen-data --config " + wd.path("mini.cfg") + " --seed 11 --out ";
  CHECK(run(base + wd.path("a")).code == 0);
  CHECK(run(base + wd.path("b")).code == 0);
  CHECK(read_file(wd.path("a/labels.tsv")) == read_file(wd.path("b/labels.tsv")));
  CHECK(read_file(wd.path("a/study_00000/scan_000.raw")) ==
        read_file(wd.path("b/study_00000/scan_000.raw")));
  // different seed -> different data
  CHECK(run("gen-data --config " + wd.path("mini.cfg") + " --seed 12 --out " + wd.path("c")).code == 0);
  CHECK(read_file(wd.path("a/study_00000/scan_000.raw")) !=
        read_file(wd.path("c/study_00000/scan_000.raw")));
}

TEST_CASE("train twice gives identical final loss; eval and bench run end-to-end") {
  Workdir wd("cli_train");
  write_file(wd.path("mini.cfg"), kMiniCfg);
  std::string cfg = " --config " + wd.path("mini.cfg");
  REQUIRE(run("gen-data" + cfg + " --seed 3 --out " + wd.path("ds")).code == 0);

  RunResult t1 = run("train" + cfg + " --seed 3 --data " + wd.path("ds") + " --out " + wd.path("r1"));
  RunResult t2 = run("train" + cfg + " --seed 3 --data " + wd.path("ds") + " --out " + wd.path("r2"));
  REQUIRE(t1.code == 0);
  REQUIRE(t2.code == 0);
  auto final_loss = [](const std::string& out) {
    size_t p = out.find("final_loss\t");
    REQUIRE(p != std::string::npos);
    return out.substr(p, out.find('\n', p) - p);
  };
  CHECK(final_loss(t1.out) == final_loss(t2.out));
  CHECK(std::filesystem::exists(wd.path("r1/model/manifest.txt")));
  CHECK(std::filesystem::exists(wd.path("r1/vocab.txt")));
  CHECK(std::filesystem::exists(wd.path("r1/log.tsv")));
  // 11 train studies (16 minus 3 test, 2 val) / batch 4 -> 2 steps/epoch
  std::istringstream log(read_file(wd.path("r1/log.tsv")));
  std::string line;
  int lines = 0;
  while (std::getline(log, line))
    if (!line.empty()) ++lines;
  CHECK(lines == 4);

  RunResult zs = run("eval zero-shot" + cfg + " --seed 3 --data " + wd.path("ds") + " --ckpt " +
                     wd.path("r1") + " --out " + wd.path("zs.json"));
  CHECK(zs.code == 0);
  CHECK(zs.out.find("balanced_acc") != std::string::npos);
  CHECK(std::filesystem::exists(wd.path("zs.json")));

  RunResult ret = run("eval retrieval" + cfg + " --seed 3 --data " + wd.path("ds") + " --ckpt " +
                      wd.path("r1"));
  CHECK(ret.code == 0);
  CHECK(ret.out.find("i2t_recall@1") != std::string::npos);
  CHECK(ret.out.find("t2i_recall@1") != std::string::npos);
}

TEST_CASE("bench attention prints one CostReport per requested level") {
  Workdir wd("cli_bench");
  write_file(wd.path("mini.cfg"), kMiniCfg);
  RunResult r = run("bench attention --config " + wd.path("mini.cfg") +
                    " --levels study,scan,slice --warmup 1 --iters 2 --scans 3");
  CHECK(r.code == 0);
  size_t count = 0, pos = 0;
  while ((pos = r.out.find("(counts are multiply-adds, not FLOPs x2)", pos)) != std::string::npos) {
    ++count;
    pos += 10;
  }
  CHECK(count == 3);
  for (const char* lvl : {"study", "scan", "slice"})
    CHECK(r.out.find(lvl) != std::string::npos);
}

TEST_CASE("preprocess normalizes a raw container per modality") {
  Workdir wd("cli_preproc");
  // build a raw f32 study container: one small anatomical-intensity volume
  Rng rng(5);
  Volume v = Volume::zeros(10, 40, 40);
  for (auto& x : v.voxels) x = static_cast<float>(200.0 + 600.0 * rng.uniform());
  StudyManifest m;
  m.study_id = "raw_case";
  m.modality = "MRI";
  m.report = "This MRI study shows: no abnormal findings.";
  m.scans.push_back({"scan_000.raw", v.dims, "f32", Plane::Axial, {5.0, 1.0, 1.0}});
  write_study_container(m, {v}, wd.path("raw"));

  RunResult r = run("preprocess --modality mri --in " + wd.path("raw") + " --out " + wd.path("out"));
  REQUIRE(r.code == 0);
  LoadedStudy s = read_study_container(wd.path("out"));
  REQUIRE(s.scans.size() == 1);
  CHECK(s.scans[0].dims == std::array<int64_t, 3>{48, 224, 224});
  for (float x : s.scans[0].voxels) {
    CHECK(x >= 0.0f);
    CHECK(x <= 1.0f);
  }

  // head-CT windowing expands each scan into three windowed scans
  RunResult rc = run("preprocess --modality ct --in " + wd.path("raw") + " --out " + wd.path("out_ct"));
  REQUIRE(rc.code == 0);
  CHECK(read_study_container(wd.path("out_ct")).scans.size() == 3);

  CHECK(run("preprocess --modality mri --in " + wd.path("missing") + " --out " + wd.path("x")).code == 2);
}
