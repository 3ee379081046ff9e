#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <regex>

#include "hlip/clip.hpp"
#include "hlip/synthetic.hpp"
#include "test_support.hpp"

using namespace hlip;

namespace {

// Direct softmax cross-entropy evaluation of the symmetric loss.
double clip_loss_oracle(const std::vector<std::vector<double>>& img,
                        const std::vector<std::vector<double>>& txt, double temp) {
  size_t b = img.size(), e = img[0].size();
  std::vector<std::vector<double>> logits(b, std::vector<double>(b));
  for (size_t i = 0; i < b; ++i)
    for (size_t j = 0; j < b; ++j) {
      double dot = 0;
      for (size_t k = 0; k < e; ++k) dot += img[i][k] * txt[j][k];
      logits[i][j] = temp * dot;
    }
  auto ce_diag = [&](bool rows) {
    double total = 0;
    for (size_t i = 0; i < b; ++i) {
      double denom = 0;
      for (size_t j = 0; j < b; ++j) denom += std::exp(rows ? logits[i][j] : logits[j][i]);
      total -= std::log(std::exp(logits[i][i]) / denom);
    }
    return total / static_cast<double>(b);
  };
  return 0.5 * (ce_diag(true) + ce_diag(false));
}

TensorD normalized_rows(int64_t b, int64_t e, Rng& rng) {
  TensorD x = testsup::random_tensor({b, e}, rng);
  std::vector<double> v = x.vals();
  for (int64_t i = 0; i < b; ++i) {
    double n = 0;
    for (int64_t k = 0; k < e; ++k) n += v[static_cast<size_t>(i * e + k)] * v[static_cast<size_t>(i * e + k)];
    n = std::sqrt(n);
    for (int64_t k = 0; k < e; ++k) v[static_cast<size_t>(i * e + k)] /= n;
  }
  return TensorD::from_vector({b, e}, v);
}

}  // namespace

TEST_CASE("clip_loss is ln(B) for identical embeddings") {
  for (int64_t b : {2, 4, 7}) {
    std::vector<double> row{1.0, 0.0, 0.0, 0.0};
    std::vector<double> all;
    for (int64_t i = 0; i < b; ++i) all.insert(all.end(), row.begin(), row.end());
    TensorD img = TensorD::from_vector({b, 4}, all);
    TensorD lt = TensorD::scalar(std::log(1.0 / 0.07));
    TensorD loss = clip_loss(img, img, lt);
    CHECK(loss.vals()[0] == doctest::Approx(std::log(static_cast<double>(b))).epsilon(1e-12));
  }
}

TEST_CASE("clip_loss vanishes for orthonormal pairs at high temperature") {
  TensorD img = TensorD::from_vector({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  TensorD lt = TensorD::scalar(std::log(80.0));
  TensorD loss = clip_loss(img, img, lt);
  CHECK(loss.vals()[0] < 1e-12);
}

TEST_CASE("clip_loss matches a direct oracle on random f64 batches") {
  Rng rng(31);
  for (int rep = 0; rep < 5; ++rep) {
    int64_t b = 3, e = 6;
    TensorD img = normalized_rows(b, e, rng);
    TensorD txt = normalized_rows(b, e, rng);
    double log_temp = std::log(1.0 / 0.07);
    TensorD lt = TensorD::scalar(log_temp);
    std::vector<std::vector<double>> io(static_cast<size_t>(b)), to(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
      io[static_cast<size_t>(i)].assign(img.vals().begin() + i * e, img.vals().begin() + (i + 1) * e);
      to[static_cast<size_t>(i)].assign(txt.vals().begin() + i * e, txt.vals().begin() + (i + 1) * e);
    }
    double expect = clip_loss_oracle(io, to, std::exp(log_temp));
    TensorD loss = clip_loss(img, txt, lt);
    CHECK(std::abs(loss.vals()[0] - expect) < 1e-12);
  }
}

TEST_CASE("clip_loss is invariant to simultaneous row permutation") {
  Rng rng(7);
  int64_t b = 5, e = 4;
  TensorD img = normalized_rows(b, e, rng);
  TensorD txt = normalized_rows(b, e, rng);
  TensorD lt = TensorD::scalar(1.3);
  double base = clip_loss(img, txt, lt).vals()[0];
  std::vector<int64_t> perm{3, 0, 4, 1, 2};
  TensorD pi = index_select(img, 0, perm);
  TensorD pt = index_select(txt, 0, perm);
  CHECK(clip_loss(pi, pt, lt).vals()[0] == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("clip_loss gradients check out, including log_temp") {
  Rng rng(17);
  int64_t b = 4, e = 5;
  TensorD img = normalized_rows(b, e, rng);
  TensorD txt = normalized_rows(b, e, rng);
  img.enable_grad();
  txt.enable_grad();
  TensorD lt = TensorD::scalar(0.9, true);
  auto fn = [&]() { return clip_loss(img, txt, lt); };
  double err = testsup::gradcheck(fn, {img, txt, lt});
  CHECK(err < 1e-4);
}

TEST_CASE("temperature is capped at temp_max with zero gradient") {
  TensorD img = TensorD::from_vector({2, 2}, {1, 0, 0, 1}, true);
  TensorD lt = TensorD::scalar(std::log(500.0), true);
  double capped, direct;
  {
    Tape<double> tape;
    TensorD loss = clip_loss(img, img, lt);
    capped = loss.vals()[0];
    tape.backward(loss);
  }
  CHECK(lt.grads()[0] == 0.0);
  direct = clip_loss(img, img, TensorD::scalar(std::log(100.0))).vals()[0];
  CHECK(capped == doctest::Approx(direct).epsilon(1e-14));
}

TEST_CASE("clip_loss rejects bad inputs") {
  TensorD one = TensorD::from_vector({1, 2}, {1, 0});
  TensorD two = TensorD::from_vector({2, 2}, {1, 0, 0, 1});
  TensorD lt = TensorD::scalar(1.0);
  CHECK_THROWS_AS(clip_loss(one, one, lt), std::invalid_argument);
  CHECK_THROWS_AS(clip_loss(two, TensorD::from_vector({2, 3}, {1, 0, 0, 0, 1, 0}), lt), ShapeError);
  CHECK_THROWS_AS(clip_loss(two, two, TensorD::from_vector({2}, {1, 1})), ShapeError);
}

TEST_CASE("lr schedule: scaling rule, warmup ramp, cosine decay") {
  TrainConfig cfg;
  cfg.batch_size = 64;
  cfg.base_lr = 1e-4;
  cfg.warmup_steps = 2000;
  cfg.total_steps = 10000;
  CHECK(lr_at(0, cfg) == 0.0);
  CHECK(lr_at(2000, cfg) == doctest::Approx(1e-4).epsilon(1e-15));
  CHECK(lr_at(1000, cfg) == doctest::Approx(0.5e-4).epsilon(1e-15));
  CHECK(lr_at(10000, cfg) == doctest::Approx(0.0));
  // halfway through the decay: cos(pi/2) -> half the peak
  CHECK(lr_at(6000, cfg) == doctest::Approx(0.5e-4).epsilon(1e-12));
  // continuity at the warmup boundary (one step changes lr by ~peak/warmup)
  CHECK(std::abs(lr_at(1999, cfg) - lr_at(2000, cfg)) < 1e-7);
  CHECK(std::abs(lr_at(2001, cfg) - lr_at(2000, cfg)) < 1e-7);
  for (int64_t s = 0; s <= 10000; s += 97) CHECK(lr_at(s, cfg) >= 0.0);

  cfg.batch_size = 256;
  CHECK(lr_at(2000, cfg) == doctest::Approx(4e-4).epsilon(1e-15));

  CHECK_THROWS_AS(lr_at(-1, cfg), std::invalid_argument);
  CHECK_THROWS_AS(lr_at(10001, cfg), std::invalid_argument);
  cfg.warmup_steps = 20000;
  CHECK_THROWS_AS(lr_at(0, cfg), std::invalid_argument);
}

TEST_CASE("AdamW single-step hand oracle, decay rules, and errors") {
  // zero grads, zero decay -> unchanged
  TensorD p = TensorD::from_vector({2}, {1.5, -2.0}, true);
  AdamW<double> opt(0.9, 0.95, 1e-8, 0.2);
  opt.step({&p}, {false}, 0.1);
  CHECK(p.vals()[0] == 1.5);
  CHECK(p.vals()[1] == -2.0);

  // decay-only on weight 1.0, lr 0.1, wd 0.2 -> 0.98
  TensorD w = TensorD::from_vector({1}, {1.0}, true);
  AdamW<double> opt2(0.9, 0.95, 1e-8, 0.2);
  opt2.step({&w}, {true}, 0.1);
  CHECK(w.vals()[0] == doctest::Approx(0.98).epsilon(1e-15));

  // single scalar with gradient: hand-computed bias-corrected update
  double g = 0.3, lr = 0.01, b1 = 0.9, b2 = 0.95, eps = 1e-8;
  TensorD x = TensorD::from_vector({1}, {2.0}, true);
  x.grads()[0] = g;
  AdamW<double> opt3(b1, b2, eps, 0.0);
  opt3.step({&x}, {false}, lr);
  double m = (1 - b1) * g, v = (1 - b2) * g * g;
  double mhat = m / (1 - b1), vhat = v / (1 - b2);
  double expect = 2.0 - lr * mhat / (std::sqrt(vhat) + eps);
  CHECK(x.vals()[0] == doctest::Approx(expect).epsilon(1e-15));

  // two steps accumulate moments
  x.grads()[0] = g;
  opt3.step({&x}, {false}, lr);
  m = b1 * m + (1 - b1) * g;
  v = b2 * v + (1 - b2) * g * g;
  mhat = m / (1 - b1 * b1);
  vhat = v / (1 - b2 * b2);
  expect -= lr * mhat / (std::sqrt(vhat) + eps);
  CHECK(x.vals()[0] == doctest::Approx(expect).epsilon(1e-12));

  TensorD wrong = TensorD::from_vector({3}, {0, 0, 0}, true);
  CHECK_THROWS_AS(opt3.step({&wrong}, {false}, lr), ShapeError);
  CHECK_THROWS_AS(opt3.step({&x}, {false, true}, lr), ShapeError);
}

namespace {

// Small, fast towers used by the batch/fit tests.
EncoderConfig tiny_enc_cfg() {
  EncoderConfig cfg;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.width = 16;
  cfg.mlp_ratio = 2;
  cfg.in_d = 16;
  cfg.in_h = 32;
  cfg.in_w = 32;
  cfg.kd = 8;
  cfg.kh = 16;
  cfg.kw = 16;
  cfg.level_schedule = {AttentionLevel::Scan, AttentionLevel::Study};
  cfg.m_max = 8;
  cfg.patch_dropout_rate = 0.0;
  cfg.proj_width = 8;
  return cfg;
}

TextConfig tiny_txt_cfg(int64_t vocab_size) {
  TextConfig cfg;
  cfg.layers = 1;
  cfg.width = 16;
  cfg.heads = 2;
  cfg.context_length = 12;
  cfg.vocab_size = vocab_size;
  cfg.proj_width = 8;
  return cfg;
}

std::vector<LoadedStudy> tiny_dataset(int64_t n, uint64_t seed) {
  std::vector<LoadedStudy> out;
  for (int64_t i = 0; i < n; ++i) {
    Rng rng(Rng::derive(seed, static_cast<uint64_t>(i)));
    auto cls = static_cast<StudyClass>(i % kNumClasses);
    SyntheticStudy s = generate_study(cls, 2 + static_cast<int>(i % 3), {16, 32, 32}, rng);
    LoadedStudy l;
    l.id = study_dir_name(i);
    l.modality = "MRI";
    l.report = s.report;
    l.scans = std::move(s.scans);
    out.push_back(std::move(l));
  }
  return out;
}

Vocab report_vocab() {
  std::vector<std::string> corpus;
  for (int c = 0; c < kNumClasses; ++c) corpus.push_back(class_report(static_cast<StudyClass>(c)));
  return Vocab::build(corpus);
}

}  // namespace

TEST_CASE("build_batch samples, pads, and flags scans deterministically") {
  auto data = tiny_dataset(3, 5);
  data[0].scans.resize(2);
  Vocab vocab = report_vocab();
  TrainConfig cfg;
  cfg.batch_size = 3;
  cfg.scans_per_study = 4;
  cfg.m_max = 8;

  EncoderConfig ec = tiny_enc_cfg();
  std::vector<const LoadedStudy*> ptrs{&data[0], &data[1], &data[2]};
  Rng r1(9), r2(9);
  Batch<float> a = build_batch<float>(ptrs, cfg, ec, vocab, 12, r1);
  Batch<float> b = build_batch<float>(ptrs, cfg, ec, vocab, 12, r2);
  CHECK(a.study.vals() == b.study.vals());
  CHECK(a.slots == b.slots);
  CHECK(a.any_padding);

  // study 0 has 2 scans -> 2 valid + 2 zero-padded
  const float* pv = a.scan_valid.data();
  CHECK(pv[0] == 1.0f);
  CHECK(pv[1] == 1.0f);
  CHECK(pv[2] == 0.0f);
  CHECK(pv[3] == 0.0f);
  int64_t voxels = ec.in_d * ec.in_h * ec.in_w;
  const float* ps = a.study.data();
  float pad_sum = 0;
  for (int64_t j = 0; j < voxels; ++j) pad_sum += std::abs(ps[3 * voxels + j]);
  CHECK(pad_sum == 0.0f);

  for (const auto& slot_list : a.slots) {
    CHECK(static_cast<int64_t>(slot_list.size()) == cfg.scans_per_study);
    for (int64_t s : slot_list) {
      CHECK(s >= 0);
      CHECK(s < cfg.m_max);
    }
  }
  REQUIRE(a.text_ids.size() == 3);
  CHECK(static_cast<int64_t>(a.text_ids[0].size()) == 12);
  CHECK(a.text_ids[0][0] == Vocab::kCls);

  LoadedStudy empty;
  empty.id = "empty";
  std::vector<const LoadedStudy*> bad{&empty};
  CHECK_THROWS_AS(build_batch<float>(bad, cfg, ec, vocab, 12, r1), std::invalid_argument);
}

TEST_CASE("padded batches match their unpadded equivalents through the encoder") {
  auto data = tiny_dataset(2, 21);
  data[0].scans.resize(2);
  data[1].scans.resize(2);
  Vocab vocab = report_vocab();
  EncoderConfig ec = tiny_enc_cfg();
  Rng rng(3);
  ClipModel<float> model = ClipModel<float>::init(ec, tiny_txt_cfg(vocab.size()), std::log(1 / 0.07), rng);

  TrainConfig pad_cfg;
  pad_cfg.batch_size = 2;
  pad_cfg.scans_per_study = 4;  // forces 2 padding scans per study
  pad_cfg.m_max = 8;
  std::vector<const LoadedStudy*> ptrs{&data[0], &data[1]};
  Rng rp(77);
  Batch<float> padded = build_batch<float>(ptrs, pad_cfg, ec, vocab, 12, rp);

  // hand-build the unpadded twin: the real scans and slot prefixes only
  Batch<float> tight;
  int64_t voxels = ec.in_d * ec.in_h * ec.in_w;
  tight.study = Tensor<float>::zeros({2, 2, 1, ec.in_d, ec.in_h, ec.in_w});
  for (int64_t i = 0; i < 2; ++i) {
    for (int64_t k = 0; k < 2; ++k)
      std::copy(padded.study.data() + (i * 4 + k) * voxels,
                padded.study.data() + (i * 4 + k + 1) * voxels,
                tight.study.data() + (i * 2 + k) * voxels);
    tight.slots.push_back({padded.slots[static_cast<size_t>(i)][0],
                           padded.slots[static_cast<size_t>(i)][1]});
  }

  Tensor<float> ep = encoder_forward(padded.study, padded.slots, ec, model.enc, false, nullptr,
                                     &padded.scan_valid);
  Tensor<float> et = encoder_forward(tight.study, tight.slots, ec, model.enc, false);
  for (size_t i = 0; i < ep.vals().size(); ++i)
    CHECK(std::abs(ep.vals()[i] - et.vals()[i]) < 1e-5f);
}

TEST_CASE("fit drives the loss down, logs the right format, and checkpoints") {
  auto data = tiny_dataset(8, 42);
  Vocab vocab = report_vocab();
  EncoderConfig ec = tiny_enc_cfg();
  Rng rng(1);
  ClipModel<float> model = ClipModel<float>::init(ec, tiny_txt_cfg(vocab.size()), std::log(1 / 0.07), rng);

  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.base_lr = 2e-3;
  cfg.warmup_steps = 2;
  cfg.total_steps = 12;
  cfg.scans_per_study = 3;
  cfg.m_max = 8;
  cfg.patch_dropout_rate = 0.0;
  cfg.seed = 5;

  std::string ckpt = "clip_fit_ckpt";
  std::filesystem::remove_all(ckpt);
  FitResult res = fit(data, model, cfg, vocab, 6, ckpt);
  CHECK(res.steps == 12);  // 8 studies / batch 4 * 6 epochs
  REQUIRE(res.losses.size() == 12);

  std::regex line_re(R"(^\d+\t\d+\t\d+\.\d{6}\t[0-9eE.+-]+\t\d+\.\d{2}$)");
  for (const auto& line : res.log_lines) CHECK(std::regex_match(line, line_re));

  double first = (res.losses[0] + res.losses[1]) / 2;
  double last = (res.losses[10] + res.losses[11]) / 2;
  CHECK(last < first);

  // checkpoint reload reproduces eval embeddings bit-identically
  Rng rng2(999);
  ClipModel<float> fresh = ClipModel<float>::init(ec, tiny_txt_cfg(vocab.size()), 0.0, rng2);
  fresh.load(ckpt);
  std::vector<const LoadedStudy*> ptrs{&data[0], &data[1]};
  Rng rb(4);
  Batch<float> batch = build_batch<float>(ptrs, cfg, ec, vocab, 12, rb);
  Tensor<float> e1 = encoder_forward(batch.study, batch.slots, ec, model.enc, false, nullptr,
                                     &batch.scan_valid);
  Tensor<float> e2 = encoder_forward(batch.study, batch.slots, ec, fresh.enc, false, nullptr,
                                     &batch.scan_valid);
  CHECK(e1.vals() == e2.vals());
  CHECK(fresh.log_temp.vals()[0] == model.log_temp.vals()[0]);
  std::filesystem::remove_all(ckpt);

  // non-finite loss aborts with a diagnostic
  model.log_temp.vals()[0] = std::nan("");
  CHECK_THROWS_AS(fit(data, model, cfg, vocab, 1), std::runtime_error);
}
