#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "hlip/evalbench.hpp"

using namespace hlip;

namespace {

// O(n^2) pair-counting AUC: wins + half-ties over all pos/neg pairs.
double auc_oracle(const std::vector<double>& scores, const std::vector<int64_t>& labels) {
  double wins = 0;
  int64_t pairs = 0;
  for (size_t i = 0; i < scores.size(); ++i)
    for (size_t j = 0; j < scores.size(); ++j) {
      if (labels[i] != 1 || labels[j] != 0) continue;
      ++pairs;
      if (scores[i] > scores[j]) wins += 1.0;
      else if (scores[i] == scores[j]) wins += 0.5;
    }
  return wins / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("PromptSet validates its single slot and fills class names") {
  PromptSet p{"This brain MRI shows: {disease}.", {"glioma", "stroke"}};
  CHECK(p.fill(0) == "This brain MRI shows: glioma.");
  CHECK(p.fill(1) == "This brain MRI shows: stroke.");
  CHECK_THROWS_AS((PromptSet{"no slot here.", {"a"}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((PromptSet{"{disease} twice {disease}", {"a"}}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((PromptSet{"{disease}", {}}.validate()), std::invalid_argument);
}

TEST_CASE("zero_shot_classify: cosine argmax with lowest-index tie-break") {
  TensorD prompts = TensorD::from_vector({3, 2}, {1, 0, 0, 1, std::sqrt(0.5), std::sqrt(0.5)});
  TensorD study = TensorD::from_vector({2}, {0, 1});
  auto [cls, scores] = zero_shot_classify(study, prompts);
  CHECK(cls == 1);
  CHECK(scores[1] == doctest::Approx(1.0));

  // exact tie between classes 0 and 1 -> lowest index
  TensorD mid = TensorD::from_vector({2}, {std::sqrt(0.5), std::sqrt(0.5)});
  auto [tie_cls, tie_scores] = zero_shot_classify(mid, TensorD::from_vector({2, 2}, {1, 0, 0, 1}));
  CHECK(tie_scores[0] == doctest::Approx(tie_scores[1]));
  CHECK(tie_cls == 0);

  // one-class prompt set -> that class always
  auto [only, _] = zero_shot_classify(study, TensorD::from_vector({1, 2}, {1, 0}));
  CHECK(only == 0);

  // permutation of prompt rows permutes the argmax consistently
  TensorD swapped = index_select(prompts, 0, {1, 0, 2});
  auto [swapped_cls, swapped_scores] = zero_shot_classify(study, swapped);
  CHECK(swapped_cls == 0);
  CHECK(swapped_scores[0] == doctest::Approx(scores[1]));

  CHECK_THROWS_AS(zero_shot_classify(study, TensorD::from_vector({1, 3}, {1, 0, 0})), ShapeError);
}

TEST_CASE("balanced_accuracy counts per-class recall") {
  CHECK(balanced_accuracy({0, 1, 2}, {0, 1, 2}, 3) == doctest::Approx(1.0));
  // constant predictor on 2 balanced classes
  CHECK(balanced_accuracy({0, 0, 0, 0}, {0, 0, 1, 1}, 2) == doctest::Approx(0.5));
  // crafted recalls (1.0, 0.5, 0.0) -> mean 0.5
  std::vector<int64_t> labels{0, 0, 1, 1, 2, 2};
  std::vector<int64_t> preds{0, 0, 1, 2, 0, 1};
  CHECK(balanced_accuracy(preds, labels, 3) == doctest::Approx(0.5));
  // absent class excluded from the mean
  CHECK(balanced_accuracy({0, 1}, {0, 1}, 5) == doctest::Approx(1.0));
  // relabeling invariance: apply the map 0->2, 1->0, 2->1 to both
  std::vector<int64_t> map{2, 0, 1};
  std::vector<int64_t> rl, rp;
  for (int64_t l : labels) rl.push_back(map[static_cast<size_t>(l)]);
  for (int64_t p : preds) rp.push_back(map[static_cast<size_t>(p)]);
  CHECK(balanced_accuracy(rp, rl, 3) == doctest::Approx(balanced_accuracy(preds, labels, 3)));
  CHECK_THROWS_AS(balanced_accuracy({}, {}, 3), std::invalid_argument);
  CHECK_THROWS_AS(balanced_accuracy({0}, {7}, 3), std::out_of_range);
}

TEST_CASE("roc_auc matches the pairwise oracle and its edge rules") {
  CHECK(roc_auc({0.1, 0.2, 0.8, 0.9}, {0, 0, 1, 1}) == doctest::Approx(1.0));
  CHECK(roc_auc({0.5, 0.5, 0.5, 0.5}, {0, 1, 0, 1}) == doctest::Approx(0.5));

  // 6-point crafted case with a tie across classes
  std::vector<double> s{0.2, 0.4, 0.4, 0.6, 0.7, 0.1};
  std::vector<int64_t> l{0, 0, 1, 1, 0, 1};
  CHECK(roc_auc(s, l) == doctest::Approx(auc_oracle(s, l)).epsilon(1e-15));

  Rng rng(12);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<double> scores;
    std::vector<int64_t> labels;
    for (int i = 0; i < 15; ++i) {
      scores.push_back(std::round(rng.uniform() * 8) / 8);  // deliberate ties
      labels.push_back(static_cast<int64_t>(rng.uniform_int(2)));
    }
    labels[0] = 0;
    labels[1] = 1;
    double base = roc_auc(scores, labels);
    CHECK(base == doctest::Approx(auc_oracle(scores, labels)).epsilon(1e-15));
    // invariance under a strictly monotone transform
    std::vector<double> warped;
    for (double v : scores) warped.push_back(std::exp(3.0 * v) - 2.0);
    CHECK(roc_auc(warped, labels) == doctest::Approx(base).epsilon(1e-15));
  }

  CHECK_THROWS_AS(roc_auc({0.1, 0.2}, {1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(roc_auc({0.1}, {0, 1}), std::invalid_argument);
}

TEST_CASE("retrieval_eval: identity, monotonicity, chance level") {
  TensorD eye = TensorD::from_vector({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  RetrievalResult r = retrieval_eval(eye, eye, {1, 2, 3});
  CHECK(r.image_to_text[1] == doctest::Approx(1.0));
  CHECK(r.text_to_image[1] == doctest::Approx(1.0));
  CHECK(r.image_to_text[3] == doctest::Approx(1.0));

  // random unit embeddings: recall@K nondecreasing, recall@N = 1,
  // recall@1 near chance = 1/N on average
  int64_t n = 100, e = 16;
  double mean_r1 = 0.0;
  for (uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto rand_unit = [&]() {
      std::vector<double> v(static_cast<size_t>(n * e));
      for (auto& x : v) x = rng.normal();
      for (int64_t i = 0; i < n; ++i) {
        double s = 0;
        for (int64_t j = 0; j < e; ++j) s += v[static_cast<size_t>(i * e + j)] * v[static_cast<size_t>(i * e + j)];
        s = std::sqrt(s);
        for (int64_t j = 0; j < e; ++j) v[static_cast<size_t>(i * e + j)] /= s;
      }
      return TensorD::from_vector({n, e}, v);
    };
    TensorD img = rand_unit(), txt = rand_unit();
    RetrievalResult rr = retrieval_eval(img, txt, {1, 5, 20, 100});
    CHECK(rr.image_to_text[1] <= rr.image_to_text[5]);
    CHECK(rr.image_to_text[5] <= rr.image_to_text[20]);
    CHECK(rr.image_to_text[100] == doctest::Approx(1.0));
    mean_r1 += rr.image_to_text[1];
  }
  mean_r1 /= 10.0;
  CHECK(mean_r1 >= 0.0);
  CHECK(mean_r1 <= 0.06);  // chance is 0.01

  CHECK_THROWS_AS(retrieval_eval(eye, eye, {4}), std::invalid_argument);
  CHECK_THROWS_AS(retrieval_eval(eye, TensorD::from_vector({2, 3}, {1, 0, 0, 0, 1, 0}), {1}),
                  ShapeError);
}

TEST_CASE("metric tables and the JSON summary round-trip") {
  std::map<std::string, double> m{{"balanced_acc", 0.85}, {"auc", 0.9}};
  CHECK(metrics_table(m) == "metric\tvalue\nauc\t0.9\nbalanced_acc\t0.85\n");
  std::string path = "eval_summary_test.json";
  write_metrics_summary(m, path);
  std::ifstream f(path);
  nlohmann::json j;
  f >> j;
  CHECK(j["balanced_acc"].get<double>() == doctest::Approx(0.85));
  CHECK(j["auc"].get<double>() == doctest::Approx(0.9));
  std::filesystem::remove(path);
}

TEST_CASE("bench_forward counters equal the closed forms; hierarchy is cheaper") {
  EncoderConfig cfg;
  cfg.layers = 4;
  cfg.heads = 4;
  cfg.width = 32;
  cfg.mlp_ratio = 2;
  cfg.in_d = 16;
  cfg.in_h = 32;
  cfg.in_w = 32;
  cfg.kd = 8;
  cfg.kh = 16;
  cfg.kw = 16;  // 2x2x2 tokens per scan
  cfg.level_schedule = {AttentionLevel::Slice, AttentionLevel::Scan, AttentionLevel::Slice,
                        AttentionLevel::Study};
  cfg.m_max = 8;
  cfg.patch_dropout_rate = 0.0;
  cfg.proj_width = 16;

  int64_t m = 3;
  auto [hier_rep, full_rep] = bench_pair<float>(cfg, m, 1, 2, 99);

  TokenHierarchy hier{.scans = m, .depth = 2, .rows = 2, .cols = 2, .channels = cfg.width};
  int64_t n = hier.study_tokens();
  uint64_t expect = 0;
  for (AttentionLevel level : cfg.level_schedule)
    expect += attention_cost(n, cfg.width, level, hier).madds;
  CHECK(hier_rep.attn_madds == expect);
  CHECK(full_rep.attn_madds ==
        4 * attention_cost(n, cfg.width, AttentionLevel::Study, hier).madds);

  CHECK(hier_rep.attn_madds < full_rep.attn_madds);
  CHECK(hier_rep.activation_bytes < full_rep.activation_bytes);
  CHECK(hier_rep.img_per_s > 0.0);
  CHECK(full_rep.img_per_s > 0.0);

  // quadratic-term ratios Study : Scan : Slice = 1 : 1/M : 1/(M d)
  auto quad = [&](AttentionLevel lv) {
    return attention_cost(n, cfg.width, lv, hier).quadratic_madds();
  };
  CHECK(quad(AttentionLevel::Study) == m * quad(AttentionLevel::Scan));
  CHECK(quad(AttentionLevel::Scan) == 2 * quad(AttentionLevel::Slice));

  // the report table mentions every scheduled level once
  std::string table = hier_rep.to_table();
  CHECK(table.find("hierarchical") != std::string::npos);
  CHECK(table.find("slice") != std::string::npos);
  CHECK(table.find("scan") != std::string::npos);
  CHECK(table.find("study") != std::string::npos);

  Rng rng(1);
  CHECK_THROWS_AS(bench_forward<float>(cfg, m, -1, 2, rng), std::invalid_argument);
  CHECK_THROWS_AS(bench_forward<float>(cfg, m, 0, 0, rng), std::invalid_argument);
}
