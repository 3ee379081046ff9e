// hlip: single command-line entry point for data generation, preprocessing,
// contrastive pre-training, evaluation, benchmarking, and gradient checks.
// Every subcommand is deterministic given (--config, --seed).
// Exit codes: 0 success, 1 usage error, 2 runtime failure.

#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "hlip/evalbench.hpp"
#include "hlip/run_config.hpp"

namespace {

using namespace hlip;

RunConfig load_config(const std::string& path) {
  return path.empty() ? RunConfig{} : RunConfig::load(path);
}

PromptSet synthetic_prompts(const RunConfig& cfg) {
  PromptSet p;
  p.template_str = cfg.prompt_template;
  for (int c = 0; c < kNumClasses; ++c)
    p.class_names.push_back(class_phrase(static_cast<StudyClass>(c)));
  return p;
}

std::vector<LoadedStudy> load_split(const std::string& data_dir, const std::string& split,
                                    std::vector<int64_t>* labels = nullptr) {
  std::vector<LoadedStudy> out;
  for (const auto& row : load_dataset_index(data_dir)) {
    if (row.split != split) continue;
    out.push_back(read_study_container(data_dir + "/" + row.id));
    if (labels) labels->push_back(row.label);
  }
  if (out.empty()) throw std::runtime_error("no studies with split '" + split + "' in " + data_dir);
  return out;
}

Vocab vocab_from_reports(const std::vector<LoadedStudy>& studies) {
  std::vector<std::string> corpus;
  for (const auto& s : studies) corpus.push_back(s.report);
  return Vocab::build(corpus);
}

int run_gen_data(const std::string& config, uint64_t seed, const std::string& out) {
  RunConfig cfg = load_config(config);
  auto index = generate_dataset(cfg.dataset_spec(seed), out);
  std::cout << "wrote " << index.size() << " studies to " << out << "\n";
  return 0;
}

int run_preprocess(const std::string& config, const std::string& modality, const std::string& in,
                   const std::string& out) {
  (void)load_config(config);
  LoadedStudy raw = read_study_container(in);
  StudyManifest manifest;
  manifest.study_id = raw.id;
  manifest.report = raw.report;
  std::vector<Volume> processed;
  auto add = [&](const Volume& v) {
    char f[32];
    std::snprintf(f, sizeof(f), "scan_%03zu.raw", processed.size());
    manifest.scans.push_back({f, v.dims, "u8", Plane::Axial, {1.0, 1.0, 1.0}});
    processed.push_back(v);
  };
  if (modality == "mri") {
    manifest.modality = "MRI";
    for (const auto& v : raw.scans) add(resize_then_crop(percentile_clip(v)));
  } else if (modality == "ct") {
    manifest.modality = "CT";
    for (const auto& v : raw.scans)
      for (const auto& w : hu_window_expand(v)) add(resize_then_crop(w));
  } else if (modality == "chest-ct") {
    manifest.modality = "CT";
    for (const auto& v : raw.scans) {
      RawScan scan;
      scan.vol = v;
      add(chest_pipeline(scan));
    }
  } else {
    throw std::runtime_error("unknown modality '" + modality + "'");
  }
  write_study_container(manifest, processed, out);
  std::cout << "wrote " << processed.size() << " processed scans to " << out << "\n";
  return 0;
}

int run_train(const std::string& config, uint64_t seed, const std::string& data,
              const std::string& out) {
  RunConfig cfg = load_config(config);
  auto train_set = load_split(data, "train");
  Vocab vocab = vocab_from_reports(train_set);
  std::filesystem::create_directories(out);
  vocab.save(out + "/vocab.txt");

  Rng init_rng(Rng::derive(seed, 0x1417));
  ClipModel<float> model = ClipModel<float>::init(
      cfg.encoder_config(), cfg.text_config(vocab.size()), cfg.init_log_temp, init_rng);
  TrainConfig tc = cfg.train_config(seed);

  std::ofstream log(out + "/log.tsv");
  FitResult res = fit(train_set, model, tc, vocab, cfg.epochs, out + "/model",
                      std::function<double(ClipModel<float>&)>(), &log);
  std::cout << "final_loss\t" << res.losses.back() << "\n";
  std::cout << "checkpoint\t" << out << "/model\n";
  return 0;
}

ClipModel<float> load_model(const RunConfig& cfg, const std::string& ckpt_root, Vocab& vocab) {
  vocab = Vocab::load(ckpt_root + "/vocab.txt");
  Rng rng(0);
  ClipModel<float> model = ClipModel<float>::init(cfg.encoder_config(),
                                                  cfg.text_config(vocab.size()), 0.0, rng);
  model.load(ckpt_root + "/model");
  return model;
}

int run_eval_zero_shot(const std::string& config, uint64_t seed, const std::string& data,
                       const std::string& ckpt, const std::string& out) {
  RunConfig cfg = load_config(config);
  Vocab vocab;
  ClipModel<float> model = load_model(cfg, ckpt, vocab);
  std::vector<int64_t> labels;
  auto test_set = load_split(data, "test", &labels);
  PromptSet prompts = synthetic_prompts(cfg);
  Tensor<float> prompt_embs = prompt_embeddings(prompts, vocab, model.txt_cfg, model.txt);
  TrainConfig tc = cfg.train_config(seed);
  std::vector<int64_t> preds;
  Rng rng(Rng::derive(seed, 0xe7a1));
  for (const auto& s : test_set) {
    Tensor<float> emb = embed_study(s, model, tc, vocab, rng);
    preds.push_back(zero_shot_classify(emb, prompt_embs).first);
  }
  std::map<std::string, double> metrics{
      {"balanced_acc", balanced_accuracy(preds, labels, kNumClasses)},
      {"n_test", static_cast<double>(test_set.size())}};
  std::cout << metrics_table(metrics);
  if (!out.empty()) write_metrics_summary(metrics, out);
  return 0;
}

int run_eval_retrieval(const std::string& config, uint64_t seed, const std::string& data,
                       const std::string& ckpt, const std::string& out) {
  RunConfig cfg = load_config(config);
  Vocab vocab;
  ClipModel<float> model = load_model(cfg, ckpt, vocab);
  auto test_set = load_split(data, "test");
  TrainConfig tc = cfg.train_config(seed);
  int64_t n = static_cast<int64_t>(test_set.size());
  int64_t e = cfg.embed_dim;
  Tensor<float> img = Tensor<float>::zeros({n, e});
  std::vector<std::vector<int64_t>> ids;
  Rng rng(Rng::derive(seed, 0x6e7));
  for (int64_t i = 0; i < n; ++i) {
    Tensor<float> emb = embed_study(test_set[static_cast<size_t>(i)], model, tc, vocab, rng);
    std::copy(emb.vals().begin(), emb.vals().end(), img.data() + i * e);
    ids.push_back(tokenize(test_set[static_cast<size_t>(i)].report, vocab, cfg.context_length));
  }
  Tensor<float> txt = encode_text(ids, model.txt_cfg, model.txt);
  std::vector<int64_t> ks;
  for (int64_t k : {int64_t(1), int64_t(5), int64_t(10)})
    if (k <= n) ks.push_back(k);
  RetrievalResult r = retrieval_eval(img, txt, ks);
  std::map<std::string, double> metrics;
  for (int64_t k : ks) {
    metrics["i2t_recall@" + std::to_string(k)] = r.image_to_text[k];
    metrics["t2i_recall@" + std::to_string(k)] = r.text_to_image[k];
  }
  std::cout << metrics_table(metrics);
  if (!out.empty()) write_metrics_summary(metrics, out);
  return 0;
}

int run_bench(const std::string& config, uint64_t seed, const std::string& levels_csv,
              int64_t warmup, int64_t iters, int64_t m, const std::string& out) {
  RunConfig cfg = load_config(config);
  std::vector<AttentionLevel> levels;
  std::istringstream ss(levels_csv);
  std::string part;
  while (std::getline(ss, part, ','))
    if (!part.empty()) levels.push_back(parse_level(part));
  if (levels.empty()) throw std::runtime_error("bench attention: no levels given");
  std::map<std::string, double> metrics;
  for (AttentionLevel level : levels) {
    EncoderConfig ec = cfg.encoder_config();
    ec.level_schedule.assign(static_cast<size_t>(ec.layers), level);
    ec.patch_dropout_rate = 0.0;
    Rng rng(seed);
    BenchReport rep = bench_forward<float>(ec, m, warmup, iters, rng, level_name(level));
    std::cout << rep.to_table();
    metrics[std::string(level_name(level)) + "_img_per_s"] = rep.img_per_s;
    metrics[std::string(level_name(level)) + "_madds"] = static_cast<double>(rep.attn_madds);
  }
  if (!out.empty()) write_metrics_summary(metrics, out);
  return 0;
}

// Compact f64 finite-difference suite over the differentiable core plus the
// tiny-encoder + clip_loss composite; prints the worst relative error.
int run_gradcheck(uint64_t seed) {
  Rng rng(seed);
  auto check = [&](const std::function<TensorD()>& fn, std::vector<TensorD> leaves) {
    {
      Tape<double> tape;
      TensorD loss = fn();
      tape.backward(loss);
    }
    double worst = 0.0;
    const double step = 1e-5;
    for (auto& leaf : leaves)
      for (int64_t i = 0; i < leaf.numel(); ++i) {
        double saved = leaf.vals()[static_cast<size_t>(i)];
        leaf.vals()[static_cast<size_t>(i)] = saved + step;
        double up = fn().vals()[0];
        leaf.vals()[static_cast<size_t>(i)] = saved - step;
        double dn = fn().vals()[0];
        leaf.vals()[static_cast<size_t>(i)] = saved;
        double fd = (up - dn) / (2 * step);
        double ad = leaf.grads()[static_cast<size_t>(i)];
        if (std::abs(fd - ad) < 1e-8) continue;
        worst = std::max(worst, std::abs(fd - ad) / std::max({std::abs(fd), std::abs(ad), 1e-3}));
      }
    return worst;
  };
  auto randn = [&](const Shape& s) {
    TensorD t = TensorD::zeros(s, true);
    for (auto& v : t.vals()) v = 0.5 * rng.normal();
    return t;
  };

  double worst = 0.0;
  {  // op chain: matmul, gelu, layer_norm, softmax, mean
    TensorD a = randn({3, 4}), b = randn({4, 5}), g = randn({5}), be = randn({5});
    worst = std::max(worst, check(
        [&]() {
          return mean_all(softmax_lastdim(layer_norm(gelu(matmul(a, b)), g, be)));
        },
        {a, b, g, be}));
  }
  {  // clip_loss with temperature
    TensorD img = randn({4, 6}), txt = randn({4, 6});
    TensorD lt = TensorD::scalar(0.7, true);
    worst = std::max(worst, check(
        [&]() { return clip_loss(l2_normalize_rows(img), l2_normalize_rows(txt), lt); },
        {img, txt, lt}));
  }
  {  // tiny encoder composite
    EncoderConfig ec;
    ec.layers = 2;
    ec.heads = 2;
    ec.width = 8;
    ec.mlp_ratio = 2;
    ec.in_d = 4;
    ec.in_h = 4;
    ec.in_w = 4;
    ec.kd = 2;
    ec.kh = 2;
    ec.kw = 2;
    ec.level_schedule = {AttentionLevel::Scan, AttentionLevel::Study};
    ec.m_max = 4;
    ec.patch_dropout_rate = 0.0;
    ec.proj_width = 4;
    Rng ir(seed + 1);
    EncoderParams<double> params = EncoderParams<double>::init(ec, ir);
    TensorD study = randn({1, 2, 1, 4, 4, 4});
    study = study.detach();
    std::vector<std::vector<int64_t>> slots{{0, 2}};
    worst = std::max(worst, check(
        [&]() {
          return mean_all(encoder_forward(study, slots, ec, params, false));
        },
        {params.blocks[0].attn.wq, params.blocks[1].mlp_w1, params.cls, params.proj}));
  }
  std::cout << "max_rel_error\t" << worst << "\n";
  std::cout << (worst < 1e-4 ? "PASS" : "FAIL") << " (threshold 1e-4)\n";
  return worst < 1e-4 ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hlip: hierarchical language-image pre-training for multi-scan studies"};
  app.require_subcommand(1);

  std::string config, out, data, in, ckpt, modality = "mri", levels = "study,scan,slice";
  uint64_t seed = 0;
  int64_t threads = 1, warmup = 3, iters = 10, bench_m = 1;

  app.add_option("--threads", threads, "worker threads (only 1 is supported)")
      ->default_val(1)
      ->check(CLI::Range(1, 1));

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "key=value run configuration file");
    sub->add_option("--seed", seed, "master RNG seed")->default_val(0);
    sub->add_option("--out", out, "output path");
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic study dataset");
  add_common(gen);
  gen->get_option("--out")->required();

  CLI::App* pre = app.add_subcommand("preprocess", "normalize a raw study container");
  add_common(pre);
  pre->add_option("--modality", modality, "mri|ct|chest-ct")
      ->check(CLI::IsMember({"mri", "ct", "chest-ct"}));
  pre->add_option("--in", in, "input study container directory")->required();
  pre->get_option("--out")->required();

  CLI::App* train = app.add_subcommand("train", "contrastive pre-training");
  add_common(train);
  train->add_option("--data", data, "dataset directory (labels.tsv + containers)")->required();
  train->get_option("--out")->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluation tasks");
  CLI::App* zs = eval->add_subcommand("zero-shot", "prompt-based zero-shot classification");
  add_common(zs);
  zs->add_option("--data", data, "dataset directory")->required();
  zs->add_option("--ckpt", ckpt, "training output directory")->required();
  CLI::App* ret = eval->add_subcommand("retrieval", "cross-modal retrieval recall@K");
  add_common(ret);
  ret->add_option("--data", data, "dataset directory")->required();
  ret->add_option("--ckpt", ckpt, "training output directory")->required();
  eval->require_subcommand(1);

  CLI::App* bench = app.add_subcommand("bench", "benchmarks");
  CLI::App* ba = bench->add_subcommand("attention", "attention-scope forward benchmark");
  add_common(ba);
  ba->add_option("--levels", levels, "comma-separated scope list, e.g. study,scan,slice");
  ba->add_option("--warmup", warmup, "warm-up forward passes")->default_val(3);
  ba->add_option("--iters", iters, "timed forward passes")->default_val(10);
  ba->add_option("--scans", bench_m, "scans per study in the benchmark input")->default_val(1);
  bench->require_subcommand(1);

  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient check (f64)");
  add_common(gc);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp") {
      std::cout << app.help();
      return 0;
    }
    std::cerr << e.what() << "\n" << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) return run_gen_data(config, seed, out);
    if (pre->parsed()) return run_preprocess(config, modality, in, out);
    if (train->parsed()) return run_train(config, seed, data, out);
    if (zs->parsed()) return run_eval_zero_shot(config, seed, data, ckpt, out);
    if (ret->parsed()) return run_eval_retrieval(config, seed, data, ckpt, out);
    if (ba->parsed()) return run_bench(config, seed, levels, warmup, iters, bench_m, out);
    if (gc->parsed()) return run_gradcheck(seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::cerr << app.help();
  return 1;
}
