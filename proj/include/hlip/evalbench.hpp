#pragma once

// Evaluation and benchmarking: prompt-based zero-shot classification,
// balanced accuracy, ROC AUC, cross-modal retrieval, and the forward-pass
// throughput benchmark that pairs the hierarchical schedule against an
// all-Study schedule at identical depth, width, and input.

#include <algorithm>
#include <chrono>
#include <map>
#include <numeric>
#include <sstream>

#include "hlip/clip.hpp"

namespace hlip {

// --- prompts ---------------------------------------------------------------

struct PromptSet {
  std::string template_str;  // must contain "{disease}" exactly once
  std::vector<std::string> class_names;

  void validate() const {
    size_t first = template_str.find("{disease}");
    if (first == std::string::npos || template_str.find("{disease}", first + 1) != std::string::npos)
      throw std::invalid_argument("PromptSet: template must contain exactly one {disease} slot");
    if (class_names.empty()) throw std::invalid_argument("PromptSet: empty class list");
  }

  std::string fill(size_t cls) const {
    validate();
    std::string out = template_str;
    out.replace(out.find("{disease}"), 9, class_names.at(cls));
    return out;
  }
};

// --- zero-shot classification ---------------------------------------------

// One normalized text embedding per filled prompt, rows aligned with classes.
template <class T>
Tensor<T> prompt_embeddings(const PromptSet& prompts, const Vocab& vocab, const TextConfig& cfg,
                            TextParams<T>& params) {
  prompts.validate();
  std::vector<std::vector<int64_t>> ids;
  for (size_t c = 0; c < prompts.class_names.size(); ++c)
    ids.push_back(tokenize(prompts.fill(c), vocab, cfg.context_length));
  return encode_text(ids, cfg, params);
}

// Cosine scores of a study embedding against each prompt embedding; argmax
// with lowest-index tie-break.
template <class T>
std::pair<int64_t, std::vector<double>> zero_shot_classify(const Tensor<T>& study_emb,
                                                           const Tensor<T>& prompt_embs) {
  if (prompt_embs.rank() != 2 || prompt_embs.dim(0) < 1)
    throw std::invalid_argument("zero_shot_classify: empty prompt set");
  int64_t k = prompt_embs.dim(0), e = prompt_embs.dim(1);
  if (study_emb.numel() != e) throw ShapeError("zero_shot_classify: embedding width mismatch");
  std::vector<double> scores(static_cast<size_t>(k), 0.0);
  const T* ps = study_emb.data();
  const T* pp = prompt_embs.data();
  for (int64_t c = 0; c < k; ++c)
    for (int64_t j = 0; j < e; ++j)
      scores[static_cast<size_t>(c)] += static_cast<double>(ps[j]) * static_cast<double>(pp[c * e + j]);
  int64_t best = 0;
  for (int64_t c = 1; c < k; ++c)
    if (scores[static_cast<size_t>(c)] > scores[static_cast<size_t>(best)]) best = c;
  return {best, scores};
}

// Eval-mode embedding of one loaded study (batch of one, no dropout).
template <class T>
Tensor<T> embed_study(const LoadedStudy& study, ClipModel<T>& model, const TrainConfig& cfg,
                      const Vocab& vocab, Rng& rng) {
  std::vector<const LoadedStudy*> one{&study};
  Batch<T> batch = build_batch<T>(one, cfg, model.enc_cfg, vocab, model.txt_cfg.context_length, rng);
  const Tensor<T>* valid = batch.any_padding ? &batch.scan_valid : nullptr;
  return encoder_forward(batch.study, batch.slots, model.enc_cfg, model.enc, false, nullptr, valid);
}

// --- classification metrics ------------------------------------------------

// Unweighted mean of per-class recall; classes absent from the labels are
// excluded from the mean.
inline double balanced_accuracy(const std::vector<int64_t>& preds,
                                const std::vector<int64_t>& labels, int64_t num_classes) {
  if (preds.empty() || preds.size() != labels.size())
    throw std::invalid_argument("balanced_accuracy: need equal-length non-empty inputs");
  std::vector<int64_t> hits(static_cast<size_t>(num_classes), 0), total(static_cast<size_t>(num_classes), 0);
  for (size_t i = 0; i < preds.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes)
      throw std::out_of_range("balanced_accuracy: label outside [0,K)");
    ++total[static_cast<size_t>(labels[i])];
    if (preds[i] == labels[i]) ++hits[static_cast<size_t>(labels[i])];
  }
  double sum = 0.0;
  int64_t present = 0;
  for (int64_t c = 0; c < num_classes; ++c)
    if (total[static_cast<size_t>(c)] > 0) {
      sum += static_cast<double>(hits[static_cast<size_t>(c)]) / static_cast<double>(total[static_cast<size_t>(c)]);
      ++present;
    }
  return sum / static_cast<double>(present);
}

// Mann-Whitney AUC with average ranks, i.e. 0.5 credit for ties.
inline double roc_auc(const std::vector<double>& scores, const std::vector<int64_t>& labels) {
  if (scores.empty() || scores.size() != labels.size())
    throw std::invalid_argument("roc_auc: need equal-length non-empty inputs");
  int64_t pos = 0, neg = 0;
  for (int64_t l : labels) {
    if (l != 0 && l != 1) throw std::invalid_argument("roc_auc: labels must be 0/1");
    (l == 1 ? pos : neg)++;
  }
  if (pos == 0 || neg == 0) throw std::invalid_argument("roc_auc: both label values must be present");
  std::vector<size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(scores.size(), 0.0);
  size_t i = 0;
  while (i < order.size()) {
    size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;  // 1-based
    for (size_t t = i; t <= j; ++t) rank[order[t]] = avg;
    i = j + 1;
  }
  double rank_pos = 0.0;
  for (size_t t = 0; t < scores.size(); ++t)
    if (labels[t] == 1) rank_pos += rank[t];
  double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_pos - p * (p + 1.0) / 2.0) / (p * n);
}

// --- retrieval -------------------------------------------------------------

struct RetrievalResult {
  std::map<int64_t, double> image_to_text;  // recall@K
  std::map<int64_t, double> text_to_image;
};

// Rank the opposite modality by cosine for every query; recall@K is the
// fraction of queries whose true match ranks within the top K. Ties are
// broken by index for determinism.
template <class T>
RetrievalResult retrieval_eval(const Tensor<T>& img, const Tensor<T>& txt,
                               const std::vector<int64_t>& ks) {
  if (img.rank() != 2 || img.shape() != txt.shape())
    throw ShapeError("retrieval_eval: need row-aligned (N,e) matrices");
  int64_t n = img.dim(0), e = img.dim(1);
  for (int64_t k : ks)
    if (k < 1 || k > n) throw std::invalid_argument("retrieval_eval: K outside [1, N]");
  std::vector<double> sim(static_cast<size_t>(n * n));
  const T* pi = img.data();
  const T* pt = txt.data();
  for (int64_t a = 0; a < n; ++a)
    for (int64_t b = 0; b < n; ++b) {
      double d = 0;
      for (int64_t j = 0; j < e; ++j)
        d += static_cast<double>(pi[a * e + j]) * static_cast<double>(pt[b * e + j]);
      sim[static_cast<size_t>(a * n + b)] = d;
    }
  auto recall = [&](bool img_query, int64_t k) {
    int64_t hit = 0;
    for (int64_t q = 0; q < n; ++q) {
      auto score = [&](int64_t c) {
        return img_query ? sim[static_cast<size_t>(q * n + c)] : sim[static_cast<size_t>(c * n + q)];
      };
      std::vector<int64_t> order(static_cast<size_t>(n));
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&](int64_t a, int64_t b) { return score(a) > score(b); });
      for (int64_t r = 0; r < k; ++r)
        if (order[static_cast<size_t>(r)] == q) {
          ++hit;
          break;
        }
    }
    return static_cast<double>(hit) / static_cast<double>(n);
  };
  RetrievalResult res;
  for (int64_t k : ks) {
    res.image_to_text[k] = recall(true, k);
    res.text_to_image[k] = recall(false, k);
  }
  return res;
}

// --- metric emission -------------------------------------------------------

inline std::string metrics_table(const std::map<std::string, double>& metrics) {
  std::ostringstream os;
  os << "metric\tvalue\n";
  for (const auto& [k, v] : metrics) os << k << "\t" << v << "\n";
  return os.str();
}

inline void write_metrics_summary(const std::map<std::string, double>& metrics,
                                  const std::string& path) {
  nlohmann::json j;
  for (const auto& [k, v] : metrics) j[k] = v;
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_metrics_summary: cannot open " + path);
  f << j.dump(2) << "\n";
}

// --- forward benchmark -----------------------------------------------------

struct BenchReport {
  std::string name;
  double img_per_s = 0.0;
  uint64_t attn_madds = 0;        // per forward, summed over layers
  uint64_t attn_mem_accesses = 0;
  double activation_bytes = 0.0;  // analytic peak-resident estimate
  std::vector<CostReport> per_level;

  std::string to_table() const {
    std::ostringstream os;
    os << "schedule\timg/s\tattn-madds\tattn-mem\tact-bytes\n";
    os << name << "\t" << img_per_s << "\t" << attn_madds << "\t" << attn_mem_accesses << "\t"
       << static_cast<uint64_t>(activation_bytes) << "\n";
    for (const auto& r : per_level) os << r.to_table();
    return os.str();
  }
};

namespace detail {

// Analytic activation estimate: per layer, the attention maps
// (heads * groups * S^2) plus a fixed number of live token-sized buffers,
// where S counts the group's CLS token.
inline double activation_estimate(const EncoderConfig& cfg, int64_t m) {
  TokenHierarchy hier{.scans = m, .depth = cfg.tokens_d(), .rows = cfg.tokens_h(),
                      .cols = cfg.tokens_w(), .channels = cfg.width, .cls_count = 1};
  double total = 0.0;
  for (AttentionLevel level : cfg.level_schedule) {
    double groups = static_cast<double>(hier.groups(level));
    double s = static_cast<double>(hier.tokens_per_group(level) + 1);
    double tokens = groups * s;
    total += static_cast<double>(cfg.heads) * groups * s * s;                // attention maps
    total += tokens * static_cast<double>(cfg.width) * (4.0 + static_cast<double>(cfg.mlp_ratio));
  }
  return total * sizeof(float);
}

}  // namespace detail

// Eval-mode timed forwards (batch 1, single-threaded) plus analytic counter
// totals from the closed-form attention cost model.
template <class T>
BenchReport bench_forward(const EncoderConfig& cfg, int64_t m, int64_t warmup, int64_t iters,
                          Rng& rng, const std::string& name = "schedule") {
  cfg.validate();
  if (warmup < 0 || iters < 1) throw std::invalid_argument("bench_forward: bad warmup/iters");
  EncoderParams<T> params = EncoderParams<T>::init(cfg, rng);
  Tensor<T> study = Tensor<T>::zeros({1, m, 1, cfg.in_d, cfg.in_h, cfg.in_w});
  for (auto& v : study.vals()) v = static_cast<T>(rng.uniform());
  std::vector<std::vector<int64_t>> slots{sample_scan_slots(m, cfg.m_max, rng)};

  for (int64_t i = 0; i < warmup; ++i) encoder_forward(study, slots, cfg, params, false);
  auto t0 = std::chrono::steady_clock::now();
  for (int64_t i = 0; i < iters; ++i) encoder_forward(study, slots, cfg, params, false);
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  TokenHierarchy hier{.scans = m, .depth = cfg.tokens_d(), .rows = cfg.tokens_h(),
                      .cols = cfg.tokens_w(), .channels = cfg.width};
  int64_t n = hier.study_tokens();
  BenchReport rep;
  rep.name = name;
  rep.img_per_s = static_cast<double>(iters) / secs;
  rep.activation_bytes = detail::activation_estimate(cfg, m);
  std::map<AttentionLevel, CostReport> seen;
  for (AttentionLevel level : cfg.level_schedule) {
    CostReport r = attention_cost(n, cfg.width, level, hier);
    rep.attn_madds += r.madds;
    rep.attn_mem_accesses += r.mem_accesses;
    auto it = seen.find(level);
    if (it == seen.end()) {
      seen.emplace(level, r);
    } else {
      it->second.madds += r.madds;
      it->second.mem_accesses += r.mem_accesses;
    }
  }
  for (auto& [level, r] : seen) {
    r.img_per_s = rep.img_per_s;
    r.activation_bytes = rep.activation_bytes;
    rep.per_level.push_back(r);
  }
  return rep;
}

// Paired benchmark: the configured hierarchical schedule against an
// all-Study schedule with identical depth, width, and input.
template <class T>
std::pair<BenchReport, BenchReport> bench_pair(const EncoderConfig& cfg, int64_t m, int64_t warmup,
                                               int64_t iters, uint64_t seed) {
  Rng r1(seed), r2(seed);
  BenchReport hier = bench_forward<T>(cfg, m, warmup, iters, r1, "hierarchical");
  EncoderConfig flat = cfg;
  flat.level_schedule.assign(static_cast<size_t>(cfg.layers), AttentionLevel::Study);
  BenchReport full = bench_forward<T>(flat, m, warmup, iters, r2, "all-study");
  return {hier, full};
}

}  // namespace hlip
