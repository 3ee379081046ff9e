#pragma once

// Contrastive language-image training: symmetric InfoNCE loss with a
// learnable temperature, AdamW with decoupled weight decay, linear-warmup +
// cosine-decay schedule, batch construction for variable-scan studies, and
// the training loop (per-study tapes with seeded backward, so arbitrarily
// large batches fit in one device's memory).

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <ostream>

#include "hlip/encoder.hpp"
#include "hlip/preprocessing.hpp"
#include "hlip/tensor_io.hpp"
#include "hlip/text_encoder.hpp"

namespace hlip {

struct TrainConfig {
  int64_t batch_size = 64;
  double base_lr = 1e-4;  // per 64 samples; peak = base_lr * batch_size / 64
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.2;
  int64_t warmup_steps = 2000;
  int64_t total_steps = 10000;
  int64_t scans_per_study = 10;  // M
  int64_t m_max = 40;
  double patch_dropout_rate = 0.25;
  double init_log_temp = std::log(1.0 / 0.07);
  double temp_max = 100.0;
  uint64_t seed = 0;

  void validate() const {
    if (batch_size < 2) throw std::invalid_argument("TrainConfig: batch_size must be >= 2");
    if (warmup_steps > total_steps)
      throw std::invalid_argument("TrainConfig: warmup_steps must be <= total_steps");
    if (scans_per_study > m_max)
      throw std::invalid_argument("TrainConfig: scans_per_study must be <= m_max");
    if (base_lr <= 0) throw std::invalid_argument("TrainConfig: base_lr must be positive");
  }
};

// Linear ramp 0 -> peak over warmup_steps, then cosine decay to 0 at
// total_steps. Peak follows the linear scaling rule base_lr * B / 64.
inline double lr_at(int64_t step, const TrainConfig& cfg) {
  cfg.validate();
  if (step < 0 || step > cfg.total_steps)
    throw std::invalid_argument("lr_at: step outside [0, total_steps]");
  double peak = cfg.base_lr * static_cast<double>(cfg.batch_size) / 64.0;
  if (step <= cfg.warmup_steps)
    return cfg.warmup_steps == 0
               ? peak
               : peak * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  double progress = static_cast<double>(step - cfg.warmup_steps) /
                    static_cast<double>(cfg.total_steps - cfg.warmup_steps);
  return peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// Symmetric contrastive loss. Rows of img and txt must be L2-normalized.
// logits = exp(log_temp) * img txt^T (temperature capped at temp_max);
// loss = 1/2 [CE over rows + CE over columns] with diagonal targets.
template <class T>
Tensor<T> clip_loss(const Tensor<T>& img, const Tensor<T>& txt, const Tensor<T>& log_temp,
                    T temp_max = T(100)) {
  if (img.rank() != 2 || txt.rank() != 2 || img.shape() != txt.shape())
    throw ShapeError("clip_loss: img and txt must both be (B,e), got " + shape_str(img.shape()) +
                     " vs " + shape_str(txt.shape()));
  int64_t b = img.dim(0);
  if (b < 2) throw std::invalid_argument("clip_loss: batch size must be >= 2");
  if (log_temp.numel() != 1) throw ShapeError("clip_loss: log_temp must be a scalar");

  Tensor<T> temp = std::exp(log_temp.vals()[0]) > temp_max
                       ? Tensor<T>::scalar(temp_max)  // hard cap: no gradient
                       : exp_op(log_temp);
  std::vector<int64_t> zero_idx(static_cast<size_t>(b * b), 0);
  Tensor<T> temp_full = index_select(temp.reshape({1}), 0, zero_idx).reshape({b, b});
  Tensor<T> logits = mul(matmul(img, transpose_last2(txt)), temp_full);

  std::vector<int64_t> diag(static_cast<size_t>(b));
  std::iota(diag.begin(), diag.end(), 0);
  Tensor<T> ce_rows = cross_entropy_with_logits(logits, diag);
  Tensor<T> ce_cols = cross_entropy_with_logits(transpose_last2(logits), diag);
  return scale(add(ce_rows, ce_cols), T(0.5));
}

// --- optimizer -------------------------------------------------------------

// AdamW with bias-corrected moments and decoupled weight decay. Decay is
// applied only where the caller's mask says so (weights, not gains/biases
// or the temperature). Moment state is kept in f64.
template <class T>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  void step(const std::vector<Tensor<T>*>& params, const std::vector<bool>& decay, double lr) {
    if (params.size() != decay.size())
      throw ShapeError("AdamW::step: params/decay size mismatch");
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(static_cast<size_t>(params[i]->numel()), 0.0);
        v_[i].assign(static_cast<size_t>(params[i]->numel()), 0.0);
      }
    }
    if (m_.size() != params.size()) throw ShapeError("AdamW::step: param count changed");
    ++t_;
    double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = *params[i];
      if (m_[i].size() != static_cast<size_t>(p.numel()))
        throw ShapeError("AdamW::step: state shape mismatch for parameter " + std::to_string(i));
      const T* g = p.grad_data();
      if (!g) throw std::runtime_error("AdamW::step: parameter has no gradient buffer");
      T* pv = p.data();
      for (size_t j = 0; j < m_[i].size(); ++j) {
        double gj = static_cast<double>(g[j]);
        m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * gj;
        v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * gj * gj;
        double update = (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + eps_);
        if (decay[i]) update += wd_ * static_cast<double>(pv[j]);
        pv[j] = static_cast<T>(static_cast<double>(pv[j]) - lr * update);
      }
    }
  }

  int64_t steps_taken() const { return t_; }

 private:
  double b1_, b2_, eps_, wd_;
  int64_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

// --- model bundle ----------------------------------------------------------

template <class T>
struct ClipModel {
  EncoderConfig enc_cfg;
  TextConfig txt_cfg;
  EncoderParams<T> enc;
  TextParams<T> txt;
  Tensor<T> log_temp;

  static ClipModel init(const EncoderConfig& ec, const TextConfig& tc, double init_log_temp,
                        Rng& rng) {
    if (ec.proj_width != tc.proj_width)
      throw ShapeError("ClipModel: image and text projection widths differ");
    ClipModel m{ec, tc, EncoderParams<T>::init(ec, rng), TextParams<T>::init(tc, rng),
                Tensor<T>::scalar(static_cast<T>(init_log_temp), true)};
    return m;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (auto& [n, t] : enc.named_tensors()) out.emplace_back("img." + n, t);
    for (auto& [n, t] : txt.named_tensors()) out.emplace_back("txt." + n, t);
    out.emplace_back("log_temp", &log_temp);
    return out;
  }

  std::vector<Tensor<T>*> trainable() {
    std::vector<Tensor<T>*> out = enc.trainable();
    for (auto* t : txt.trainable()) out.push_back(t);
    out.push_back(&log_temp);
    return out;
  }

  // Weight decay applies to rank >= 2 weights only.
  std::vector<bool> decay_mask() {
    std::vector<bool> mask;
    for (auto* t : trainable()) mask.push_back(t->rank() >= 2);
    mask.back() = false;  // temperature
    return mask;
  }

  void save(const std::string& dir) {
    std::map<std::string, Tensor<T>> named;
    for (auto& [n, t] : named_tensors()) named.emplace(n, *t);
    save_checkpoint(named, dir);
  }

  void load(const std::string& dir) {
    auto named = load_checkpoint<T>(dir);
    for (auto& [n, t] : named_tensors()) {
      auto it = named.find(n);
      if (it == named.end()) throw std::runtime_error("ClipModel::load: missing tensor " + n);
      if (it->second.shape() != t->shape())
        throw ShapeError("ClipModel::load: shape mismatch for " + n);
      t->vals() = it->second.vals();
    }
  }
};

// --- batch construction ----------------------------------------------------

template <class T>
struct Batch {
  Tensor<T> study;       // (B, M, 1, D, H, W)
  Tensor<T> scan_valid;  // (B, M) of 0/1
  std::vector<std::vector<int64_t>> slots;
  std::vector<std::vector<int64_t>> text_ids;
  bool any_padding = false;
};

// For each study: sample min(M, available) scans, draw slot indices via
// sample_scan_slots, zero-pad to a rectangular (B, M, ...) tensor with
// padding scans flagged invalid, and tokenize the report.
template <class T>
Batch<T> build_batch(const std::vector<const LoadedStudy*>& studies, const TrainConfig& cfg,
                     const EncoderConfig& enc_cfg, const Vocab& vocab, int64_t context_length,
                     Rng& rng) {
  cfg.validate();
  int64_t b = static_cast<int64_t>(studies.size());
  if (b == 0) throw std::invalid_argument("build_batch: empty batch");
  int64_t m = cfg.scans_per_study;
  int64_t d = enc_cfg.in_d, h = enc_cfg.in_h, w = enc_cfg.in_w;
  int64_t voxels = d * h * w;

  Batch<T> out;
  out.study = Tensor<T>::zeros({b, m, 1, d, h, w});
  out.scan_valid = Tensor<T>::zeros({b, m});
  T* ps = out.study.data();
  T* pv = out.scan_valid.data();
  for (int64_t i = 0; i < b; ++i) {
    const LoadedStudy& s = *studies[static_cast<size_t>(i)];
    int64_t avail = static_cast<int64_t>(s.scans.size());
    if (avail == 0) throw std::invalid_argument("build_batch: study " + s.id + " has no scans");
    int64_t take = std::min(avail, m);
    std::vector<int64_t> pick = rng.sample_without_replacement(avail, take);
    for (int64_t k = 0; k < take; ++k) {
      const Volume& vol = s.scans[static_cast<size_t>(pick[static_cast<size_t>(k)])];
      if (vol.dims != std::array<int64_t, 3>{d, h, w})
        throw ShapeError("build_batch: study " + s.id + " scan dims do not match the encoder");
      T* dst = ps + (i * m + k) * voxels;
      for (int64_t j = 0; j < voxels; ++j) dst[j] = static_cast<T>(vol.voxels[static_cast<size_t>(j)]);
      pv[i * m + k] = T(1);
    }
    if (take < m) out.any_padding = true;
    out.slots.push_back(sample_scan_slots(m, cfg.m_max, rng));
    out.text_ids.push_back(tokenize(s.report, vocab, context_length));
  }
  return out;
}

// --- training loop ---------------------------------------------------------

struct FitResult {
  std::vector<double> losses;  // one per optimizer step
  std::vector<std::string> log_lines;
  double best_score = -1e300;
  int64_t steps = 0;
};

// Runs `epochs` of shuffled batches over studies fetched on demand from
// `load_study` (index in [0, num_studies)), so a large corpus can stay on
// disk or in compressed form between batches. Each study's forward runs on
// its own tape; the batch loss is computed once over the stacked embeddings
// and its per-row gradients are seeded back through every study tape, so the
// whole batch never has to be live on one tape (gradient accumulation). If
// `val_score` is given it is called at every epoch end and the checkpoint is
// saved to `checkpoint_dir` whenever the score improves; without a scorer
// the checkpoint is refreshed every epoch.
template <class T>
FitResult fit(const std::function<LoadedStudy(int64_t)>& load_study, int64_t num_studies,
              ClipModel<T>& model, const TrainConfig& cfg, const Vocab& vocab, int64_t epochs,
              const std::string& checkpoint_dir = "",
              const std::function<double(ClipModel<T>&)>& val_score = nullptr,
              std::ostream* log_stream = nullptr) {
  cfg.validate();
  if (num_studies < cfg.batch_size)
    throw std::invalid_argument("fit: need at least one full batch of studies");
  EncoderConfig enc_cfg = model.enc_cfg;
  enc_cfg.patch_dropout_rate = cfg.patch_dropout_rate;
  enc_cfg.m_max = cfg.m_max;

  Rng rng(Rng::derive(cfg.seed, 0xf17));
  auto params = model.trainable();
  auto decay = model.decay_mask();
  AdamW<T> opt(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
  FitResult result;
  int64_t e = model.enc_cfg.proj_width;
  int64_t b = cfg.batch_size;

  std::vector<int64_t> order(static_cast<size_t>(num_studies));
  std::iota(order.begin(), order.end(), 0);
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t start = 0; start + static_cast<size_t>(b) <= order.size();
         start += static_cast<size_t>(b)) {
      auto t0 = std::chrono::steady_clock::now();
      std::vector<LoadedStudy> materialized;
      materialized.reserve(static_cast<size_t>(b));
      std::vector<const LoadedStudy*> batch_studies;
      for (int64_t i = 0; i < b; ++i) {
        materialized.push_back(load_study(order[start + static_cast<size_t>(i)]));
        batch_studies.push_back(&materialized.back());
      }
      Batch<T> batch = build_batch<T>(batch_studies, cfg, enc_cfg, vocab,
                                   model.txt_cfg.context_length, rng);

      for (auto* p : params) p->zero_grad();

      // image tower: one tape per study, kept for the seeded backward
      std::vector<std::unique_ptr<Tape<T>>> img_tapes;
      std::vector<Tensor<T>> img_embs;
      std::vector<T> img_vals(static_cast<size_t>(b * e));
      const Tensor<T>* valid_ptr = batch.any_padding ? &batch.scan_valid : nullptr;
      for (int64_t i = 0; i < b; ++i) {
        auto tape = std::make_unique<Tape<T>>();
        Tensor<T> one_study = batch.study.reshape({b, cfg.scans_per_study, 1, enc_cfg.in_d,
                                                   enc_cfg.in_h, enc_cfg.in_w});
        Tensor<T> row = slice(one_study, 0, i, 1);
        Tensor<T> row_valid;
        const Tensor<T>* rv = nullptr;
        if (valid_ptr) {
          row_valid = slice(*valid_ptr, 0, i, 1);
          rv = &row_valid;
        }
        Tensor<T> emb = encoder_forward(row, {batch.slots[static_cast<size_t>(i)]}, enc_cfg,
                                        model.enc, true, &rng, rv);
        tape->deactivate();
        std::copy(emb.vals().begin(), emb.vals().end(), img_vals.begin() + i * e);
        img_embs.push_back(emb);
        img_tapes.push_back(std::move(tape));
      }

      // text tower: the whole batch on one tape
      auto txt_tape = std::make_unique<Tape<T>>();
      Tensor<T> txt_emb = encode_text(batch.text_ids, model.txt_cfg, model.txt);
      txt_tape->deactivate();

      // batch loss over stacked, detached embeddings
      double loss_val;
      std::vector<T> img_seed, txt_seed;
      {
        Tape<T> loss_tape;
        Tensor<T> img_stack = Tensor<T>::from_vector({b, e}, img_vals, true);
        Tensor<T> txt_stack = txt_emb.detach();
        txt_stack.enable_grad();
        Tensor<T> loss =
            clip_loss(img_stack, txt_stack, model.log_temp, static_cast<T>(cfg.temp_max));
        loss_val = static_cast<double>(loss.vals()[0]);
        if (!std::isfinite(loss_val))
          throw std::runtime_error("fit: non-finite loss " + std::to_string(loss_val) +
                                   " at step " + std::to_string(step));
        loss_tape.backward(loss);
        img_seed = img_stack.grads();
        txt_seed = txt_stack.grads();
      }

      // seed the tower tapes with the embedding gradients
      for (int64_t i = 0; i < b; ++i) {
        std::vector<T> seed(img_seed.begin() + i * e, img_seed.begin() + (i + 1) * e);
        img_tapes[static_cast<size_t>(i)]->backward(img_embs[static_cast<size_t>(i)], &seed);
      }
      txt_tape->backward(txt_emb, &txt_seed);

      double lr = lr_at(std::min(step, cfg.total_steps), cfg);
      opt.step(params, decay, lr);

      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      double ips = static_cast<double>(b) / std::max(secs, 1e-9);
      char line[160];
      std::snprintf(line, sizeof(line), "%lld\t%lld\t%.6f\t%.8g\t%.2f",
                    static_cast<long long>(step), static_cast<long long>(epoch), loss_val, lr, ips);
      result.log_lines.emplace_back(line);
      if (log_stream) (*log_stream) << line << "\n" << std::flush;
      result.losses.push_back(loss_val);
      ++step;
    }
    if (val_score) {
      double score = val_score(model);
      if (score > result.best_score) {
        result.best_score = score;
        if (!checkpoint_dir.empty()) model.save(checkpoint_dir);
      }
    } else if (!checkpoint_dir.empty()) {
      model.save(checkpoint_dir);
    }
  }
  result.steps = step;
  return result;
}

// Convenience overload over an in-memory corpus.
template <class T>
FitResult fit(const std::vector<LoadedStudy>& train, ClipModel<T>& model, const TrainConfig& cfg,
              const Vocab& vocab, int64_t epochs, const std::string& checkpoint_dir = "",
              const std::function<double(ClipModel<T>&)>& val_score = nullptr,
              std::ostream* log_stream = nullptr) {
  return fit<T>([&train](int64_t i) { return train[static_cast<size_t>(i)]; },
                static_cast<int64_t>(train.size()), model, cfg, vocab, epochs, checkpoint_dir,
                val_score, log_stream);
}

}  // namespace hlip
