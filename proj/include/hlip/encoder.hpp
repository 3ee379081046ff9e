#pragma once

// The HLIP visual encoder: 3D patch embedding (with average inflation init
// from 2D weights), additively tiled positional embeddings with scan-slot
// sampling, per-group patch dropout, a per-layer attention-level schedule
// with CLS propagation at scope transitions, and a normalized study
// embedding read off the study-scope CLS.

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hlip/hier_attention.hpp"
#include "hlip/rng.hpp"
#include "hlip/tensor.hpp"

namespace hlip {

struct EncoderConfig {
  int64_t layers = 12;
  int64_t heads = 12;
  int64_t width = 768;  // c
  double mlp_ratio = 4.0;
  int64_t kd = 8, kh = 16, kw = 16;        // token size, voxels per token
  int64_t in_d = 48, in_h = 224, in_w = 224;  // input volume shape
  std::vector<AttentionLevel> level_schedule;
  int64_t m_max = 40;
  double patch_dropout_rate = 0.25;
  int64_t proj_width = 512;  // e

  int64_t tokens_d() const { return in_d / kd; }
  int64_t tokens_h() const { return in_h / kh; }
  int64_t tokens_w() const { return in_w / kw; }
  int64_t tokens_per_scan() const { return tokens_d() * tokens_h() * tokens_w(); }
  int64_t mlp_width() const { return static_cast<int64_t>(width * mlp_ratio); }

  AttentionLevel finest_level() const {
    AttentionLevel finest = AttentionLevel::Study;
    for (auto l : level_schedule)
      if (coarser_than(finest, l)) finest = l;
    return finest;
  }

  void validate() const {
    if (in_d % kd || in_h % kh || in_w % kw)
      throw ShapeError("EncoderConfig: input shape not divisible by token size");
    if (static_cast<int64_t>(level_schedule.size()) != layers)
      throw ShapeError("EncoderConfig: schedule length " +
                       std::to_string(level_schedule.size()) + " != layers " +
                       std::to_string(layers));
    if (width % heads != 0) throw ShapeError("EncoderConfig: heads must divide width");
    if (patch_dropout_rate < 0.0 || patch_dropout_rate >= 1.0)
      throw std::invalid_argument("EncoderConfig: patch_dropout_rate must be in [0,1)");
  }

  // Divide the L layers into four near-even subsets and put the coarse level
  // only at the last layer of each; every other layer runs the fine level.
  // L=12 with (Scan, Study) gives Study at {2,5,8,11}.
  static std::vector<AttentionLevel> default_schedule(int64_t layers, AttentionLevel fine,
                                                      AttentionLevel coarse) {
    std::vector<AttentionLevel> sched(static_cast<size_t>(layers), fine);
    for (int64_t s = 1; s <= 4; ++s) {
      int64_t end = (s * layers + 3) / 4 - 1;
      if (end >= 0 && end < layers) sched[static_cast<size_t>(end)] = coarse;
    }
    return sched;
  }
};

// --- positional embeddings -------------------------------------------------

// Standard transformer sinusoid, base 10000: even channels sine, odd cosine.
template <class T>
Tensor<T> sinusoid_1d(int64_t length, int64_t channels) {
  Tensor<T> t = Tensor<T>::zeros({length, channels});
  T* p = t.data();
  for (int64_t pos = 0; pos < length; ++pos)
    for (int64_t i = 0; i < channels; ++i) {
      double freq = std::pow(10000.0, -2.0 * static_cast<double>(i / 2) / static_cast<double>(channels));
      double angle = static_cast<double>(pos) * freq;
      p[pos * channels + i] = static_cast<T>((i % 2 == 0) ? std::sin(angle) : std::cos(angle));
    }
  return t;
}

// 2D sinusoid over an (h, w) grid: first half of the channels encode the row
// coordinate, second half the column coordinate.
template <class T>
Tensor<T> sinusoid_2d(int64_t h, int64_t w, int64_t channels) {
  int64_t half = channels / 2;
  Tensor<T> rows = sinusoid_1d<T>(h, half);
  Tensor<T> cols = sinusoid_1d<T>(w, channels - half);
  Tensor<T> t = Tensor<T>::zeros({h * w, channels});
  T* p = t.data();
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      T* row = p + (y * w + x) * channels;
      for (int64_t i = 0; i < half; ++i) row[i] = rows.data()[y * half + i];
      for (int64_t i = 0; i < channels - half; ++i) row[half + i] = cols.data()[x * (channels - half) + i];
    }
  return t;
}

// P_base is a learned (h*w, c) table (2D-sinusoid initialized); P_slice and
// P_scan are fixed sinusoids. Composition is additive:
// P[m,z,y,x] = P_base[y,x] + P_slice[z] + P_scan[slot(m)].
template <class T>
struct PositionalEmbeddings {
  Tensor<T> base;    // (h*w, c), learned
  Tensor<T> slices;  // (d, c), fixed
  Tensor<T> scans;   // (M_max, c), fixed

  static PositionalEmbeddings init(const EncoderConfig& cfg) {
    PositionalEmbeddings p;
    p.base = sinusoid_2d<T>(cfg.tokens_h(), cfg.tokens_w(), cfg.width);
    p.base.enable_grad();
    p.slices = sinusoid_1d<T>(cfg.tokens_d(), cfg.width);
    p.scans = sinusoid_1d<T>(cfg.m_max, cfg.width);
    return p;
  }
};

// --- patch embedding -------------------------------------------------------

template <class T>
struct PatchEmbedWeights {
  Tensor<T> w3d;   // (c, 1, kd, kh, kw), applied with stride == kernel
  Tensor<T> bias;  // (c)
};

// Average inflation: sum the 2D weights over input channels, replicate kd
// times along depth, scale by 1/kd.
template <class T>
PatchEmbedWeights<T> inflate_2d(const Tensor<T>& w2d, int64_t kd) {
  if (w2d.rank() != 4) throw ShapeError("inflate_2d: expected (c, ch_in, kh, kw)");
  if (kd < 1) throw std::invalid_argument("inflate_2d: kd must be >= 1");
  int64_t c = w2d.dim(0), ch_in = w2d.dim(1), kh = w2d.dim(2), kw = w2d.dim(3);
  PatchEmbedWeights<T> out;
  out.w3d = Tensor<T>::zeros({c, 1, kd, kh, kw});
  out.bias = Tensor<T>::zeros({c});
  const T* src = w2d.data();
  T* dst = out.w3d.data();
  T inv = T(1) / static_cast<T>(kd);
  for (int64_t oc = 0; oc < c; ++oc)
    for (int64_t y = 0; y < kh; ++y)
      for (int64_t x = 0; x < kw; ++x) {
        T sum = T(0);
        for (int64_t ic = 0; ic < ch_in; ++ic)
          sum += src[((oc * ch_in + ic) * kh + y) * kw + x];
        for (int64_t z = 0; z < kd; ++z)
          dst[(((oc * 1 + 0) * kd + z) * kh + y) * kw + x] = sum * inv;
      }
  return out;
}

namespace detail {

// Extracts non-overlapping (kd, kh, kw) volumes into rows, scan-major then
// depth then row then column. Pure data movement on the (detached) input.
template <class T>
Tensor<T> im2row(const Tensor<T>& study, const EncoderConfig& cfg) {
  int64_t b = study.dim(0), m = study.dim(1);
  int64_t d = cfg.tokens_d(), h = cfg.tokens_h(), w = cfg.tokens_w();
  int64_t kvol = cfg.kd * cfg.kh * cfg.kw;
  Tensor<T> rows = Tensor<T>::zeros({b * m * d * h * w, kvol});
  const T* src = study.data();
  T* dst = rows.data();
  int64_t plane = cfg.in_h * cfg.in_w;
  for (int64_t bm = 0; bm < b * m; ++bm) {
    const T* vol = src + bm * cfg.in_d * plane;
    for (int64_t z = 0; z < d; ++z)
      for (int64_t y = 0; y < h; ++y)
        for (int64_t x = 0; x < w; ++x) {
          T* row = dst + (((bm * d + z) * h + y) * w + x) * kvol;
          for (int64_t dz = 0; dz < cfg.kd; ++dz)
            for (int64_t dy = 0; dy < cfg.kh; ++dy)
              for (int64_t dx = 0; dx < cfg.kw; ++dx)
                row[(dz * cfg.kh + dy) * cfg.kw + dx] =
                    vol[(z * cfg.kd + dz) * plane + (y * cfg.kh + dy) * cfg.in_w +
                        (x * cfg.kw + dx)];
        }
  }
  return rows;
}

}  // namespace detail

// Projects a study (B, M, 1, D, H, W) into visual tokens (B, M*d*h*w, c).
template <class T>
Tensor<T> patch_embed(const Tensor<T>& study, const PatchEmbedWeights<T>& weights,
                      const EncoderConfig& cfg) {
  if (study.rank() != 6 || study.dim(2) != 1)
    throw ShapeError("patch_embed: expected (B, M, 1, D, H, W), got " +
                     shape_str(study.shape()));
  if (study.dim(3) != cfg.in_d || study.dim(4) != cfg.in_h || study.dim(5) != cfg.in_w)
    throw ShapeError("patch_embed: volume shape mismatch with config");
  cfg.validate();
  int64_t b = study.dim(0), m = study.dim(1);
  int64_t kvol = cfg.kd * cfg.kh * cfg.kw;
  Tensor<T> rows = detail::im2row(study, cfg);
  Tensor<T> wmat = transpose_last2(weights.w3d.reshape({cfg.width, kvol}));  // (kvol, c)
  Tensor<T> tokens = add(matmul(rows, wmat), weights.bias);
  return tokens.reshape({b, m * cfg.tokens_per_scan(), cfg.width});
}

// M distinct scan-position slots from [0, M_max), uniform without
// replacement; the implied scan dropout rate is 1 - M/M_max.
inline std::vector<int64_t> sample_scan_slots(int64_t m, int64_t m_max, Rng& rng) {
  if (m > m_max)
    throw std::invalid_argument("sample_scan_slots: M=" + std::to_string(m) + " exceeds M_max=" +
                                std::to_string(m_max) + " (no interpolation beyond M_max)");
  return rng.sample_without_replacement(m_max, m);
}

// --- patch dropout ---------------------------------------------------------

template <class T>
struct PatchDropoutResult {
  Tensor<T> tokens;
  std::vector<std::vector<int64_t>> kept;  // per group, sorted kept indices
  TokenHierarchy hier;
};

// Drops round(rate*T) tokens uniformly at random, independently per
// finest-attention group, so every group keeps the same count and all
// reshapes stay rectangular. Applied before CLS attachment, so CLS is never
// a candidate.
template <class T>
PatchDropoutResult<T> patch_dropout(const Tensor<T>& tokens, const TokenHierarchy& hier,
                                    AttentionLevel group_level, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("patch_dropout: rate must be in [0,1)");
  if (hier.cls_count != 0)
    throw ShapeError("patch_dropout: must run before CLS tokens are attached");
  int64_t b = tokens.dim(0);
  int64_t groups = hier.groups(group_level);
  int64_t t = hier.tokens_per_group(group_level);
  int64_t drop = static_cast<int64_t>(std::llround(rate * static_cast<double>(t)));
  int64_t keep = t - drop;
  if (keep <= 0)
    throw std::invalid_argument("patch_dropout: rate leaves zero tokens in a group");
  PatchDropoutResult<T> out;
  out.hier = hier;
  if (drop == 0) {
    out.tokens = tokens;
    out.kept.assign(static_cast<size_t>(b * groups), {});
    for (auto& v : out.kept) {
      v.resize(static_cast<size_t>(t));
      for (int64_t i = 0; i < t; ++i) v[static_cast<size_t>(i)] = i;
    }
    return out;
  }
  out.kept.reserve(static_cast<size_t>(b * groups));
  for (int64_t g = 0; g < b * groups; ++g) {
    auto sel = rng.sample_without_replacement(t, keep);
    std::sort(sel.begin(), sel.end());
    out.kept.push_back(std::move(sel));
  }
  Tensor<T> grouped = tokens.reshape({b * groups, t, hier.channels});
  out.tokens = gather_rows(grouped, out.kept)
                   .reshape({b, groups * keep, hier.channels});
  if (group_level == AttentionLevel::Scan)
    out.hier.scan_keep = keep;
  else if (group_level == AttentionLevel::Slice)
    out.hier.slice_keep = keep;
  else
    throw std::invalid_argument("patch_dropout: finest group level cannot be Study");
  return out;
}

// --- full encoder ----------------------------------------------------------

template <class T>
struct EncoderBlockParams {
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  MhsaParams<T> attn;
  Tensor<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <class T>
struct EncoderParams {
  PatchEmbedWeights<T> patch;
  PositionalEmbeddings<T> pos;
  Tensor<T> cls;  // (c)
  std::vector<EncoderBlockParams<T>> blocks;
  Tensor<T> final_g, final_b;
  Tensor<T> proj;  // (c, e)

  // Fresh parameters: fan-in-scaled truncated-normal linear layers (sigma =
  // 1/sqrt(fan_in); a flat small sigma leaves the contrastive loss on its
  // ln(B) plateau for longer than small training budgets allow), zero-mean
  // Gaussian sigma=0.02 CLS, unit/zero layer norms.
  static EncoderParams init(const EncoderConfig& cfg, Rng& rng) {
    cfg.validate();
    EncoderParams p;
    int64_t c = cfg.width, mw = cfg.mlp_width();
    auto tn = [&](const Shape& s) {
      Tensor<T> t = Tensor<T>::zeros(s, true);
      int64_t fan = s.size() == 2 ? s[0] : 1;
      if (s.size() != 2)
        for (size_t i = 1; i < s.size(); ++i) fan *= s[i];
      double sigma = 1.0 / std::sqrt(static_cast<double>(fan));
      for (auto& v : t.vals()) v = static_cast<T>(rng.trunc_normal(sigma));
      return t;
    };
    auto ones = [&](int64_t n) {
      Tensor<T> t = Tensor<T>::zeros({n}, true);
      std::fill(t.vals().begin(), t.vals().end(), T(1));
      return t;
    };
    p.patch.w3d = tn({c, 1, cfg.kd, cfg.kh, cfg.kw});
    p.patch.bias = Tensor<T>::zeros({c}, true);
    p.pos = PositionalEmbeddings<T>::init(cfg);
    p.cls = Tensor<T>::zeros({c}, true);
    for (auto& v : p.cls.vals()) v = static_cast<T>(rng.normal(0.0, 0.02));
    for (int64_t l = 0; l < cfg.layers; ++l) {
      EncoderBlockParams<T> blk;
      blk.ln1_g = ones(c);
      blk.ln1_b = Tensor<T>::zeros({c}, true);
      blk.ln2_g = ones(c);
      blk.ln2_b = Tensor<T>::zeros({c}, true);
      blk.attn = MhsaParams<T>::zeros(c, cfg.heads);
      for (auto* t : blk.attn.tensors()) {
        if (t->rank() == 2)
          for (auto& v : t->vals())
            v = static_cast<T>(rng.trunc_normal(1.0 / std::sqrt(static_cast<double>(c))));
        t->enable_grad();
      }
      blk.mlp_w1 = tn({c, mw});
      blk.mlp_b1 = Tensor<T>::zeros({mw}, true);
      blk.mlp_w2 = tn({mw, c});
      blk.mlp_b2 = Tensor<T>::zeros({c}, true);
      p.blocks.push_back(std::move(blk));
    }
    p.final_g = ones(c);
    p.final_b = Tensor<T>::zeros({c}, true);
    p.proj = tn({c, cfg.proj_width});
    return p;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.emplace_back("patch.w3d", &patch.w3d);
    out.emplace_back("patch.bias", &patch.bias);
    out.emplace_back("pos.base", &pos.base);
    out.emplace_back("pos.slices", &pos.slices);
    out.emplace_back("pos.scans", &pos.scans);
    out.emplace_back("cls", &cls);
    for (size_t l = 0; l < blocks.size(); ++l) {
      auto& b = blocks[l];
      std::string pre = "block" + std::to_string(l) + ".";
      out.emplace_back(pre + "ln1_g", &b.ln1_g);
      out.emplace_back(pre + "ln1_b", &b.ln1_b);
      out.emplace_back(pre + "ln2_g", &b.ln2_g);
      out.emplace_back(pre + "ln2_b", &b.ln2_b);
      out.emplace_back(pre + "attn.wq", &b.attn.wq);
      out.emplace_back(pre + "attn.bq", &b.attn.bq);
      out.emplace_back(pre + "attn.wk", &b.attn.wk);
      out.emplace_back(pre + "attn.bk", &b.attn.bk);
      out.emplace_back(pre + "attn.wv", &b.attn.wv);
      out.emplace_back(pre + "attn.bv", &b.attn.bv);
      out.emplace_back(pre + "attn.wo", &b.attn.wo);
      out.emplace_back(pre + "attn.bo", &b.attn.bo);
      out.emplace_back(pre + "mlp_w1", &b.mlp_w1);
      out.emplace_back(pre + "mlp_b1", &b.mlp_b1);
      out.emplace_back(pre + "mlp_w2", &b.mlp_w2);
      out.emplace_back(pre + "mlp_b2", &b.mlp_b2);
    }
    out.emplace_back("final_g", &final_g);
    out.emplace_back("final_b", &final_b);
    out.emplace_back("proj", &proj);
    return out;
  }

  // Trainable leaves (the fixed sinusoids are excluded).
  std::vector<Tensor<T>*> trainable() {
    std::vector<Tensor<T>*> out;
    for (auto& [name, t] : named_tensors())
      if (name != "pos.slices" && name != "pos.scans") out.push_back(t);
    return out;
  }
};

namespace detail {

// -1e30 key bias over patch tokens of padded scans, zero elsewhere.
// Layout: [CLS..., patches...] per group at the current scope.
template <class T>
Tensor<T> padded_scan_key_bias(int64_t b, const TokenHierarchy& hier, AttentionLevel level,
                               const Tensor<T>& scan_valid) {
  int64_t groups = hier.groups(level);
  int64_t group_len = hier.tokens_per_group(level) + hier.cls_count;
  Tensor<T> bias = Tensor<T>::zeros({b, groups * group_len});
  const T* pv = scan_valid.data();
  T* pb = bias.data();
  int64_t per_scan = hier.scan_tokens();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t g = 0; g < groups; ++g) {
      int64_t scans_per_group = hier.scans / groups;  // 0 when groups > scans
      for (int64_t t = 0; t < hier.tokens_per_group(level); ++t) {
        int64_t flat_patch = g * hier.tokens_per_group(level) + t;
        int64_t scan_idx = flat_patch / per_scan;
        if (pv[bi * hier.scans + scan_idx] == T(0))
          pb[bi * groups * group_len + g * group_len + hier.cls_count + t] = T(-1e30);
      }
      (void)scans_per_group;
    }
  return bias;
}

// Expands per-scan validity to per-group weights at `level`.
template <class T>
Tensor<T> group_weights(const Tensor<T>& scan_valid, const TokenHierarchy& hier,
                        AttentionLevel level) {
  int64_t b = scan_valid.dim(0);
  int64_t groups = hier.groups(level);
  Tensor<T> w = Tensor<T>::zeros({b, groups});
  int64_t per_scan = groups / hier.scans;  // groups per scan (>=1 below Study)
  const T* pv = scan_valid.data();
  T* pw = w.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t g = 0; g < groups; ++g)
      pw[bi * groups + g] = pv[bi * hier.scans + g / per_scan];
  return w;
}

}  // namespace detail

// Moves tokens carrying one CLS per `from`-scope group to one CLS per
// `to`-scope group (clone or average), returning the re-laid-out sequence.
template <class T>
Tensor<T> transition_scope(const Tensor<T>& tokens, AttentionLevel from, AttentionLevel to,
                           const TokenHierarchy& hier, const Tensor<T>* scan_valid = nullptr) {
  if (from == to) return tokens;
  int64_t b = tokens.dim(0), c = hier.channels;
  int64_t g_from = hier.groups(from), t_from = hier.tokens_per_group(from);
  Tensor<T> grouped = tokens.reshape({b * g_from, 1 + t_from, c});
  Tensor<T> cls = slice(grouped, 1, 0, 1).reshape({b, g_from, c});
  Tensor<T> patches = slice(grouped, 1, 1, t_from);
  Tensor<T> moved;
  if (coarser_than(to, from) && scan_valid) {
    Tensor<T> w = detail::group_weights(*scan_valid, hier, from);
    moved = cls_propagate(cls, from, to, hier, &w);
  } else {
    moved = cls_propagate(cls, from, to, hier);
  }
  int64_t g_to = hier.groups(to), t_to = hier.tokens_per_group(to);
  Tensor<T> regrouped = patches.reshape({b * g_to, t_to, c});
  Tensor<T> joined = concat<T>({moved.reshape({b * g_to, 1, c}), regrouped}, 1);
  return joined.reshape({b, g_to * (1 + t_to), c});
}

// Full encoder forward: study (B, M, 1, D, H, W) -> normalized (B, e).
// `slots` gives each batch item's M sampled scan-slot indices. `scan_valid`
// (B, M of 0/1), when given, excludes zero-flagged padding scans from study
// attention and from every CLS average.
template <class T>
Tensor<T> encoder_forward(const Tensor<T>& study, const std::vector<std::vector<int64_t>>& slots,
                          const EncoderConfig& cfg, EncoderParams<T>& params, bool train,
                          Rng* rng = nullptr, const Tensor<T>* scan_valid = nullptr) {
  cfg.validate();
  int64_t b = study.dim(0), m = study.dim(1), c = cfg.width;
  if (static_cast<int64_t>(slots.size()) != b)
    throw ShapeError("encoder_forward: need one slot list per batch item");
  for (const auto& s : slots) {
    if (static_cast<int64_t>(s.size()) != m)
      throw ShapeError("encoder_forward: slot list length must equal M");
    for (int64_t v : s)
      if (v < 0 || v >= cfg.m_max) throw ShapeError("encoder_forward: slot index out of range");
  }
  TokenHierarchy hier{.scans = m, .depth = cfg.tokens_d(), .rows = cfg.tokens_h(),
                      .cols = cfg.tokens_w(), .channels = c};
  int64_t d = hier.depth, hw = hier.rows * hier.cols;

  // tokens + additive positional embedding
  Tensor<T> tokens = patch_embed(study, params.patch, cfg);
  {
    // learned in-plane table, tiled over (M, d)
    std::vector<int64_t> idx(static_cast<size_t>(m * d * hw));
    for (int64_t i = 0; i < m * d; ++i)
      for (int64_t j = 0; j < hw; ++j) idx[static_cast<size_t>(i * hw + j)] = j;
    Tensor<T> base_tiled = index_select(params.pos.base, 0, idx);  // (N, c)
    tokens = add(tokens, base_tiled);
    // fixed slice + scan sinusoids, per-item scan slots
    Tensor<T> fixed = Tensor<T>::zeros({b, m * d * hw, c});
    T* pf = fixed.data();
    const T* ps = params.pos.slices.data();
    const T* pm = params.pos.scans.data();
    for (int64_t bi = 0; bi < b; ++bi)
      for (int64_t mi = 0; mi < m; ++mi) {
        const T* scan_row = pm + slots[static_cast<size_t>(bi)][static_cast<size_t>(mi)] * c;
        for (int64_t z = 0; z < d; ++z) {
          const T* slice_row = ps + z * c;
          for (int64_t j = 0; j < hw; ++j) {
            T* dst = pf + ((bi * m * d + mi * d + z) * hw + j) * c;
            for (int64_t k = 0; k < c; ++k) dst[k] = slice_row[k] + scan_row[k];
          }
        }
      }
    tokens = add(tokens, fixed);
  }

  AttentionLevel finest = cfg.finest_level();
  if (finest == AttentionLevel::Study && m > 1 && cfg.level_schedule.empty())
    throw ShapeError("encoder_forward: empty schedule");

  // patch dropout (train only), at the finest schedule level
  if (train && cfg.patch_dropout_rate > 0.0) {
    if (!rng) throw std::invalid_argument("encoder_forward: training dropout needs an rng");
    AttentionLevel drop_level =
        (finest == AttentionLevel::Study) ? AttentionLevel::Scan : finest;
    auto res = patch_dropout(tokens, hier, drop_level, cfg.patch_dropout_rate, *rng);
    tokens = res.tokens;
    hier = res.hier;
  }

  // prepend one CLS per finest-level group
  AttentionLevel scope = finest;
  {
    int64_t groups = hier.groups(scope);
    int64_t t = hier.tokens_per_group(scope);
    std::vector<int64_t> zeros_idx(static_cast<size_t>(b * groups), 0);
    Tensor<T> cls = index_select(params.cls.reshape({1, c}), 0, zeros_idx)
                        .reshape({b * groups, 1, c});
    Tensor<T> grouped = tokens.reshape({b * groups, t, c});
    tokens = concat<T>({cls, grouped}, 1).reshape({b, groups * (1 + t), c});
    hier.cls_count = 1;
  }

  // transformer blocks with scope transitions
  for (int64_t l = 0; l < cfg.layers; ++l) {
    AttentionLevel level = cfg.level_schedule[static_cast<size_t>(l)];
    if (level != scope) {
      tokens = transition_scope(tokens, scope, level, hier, scan_valid);
      scope = level;
    }
    auto& blk = params.blocks[static_cast<size_t>(l)];
    Tensor<T> bias;
    const Tensor<T>* bias_ptr = nullptr;
    if (scan_valid && level == AttentionLevel::Study && m > 1) {
      bias = detail::padded_scan_key_bias(b, hier, level, *scan_valid);
      bias_ptr = &bias;
    }
    Tensor<T> normed = layer_norm(tokens, blk.ln1_g, blk.ln1_b, T(1e-5));
    tokens = add(tokens, attend(normed, level, hier, blk.attn, bias_ptr));
    Tensor<T> normed2 = layer_norm(tokens, blk.ln2_g, blk.ln2_b, T(1e-5));
    Tensor<T> flat = normed2.reshape({tokens.dim(0) * tokens.dim(1), c});
    Tensor<T> hidden = gelu(add(matmul(flat, blk.mlp_w1), blk.mlp_b1));
    Tensor<T> mlp_out = add(matmul(hidden, blk.mlp_w2), blk.mlp_b2).reshape(tokens.shape());
    tokens = add(tokens, mlp_out);
  }

  // final CLS at study scope
  if (scope != AttentionLevel::Study) {
    tokens = transition_scope(tokens, scope, AttentionLevel::Study, hier, scan_valid);
    scope = AttentionLevel::Study;
  }
  int64_t n = hier.study_tokens();
  Tensor<T> stream = tokens.reshape({b, 1 + n, c});
  Tensor<T> cls = slice(stream, 1, 0, 1).reshape({b, c});

  // The CLS readout alone is nearly content-blind at initialization: a
  // localized feature touching a handful of tokens reaches CLS only through
  // near-uniform attention averaging, so the contrastive loss starts on a flat
  // plateau. Augmenting the readout with a validity-masked mean over patch
  // tokens makes the embedding directly content-sensitive from step one.
  {
    int64_t ts = n / hier.scans;
    Tensor<T> per_scan =
        mean_axis(slice(stream, 1, 1, 1 + n).reshape({b * hier.scans, ts, c}), 1)
            .reshape({b, hier.scans, c});
    Tensor<T> w = Tensor<T>::zeros({b, 1, hier.scans}, false);
    T* pw = w.data();
    for (int64_t i = 0; i < b; ++i) {
      T cnt = T(0);
      for (int64_t s = 0; s < hier.scans; ++s)
        cnt += scan_valid ? scan_valid->data()[i * hier.scans + s] : T(1);
      if (cnt <= T(0)) cnt = T(1);
      for (int64_t s = 0; s < hier.scans; ++s)
        pw[i * hier.scans + s] =
            (scan_valid ? scan_valid->data()[i * hier.scans + s] : T(1)) / cnt;
    }
    cls = add(cls, matmul(w, per_scan).reshape({b, c}));
  }
  cls = layer_norm(cls, params.final_g, params.final_b, T(1e-5));
  return l2_normalize_rows(matmul(cls, params.proj));
}

}  // namespace hlip
