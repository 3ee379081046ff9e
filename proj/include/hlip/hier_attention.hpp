#pragma once

// Hierarchical attention: multi-head self-attention scoped at slice, scan,
// or study level purely by reshaping the batch dimension, plus CLS-token
// propagation across scopes, a block-diagonal masked-attention oracle, and
// exact cost counters.
//
// Token layout is always group-major: for G groups of S tokens each, the
// sequence axis is [group 0 tokens..., group 1 tokens..., ...], with any CLS
// tokens prepended inside their group. Scoping a layer is then nothing more
// than viewing (B, G*S, c) as (B*G, S, c).

#include <cmath>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "hlip/tensor.hpp"

namespace hlip {

enum class AttentionLevel { Slice, Scan, Study };

inline const char* level_name(AttentionLevel l) {
  switch (l) {
    case AttentionLevel::Slice: return "slice";
    case AttentionLevel::Scan: return "scan";
    default: return "study";
  }
}

inline AttentionLevel parse_level(const std::string& s) {
  if (s == "slice") return AttentionLevel::Slice;
  if (s == "scan") return AttentionLevel::Scan;
  if (s == "study") return AttentionLevel::Study;
  throw std::invalid_argument("unknown attention level: " + s);
}

// Coarser scope means larger groups: Slice < Scan < Study.
inline bool coarser_than(AttentionLevel a, AttentionLevel b) {
  return static_cast<int>(a) > static_cast<int>(b);
}

// The (M, d, h, w) factorization of the patch-token sequence, plus CLS
// bookkeeping. Patch dropout can replace the per-slice or per-scan token
// count; a scan-granular keep count leaves slice grouping undefined.
struct TokenHierarchy {
  int64_t scans = 1;     // M
  int64_t depth = 1;     // d
  int64_t rows = 1;      // h
  int64_t cols = 1;      // w
  int64_t channels = 0;  // c
  int64_t cls_count = 0;  // CLS tokens carried per group at the current scope
  int64_t slice_keep = -1;  // kept patch tokens per slice group, -1 = rows*cols
  int64_t scan_keep = -1;   // kept patch tokens per scan, -1 = depth * slice tokens

  int64_t slice_tokens() const {
    if (scan_keep >= 0)
      throw ShapeError("TokenHierarchy: slice grouping undefined after scan-granular dropout");
    return slice_keep >= 0 ? slice_keep : rows * cols;
  }
  int64_t scan_tokens() const {
    return scan_keep >= 0 ? scan_keep : depth * slice_tokens();
  }
  int64_t study_tokens() const { return scans * scan_tokens(); }

  int64_t groups(AttentionLevel level) const {
    switch (level) {
      case AttentionLevel::Slice: (void)slice_tokens(); return scans * depth;
      case AttentionLevel::Scan: return scans;
      default: return 1;
    }
  }
  int64_t tokens_per_group(AttentionLevel level) const {
    switch (level) {
      case AttentionLevel::Slice: return slice_tokens();
      case AttentionLevel::Scan: return scan_tokens();
      default: return study_tokens();
    }
  }

  void validate() const {
    if (scans <= 0 || depth <= 0 || rows <= 0 || cols <= 0)
      throw ShapeError("TokenHierarchy: all factors must be positive");
  }
};

template <class T>
struct MhsaParams {
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;  // all (c,c) / (c)
  int64_t heads = 1;

  static MhsaParams zeros(int64_t c, int64_t heads) {
    if (c % heads != 0)
      throw ShapeError("MhsaParams: heads must divide channels (" + std::to_string(heads) +
                       " vs " + std::to_string(c) + ")");
    MhsaParams p;
    p.heads = heads;
    p.wq = Tensor<T>::zeros({c, c});
    p.wk = Tensor<T>::zeros({c, c});
    p.wv = Tensor<T>::zeros({c, c});
    p.wo = Tensor<T>::zeros({c, c});
    p.bq = Tensor<T>::zeros({c});
    p.bk = Tensor<T>::zeros({c});
    p.bv = Tensor<T>::zeros({c});
    p.bo = Tensor<T>::zeros({c});
    return p;
  }

  std::vector<Tensor<T>*> tensors() {
    return {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo};
  }
  void check(int64_t c) const {
    if (wq.shape() != Shape{c, c} || bq.numel() != c)
      throw ShapeError("MhsaParams: projection shapes inconsistent with c=" + std::to_string(c));
    if (c % heads != 0) throw ShapeError("MhsaParams: heads must divide channels");
  }
};

namespace detail {

// Checks that the sequence length of `tokens` factorizes into the groups the
// requested level implies, CLS included.
template <class T>
inline void check_grouping(const Tensor<T>& tokens, AttentionLevel level,
                           const TokenHierarchy& hier, int64_t& groups, int64_t& group_len) {
  hier.validate();
  if (tokens.rank() != 3)
    throw ShapeError("attend: expected (B, tokens, c), got " + shape_str(tokens.shape()));
  groups = hier.groups(level);
  // CLS sit one-per-group at the call scope; at a coarser scope the finer
  // groups' CLS must already have been merged by cls_propagate.
  group_len = hier.tokens_per_group(level) + hier.cls_count;
  int64_t expected = groups * group_len;
  if (tokens.dim(1) != expected)
    throw ShapeError("attend: token count " + std::to_string(tokens.dim(1)) +
                     " does not factorize as " + std::to_string(groups) + " groups of " +
                     std::to_string(group_len) + " at " + level_name(level) + " level");
  if (tokens.dim(2) != hier.channels)
    throw ShapeError("attend: channel mismatch: " + std::to_string(tokens.dim(2)) + " vs " +
                     std::to_string(hier.channels));
}

// Standard batched multi-head self-attention over (N, S, c) with an optional
// additive key bias (N, S) applied to every query row.
template <class T>
Tensor<T> mhsa(const Tensor<T>& x, const MhsaParams<T>& params, const Tensor<T>* key_bias) {
  int64_t n = x.dim(0), s = x.dim(1), c = x.dim(2);
  int64_t heads = params.heads, dh = c / heads;
  Tensor<T> flat = x.reshape({n * s, c});
  auto project = [&](const Tensor<T>& w, const Tensor<T>& b) {
    // (N*S, c) x (c, c) + bias, split into heads: (N, H, S, dh)
    Tensor<T> p = add(matmul(flat, w), b);
    return permute(p.reshape({n, s, heads, dh}), {0, 2, 1, 3});
  };
  Tensor<T> q = project(params.wq, params.bq);
  Tensor<T> k = project(params.wk, params.bk);
  Tensor<T> v = project(params.wv, params.bv);
  Tensor<T> scores = scale(matmul(q, transpose_last2(k)),
                           T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh))));
  if (key_bias) {
    if (key_bias->shape() != Shape{n, s})
      throw ShapeError("mhsa: key bias must be (N, S), got " + shape_str(key_bias->shape()));
    scores = add(scores, key_bias->reshape({n, 1, 1, s}));
  }
  Tensor<T> probs = softmax_lastdim(scores);
  Tensor<T> ctx = matmul(probs, v);                       // (N, H, S, dh)
  Tensor<T> merged = permute(ctx, {0, 2, 1, 3}).reshape({n * s, c});
  return add(matmul(merged, params.wo), params.bo).reshape({n, s, c});
}

}  // namespace detail

// Self-attention computed independently inside each group of the requested
// scope. `key_bias`, when given, is additive per key token over the full
// sequence, shape (B, G*S); it is how padded scans are excluded.
template <class T>
Tensor<T> attend(const Tensor<T>& tokens, AttentionLevel level, const TokenHierarchy& hier,
                 const MhsaParams<T>& params, const Tensor<T>* key_bias = nullptr) {
  int64_t groups = 0, group_len = 0;
  detail::check_grouping(tokens, level, hier, groups, group_len);
  params.check(hier.channels);
  int64_t b = tokens.dim(0);
  Tensor<T> grouped = tokens.reshape({b * groups, group_len, hier.channels});
  Tensor<T> bias_view;
  const Tensor<T>* bias_ptr = nullptr;
  if (key_bias) {
    bias_view = key_bias->reshape({b * groups, group_len});
    bias_ptr = &bias_view;
  }
  Tensor<T> out = detail::mhsa(grouped, params, bias_ptr);
  return out.reshape(tokens.shape());
}

// Additive block-diagonal mask for a full-sequence attention equivalent to
// `attend` at `level`: zero inside each group block, -1e30 outside.
template <class T>
Tensor<T> block_mask(AttentionLevel level, const TokenHierarchy& hier) {
  int64_t groups = hier.groups(level);
  int64_t group_len = hier.tokens_per_group(level) + hier.cls_count;
  int64_t total = groups * group_len;
  Tensor<T> mask = Tensor<T>::zeros({total, total});
  T* pm = mask.data();
  for (int64_t i = 0; i < total; ++i)
    for (int64_t j = 0; j < total; ++j)
      if (i / group_len != j / group_len) pm[i * total + j] = T(-1e30);
  return mask;
}

// Reference implementation: one full-sequence attention with the additive
// block mask. O(total^2) always; used to check attend, never the reverse.
template <class T>
Tensor<T> block_mask_oracle(const Tensor<T>& tokens, AttentionLevel level,
                            const TokenHierarchy& hier, const MhsaParams<T>& params) {
  int64_t groups = 0, group_len = 0;
  detail::check_grouping(tokens, level, hier, groups, group_len);
  params.check(hier.channels);
  int64_t b = tokens.dim(0), total = groups * group_len, c = hier.channels;
  int64_t heads = params.heads, dh = c / heads;
  Tensor<T> mask = block_mask<T>(level, hier);
  Tensor<T> flat = tokens.reshape({b * total, c});
  auto project = [&](const Tensor<T>& w, const Tensor<T>& bias) {
    Tensor<T> p = add(matmul(flat, w), bias);
    return permute(p.reshape({b, total, heads, dh}), {0, 2, 1, 3});
  };
  Tensor<T> q = project(params.wq, params.bq);
  Tensor<T> k = project(params.wk, params.bk);
  Tensor<T> v = project(params.wv, params.bv);
  Tensor<T> scores = scale(matmul(q, transpose_last2(k)),
                           T(1) / static_cast<T>(std::sqrt(static_cast<double>(dh))));
  scores = add(scores, mask.reshape({1, 1, total, total}));
  Tensor<T> probs = softmax_lastdim(scores);
  Tensor<T> ctx = matmul(probs, v);
  Tensor<T> merged = permute(ctx, {0, 2, 1, 3}).reshape({b * total, c});
  return add(matmul(merged, params.wo), params.bo).reshape(tokens.shape());
}

// Moves CLS tokens between scopes. `cls` is (B, G_from, c), one token per
// source-scope group. Coarse -> fine clones each CLS to its child groups;
// fine -> coarse averages sibling CLS. Optional per-source weights (B, G_from)
// replace the plain average by a weighted one (used to skip padded scans);
// they are normalized within each coarse group, so any positive masses work.
template <class T>
Tensor<T> cls_propagate(const Tensor<T>& cls, AttentionLevel from, AttentionLevel to,
                        const TokenHierarchy& hier, const Tensor<T>* weights = nullptr) {
  if (from == to) return cls;
  int64_t g_from = hier.groups(from), g_to = hier.groups(to);
  if (cls.rank() != 3 || cls.dim(1) != g_from)
    throw ShapeError("cls_propagate: expected (B, " + std::to_string(g_from) + ", c), got " +
                     shape_str(cls.shape()));
  int64_t b = cls.dim(0), c = cls.dim(2);
  if (coarser_than(from, to)) {
    // clone: each coarse CLS feeds ratio child groups
    int64_t ratio = g_to / g_from;
    if (g_to % g_from != 0) throw ShapeError("cls_propagate: scope sizes inconsistent");
    std::vector<int64_t> idx(static_cast<size_t>(g_to));
    for (int64_t i = 0; i < g_to; ++i) idx[static_cast<size_t>(i)] = i / ratio;
    return index_select(cls, 1, idx);
  }
  // average: ratio sibling CLS collapse into one
  int64_t ratio = g_from / g_to;
  if (g_from % g_to != 0) throw ShapeError("cls_propagate: scope sizes inconsistent");
  Tensor<T> siblings = cls.reshape({b, g_to, ratio, c});
  if (!weights) {
    // Average centered on the first sibling so that averaging identical
    // clones is exact: x0 + mean(x_i - x0) = x0 when all siblings agree.
    Tensor<T> first = slice(siblings, 2, 0, 1);
    Tensor<T> centered = add(siblings, scale(first, T(-1)));
    return add(mean_axis(centered, 2), first.reshape({b, g_to, c}));
  }
  if (weights->shape() != Shape{b, g_from})
    throw ShapeError("cls_propagate: weights must be (B, G_from)");
  // normalized weighted average over siblings
  Tensor<T> w = Tensor<T>::zeros({b, g_to, ratio, 1});
  const T* pw = weights->data();
  T* pn = w.data();
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t g = 0; g < g_to; ++g) {
      T sum = T(0);
      for (int64_t r = 0; r < ratio; ++r) sum += pw[bi * g_from + g * ratio + r];
      if (sum <= T(0)) throw ShapeError("cls_propagate: weights sum to zero in a group");
      for (int64_t r = 0; r < ratio; ++r)
        pn[(bi * g_to + g) * ratio + r] = pw[bi * g_from + g * ratio + r] / sum;
    }
  Tensor<T> expanded = Tensor<T>::zeros({b, g_to, ratio, c});
  {
    const T* src = w.data();
    T* dst = expanded.data();
    for (int64_t i = 0; i < b * g_to * ratio; ++i)
      for (int64_t j = 0; j < c; ++j) dst[i * c + j] = src[i];
  }
  return sum_axis(mul(siblings, expanded), 2);
}

// Exact cost accounting for one scoped attention over N patch tokens.
// Convention: multiply-adds (not FLOPs x 2); per group of T tokens the score
// and value products cost T^2*c each and the softmax normalization T^2;
// memory accesses are the S and P elements (T^2 each) plus one access per
// element of Q, K, V and O (4*T*c).
struct CostReport {
  AttentionLevel level = AttentionLevel::Study;
  int64_t groups = 0;
  int64_t tokens_per_group = 0;
  int64_t channels = 0;
  uint64_t madds = 0;
  uint64_t mem_accesses = 0;
  double img_per_s = 0.0;           // filled by bench_forward
  double activation_bytes = 0.0;    // analytic estimate, filled by bench_forward

  uint64_t quadratic_madds() const {
    uint64_t t = static_cast<uint64_t>(tokens_per_group);
    return static_cast<uint64_t>(groups) * (2 * t * t * static_cast<uint64_t>(channels) + t * t);
  }

  std::string to_table() const {
    std::ostringstream os;
    os << "level\tgroups\ttokens/group\tmadds\tmem-accesses\n"
       << level_name(level) << "\t" << groups << "\t" << tokens_per_group << "\t" << madds
       << "\t" << mem_accesses;
    if (img_per_s > 0) os << "\timg/s=" << img_per_s;
    if (activation_bytes > 0) os << "\tact-bytes=" << static_cast<uint64_t>(activation_bytes);
    os << "\n(counts are multiply-adds, not FLOPs x2)\n";
    return os.str();
  }
};

inline CostReport attention_cost(int64_t n_tokens, int64_t channels, AttentionLevel level,
                                 const TokenHierarchy& hier) {
  hier.validate();
  if (n_tokens != hier.study_tokens())
    throw ShapeError("attention_cost: N=" + std::to_string(n_tokens) +
                     " inconsistent with hierarchy total " + std::to_string(hier.study_tokens()));
  CostReport r;
  r.level = level;
  r.groups = hier.groups(level);
  r.tokens_per_group = hier.tokens_per_group(level);
  r.channels = channels;
  uint64_t t = static_cast<uint64_t>(r.tokens_per_group);
  uint64_t c = static_cast<uint64_t>(channels);
  uint64_t g = static_cast<uint64_t>(r.groups);
  r.madds = g * (2 * t * t * c + t * t);
  r.mem_accesses = g * (2 * t * t + 4 * t * c);
  return r;
}

// Instrumented single-head attention: actually computes S = Q K^T, softmax,
// O = P V over each group with plain loops, incrementing the counters at the
// operations the cost model claims to count. Used to cross-check
// attention_cost; never part of the model path.
struct CountedRun {
  uint64_t madds = 0;
  uint64_t mem_accesses = 0;
};

inline CountedRun run_counted_attention(const std::vector<double>& q,
                                        const std::vector<double>& k,
                                        const std::vector<double>& v, int64_t groups,
                                        int64_t t_per_group, int64_t channels,
                                        std::vector<double>* out = nullptr) {
  CountedRun cnt;
  std::vector<double> o(static_cast<size_t>(groups * t_per_group * channels), 0.0);
  std::vector<double> s(static_cast<size_t>(t_per_group * t_per_group));
  for (int64_t g = 0; g < groups; ++g) {
    const double* qg = q.data() + g * t_per_group * channels;
    const double* kg = k.data() + g * t_per_group * channels;
    const double* vg = v.data() + g * t_per_group * channels;
    double* og = o.data() + g * t_per_group * channels;
    // Q, K, V element loads
    cnt.mem_accesses += static_cast<uint64_t>(3 * t_per_group * channels);
    // S = Q K^T
    for (int64_t i = 0; i < t_per_group; ++i)
      for (int64_t j = 0; j < t_per_group; ++j) {
        double acc = 0;
        for (int64_t p = 0; p < channels; ++p) {
          acc += qg[i * channels + p] * kg[j * channels + p];
          cnt.madds++;
        }
        s[static_cast<size_t>(i * t_per_group + j)] = acc;
        cnt.mem_accesses++;  // S element write
      }
    // P = softmax(S): one normalization multiply-add per element
    for (int64_t i = 0; i < t_per_group; ++i) {
      double mx = s[static_cast<size_t>(i * t_per_group)];
      for (int64_t j = 1; j < t_per_group; ++j)
        mx = std::max(mx, s[static_cast<size_t>(i * t_per_group + j)]);
      double sum = 0;
      for (int64_t j = 0; j < t_per_group; ++j) {
        s[static_cast<size_t>(i * t_per_group + j)] =
            std::exp(s[static_cast<size_t>(i * t_per_group + j)] - mx);
        sum += s[static_cast<size_t>(i * t_per_group + j)];
      }
      for (int64_t j = 0; j < t_per_group; ++j) {
        s[static_cast<size_t>(i * t_per_group + j)] /= sum;
        cnt.madds++;        // normalize
        cnt.mem_accesses++; // P element access
      }
    }
    // O = P V
    for (int64_t i = 0; i < t_per_group; ++i)
      for (int64_t j = 0; j < channels; ++j) {
        double acc = 0;
        for (int64_t p = 0; p < t_per_group; ++p) {
          acc += s[static_cast<size_t>(i * t_per_group + p)] * vg[p * channels + j];
          cnt.madds++;
        }
        og[i * channels + j] = acc;
      }
    cnt.mem_accesses += static_cast<uint64_t>(t_per_group * channels);  // O writes
  }
  if (out) *out = std::move(o);
  return cnt;
}

}  // namespace hlip
