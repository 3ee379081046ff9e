#pragma once

// Small trainable transformer text encoder producing report embeddings in
// the shared space. Word-level vocabulary with reserved PAD/CLS/UNK ids,
// CLS pooling, PAD keys masked out of attention.

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "hlip/encoder.hpp"
#include "hlip/hier_attention.hpp"
#include "hlip/tensor.hpp"

namespace hlip {

struct Vocab {
  static constexpr int64_t kPad = 0;
  static constexpr int64_t kCls = 1;
  static constexpr int64_t kUnk = 2;

  std::map<std::string, int64_t> token_to_id;

  int64_t size() const { return static_cast<int64_t>(token_to_id.size()) + 3; }

  static std::vector<std::string> split_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : text) {
      if (std::isalnum(static_cast<unsigned char>(ch))) {
        cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
      } else if (!cur.empty()) {
        words.push_back(cur);
        cur.clear();
      }
    }
    if (!cur.empty()) words.push_back(cur);
    return words;
  }

  // Deterministic construction: tokens sorted by descending frequency, ties
  // broken lexicographically; ids dense from 3 (after PAD/CLS/UNK).
  static Vocab build(const std::vector<std::string>& corpus) {
    std::map<std::string, int64_t> freq;
    for (const auto& text : corpus)
      for (const auto& w : split_words(text)) freq[w]++;
    std::vector<std::pair<std::string, int64_t>> items(freq.begin(), freq.end());
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second > b.second;
      return a.first < b.first;
    });
    Vocab v;
    for (const auto& [word, n] : items)
      v.token_to_id.emplace(word, static_cast<int64_t>(v.token_to_id.size()) + 3);
    return v;
  }

  int64_t lookup(const std::string& word) const {
    auto it = token_to_id.find(word);
    return it == token_to_id.end() ? kUnk : it->second;
  }

  // One token per line, line number = id; first three lines reserved.
  void save(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw std::runtime_error("Vocab::save: cannot open " + path);
    f << "<pad>\n<cls>\n<unk>\n";
    std::vector<std::string> by_id(token_to_id.size());
    for (const auto& [word, id] : token_to_id) by_id[static_cast<size_t>(id - 3)] = word;
    for (const auto& w : by_id) f << w << "\n";
  }

  static Vocab load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("Vocab::load: cannot open " + path);
    Vocab v;
    std::string line;
    int64_t id = 0;
    while (std::getline(f, line)) {
      if (id >= 3 && !line.empty()) v.token_to_id.emplace(line, id);
      ++id;
    }
    return v;
  }
};

struct TextConfig {
  int64_t layers = 4;
  int64_t width = 256;
  int64_t heads = 4;
  int64_t context_length = 256;  // 512 for the chest recipe
  int64_t vocab_size = 0;
  int64_t proj_width = 512;

  void validate() const {
    if (width % heads != 0) throw ShapeError("TextConfig: heads must divide width");
    if (vocab_size < 3) throw ShapeError("TextConfig: vocab_size must cover reserved ids");
  }
};

// Lowercase, split on non-alphanumerics, map via vocab with UNK fallback,
// prepend CLS, truncate or pad to context_length.
inline std::vector<int64_t> tokenize(const std::string& text, const Vocab& vocab,
                                     int64_t context_length) {
  std::vector<int64_t> ids;
  ids.reserve(static_cast<size_t>(context_length));
  ids.push_back(Vocab::kCls);
  for (const auto& w : Vocab::split_words(text)) {
    if (static_cast<int64_t>(ids.size()) >= context_length) break;
    ids.push_back(vocab.lookup(w));
  }
  ids.resize(static_cast<size_t>(context_length), Vocab::kPad);
  return ids;
}

template <class T>
struct TextParams {
  Tensor<T> token_emb;  // (V, c)
  Tensor<T> pos_emb;    // (ctx, c), learned
  std::vector<EncoderBlockParams<T>> blocks;
  Tensor<T> final_g, final_b;
  Tensor<T> proj;  // (c, e)

  static TextParams init(const TextConfig& cfg, Rng& rng) {
    cfg.validate();
    TextParams p;
    int64_t c = cfg.width, mw = 4 * c;
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
    p.token_emb = tn({cfg.vocab_size, c});
    p.pos_emb = tn({cfg.context_length, c});
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
    out.emplace_back("token_emb", &token_emb);
    out.emplace_back("pos_emb", &pos_emb);
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

  std::vector<Tensor<T>*> trainable() {
    std::vector<Tensor<T>*> out;
    for (auto& [name, t] : named_tensors()) out.push_back(t);
    return out;
  }
};

// Encodes a batch of id sequences to normalized (B, e) embeddings. PAD
// positions are excluded from attention keys, so trailing padding cannot
// influence the CLS representation.
template <class T>
Tensor<T> encode_text(const std::vector<std::vector<int64_t>>& ids, const TextConfig& cfg,
                      TextParams<T>& params) {
  cfg.validate();
  int64_t b = static_cast<int64_t>(ids.size());
  int64_t ctx = cfg.context_length, c = cfg.width;
  std::vector<int64_t> flat;
  flat.reserve(static_cast<size_t>(b * ctx));
  for (const auto& seq : ids) {
    if (static_cast<int64_t>(seq.size()) != ctx)
      throw ShapeError("encode_text: id sequence length must equal context_length");
    flat.insert(flat.end(), seq.begin(), seq.end());
  }
  Tensor<T> x = embedding_lookup(params.token_emb, flat).reshape({b, ctx, c});
  x = add(x, params.pos_emb);

  Tensor<T> key_bias = Tensor<T>::zeros({b, ctx});
  for (int64_t bi = 0; bi < b; ++bi)
    for (int64_t t = 0; t < ctx; ++t)
      if (ids[static_cast<size_t>(bi)][static_cast<size_t>(t)] == Vocab::kPad)
        key_bias.data()[bi * ctx + t] = T(-1e30);

  for (auto& blk : params.blocks) {
    Tensor<T> normed = layer_norm(x, blk.ln1_g, blk.ln1_b, T(1e-5));
    x = add(x, detail::mhsa(normed, blk.attn, &key_bias));
    Tensor<T> normed2 = layer_norm(x, blk.ln2_g, blk.ln2_b, T(1e-5));
    Tensor<T> flat2 = normed2.reshape({b * ctx, c});
    Tensor<T> hidden = gelu(add(matmul(flat2, blk.mlp_w1), blk.mlp_b1));
    x = add(x, add(matmul(hidden, blk.mlp_w2), blk.mlp_b2).reshape(x.shape()));
  }
  Tensor<T> cls = slice(x, 1, 0, 1).reshape({b, c});
  cls = layer_norm(cls, params.final_g, params.final_b, T(1e-5));
  return l2_normalize_rows(matmul(cls, params.proj));
}

}  // namespace hlip
