#pragma once

// Plain-text key=value run configuration. Every key has a default matching
// the published brain-MRI recipe; unknown keys are rejected so typos fail
// loudly. One flat namespace feeds the model, text, optimizer, and data
// sections (see configs/default.cfg for the annotated reference).

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "hlip/clip.hpp"
#include "hlip/synthetic.hpp"

namespace hlip {

struct RunConfig {
  // vision tower
  int64_t vision_layers = 12;
  int64_t vision_width = 768;
  int64_t vision_heads = 12;
  int64_t mlp_ratio = 4;
  int64_t input_d = 48, input_h = 224, input_w = 224;
  int64_t token_d = 8, token_h = 16, token_w = 16;
  std::vector<int64_t> attn_schedule{2, 5, 8, 11};  // coarse-level layer indices
  std::string attn_fine_level = "scan";
  std::string attn_coarse_level = "study";
  double patch_dropout = 0.25;
  int64_t scans_per_study = 10;  // M
  int64_t m_max = 40;
  int64_t embed_dim = 512;

  // text tower
  int64_t text_layers = 12;
  int64_t text_width = 512;
  int64_t text_heads = 8;
  int64_t context_length = 256;

  // optimizer
  int64_t batch_size = 64;
  double base_lr = 1e-4;
  double beta1 = 0.9, beta2 = 0.95;
  double weight_decay = 0.2;
  int64_t warmup_steps = 2000;
  int64_t total_steps = 10000;
  int64_t epochs = 20;
  double init_log_temp = std::log(1.0 / 0.07);

  // synthetic data
  int64_t num_studies = 2000;
  int64_t scans_min = 2, scans_max = 6;
  double val_frac = 0.1, test_frac = 0.2;

  // evaluation
  std::string prompt_template = "This MRI study shows: {disease}.";

  static RunConfig load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("RunConfig: cannot open " + path);
    RunConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      size_t a = line.find_first_not_of(" \t\r");
      if (a == std::string::npos) continue;
      size_t b = line.find_last_not_of(" \t\r");
      line = line.substr(a, b - a + 1);
      size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("RunConfig: line " + std::to_string(lineno) + " is not key=value");
      std::string key = line.substr(0, eq);
      std::string val = line.substr(eq + 1);
      auto trim = [](std::string s) {
        size_t x = s.find_first_not_of(" \t");
        size_t y = s.find_last_not_of(" \t");
        return x == std::string::npos ? std::string() : s.substr(x, y - x + 1);
      };
      cfg.set(trim(key), trim(val));
    }
    return cfg;
  }

  void set(const std::string& key, const std::string& val) {
    auto as_i = [&]() { return std::stoll(val); };
    auto as_d = [&]() { return std::stod(val); };
    if (key == "vision_layers") vision_layers = as_i();
    else if (key == "vision_width") vision_width = as_i();
    else if (key == "vision_heads") vision_heads = as_i();
    else if (key == "mlp_ratio") mlp_ratio = as_i();
    else if (key == "input_d") input_d = as_i();
    else if (key == "input_h") input_h = as_i();
    else if (key == "input_w") input_w = as_i();
    else if (key == "token_d") token_d = as_i();
    else if (key == "token_h") token_h = as_i();
    else if (key == "token_w") token_w = as_i();
    else if (key == "attn_schedule") {
      attn_schedule.clear();
      std::istringstream ss(val);
      std::string part;
      while (std::getline(ss, part, ','))
        if (!part.empty()) attn_schedule.push_back(std::stoll(part));
    } else if (key == "attn_fine_level") attn_fine_level = val;
    else if (key == "attn_coarse_level") attn_coarse_level = val;
    else if (key == "patch_dropout") patch_dropout = as_d();
    else if (key == "scans_per_study") scans_per_study = as_i();
    else if (key == "m_max") m_max = as_i();
    else if (key == "embed_dim") embed_dim = as_i();
    else if (key == "text_layers") text_layers = as_i();
    else if (key == "text_width") text_width = as_i();
    else if (key == "text_heads") text_heads = as_i();
    else if (key == "context_length") context_length = as_i();
    else if (key == "batch_size") batch_size = as_i();
    else if (key == "base_lr") base_lr = as_d();
    else if (key == "beta1") beta1 = as_d();
    else if (key == "beta2") beta2 = as_d();
    else if (key == "weight_decay") weight_decay = as_d();
    else if (key == "warmup_steps") warmup_steps = as_i();
    else if (key == "total_steps") total_steps = as_i();
    else if (key == "epochs") epochs = as_i();
    else if (key == "init_log_temp") init_log_temp = as_d();
    else if (key == "num_studies") num_studies = as_i();
    else if (key == "scans_min") scans_min = as_i();
    else if (key == "scans_max") scans_max = as_i();
    else if (key == "val_frac") val_frac = as_d();
    else if (key == "test_frac") test_frac = as_d();
    else if (key == "prompt_template") prompt_template = val;
    else throw std::runtime_error("RunConfig: unknown key '" + key + "'");
  }

  EncoderConfig encoder_config() const {
    EncoderConfig cfg;
    cfg.layers = vision_layers;
    cfg.heads = vision_heads;
    cfg.width = vision_width;
    cfg.mlp_ratio = mlp_ratio;
    cfg.in_d = input_d;
    cfg.in_h = input_h;
    cfg.in_w = input_w;
    cfg.kd = token_d;
    cfg.kh = token_h;
    cfg.kw = token_w;
    AttentionLevel fine = parse_level(attn_fine_level);
    AttentionLevel coarse = parse_level(attn_coarse_level);
    cfg.level_schedule.assign(static_cast<size_t>(vision_layers), fine);
    for (int64_t i : attn_schedule) {
      if (i < 0 || i >= vision_layers)
        throw std::runtime_error("RunConfig: attn_schedule index out of range");
      cfg.level_schedule[static_cast<size_t>(i)] = coarse;
    }
    cfg.patch_dropout_rate = patch_dropout;
    cfg.m_max = m_max;
    cfg.proj_width = embed_dim;
    return cfg;
  }

  TextConfig text_config(int64_t vocab_size) const {
    TextConfig cfg;
    cfg.layers = text_layers;
    cfg.width = text_width;
    cfg.heads = text_heads;
    cfg.context_length = context_length;
    cfg.vocab_size = vocab_size;
    cfg.proj_width = embed_dim;
    return cfg;
  }

  TrainConfig train_config(uint64_t seed) const {
    TrainConfig cfg;
    cfg.batch_size = batch_size;
    cfg.base_lr = base_lr;
    cfg.beta1 = beta1;
    cfg.beta2 = beta2;
    cfg.weight_decay = weight_decay;
    cfg.warmup_steps = warmup_steps;
    cfg.total_steps = total_steps;
    cfg.scans_per_study = scans_per_study;
    cfg.m_max = m_max;
    cfg.patch_dropout_rate = patch_dropout;
    cfg.init_log_temp = init_log_temp;
    cfg.seed = seed;
    return cfg;
  }

  DatasetSpec dataset_spec(uint64_t seed) const {
    DatasetSpec spec;
    spec.num_studies = num_studies;
    spec.dims = {input_d, input_h, input_w};
    spec.m_min = static_cast<int>(scans_min);
    spec.m_max = static_cast<int>(scans_max);
    spec.seed = seed;
    spec.val_frac = val_frac;
    spec.test_frac = test_frac;
    return spec;
  }
};

}  // namespace hlip
