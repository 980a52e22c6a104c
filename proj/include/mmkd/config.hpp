// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: flat key = value text with one level of [section]ing.
// Unknown sections or keys are hard errors anchored to their line; the
// canonical echo written next to run outputs parses back to an equal
// config, so every run is self-describing.

#pragma once

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "mmkd/data.hpp"
#include "mmkd/error.hpp"
#include "mmkd/losses.hpp"
#include "mmkd/model.hpp"

namespace mmkd {

struct TrainParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 8;
  std::size_t pretrain_epochs = 3;
  std::size_t finetune_epochs = 5;
  std::uint64_t seed = 1;
  bool eval_each_epoch = true;

  bool operator==(const TrainParams&) const = default;
};

// Model geometry as configured (image/patch/vocab fields are filled in from
// the data spec when a model is materialised).
struct ModelPreset {
  std::size_t embed_dim = 48;
  std::size_t llm_layers = 2;
  std::size_t llm_heads = 2;
  std::size_t encoder_dim = 32;
  std::size_t encoder_layers = 1;
  std::size_t encoder_heads = 2;
  std::size_t projector_hidden = 0;
  std::size_t mlp_ratio = 4;
  std::size_t max_seq_len = 64;

  bool operator==(const ModelPreset&) const = default;
};

inline bool operator==(const DataSpec& a, const DataSpec& b) {
  return a.grid_k == b.grid_k && a.palette == b.palette &&
         a.image_size == b.image_size && a.patch_size == b.patch_size &&
         a.pretrain_samples == b.pretrain_samples &&
         a.finetune_samples == b.finetune_samples && a.eval_samples == b.eval_samples;
}

inline bool operator==(const DistillConfig& a, const DistillConfig& b) {
  return a.alpha == b.alpha && a.beta == b.beta && a.gamma == b.gamma &&
         a.alpha_prime == b.alpha_prime && a.beta_prime == b.beta_prime &&
         a.gamma_prime == b.gamma_prime && a.divergence == b.divergence &&
         a.targets == b.targets && a.temperature == b.temperature &&
         a.reduction == b.reduction;
}

struct RunConfig {
  ModelPreset teacher{.embed_dim = 128,
                      .llm_layers = 4,
                      .llm_heads = 4};
  ModelPreset student{};  // defaults above are the student preset
  DataSpec data{};
  DistillConfig distill{};
  TrainParams train{};
  std::string recipe = "DPT-SFT-DFT";
  std::string output_dir = "runs/out";
  std::string precision = "f64";
  std::uint64_t encoder_seed = 1000003;

  bool operator==(const RunConfig&) const = default;

  void validate() const {
    data.validate();
    distill.validate();
    if (teacher.embed_dim < student.embed_dim)
      throw ConfigError(
          "config: teacher embed_dim must be >= student embed_dim (capacity "
          "ordering)");
    if (precision != "f64" && precision != "f32")
      throw ConfigError("config: precision must be f64 or f32, got '" + precision +
                        "'");
    if (train.batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (!(train.lr > 0)) throw ConfigError("config: lr must be positive");
  }
};

inline RunConfig default_run_config() { return RunConfig{}; }

// Fills a full ModelConfig for one role from the preset plus data geometry.
inline ModelConfig model_config(const RunConfig& rc, const std::string& role) {
  const ModelPreset& p = role == "teacher" ? rc.teacher : rc.student;
  ModelConfig mc;
  mc.patch_size = rc.data.patch_size;
  mc.image_size = rc.data.image_size;
  mc.encoder_dim = p.encoder_dim;
  mc.encoder_layers = p.encoder_layers;
  mc.encoder_heads = p.encoder_heads;
  mc.embed_dim = p.embed_dim;
  mc.projector_hidden = p.projector_hidden;
  mc.llm_layers = p.llm_layers;
  mc.llm_heads = p.llm_heads;
  mc.mlp_ratio = p.mlp_ratio;
  mc.vocab_size = Vocab::build(rc.data).size();
  mc.max_seq_len = p.max_seq_len;
  mc.role = role;
  mc.validate();
  return mc;
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct ConfigCursor {
  std::string origin;
  std::size_t line = 0;

  [[noreturn]] void fail(const std::string& msg) const {
    throw ConfigError(origin + ":" + std::to_string(line) + ": " + msg);
  }

  double as_double(const std::string& v) const {
    try {
      std::size_t used = 0;
      double d = std::stod(v, &used);
      if (used != v.size()) fail("trailing characters after number '" + v + "'");
      return d;
    } catch (const ConfigError&) {
      throw;
    } catch (...) {
      fail("expected a number, got '" + v + "'");
    }
  }

  std::size_t as_size(const std::string& v) const {
    try {
      std::size_t used = 0;
      unsigned long long n = std::stoull(v, &used);
      if (used != v.size()) fail("trailing characters after integer '" + v + "'");
      return static_cast<std::size_t>(n);
    } catch (const ConfigError&) {
      throw;
    } catch (...) {
      fail("expected a non-negative integer, got '" + v + "'");
    }
  }

  bool as_bool(const std::string& v) const {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    fail("expected true/false, got '" + v + "'");
  }
};

inline void apply_model_key(ModelPreset& m, const std::string& key,
                            const std::string& value, const ConfigCursor& at) {
  if (key == "embed_dim") m.embed_dim = at.as_size(value);
  else if (key == "llm_layers") m.llm_layers = at.as_size(value);
  else if (key == "llm_heads") m.llm_heads = at.as_size(value);
  else if (key == "encoder_dim") m.encoder_dim = at.as_size(value);
  else if (key == "encoder_layers") m.encoder_layers = at.as_size(value);
  else if (key == "encoder_heads") m.encoder_heads = at.as_size(value);
  else if (key == "projector_hidden") m.projector_hidden = at.as_size(value);
  else if (key == "mlp_ratio") m.mlp_ratio = at.as_size(value);
  else if (key == "max_seq_len") m.max_seq_len = at.as_size(value);
  else at.fail("unknown key '" + key + "'");
}

}  // namespace detail

inline RunConfig parse_run_config_text(const std::string& text,
                                       const std::string& origin) {
  RunConfig rc;
  detail::ConfigCursor at{origin, 0};
  std::istringstream is(text);
  std::string line;
  std::string section;
  while (std::getline(is, line)) {
    ++at.line;
    const auto hash = line.find_first_of("#;");
    if (hash != std::string::npos) line.erase(hash);
    auto ltrim = line.find_first_not_of(" \t\r");
    if (ltrim == std::string::npos) continue;
    auto rtrim = line.find_last_not_of(" \t\r");
    line = line.substr(ltrim, rtrim - ltrim + 1);
    if (line.front() == '[') {
      if (line.back() != ']') at.fail("malformed section header '" + line + "'");
      section = line.substr(1, line.size() - 2);
      if (section != "teacher" && section != "student" && section != "data" &&
          section != "distill" && section != "train" && section != "run")
        at.fail("unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) at.fail("expected key = value, got '" + line + "'");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) at.fail("empty key");
    if (section.empty()) at.fail("key '" + key + "' outside any section");

    try {
      if (section == "teacher") {
        detail::apply_model_key(rc.teacher, key, value, at);
      } else if (section == "student") {
        detail::apply_model_key(rc.student, key, value, at);
      } else if (section == "data") {
        if (key == "grid_k") rc.data.grid_k = at.as_size(value);
        else if (key == "palette") rc.data.palette = at.as_size(value);
        else if (key == "image_size") rc.data.image_size = at.as_size(value);
        else if (key == "patch_size") rc.data.patch_size = at.as_size(value);
        else if (key == "pretrain_samples") rc.data.pretrain_samples = at.as_size(value);
        else if (key == "finetune_samples") rc.data.finetune_samples = at.as_size(value);
        else if (key == "eval_samples") rc.data.eval_samples = at.as_size(value);
        else at.fail("unknown key '" + key + "'");
      } else if (section == "distill") {
        if (key == "alpha") rc.distill.alpha = at.as_double(value);
        else if (key == "beta") rc.distill.beta = at.as_double(value);
        else if (key == "gamma") rc.distill.gamma = at.as_double(value);
        else if (key == "alpha_prime") rc.distill.alpha_prime = at.as_double(value);
        else if (key == "beta_prime") rc.distill.beta_prime = at.as_double(value);
        else if (key == "gamma_prime") rc.distill.gamma_prime = at.as_double(value);
        else if (key == "divergence") rc.distill.divergence = parse_divergence(value);
        else if (key == "targets") rc.distill.targets = parse_target_mask(value);
        else if (key == "temperature") rc.distill.temperature = at.as_double(value);
        else if (key == "reduction") rc.distill.reduction = parse_reduction(value);
        else at.fail("unknown key '" + key + "'");
      } else if (section == "train") {
        if (key == "lr") rc.train.lr = at.as_double(value);
        else if (key == "beta1") rc.train.beta1 = at.as_double(value);
        else if (key == "beta2") rc.train.beta2 = at.as_double(value);
        else if (key == "eps") rc.train.eps = at.as_double(value);
        else if (key == "batch_size") rc.train.batch_size = at.as_size(value);
        else if (key == "pretrain_epochs") rc.train.pretrain_epochs = at.as_size(value);
        else if (key == "finetune_epochs") rc.train.finetune_epochs = at.as_size(value);
        else if (key == "seed") rc.train.seed = at.as_size(value);
        else if (key == "eval_each_epoch") rc.train.eval_each_epoch = at.as_bool(value);
        else at.fail("unknown key '" + key + "'");
      } else if (section == "run") {
        if (key == "recipe") rc.recipe = value;
        else if (key == "output_dir") rc.output_dir = value;
        else if (key == "precision") rc.precision = value;
        else if (key == "encoder_seed") rc.encoder_seed = at.as_size(value);
        else at.fail("unknown key '" + key + "'");
      }
    } catch (const ParseError& e) {
      at.fail(e.what());
    }
  }
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return parse_run_config_text(buf.str(), path.string());
}

inline std::string format_run_config(const RunConfig& rc) {
  std::ostringstream os;
  auto model = [&](const char* name, const ModelPreset& m) {
    os << '[' << name << "]\n";
    os << "embed_dim = " << m.embed_dim << '\n';
    os << "llm_layers = " << m.llm_layers << '\n';
    os << "llm_heads = " << m.llm_heads << '\n';
    os << "encoder_dim = " << m.encoder_dim << '\n';
    os << "encoder_layers = " << m.encoder_layers << '\n';
    os << "encoder_heads = " << m.encoder_heads << '\n';
    os << "projector_hidden = " << m.projector_hidden << '\n';
    os << "mlp_ratio = " << m.mlp_ratio << '\n';
    os << "max_seq_len = " << m.max_seq_len << '\n';
    os << '\n';
  };
  model("teacher", rc.teacher);
  model("student", rc.student);
  os << "[data]\n";
  os << "grid_k = " << rc.data.grid_k << '\n';
  os << "palette = " << rc.data.palette << '\n';
  os << "image_size = " << rc.data.image_size << '\n';
  os << "patch_size = " << rc.data.patch_size << '\n';
  os << "pretrain_samples = " << rc.data.pretrain_samples << '\n';
  os << "finetune_samples = " << rc.data.finetune_samples << '\n';
  os << "eval_samples = " << rc.data.eval_samples << '\n';
  os << "\n[distill]\n";
  os << "alpha = " << detail::fmt_double(rc.distill.alpha) << '\n';
  os << "beta = " << detail::fmt_double(rc.distill.beta) << '\n';
  os << "gamma = " << detail::fmt_double(rc.distill.gamma) << '\n';
  os << "alpha_prime = " << detail::fmt_double(rc.distill.alpha_prime) << '\n';
  os << "beta_prime = " << detail::fmt_double(rc.distill.beta_prime) << '\n';
  os << "gamma_prime = " << detail::fmt_double(rc.distill.gamma_prime) << '\n';
  os << "divergence = " << format_divergence(rc.distill.divergence) << '\n';
  os << "targets = " << format_target_mask(rc.distill.targets) << '\n';
  os << "temperature = " << detail::fmt_double(rc.distill.temperature) << '\n';
  os << "reduction = " << format_reduction(rc.distill.reduction) << '\n';
  os << "\n[train]\n";
  os << "lr = " << detail::fmt_double(rc.train.lr) << '\n';
  os << "beta1 = " << detail::fmt_double(rc.train.beta1) << '\n';
  os << "beta2 = " << detail::fmt_double(rc.train.beta2) << '\n';
  os << "eps = " << detail::fmt_double(rc.train.eps) << '\n';
  os << "batch_size = " << rc.train.batch_size << '\n';
  os << "pretrain_epochs = " << rc.train.pretrain_epochs << '\n';
  os << "finetune_epochs = " << rc.train.finetune_epochs << '\n';
  os << "seed = " << rc.train.seed << '\n';
  os << "eval_each_epoch = " << (rc.train.eval_each_epoch ? "true" : "false") << '\n';
  os << "\n[run]\n";
  os << "recipe = " << rc.recipe << '\n';
  os << "output_dir = " << rc.output_dir << '\n';
  os << "precision = " << rc.precision << '\n';
  os << "encoder_seed = " << rc.encoder_seed << '\n';
  return os.str();
}

}  // namespace mmkd
