// SPDX-License-Identifier: Apache-2.0
//
// The toy multimodal model family: a frozen patch-transformer visual
// encoder shared by teacher and student, a two-layer GELU projector into
// the text embedding space, and a causal decoder LM over the concatenated
// sequence [prompt, visual, response]. Teacher and student differ only in
// width and depth; the interface (vocabulary, sequence layout) is shared.

#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mmkd/error.hpp"
#include "mmkd/image.hpp"
#include "mmkd/optim.hpp"
#include "mmkd/rng.hpp"
#include "mmkd/tensor.hpp"

namespace mmkd {

struct ModelConfig {
  std::size_t patch_size = 8;
  std::size_t image_size = 24;
  std::size_t encoder_dim = 32;      // C
  std::size_t encoder_layers = 1;
  std::size_t encoder_heads = 2;
  std::size_t embed_dim = 48;        // D
  std::size_t projector_hidden = 0;  // 0 -> embed_dim
  std::size_t llm_layers = 2;
  std::size_t llm_heads = 2;
  std::size_t mlp_ratio = 4;
  std::size_t vocab_size = 0;
  std::size_t max_seq_len = 64;
  std::string role = "student";

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t n_patches() const {
    const std::size_t s = patches_per_side();
    return s * s;
  }
  std::size_t patch_dim() const { return patch_size * patch_size * 3; }
  std::size_t hidden_width() const {
    return projector_hidden == 0 ? embed_dim : projector_hidden;
  }

  void validate() const {
    if (patch_size == 0 || image_size % patch_size != 0)
      throw ConfigError("model config: image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " + std::to_string(patch_size));
    if (encoder_heads == 0 || encoder_dim % encoder_heads != 0)
      throw ConfigError("model config: encoder_dim must be divisible by encoder_heads");
    if (llm_heads == 0 || embed_dim % llm_heads != 0)
      throw ConfigError("model config: embed_dim must be divisible by llm_heads");
    if (vocab_size == 0) throw ConfigError("model config: vocab_size is zero");
    if (role != "teacher" && role != "student")
      throw ConfigError("model config: role must be teacher or student, got '" +
                        role + "'");
    if (max_seq_len < n_patches() + 2)
      throw ConfigError("model config: max_seq_len too small for visual tokens");
  }
};

// Half-open index intervals locating the prompt, visual, and response
// spans of one sequence; they partition [0, T).
struct TokenSegments {
  std::size_t prompt_begin = 0;
  std::size_t prompt_end = 0;
  std::size_t visual_begin = 0;
  std::size_t visual_end = 0;
  std::size_t response_begin = 0;
  std::size_t response_end = 0;

  std::size_t total() const { return response_end; }
  std::size_t prompt_len() const { return prompt_end - prompt_begin; }
  std::size_t visual_len() const { return visual_end - visual_begin; }
  std::size_t response_len() const { return response_end - response_begin; }

  bool operator==(const TokenSegments&) const = default;

  void validate(std::size_t n_patches) const {
    const bool ordered = prompt_begin == 0 && prompt_end == visual_begin &&
                         visual_end == response_begin;
    if (!ordered || visual_len() != n_patches)
      throw ContractError("token segments do not partition the sequence");
  }
};

template <class S>
struct ForwardOutputT {
  TensorT<S> logits;         // [T x V]
  TensorT<S> visual_hidden;  // [N_p x D], final-layer states at visual positions
};

template <class S>
struct ForwardResultT {
  ForwardOutputT<S> output;
  TokenSegments segments;
};

namespace detail {

template <class S>
TensorT<S> causal_mask(std::size_t t) {
  TensorT<S> m = TensorT<S>::zeros({t, t});
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t j = i + 1; j < t; ++j) m.at(i, j) = S(-1e30);
  return m;
}

}  // namespace detail

// Pre-norm transformer block; attention is causal when `causal` is set.
template <class S>
struct TransformerBlockT {
  std::size_t dim = 0;
  std::size_t heads = 0;
  TensorT<S> ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
  TensorT<S> ln2_g, ln2_b, w1, b1, w2, b2;

  template <class Rng>
  void init(std::size_t d, std::size_t h, std::size_t mlp_ratio, Rng& rng) {
    dim = d;
    heads = h;
    const std::size_t m = d * mlp_ratio;
    const double sd = 1.0 / std::sqrt(static_cast<double>(d));
    const double sm = 1.0 / std::sqrt(static_cast<double>(m));
    ln1_g = TensorT<S>::full({d}, S(1));
    ln1_b = TensorT<S>::zeros({d});
    wq = TensorT<S>::randn({d, d}, rng, sd);
    bq = TensorT<S>::zeros({d});
    wk = TensorT<S>::randn({d, d}, rng, sd);
    bk = TensorT<S>::zeros({d});
    wv = TensorT<S>::randn({d, d}, rng, sd);
    bv = TensorT<S>::zeros({d});
    wo = TensorT<S>::randn({d, d}, rng, sd);
    bo = TensorT<S>::zeros({d});
    ln2_g = TensorT<S>::full({d}, S(1));
    ln2_b = TensorT<S>::zeros({d});
    w1 = TensorT<S>::randn({d, m}, rng, sd);
    b1 = TensorT<S>::zeros({m});
    w2 = TensorT<S>::randn({m, d}, rng, sm);
    b2 = TensorT<S>::zeros({d});
  }

  void register_params(ParameterGroupT<S>& g, const std::string& prefix) {
    ln1_g = g.add(prefix + "/ln1_g", ln1_g);
    ln1_b = g.add(prefix + "/ln1_b", ln1_b);
    wq = g.add(prefix + "/wq", wq);
    bq = g.add(prefix + "/bq", bq);
    wk = g.add(prefix + "/wk", wk);
    bk = g.add(prefix + "/bk", bk);
    wv = g.add(prefix + "/wv", wv);
    bv = g.add(prefix + "/bv", bv);
    wo = g.add(prefix + "/wo", wo);
    bo = g.add(prefix + "/bo", bo);
    ln2_g = g.add(prefix + "/ln2_g", ln2_g);
    ln2_b = g.add(prefix + "/ln2_b", ln2_b);
    w1 = g.add(prefix + "/w1", w1);
    b1 = g.add(prefix + "/b1", b1);
    w2 = g.add(prefix + "/w2", w2);
    b2 = g.add(prefix + "/b2", b2);
  }

  TensorT<S> forward(const TensorT<S>& x, bool causal) const {
    const std::size_t t = x.shape()[0];
    const std::size_t dh = dim / heads;
    TensorT<S> a = layer_norm(x, ln1_g, ln1_b);
    TensorT<S> q = add_rowwise(matmul(a, wq), bq);
    TensorT<S> k = add_rowwise(matmul(a, wk), bk);
    TensorT<S> v = add_rowwise(matmul(a, wv), bv);
    TensorT<S> mask = causal ? detail::causal_mask<S>(t) : TensorT<S>();
    std::vector<TensorT<S>> heads_out;
    heads_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      TensorT<S> qh = slice_cols(q, h * dh, (h + 1) * dh);
      TensorT<S> kh = slice_cols(k, h * dh, (h + 1) * dh);
      TensorT<S> vh = slice_cols(v, h * dh, (h + 1) * dh);
      TensorT<S> scores =
          scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
      if (causal) scores = add(scores, mask);
      heads_out.push_back(matmul(softmax(scores, 1.0), vh));
    }
    TensorT<S> attn = add_rowwise(matmul(concat_cols(heads_out), wo), bo);
    TensorT<S> mid = add(x, attn);
    TensorT<S> n2 = layer_norm(mid, ln2_g, ln2_b);
    TensorT<S> mlp = add_rowwise(
        matmul(gelu(add_rowwise(matmul(n2, w1), b1)), w2), b2);
    return add(mid, mlp);
  }
};

// Frozen patch-transformer over learned patch embeddings. Attention is
// causal in row-major patch order, which keeps single-layer reachability
// well defined (a change to patch p cannot influence outputs before p).
template <class S>
struct VisualEncoderT {
  ModelConfig cfg;
  TensorT<S> patch_w, patch_b, pos;
  std::vector<TransformerBlockT<S>> blocks;
  TensorT<S> lnf_g, lnf_b;
  ParameterGroupT<S> group{"visual_encoder", false, {}};

  template <class Rng>
  void build(const ModelConfig& config, Rng& rng) {
    cfg = config;
    const std::size_t c = cfg.encoder_dim;
    const std::size_t pd = cfg.patch_dim();
    patch_w = TensorT<S>::randn({pd, c}, rng, 1.0 / std::sqrt(static_cast<double>(pd)));
    patch_b = TensorT<S>::zeros({c});
    pos = TensorT<S>::randn({cfg.n_patches(), c}, rng, 0.02);
    blocks.resize(cfg.encoder_layers);
    for (auto& b : blocks) b.init(c, cfg.encoder_heads, cfg.mlp_ratio, rng);
    lnf_g = TensorT<S>::full({c}, S(1));
    lnf_b = TensorT<S>::zeros({c});

    patch_w = group.add("patch_embed/w", patch_w);
    patch_b = group.add("patch_embed/b", patch_b);
    pos = group.add("pos", pos);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].register_params(group, "blk" + std::to_string(i));
    lnf_g = group.add("lnf_g", lnf_g);
    lnf_b = group.add("lnf_b", lnf_b);
  }

  TensorT<S> patchify(const Image& img) const {
    if (img.height != cfg.image_size || img.width != cfg.image_size)
      throw ShapeError("encode_image: image " + std::to_string(img.height) + "x" +
                       std::to_string(img.width) + " does not match configured size " +
                       std::to_string(cfg.image_size));
    const std::size_t side = cfg.patches_per_side();
    const std::size_t sp = cfg.patch_size;
    std::vector<S> out(cfg.n_patches() * cfg.patch_dim());
    std::size_t w = 0;
    for (std::size_t py = 0; py < side; ++py)
      for (std::size_t px = 0; px < side; ++px)
        for (std::size_t y = 0; y < sp; ++y)
          for (std::size_t x = 0; x < sp; ++x)
            for (std::size_t ch = 0; ch < 3; ++ch)
              out[w++] = static_cast<S>(img.at(py * sp + y, px * sp + x, ch));
    return TensorT<S>::from_data({cfg.n_patches(), cfg.patch_dim()}, std::move(out));
  }

  TensorT<S> encode(const Image& img) const {
    TensorT<S> x = add(add_rowwise(matmul(patchify(img), patch_w), patch_b), pos);
    for (const auto& b : blocks) x = b.forward(x, /*causal=*/true);
    return layer_norm(x, lnf_g, lnf_b);
  }
};

// Two MLP layers with a GELU between: C -> hidden -> D.
template <class S>
struct ProjectorT {
  std::size_t in_dim = 0, hidden = 0, out_dim = 0;
  TensorT<S> w1, b1, w2, b2;
  ParameterGroupT<S> group{"projector", true, {}};

  template <class Rng>
  void build(const ModelConfig& cfg, Rng& rng) {
    in_dim = cfg.encoder_dim;
    hidden = cfg.hidden_width();
    out_dim = cfg.embed_dim;
    w1 = TensorT<S>::randn({in_dim, hidden}, rng,
                           1.0 / std::sqrt(static_cast<double>(in_dim)));
    b1 = TensorT<S>::zeros({hidden});
    w2 = TensorT<S>::randn({hidden, out_dim}, rng,
                           1.0 / std::sqrt(static_cast<double>(hidden)));
    b2 = TensorT<S>::zeros({out_dim});
    w1 = group.add("w1", w1);
    b1 = group.add("b1", b1);
    w2 = group.add("w2", w2);
    b2 = group.add("b2", b2);
  }

  TensorT<S> project(const TensorT<S>& zv) const {
    if (zv.ndim() != 2 || zv.shape()[1] != in_dim)
      throw ShapeError("project: input " + shape_str(zv.shape()) +
                       " does not match encoder_dim " + std::to_string(in_dim));
    return add_rowwise(
        matmul(gelu(add_rowwise(matmul(zv, w1), b1)), w2), b2);
  }
};

// Causal decoder over embedded tokens; the token embedding doubles as the
// output head (tied weights).
template <class S>
struct DecoderLMT {
  ModelConfig cfg;
  TensorT<S> token_emb, pos_emb;
  std::vector<TransformerBlockT<S>> blocks;
  TensorT<S> lnf_g, lnf_b;
  ParameterGroupT<S> group{"llm", true, {}};

  template <class Rng>
  void build(const ModelConfig& config, Rng& rng) {
    cfg = config;
    const std::size_t d = cfg.embed_dim;
    token_emb = TensorT<S>::randn({cfg.vocab_size, d}, rng, 0.02);
    pos_emb = TensorT<S>::randn({cfg.max_seq_len, d}, rng, 0.02);
    blocks.resize(cfg.llm_layers);
    for (auto& b : blocks) b.init(d, cfg.llm_heads, cfg.mlp_ratio, rng);
    lnf_g = TensorT<S>::full({d}, S(1));
    lnf_b = TensorT<S>::zeros({d});

    token_emb = group.add("token_emb", token_emb);
    pos_emb = group.add("pos_emb", pos_emb);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].register_params(group, "blk" + std::to_string(i));
    lnf_g = group.add("lnf_g", lnf_g);
    lnf_b = group.add("lnf_b", lnf_b);
  }

  // `parts` are per-segment embedding matrices already in model space.
  TensorT<S> final_hidden(const std::vector<TensorT<S>>& parts) const {
    TensorT<S> x = concat_rows(parts);
    const std::size_t t = x.shape()[0];
    x = add(x, slice_rows(pos_emb, 0, t));
    for (const auto& b : blocks) x = b.forward(x, /*causal=*/true);
    return layer_norm(x, lnf_g, lnf_b);
  }

  TensorT<S> logits_from_hidden(const TensorT<S>& h) const {
    return matmul(h, transpose(token_emb));
  }
};

template <class S>
struct MultimodalModelT {
  ModelConfig cfg;
  VisualEncoderT<S> encoder;
  ProjectorT<S> projector;
  DecoderLMT<S> llm;

  std::vector<ParameterGroupT<S>*> groups() {
    return {&encoder.group, &projector.group, &llm.group};
  }
  std::vector<const ParameterGroupT<S>*> groups() const {
    return {&encoder.group, &projector.group, &llm.group};
  }

  TensorT<S> encode_image(const Image& img) const { return encoder.encode(img); }
  TensorT<S> project(const TensorT<S>& zv) const { return projector.project(zv); }

  ForwardResultT<S> forward(const Image& img, std::span<const int> prompt,
                            std::span<const int> response) const {
    const std::size_t np = cfg.n_patches();
    const std::size_t t = prompt.size() + np + response.size();
    if (t > cfg.max_seq_len)
      throw CapacityError("forward: sequence length " + std::to_string(t) +
                          " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
    TokenSegments seg;
    seg.prompt_begin = 0;
    seg.prompt_end = prompt.size();
    seg.visual_begin = seg.prompt_end;
    seg.visual_end = seg.visual_begin + np;
    seg.response_begin = seg.visual_end;
    seg.response_end = t;

    std::vector<TensorT<S>> parts;
    if (!prompt.empty()) parts.push_back(gather_rows(llm.token_emb, prompt));
    parts.push_back(project(encode_image(img)));
    if (!response.empty()) parts.push_back(gather_rows(llm.token_emb, response));

    TensorT<S> h = llm.final_hidden(parts);
    ForwardOutputT<S> out;
    out.logits = llm.logits_from_hidden(h);
    out.visual_hidden = slice_rows(h, seg.visual_begin, seg.visual_end);
    return {std::move(out), seg};
  }
};

// Deterministic construction. The visual encoder derives from
// `encoder_seed` alone, so any two models configured alike share identical
// frozen encoder parameters regardless of their own seed.
template <class S>
MultimodalModelT<S> build_model(const ModelConfig& cfg, std::uint64_t seed,
                                std::uint64_t encoder_seed) {
  cfg.validate();
  MultimodalModelT<S> m;
  m.cfg = cfg;
  auto enc_rng = make_rng(encoder_seed, "visual_encoder");
  m.encoder.build(cfg, enc_rng);
  m.encoder.group.set_trainable(false);
  auto proj_rng = make_rng(seed, "projector");
  m.projector.build(cfg, proj_rng);
  auto llm_rng = make_rng(seed, "llm");
  m.llm.build(cfg, llm_rng);
  return m;
}

// Same-architecture build that adopts another model's encoder instance, so
// teacher and student reference the same frozen parameters.
template <class S>
MultimodalModelT<S> build_model_sharing_encoder(const ModelConfig& cfg,
                                                const MultimodalModelT<S>& donor,
                                                std::uint64_t seed) {
  cfg.validate();
  if (cfg.encoder_dim != donor.cfg.encoder_dim ||
      cfg.patch_size != donor.cfg.patch_size ||
      cfg.image_size != donor.cfg.image_size ||
      cfg.encoder_layers != donor.cfg.encoder_layers)
    throw ConfigError("shared encoder: encoder geometry differs between models");
  MultimodalModelT<S> m;
  m.cfg = cfg;
  m.encoder = donor.encoder;  // tensors are shared handles
  auto proj_rng = make_rng(seed, "projector");
  m.projector.build(cfg, proj_rng);
  auto llm_rng = make_rng(seed, "llm");
  m.llm.build(cfg, llm_rng);
  return m;
}

// Argmax decoding until `eos` or `max_new` tokens; exact logit ties pick
// the lowest token id.
template <class S>
std::vector<int> greedy_decode(const MultimodalModelT<S>& model, const Image& img,
                               std::span<const int> prompt, std::size_t max_new,
                               int eos) {
  if (max_new < 1) throw ContractError("greedy_decode: max_new must be >= 1");
  std::vector<int> out;
  while (out.size() < max_new) {
    auto res = model.forward(img, prompt, out);
    const std::size_t last = res.segments.total() - 1;
    const int next = static_cast<int>(argmax_row(res.output.logits, last));
    out.push_back(next);
    if (next == eos) break;
  }
  return out;
}

}  // namespace mmkd
