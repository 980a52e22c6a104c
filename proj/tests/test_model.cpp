// SPDX-License-Identifier: Apache-2.0
//
// Model family: encoder determinism and locality, projector closed forms,
// causal forward semantics, segment integrity, greedy decoding.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "mmkd/model.hpp"
#include "mmkd/rng.hpp"

using namespace mmkd;

namespace {

ModelConfig tiny_config(std::size_t image = 8, std::size_t patch = 4) {
  ModelConfig c;
  c.patch_size = patch;
  c.image_size = image;
  c.encoder_dim = 8;
  c.encoder_layers = 1;
  c.encoder_heads = 2;
  c.embed_dim = 16;
  c.llm_layers = 2;
  c.llm_heads = 2;
  c.mlp_ratio = 2;
  c.vocab_size = 12;
  c.max_seq_len = 40;
  c.role = "student";
  return c;
}

Image solid_image(std::size_t size, double value) {
  Image img;
  img.height = img.width = size;
  img.rgb.assign(size * size * 3, value);
  return img;
}

}  // namespace

TEST_CASE("encode_image is deterministic and shape-checked") {
  auto m = build_model<double>(tiny_config(), 1, 42);
  Image zero = solid_image(8, 0.0);
  Tensor a = m.encode_image(zero);
  Tensor b = m.encode_image(zero);
  REQUIRE(a.shape() == Shape{4, 8});
  REQUIRE(a.data() == b.data());

  Image wrong = solid_image(12, 0.0);
  REQUIRE_THROWS_AS(m.encode_image(wrong), ShapeError);
}

TEST_CASE("encoder patch count follows the shape arithmetic") {
  ModelConfig c = tiny_config(16, 4);
  auto m = build_model<double>(c, 1, 42);
  REQUIRE(c.n_patches() == 16);
  Tensor z = m.encode_image(solid_image(16, 0.3));
  REQUIRE(z.shape() == Shape{16, 8});
}

TEST_CASE("single-layer encoder locality: rows before a changed patch are untouched") {
  auto m = build_model<double>(tiny_config(), 1, 42);
  Image base = solid_image(8, 0.25);
  Image tweaked = base;
  // Patch index 2 of 4 (row-major): pixels y in [4,8), x in [0,4).
  for (std::size_t y = 4; y < 8; ++y)
    for (std::size_t x = 0; x < 4; ++x) tweaked.at(y, x, 0) = 0.9;

  Tensor za = m.encode_image(base);
  Tensor zb = m.encode_image(tweaked);
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t j = 0; j < 8; ++j) REQUIRE(za.at(p, j) == zb.at(p, j));
  bool changed = false;
  for (std::size_t j = 0; j < 8; ++j) changed = changed || za.at(2, j) != zb.at(2, j);
  REQUIRE(changed);
}

TEST_CASE("projector with zeroed parameters maps everything to zero") {
  auto m = build_model<double>(tiny_config(), 3, 42);
  for (auto& [name, t] : m.projector.group.params)
    std::fill(t.data().begin(), t.data().end(), 0.0);
  Tensor in = Tensor::from_data({4, 8}, std::vector<double>(32, 0.7));
  Tensor out = m.project(in);
  REQUIRE(out.shape() == Shape{4, 16});
  for (double v : out.data()) REQUIRE(v == 0.0);
}

TEST_CASE("identity-initialised projector reduces to the exact GELU") {
  ModelConfig c = tiny_config();
  c.encoder_dim = 16;  // square so identity weights exist
  auto m = build_model<double>(c, 3, 42);
  auto& w1 = m.projector.group.find("w1");
  auto& w2 = m.projector.group.find("w2");
  std::fill(w1.data().begin(), w1.data().end(), 0.0);
  std::fill(w2.data().begin(), w2.data().end(), 0.0);
  for (std::size_t i = 0; i < 16; ++i) {
    w1.data()[i * 16 + i] = 1.0;
    w2.data()[i * 16 + i] = 1.0;
  }

  auto rng = make_rng(5, "gelu-oracle");
  Tensor in = Tensor::randn({3, 16}, rng, 1.0);
  Tensor out = m.project(in);
  for (std::size_t i = 0; i < in.numel(); ++i) {
    const double x = in.data()[i];
    const double expected = 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
    REQUIRE(out.data()[i] == Catch::Approx(expected).margin(1e-12));
  }
}

TEST_CASE("projector rejects mismatched input width") {
  auto m = build_model<double>(tiny_config(), 3, 42);
  REQUIRE_THROWS_AS(m.project(Tensor::zeros({4, 5})), ShapeError);
}

TEST_CASE("forward lays out [prompt, visual, response] and partitions the sequence") {
  auto m = build_model<double>(tiny_config(), 7, 42);
  Image img = solid_image(8, 0.5);
  std::vector<int> prompt = {1, 4, 5};
  std::vector<int> response = {6, 7, 2};
  auto res = m.forward(img, prompt, response);

  const TokenSegments& seg = res.segments;
  REQUIRE(seg.prompt_begin == 0);
  REQUIRE(seg.prompt_end == 3);
  REQUIRE(seg.visual_begin == 3);
  REQUIRE(seg.visual_end == 7);
  REQUIRE(seg.response_begin == 7);
  REQUIRE(seg.response_end == 10);
  REQUIRE_NOTHROW(seg.validate(4));
  REQUIRE(res.output.logits.shape() == Shape{10, 12});
  REQUIRE(res.output.visual_hidden.shape() == Shape{4, 16});
}

TEST_CASE("forward with empty response covers prompt plus visual tokens only") {
  auto m = build_model<double>(tiny_config(), 7, 42);
  std::vector<int> prompt = {1, 4};
  auto res = m.forward(solid_image(8, 0.1), prompt, {});
  REQUIRE(res.output.logits.shape()[0] == 2 + 4);
  REQUIRE(res.segments.response_len() == 0);
}

TEST_CASE("forward rejects sequences beyond max_seq_len") {
  ModelConfig c = tiny_config();
  c.max_seq_len = 8;
  auto m = build_model<double>(c, 7, 42);
  std::vector<int> prompt = {1, 4, 5, 6};
  std::vector<int> response = {6, 7, 2};
  REQUIRE_THROWS_AS(m.forward(solid_image(8, 0.1), prompt, response), CapacityError);
}

TEST_CASE("causality: perturbing a response token leaves earlier logits bitwise intact") {
  auto m = build_model<double>(tiny_config(), 9, 42);
  Image img = solid_image(8, 0.5);
  std::vector<int> prompt = {1, 4, 5};
  std::vector<int> response = {6, 7, 8, 2};
  auto base = m.forward(img, prompt, response);

  std::vector<int> perturbed = response;
  perturbed[2] = 9;  // absolute position 3 + 4 + 2 = 9
  auto other = m.forward(img, prompt, perturbed);

  const std::size_t t = 9;
  const std::size_t v = 12;
  for (std::size_t pos = 0; pos < t; ++pos)
    for (std::size_t j = 0; j < v; ++j)
      REQUIRE(base.output.logits.at(pos, j) == other.output.logits.at(pos, j));
  bool changed = false;
  for (std::size_t j = 0; j < v; ++j)
    changed = changed || base.output.logits.at(t, j) != other.output.logits.at(t, j);
  REQUIRE(changed);
}

TEST_CASE("prefix re-forward oracle: logits agree position by position") {
  auto m = build_model<double>(tiny_config(), 11, 42);
  Image img = solid_image(8, 0.4);
  std::vector<int> prompt = {1, 4, 5};
  std::vector<int> response = {6, 7, 8, 9, 2};
  auto full = m.forward(img, prompt, response);

  for (std::size_t keep = 0; keep <= response.size(); ++keep) {
    std::vector<int> partial(response.begin(), response.begin() + keep);
    auto pre = m.forward(img, prompt, partial);
    const std::size_t t = pre.segments.total();
    for (std::size_t pos = 0; pos < t; ++pos)
      for (std::size_t j = 0; j < 12; ++j)
        REQUIRE(pre.output.logits.at(pos, j) ==
                Catch::Approx(full.output.logits.at(pos, j)).margin(1e-12));
  }
}

TEST_CASE("greedy_decode with max_new=1 is the argmax of the final logits") {
  auto m = build_model<double>(tiny_config(), 13, 42);
  Image img = solid_image(8, 0.6);
  std::vector<int> prompt = {1, 4, 5};
  auto res = m.forward(img, prompt, {});
  const std::size_t last = res.segments.total() - 1;
  const int expected = static_cast<int>(argmax_row(res.output.logits, last));
  auto decoded = greedy_decode(m, img, prompt, 1, /*eos=*/2);
  REQUIRE(decoded.size() == 1);
  REQUIRE(decoded[0] == expected);
  REQUIRE_THROWS_AS(greedy_decode(m, img, prompt, 0, 2), ContractError);
}

TEST_CASE("greedy_decode is deterministic and stops at the end token") {
  auto m = build_model<double>(tiny_config(), 13, 42);
  Image img = solid_image(8, 0.2);
  std::vector<int> prompt = {1, 4};
  auto a = greedy_decode(m, img, prompt, 6, 2);
  auto b = greedy_decode(m, img, prompt, 6, 2);
  REQUIRE(a == b);
  REQUIRE(a.size() <= 6);
  for (std::size_t i = 0; i + 1 < a.size(); ++i) REQUIRE(a[i] != 2);
}

TEST_CASE("model construction is deterministic; encoder derives from its own seed") {
  ModelConfig c = tiny_config();
  auto a = build_model<double>(c, 21, 42);
  auto b = build_model<double>(c, 21, 42);
  for (std::size_t g = 0; g < 3; ++g) {
    auto* ga = a.groups()[g];
    auto* gb = b.groups()[g];
    REQUIRE(ga->params.size() == gb->params.size());
    for (std::size_t i = 0; i < ga->params.size(); ++i)
      REQUIRE(ga->params[i].second.data() == gb->params[i].second.data());
  }
  // Different model seed, same encoder seed: encoder identical, the rest not.
  auto d = build_model<double>(c, 22, 42);
  for (std::size_t i = 0; i < a.encoder.group.params.size(); ++i)
    REQUIRE(a.encoder.group.params[i].second.data() ==
            d.encoder.group.params[i].second.data());
  REQUIRE(a.llm.group.params[0].second.data() != d.llm.group.params[0].second.data());
}

TEST_CASE("teacher and student share encoder storage and vocabulary width") {
  ModelConfig tc = tiny_config();
  tc.embed_dim = 32;
  tc.llm_layers = 3;
  tc.llm_heads = 4;
  tc.role = "teacher";
  auto teacher = build_model<double>(tc, 31, 42);

  ModelConfig sc = tiny_config();
  auto student = build_model_sharing_encoder<double>(sc, teacher, 32);
  REQUIRE(student.encoder.group.params.size() == teacher.encoder.group.params.size());
  for (std::size_t i = 0; i < teacher.encoder.group.params.size(); ++i)
    REQUIRE(student.encoder.group.params[i].second.node() ==
            teacher.encoder.group.params[i].second.node());

  auto rt = teacher.forward(solid_image(8, 0.5), std::vector<int>{1, 4}, {});
  auto rs = student.forward(solid_image(8, 0.5), std::vector<int>{1, 4}, {});
  REQUIRE(rt.output.logits.shape()[1] == rs.output.logits.shape()[1]);

  sc.encoder_dim = 4;  // geometry mismatch
  REQUIRE_THROWS_AS(build_model_sharing_encoder<double>(sc, teacher, 32), ConfigError);
}

TEST_CASE("visual encoder group is frozen by construction") {
  auto m = build_model<double>(tiny_config(), 17, 42);
  REQUIRE_FALSE(m.encoder.group.trainable);
  for (auto& [name, t] : m.encoder.group.params) REQUIRE_FALSE(t.requires_grad());
  REQUIRE(m.projector.group.trainable);
  REQUIRE(m.llm.group.trainable);
}

TEST_CASE("model config validation catches bad geometry") {
  ModelConfig c = tiny_config();
  c.image_size = 10;  // not divisible by patch 4
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.embed_dim = 15;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.vocab_size = 0;
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
  c = tiny_config();
  c.role = "oracle";
  REQUIRE_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("float32 model forward runs and matches double at coarse tolerance") {
  ModelConfig c = tiny_config();
  auto md = build_model<double>(c, 77, 42);
  auto mf = build_model<float>(c, 77, 42);
  std::vector<int> prompt = {1, 4, 5};
  auto rd = md.forward(solid_image(8, 0.3), prompt, std::vector<int>{6, 2});
  auto rf = mf.forward(solid_image(8, 0.3), prompt, std::vector<int>{6, 2});
  REQUIRE(rd.output.logits.shape() == rf.output.logits.shape());
  for (std::size_t i = 0; i < rd.output.logits.numel(); ++i)
    REQUIRE(static_cast<double>(rf.output.logits.data()[i]) ==
            Catch::Approx(rd.output.logits.data()[i]).margin(2e-3));
}
