// SPDX-License-Identifier: Apache-2.0
//
// Stage machinery: recipe parsing, freeze-policy soundness, teacher
// isolation, weight-collapse equivalence, checkpoint composability,
// determinism, and the ablation row sets.

#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "mmkd/schedule.hpp"

using namespace mmkd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("mmkd_sched_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

RunConfig tiny_run_config() {
  RunConfig rc;
  rc.data.grid_k = 2;
  rc.data.palette = 3;
  rc.data.image_size = 8;
  rc.data.patch_size = 4;
  rc.data.pretrain_samples = 16;
  rc.data.finetune_samples = 16;
  rc.data.eval_samples = 9;
  rc.teacher = ModelPreset{.embed_dim = 24,
                           .llm_layers = 2,
                           .llm_heads = 2,
                           .encoder_dim = 8,
                           .mlp_ratio = 2,
                           .max_seq_len = 32};
  rc.student = ModelPreset{.embed_dim = 16,
                           .llm_layers = 1,
                           .llm_heads = 2,
                           .encoder_dim = 8,
                           .mlp_ratio = 2,
                           .max_seq_len = 32};
  rc.train.batch_size = 4;
  rc.train.pretrain_epochs = 1;
  rc.train.finetune_epochs = 1;
  rc.train.seed = 17;
  rc.train.eval_each_epoch = false;
  return rc;
}

using Snapshot = std::vector<std::vector<double>>;

Snapshot snapshot(const MultimodalModelT<double>& m) {
  Snapshot s;
  for (const auto* g : m.groups())
    for (const auto& [name, t] : g->params) s.push_back(t.data());
  return s;
}

Snapshot snapshot_group(const ParameterGroupT<double>& g) {
  Snapshot s;
  for (const auto& [name, t] : g.params) s.push_back(t.data());
  return s;
}

MultimodalModelT<double> tiny_teacher(const RunConfig& rc, const Dataset& ds) {
  return build_model<double>(model_config(rc, "teacher"), 71, rc.encoder_seed);
}

Stage make_stage(StageKind kind, const RunConfig& rc, std::size_t epochs = 1) {
  Stage st;
  st.kind = kind;
  st.epochs = epochs;
  st.distill = rc.distill;
  st.split = is_pretrain_kind(kind) ? Split::Pretrain : Split::Finetune;
  return st;
}

}  // namespace

TEST_CASE("recipe parsing follows the stage grammar") {
  DistillConfig d;
  Recipe ps = parse_recipe("PT-SFT", d, 3, 5);
  REQUIRE(ps.stages.size() == 2);
  REQUIRE(ps.stages[0].kind == StageKind::PT);
  REQUIRE(ps.stages[0].epochs == 3);
  REQUIRE(ps.stages[0].split == Split::Pretrain);
  REQUIRE(ps.stages[1].kind == StageKind::SFT);
  REQUIRE(ps.stages[1].epochs == 5);
  REQUIRE(ps.stages[1].split == Split::Finetune);
  REQUIRE_FALSE(ps.needs_teacher());
  REQUIRE(format_recipe(ps) == "PT-SFT");

  Recipe full = parse_recipe("DPT-SFT-DFT", d, 3, 5);
  REQUIRE(full.stages.size() == 3);
  REQUIRE(full.needs_teacher());
  REQUIRE(stage_needs_teacher(full.stages[0].kind));
  REQUIRE_FALSE(stage_needs_teacher(full.stages[1].kind));
  REQUIRE(stage_needs_teacher(full.stages[2].kind));
  REQUIRE(format_recipe(full) == "DPT-SFT-DFT");

  REQUIRE_THROWS_AS(parse_recipe("SFT-DPT", d, 3, 5), ParseError);
  REQUIRE_THROWS_AS(parse_recipe("PT-DPT", d, 3, 5), ParseError);
  REQUIRE_THROWS_AS(parse_recipe("PT-SGD", d, 3, 5), ParseError);
  REQUIRE_THROWS_AS(parse_recipe("", d, 3, 5), ParseError);
  REQUIRE(format_recipe(parse_recipe("DPT-DFT-DFT", d, 3, 5)) == "DPT-DFT-DFT");
}

TEST_CASE("freeze policies are fixed per stage kind") {
  REQUIRE(freeze_policy_for(StageKind::PT) == FreezePolicy{true, false});
  REQUIRE(freeze_policy_for(StageKind::DPT) == FreezePolicy{true, false});
  REQUIRE(freeze_policy_for(StageKind::SFT) == FreezePolicy{true, true});
  REQUIRE(freeze_policy_for(StageKind::DFT) == FreezePolicy{true, true});
}

TEST_CASE("run_stage enforces teacher presence rules") {
  RunConfig rc = tiny_run_config();
  Dataset ds = generate_dataset(rc.data, 5);
  auto student = build_model<double>(model_config(rc, "student"), 7, rc.encoder_seed);
  Stage dpt = make_stage(StageKind::DPT, rc);
  REQUIRE_THROWS_AS(run_stage(student, nullptr, dpt, 0, ds, rc.train), ConfigError);

  // PT with a teacher supplied simply ignores it.
  auto teacher = tiny_teacher(rc, ds);
  Snapshot before = snapshot(teacher);
  Stage pt = make_stage(StageKind::PT, rc);
  run_stage(student, &teacher, pt, 0, ds, rc.train);
  REQUIRE(snapshot(teacher) == before);
}

TEST_CASE("freeze-policy soundness: parameters outside the policy never move") {
  RunConfig rc = tiny_run_config();
  Dataset ds = generate_dataset(rc.data, 5);
  auto teacher = tiny_teacher(rc, ds);

  for (StageKind kind :
       {StageKind::PT, StageKind::DPT, StageKind::SFT, StageKind::DFT}) {
    auto student =
        build_model_sharing_encoder<double>(model_config(rc, "student"), teacher, 23);
    Snapshot enc = snapshot_group(student.encoder.group);
    Snapshot proj = snapshot_group(student.projector.group);
    Snapshot llm = snapshot_group(student.llm.group);

    Stage st = make_stage(kind, rc);
    run_stage(student, stage_needs_teacher(kind) ? &teacher : nullptr, st, 0, ds,
              rc.train);

    const FreezePolicy policy = freeze_policy_for(kind);
    REQUIRE(snapshot_group(student.encoder.group) == enc);
    REQUIRE((snapshot_group(student.projector.group) == proj) == !policy.projector);
    REQUIRE((snapshot_group(student.llm.group) == llm) == !policy.llm);
  }
}

TEST_CASE("teacher parameters are bitwise constant and grad-free through DPT and DFT") {
  RunConfig rc = tiny_run_config();
  Dataset ds = generate_dataset(rc.data, 5);
  auto teacher = tiny_teacher(rc, ds);
  Snapshot before = snapshot(teacher);

  auto student =
      build_model_sharing_encoder<double>(model_config(rc, "student"), teacher, 29);
  run_stage(student, &teacher, make_stage(StageKind::DPT, rc), 0, ds, rc.train);
  run_stage(student, &teacher, make_stage(StageKind::DFT, rc), 1, ds, rc.train);

  REQUIRE(snapshot(teacher) == before);
  for (auto* g : teacher.groups())
    for (auto& [name, t] : g->params) {
      REQUIRE_FALSE(t.requires_grad());
      if (t.has_grad())
        for (double v : t.grad()) REQUIRE(v == 0.0);
    }
}

TEST_CASE("weight collapse: zero-weight DPT reproduces PT step for step") {
  RunConfig rc = tiny_run_config();
  rc.train.pretrain_epochs = 2;
  Dataset ds = generate_dataset(rc.data, 5);
  auto teacher = tiny_teacher(rc, ds);

  auto pt_student = build_model<double>(model_config(rc, "student"), 31, rc.encoder_seed);
  auto dpt_student = build_model<double>(model_config(rc, "student"), 31, rc.encoder_seed);

  Stage pt = make_stage(StageKind::PT, rc, 2);
  StageReport pt_rep = run_stage(pt_student, nullptr, pt, 0, ds, rc.train);

  Stage dpt = make_stage(StageKind::DPT, rc, 2);
  dpt.distill.alpha = 0.0;
  dpt.distill.beta = 0.0;
  dpt.distill.gamma = 0.0;
  StageReport dpt_rep = run_stage(dpt_student, &teacher, dpt, 0, ds, rc.train);

  REQUIRE(snapshot(pt_student) == snapshot(dpt_student));
  REQUIRE(pt_rep.epochs.size() == dpt_rep.epochs.size());
  for (std::size_t e = 0; e < pt_rep.epochs.size(); ++e) {
    REQUIRE(pt_rep.epochs[e].reg == dpt_rep.epochs[e].reg);
    REQUIRE(pt_rep.epochs[e].total == dpt_rep.epochs[e].total);
  }
}

TEST_CASE("zero-weight DFT degenerates to SFT dynamics") {
  RunConfig rc = tiny_run_config();
  Dataset ds = generate_dataset(rc.data, 5);
  auto teacher = tiny_teacher(rc, ds);

  auto a = build_model<double>(model_config(rc, "student"), 37, rc.encoder_seed);
  auto b = build_model<double>(model_config(rc, "student"), 37, rc.encoder_seed);

  StageReport sft = run_stage(a, nullptr, make_stage(StageKind::SFT, rc), 0, ds, rc.train);
  Stage dft = make_stage(StageKind::DFT, rc);
  dft.distill.alpha_prime = 0.0;
  dft.distill.beta_prime = 0.0;
  dft.distill.gamma_prime = 0.0;
  StageReport dz = run_stage(b, &teacher, dft, 0, ds, rc.train);

  REQUIRE(snapshot(a) == snapshot(b));
  REQUIRE(sft.epochs[0].total == dz.epochs[0].total);
  REQUIRE(dz.epochs[0].total == dz.epochs[0].reg);
  REQUIRE(dz.epochs[0].res == 0.0);
  REQUIRE(dz.epochs[0].vis == 0.0);
  REQUIRE(dz.epochs[0].rel == 0.0);
}

TEST_CASE("distilled stages report nonzero distillation components") {
  RunConfig rc = tiny_run_config();
  Dataset ds = generate_dataset(rc.data, 5);
  auto teacher = tiny_teacher(rc, ds);
  auto student =
      build_model_sharing_encoder<double>(model_config(rc, "student"), teacher, 41);
  StageReport rep =
      run_stage(student, &teacher, make_stage(StageKind::DPT, rc), 0, ds, rc.train);
  REQUIRE(rep.epochs[0].res > 0.0);
  REQUIRE(rep.epochs[0].vis > 0.0);
  REQUIRE(rep.epochs[0].rel > 0.0);
  REQUIRE(rep.epochs[0].total > rep.epochs[0].reg);
}

TEST_CASE("train_teacher freezes what each stage says it freezes") {
  RunConfig rc = tiny_run_config();
  Dataset ds = generate_dataset(rc.data, 5);
  TempDir tmp;

  // Rebuild the initial teacher to compare against the PT stage outcome.
  auto init = build_model<double>(model_config(rc, "teacher"),
                                  seed_combine(rc.train.seed, hash_tag("teacher")),
                                  rc.encoder_seed);
  Snapshot init_llm = snapshot_group(init.llm.group);
  Snapshot init_enc = snapshot_group(init.encoder.group);

  auto [teacher, record] = train_teacher<double>(rc, ds, tmp.path);
  REQUIRE(record.recipe == "PT-SFT");
  REQUIRE(record.stages.size() == 2);

  // After PT the llm must be untouched; we check via the stage-0 checkpoint.
  CheckpointBlob after_pt = load_checkpoint(tmp.path / "stage0_PT.ckpt");
  auto pt_model = build_model<double>(model_config(rc, "teacher"), 999, rc.encoder_seed);
  apply_checkpoint(pt_model, after_pt);
  REQUIRE(snapshot_group(pt_model.llm.group) == init_llm);
  REQUIRE(snapshot_group(pt_model.encoder.group) == init_enc);

  // After SFT the encoder is still bitwise at its initial state.
  REQUIRE(snapshot_group(teacher.encoder.group) == init_enc);
  REQUIRE(fs::exists(tmp.path / "teacher.ckpt"));
  REQUIRE(fs::exists(tmp.path / "metrics.jsonl"));
  REQUIRE(fs::exists(tmp.path / "config_echo.ini"));
}

TEST_CASE("identical (recipe, seed) reruns produce identical run records") {
  RunConfig rc = tiny_run_config();
  Dataset ds = generate_dataset(rc.data, 5);
  auto teacher = tiny_teacher(rc, ds);
  Recipe recipe = parse_recipe("DPT-SFT", rc.distill, 1, 1);

  TempDir t1, t2;
  RunRecord a = run_recipe<double>(recipe, rc, &teacher, ds, 51, t1.path);
  RunRecord b = run_recipe<double>(recipe, rc, &teacher, ds, 51, t2.path);
  REQUIRE(a.metrics_equal(b));

  RunRecord c = run_recipe<double>(recipe, rc, &teacher, ds, 52, t2.path / "other");
  REQUIRE_FALSE(a.metrics_equal(c));
}

TEST_CASE("run_recipe refuses distillation recipes without a teacher") {
  RunConfig rc = tiny_run_config();
  Dataset ds = generate_dataset(rc.data, 5);
  Recipe recipe = parse_recipe("DPT-SFT-DFT", rc.distill, 1, 1);
  TempDir tmp;
  REQUIRE_THROWS_MATCHES(
      run_recipe<double>(recipe, rc, nullptr, ds, 1, tmp.path), ConfigError,
      Catch::Matchers::MessageMatches(Catch::Matchers::ContainsSubstring("teacher")));
}

TEST_CASE("stage composability: resume from a stage checkpoint is bit-identical") {
  RunConfig rc = tiny_run_config();
  Dataset ds = generate_dataset(rc.data, 5);
  const std::uint64_t seed = 61;
  TempDir tmp;

  // Uninterrupted two-stage run.
  Recipe recipe = parse_recipe("PT-SFT", rc.distill, 1, 1);
  RunRecord whole = run_recipe<double>(recipe, rc, nullptr, ds, seed, tmp.path);

  // Interrupted: fresh student, stage 0 only, checkpoint, reload, stage 1.
  TrainParams tp = rc.train;
  tp.seed = seed;
  auto student = build_model<double>(model_config(rc, "student"), seed, rc.encoder_seed);
  run_stage(student, nullptr, recipe.stages[0], 0, ds, tp);
  const fs::path mid = tmp.path / "mid.ckpt";
  save_checkpoint(mid, student, format_run_config(rc));

  auto resumed = build_model<double>(model_config(rc, "student"), 12345, rc.encoder_seed);
  apply_checkpoint(resumed, load_checkpoint(mid));
  run_stage(resumed, nullptr, recipe.stages[1], 1, ds, tp);

  auto final_ckpt = load_checkpoint(tmp.path / "stage1_SFT.ckpt");
  auto reference = build_model<double>(model_config(rc, "student"), 999, rc.encoder_seed);
  apply_checkpoint(reference, final_ckpt);
  REQUIRE(snapshot(resumed) == snapshot(reference));
  REQUIRE(whole.stages.size() == 2);
}

TEST_CASE("the six-recipe matrix runs to completion with distinct structures") {
  RunConfig rc = tiny_run_config();
  rc.data.pretrain_samples = 8;
  rc.data.finetune_samples = 8;
  rc.data.eval_samples = 4;
  Dataset ds = generate_dataset(rc.data, 5);
  auto teacher = tiny_teacher(rc, ds);
  TempDir tmp;

  AblationTable table =
      ablation_matrix<double>(AblationAxis::Recipes, rc, &teacher, ds, tmp.path);
  REQUIRE(table.axis == "recipes");
  REQUIRE(table.cells.size() == 6);
  std::set<std::string> labels;
  for (const auto& c : table.cells) {
    labels.insert(c.label);
    c.record.validate();
  }
  const std::set<std::string> expected = {"PT-SFT",     "DPT-SFT",   "PT-DFT",
                                          "DPT-DFT",    "PT-SFT-DFT", "DPT-SFT-DFT"};
  REQUIRE(labels == expected);

  // PT-SFT and DPT-SFT share everything but the first stage's composition.
  const RunRecord* pt_sft = nullptr;
  const RunRecord* dpt_sft = nullptr;
  for (const auto& c : table.cells) {
    if (c.label == "PT-SFT") pt_sft = &c.record;
    if (c.label == "DPT-SFT") dpt_sft = &c.record;
  }
  REQUIRE(pt_sft->stages[0].kind == "PT");
  REQUIRE(dpt_sft->stages[0].kind == "DPT");
  REQUIRE(pt_sft->stages[1].kind == "SFT");
  REQUIRE(dpt_sft->stages[1].kind == "SFT");
  REQUIRE(pt_sft->stages[0].final_res == 0.0);
  REQUIRE(dpt_sft->stages[0].final_res > 0.0);
}

TEST_CASE("divergence and target axes emit the published row sets") {
  RunConfig rc = tiny_run_config();
  rc.data.pretrain_samples = 6;
  rc.data.finetune_samples = 6;
  rc.data.eval_samples = 4;
  rc.recipe = "DPT-SFT";
  Dataset ds = generate_dataset(rc.data, 5);
  auto teacher = tiny_teacher(rc, ds);
  TempDir tmp;

  AblationTable div =
      ablation_matrix<double>(AblationAxis::Divergences, rc, &teacher, ds,
                              tmp.path / "div");
  REQUIRE(div.cells.size() == 3);
  std::set<std::string> div_labels;
  for (const auto& c : div.cells) div_labels.insert(c.label);
  REQUIRE(div_labels == std::set<std::string>{"fkl", "rkl", "jsd"});

  AblationTable tgt = ablation_matrix<double>(AblationAxis::Targets, rc, &teacher, ds,
                                              tmp.path / "tgt");
  REQUIRE(tgt.cells.size() == 8);
  std::set<std::string> tgt_labels;
  for (const auto& c : tgt.cells) tgt_labels.insert(c.label);
  const std::set<std::string> expected = {
      "DPT:response",               "DPT:response,prompt",
      "DPT:response,visual",        "DPT:response,prompt,visual",
      "DFT:response",               "DFT:response,prompt",
      "DFT:response,visual",        "DFT:response,prompt,visual"};
  REQUIRE(tgt_labels == expected);

  const std::string rendered = tgt.render_text();
  REQUIRE(rendered.find("DPT:response,visual") != std::string::npos);
  REQUIRE(rendered.find("exact_match") != std::string::npos);
}

TEST_CASE("teacher-size axis trains both presets and ranks them") {
  RunConfig rc = tiny_run_config();
  rc.data.pretrain_samples = 6;
  rc.data.finetune_samples = 6;
  rc.data.eval_samples = 4;
  rc.recipe = "DPT-SFT";
  // Keep the preset teachers tiny for the structural check.
  Dataset ds = generate_dataset(rc.data, 5);
  TempDir tmp;

  AblationTable t = ablation_matrix<double>(AblationAxis::TeacherSizes, rc, nullptr,
                                            ds, tmp.path);
  REQUIRE(t.cells.size() == 2);
  std::set<std::string> labels;
  for (const auto& c : t.cells) labels.insert(c.label);
  REQUIRE(labels == std::set<std::string>{"teacher-small", "teacher-large"});
}

TEST_CASE("axis names parse and unknown axes are rejected with the valid list") {
  REQUIRE(parse_axis("recipes") == AblationAxis::Recipes);
  REQUIRE(parse_axis("divergences") == AblationAxis::Divergences);
  REQUIRE(parse_axis("targets") == AblationAxis::Targets);
  REQUIRE(parse_axis("teacher_sizes") == AblationAxis::TeacherSizes);
  REQUIRE_THROWS_MATCHES(parse_axis("losses"), ConfigError,
                         Catch::Matchers::MessageMatches(
                             Catch::Matchers::ContainsSubstring("recipes") &&
                             Catch::Matchers::ContainsSubstring("teacher_sizes")));
}

TEST_CASE("per-epoch metrics stream matches the stage reports") {
  RunConfig rc = tiny_run_config();
  rc.train.eval_each_epoch = true;
  Dataset ds = generate_dataset(rc.data, 5);
  TempDir tmp;
  Recipe recipe = parse_recipe("PT-SFT", rc.distill, 2, 1);
  RunRecord rec = run_recipe<double>(recipe, rc, nullptr, ds, 7, tmp.path);

  std::ifstream is(tmp.path / "metrics.jsonl");
  std::vector<json> lines;
  std::string line;
  while (std::getline(is, line)) lines.push_back(json::parse(line));
  REQUIRE(lines.size() == 3);  // 2 PT epochs + 1 SFT epoch
  REQUIRE(lines[0].at("stage") == "PT");
  REQUIRE(lines[2].at("stage") == "SFT");
  for (const auto& j : lines) {
    REQUIRE(j.at("eval_exact_match").get<double>() >= 0.0);
    REQUIRE(j.at("eval_response_ce").get<double>() >= 0.0);
  }
  REQUIRE(rec.stages[1].final_total == lines[2].at("loss_total").get<double>());
}
