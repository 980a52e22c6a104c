// SPDX-License-Identifier: Apache-2.0
//
// Stage state machine and recipe runner. PT/SFT train on the plain
// autoregressive loss; DPT/DFT add the distillation terms against a frozen
// teacher. Freeze policies are fixed per stage kind: pre-training stages
// optimize the projector only, fine-tuning stages train projector and LLM;
// the visual encoder is never trainable. Optimizer state is reset at every
// stage boundary and batch order is a pure function of (seed, stage,
// epoch), so a run checkpointed after stage k and resumed reproduces an
// uninterrupted run bit for bit.

#pragma once

#include <chrono>
#include <type_traits>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "mmkd/checkpoint.hpp"
#include "mmkd/config.hpp"
#include "mmkd/data.hpp"
#include "mmkd/losses.hpp"
#include "mmkd/metrics.hpp"
#include "mmkd/model.hpp"
#include "mmkd/optim.hpp"

namespace mmkd {

enum class StageKind { PT, DPT, SFT, DFT };

inline const char* format_stage_kind(StageKind k) {
  switch (k) {
    case StageKind::PT: return "PT";
    case StageKind::DPT: return "DPT";
    case StageKind::SFT: return "SFT";
    case StageKind::DFT: return "DFT";
  }
  return "?";
}

inline StageKind parse_stage_kind(const std::string& s) {
  if (s == "PT") return StageKind::PT;
  if (s == "DPT") return StageKind::DPT;
  if (s == "SFT") return StageKind::SFT;
  if (s == "DFT") return StageKind::DFT;
  throw ParseError("unknown stage token '" + s + "' (expected PT, DPT, SFT, or DFT)");
}

inline bool stage_needs_teacher(StageKind k) {
  return k == StageKind::DPT || k == StageKind::DFT;
}

inline bool is_pretrain_kind(StageKind k) {
  return k == StageKind::PT || k == StageKind::DPT;
}

// Trainable groups per stage; the visual encoder is never included.
struct FreezePolicy {
  bool projector = false;
  bool llm = false;

  bool operator==(const FreezePolicy&) const = default;
};

inline FreezePolicy freeze_policy_for(StageKind k) {
  if (is_pretrain_kind(k)) return {.projector = true, .llm = false};
  return {.projector = true, .llm = true};
}

struct Stage {
  StageKind kind = StageKind::PT;
  std::size_t epochs = 1;
  DistillConfig distill;
  Split split = Split::Pretrain;
};

struct Recipe {
  std::vector<Stage> stages;
  std::string label;

  bool needs_teacher() const {
    for (const auto& s : stages)
      if (stage_needs_teacher(s.kind)) return true;
    return false;
  }
};

// Parses a dash-separated label like "DPT-SFT-DFT". At most one
// pre-training-kind stage is allowed and it must come first.
inline Recipe parse_recipe(const std::string& label, const DistillConfig& defaults,
                           std::size_t pretrain_epochs, std::size_t finetune_epochs) {
  if (label.empty()) throw ParseError("empty recipe label");
  Recipe r;
  std::string tok;
  std::vector<std::string> tokens;
  for (char c : label) {
    if (c == '-') {
      tokens.push_back(tok);
      tok.clear();
    } else {
      tok += c;
    }
  }
  tokens.push_back(tok);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    Stage s;
    s.kind = parse_stage_kind(tokens[i]);
    if (is_pretrain_kind(s.kind) && i != 0)
      throw ParseError("recipe '" + label + "': pre-training stage " + tokens[i] +
                       " must come first");
    s.epochs = is_pretrain_kind(s.kind) ? pretrain_epochs : finetune_epochs;
    s.distill = defaults;
    s.split = is_pretrain_kind(s.kind) ? Split::Pretrain : Split::Finetune;
    r.stages.push_back(s);
  }
  r.label = label;
  return r;
}

inline std::string format_recipe(const Recipe& r) {
  std::string out;
  for (std::size_t i = 0; i < r.stages.size(); ++i) {
    if (i) out += '-';
    out += format_stage_kind(r.stages[i].kind);
  }
  return out;
}

template <class S>
void set_frozen(MultimodalModelT<S>& model) {
  for (auto* g : model.groups()) g->set_trainable(false);
}

struct StageReport {
  std::vector<EpochRecord> epochs;

  const EpochRecord& final_epoch() const {
    if (epochs.empty()) throw ContractError("stage produced no epochs");
    return epochs.back();
  }
};

// Mean token-mean response cross-entropy over the eval split.
template <class S>
double eval_response_ce(const MultimodalModelT<S>& model, const Dataset& ds) {
  const auto& ids = ds.split_indices(Split::Eval);
  double acc = 0;
  for (std::size_t id : ids) {
    const Sample& sample = ds.samples[id];
    Image img = render_grid(ds.spec, sample.cells);
    auto res = model.forward(img, sample.prompt, sample.response);
    auto targets = sequence_tokens(sample, ds.spec.n_patches());
    acc += static_cast<double>(autoregressive_loss(res.output.logits, targets,
                                                   res.segments, Reduction::TokenMean)
                                   .item());
  }
  return acc / static_cast<double>(ids.size());
}

namespace detail {

template <class S>
struct SampleLoss {
  TensorT<S> total;
  double reg = 0, res = 0, vis = 0, rel = 0;
};

// Loss for one sample under one stage. Distillation terms whose effective
// weight is zero are skipped; they contribute exactly zero to the
// objective either way, so a zero-weight distilled stage reproduces the
// plain stage's update sequence bit for bit.
template <class S>
SampleLoss<S> stage_sample_loss(const Stage& stage, const MultimodalModelT<S>& student,
                                const MultimodalModelT<S>* teacher, const Image& img,
                                const Sample& sample, std::span<const int> targets,
                                std::size_t n_patches) {
  auto s_res = student.forward(img, sample.prompt, sample.response);
  s_res.segments.validate(n_patches);

  SampleLoss<S> out;
  TensorT<S> reg = autoregressive_loss(s_res.output.logits, targets, s_res.segments,
                                       stage.distill.reduction);
  out.reg = static_cast<double>(reg.item());
  if (!stage_needs_teacher(stage.kind)) {
    out.total = reg;
    return out;
  }

  const DistillConfig& cfg = stage.distill;
  const bool dpt = stage.kind == StageKind::DPT;
  const double wa = dpt ? cfg.alpha : cfg.alpha_prime;
  const double wb = dpt ? cfg.beta : cfg.beta_prime;
  const double wg = dpt ? cfg.gamma : cfg.gamma_prime;
  const bool need_res = wa != 0.0;
  const bool need_prompt = cfg.targets.prompt && wa != 0.0;
  const bool need_vis = cfg.targets.visual && wb != 0.0;
  const bool need_rel = wg != 0.0;

  LossPartsT<S> parts;
  parts.reg = reg;
  if (need_res || need_prompt || need_vis || need_rel) {
    auto t_res = teacher->forward(img, sample.prompt, sample.response);
    if (!(t_res.segments == s_res.segments))
      throw ContractError("distillation: teacher and student segments disagree");
    if (need_res) {
      TensorT<S> res = response_distill_loss(t_res.output, s_res.output,
                                             s_res.segments, cfg);
      if (need_prompt)
        res = add(res, prompt_distill_loss(t_res.output, s_res.output, s_res.segments,
                                           cfg));
      parts.res = res;
    }
    if (need_vis)
      parts.vis = visual_distill_loss(t_res.output, s_res.output, s_res.segments, cfg);
    if (need_rel)
      parts.rel = relation_loss(relation_matrix(s_res.output.visual_hidden),
                                relation_matrix(t_res.output.visual_hidden));
  }
  out.res = static_cast<double>(parts.res.item());
  out.vis = static_cast<double>(parts.vis.item());
  out.rel = static_cast<double>(parts.rel.item());
  out.total = dpt ? dpt_loss(parts, cfg) : dft_loss(parts, cfg);
  return out;
}

}  // namespace detail

// Runs one stage on the student in place. The teacher must be present
// exactly for DPT/DFT and is held in inference mode; parameters outside
// the stage's freeze policy are left bitwise untouched.
template <class S>
StageReport run_stage(MultimodalModelT<S>& student,
                      std::type_identity_t<MultimodalModelT<S>*> teacher,
                      const Stage& stage, std::size_t stage_index, const Dataset& data,
                      const TrainParams& train, MetricsWriter* metrics = nullptr) {
  if (stage_needs_teacher(stage.kind) && teacher == nullptr)
    throw ConfigError(std::string("stage ") + format_stage_kind(stage.kind) +
                      " requires a teacher model");
  if (!stage_needs_teacher(stage.kind) && teacher != nullptr)
    teacher = nullptr;  // PT/SFT never reference a teacher
  if (teacher) {
    set_frozen(*teacher);
    if (teacher->cfg.vocab_size != student.cfg.vocab_size)
      throw ConfigError("teacher and student vocabularies differ");
  }

  const FreezePolicy policy = freeze_policy_for(stage.kind);
  student.encoder.group.set_trainable(false);
  student.projector.group.set_trainable(policy.projector);
  student.llm.group.set_trainable(policy.llm);

  AdamT<S> adam({.lr = train.lr, .beta1 = train.beta1, .beta2 = train.beta2,
                 .eps = train.eps},
                student.groups());

  const std::uint64_t shuffle_seed = seed_combine(train.seed, 0xA11C0DE + stage_index);
  const std::size_t np = data.spec.n_patches();
  StageReport report;
  for (std::size_t epoch = 0; epoch < stage.epochs; ++epoch) {
    double sum_reg = 0, sum_res = 0, sum_vis = 0, sum_rel = 0, sum_total = 0;
    std::size_t count = 0;
    for (const Batch& batch : batch_iterator(data, stage.split, train.batch_size,
                                             shuffle_seed, epoch)) {
      TensorT<S> acc = TensorT<S>::scalar(S(0));
      for (std::size_t i = 0; i < batch.sample_ids.size(); ++i) {
        const Sample& sample = data.samples[batch.sample_ids[i]];
        Image img = render_grid(data.spec, sample.cells);
        auto loss = detail::stage_sample_loss(stage, student, teacher, img, sample,
                                              batch.tokens[i], np);
        acc = add(acc, loss.total);
        sum_reg += loss.reg;
        sum_res += loss.res;
        sum_vis += loss.vis;
        sum_rel += loss.rel;
        sum_total += static_cast<double>(loss.total.item());
        ++count;
      }
      TensorT<S> batch_loss =
          scale(acc, 1.0 / static_cast<double>(batch.sample_ids.size()));
      backward(batch_loss);
      adam.step();
    }

    EpochRecord rec;
    rec.stage = format_stage_kind(stage.kind);
    rec.stage_index = stage_index;
    rec.epoch = epoch;
    rec.reg = sum_reg / static_cast<double>(count);
    rec.res = sum_res / static_cast<double>(count);
    rec.vis = sum_vis / static_cast<double>(count);
    rec.rel = sum_rel / static_cast<double>(count);
    rec.total = sum_total / static_cast<double>(count);
    if (train.eval_each_epoch) {
      rec.eval_exact_match = exact_match_eval(student, data);
      rec.eval_response_ce = eval_response_ce(student, data);
    }
    if (metrics) metrics->append(rec);
    report.epochs.push_back(rec);
  }
  return report;
}

// Executes a recipe's stages in order on the given model, checkpointing
// after each stage and evaluating on the held-out split at the end.
template <class S>
RunRecord execute_recipe(const Recipe& recipe, MultimodalModelT<S>& model,
                         std::type_identity_t<MultimodalModelT<S>*> teacher, const Dataset& data,
                         const TrainParams& train, const std::string& config_echo,
                         const std::filesystem::path& outdir,
                         std::uint64_t seed_override) {
  TrainParams tp = train;
  tp.seed = seed_override;
  std::filesystem::create_directories(outdir);
  {
    std::ofstream echo(outdir / "config_echo.ini");
    echo << config_echo;
  }
  MetricsWriter metrics(outdir / "metrics.jsonl");

  const auto t0 = std::chrono::steady_clock::now();
  RunRecord record;
  record.recipe = recipe.label;
  record.seed = seed_override;
  for (std::size_t k = 0; k < recipe.stages.size(); ++k) {
    const Stage& stage = recipe.stages[k];
    StageReport rep = run_stage(model, teacher, stage, k, data, tp, &metrics);
    const std::filesystem::path ckpt =
        outdir / ("stage" + std::to_string(k) + "_" +
                  format_stage_kind(stage.kind) + ".ckpt");
    save_checkpoint(ckpt, model, config_echo);
    StageSummary summary;
    summary.kind = format_stage_kind(stage.kind);
    summary.epochs = stage.epochs;
    const EpochRecord& last = rep.final_epoch();
    summary.final_reg = last.reg;
    summary.final_res = last.res;
    summary.final_vis = last.vis;
    summary.final_rel = last.rel;
    summary.final_total = last.total;
    summary.checkpoint = ckpt.string();
    record.stages.push_back(summary);
  }
  record.eval_exact_match = exact_match_eval(model, data);
  record.eval_response_ce = eval_response_ce(model, data);
  record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  record.validate();
  save_run_record(outdir / "run_record.json", record);
  return record;
}

// Builds a fresh student (sharing the teacher's frozen encoder when one is
// given) and executes the recipe on it.
template <class S>
RunRecord run_recipe(const Recipe& recipe, const RunConfig& rc,
                     MultimodalModelT<S>* teacher, const Dataset& data,
                     std::uint64_t seed, const std::filesystem::path& outdir,
                     MultimodalModelT<S>* out_student = nullptr) {
  rc.validate();
  if (recipe.needs_teacher() && teacher == nullptr)
    throw ConfigError("recipe '" + recipe.label +
                      "' contains distillation stages and requires a teacher");
  ModelConfig sc = model_config(rc, "student");
  MultimodalModelT<S> student =
      teacher ? build_model_sharing_encoder<S>(sc, *teacher, seed)
              : build_model<S>(sc, seed, rc.encoder_seed);
  RunRecord record = execute_recipe(recipe, student, teacher, data, rc.train,
                                    format_run_config(rc), outdir, seed);
  if (out_student) *out_student = std::move(student);
  return record;
}

// The teacher's own scheme: PT on captions (projector only), then SFT on
// instruction data (projector + LLM).
template <class S>
std::pair<MultimodalModelT<S>, RunRecord> train_teacher(
    const RunConfig& rc, const Dataset& data, const std::filesystem::path& outdir) {
  rc.validate();
  ModelConfig tc = model_config(rc, "teacher");
  MultimodalModelT<S> teacher =
      build_model<S>(tc, seed_combine(rc.train.seed, hash_tag("teacher")),
                     rc.encoder_seed);
  Recipe recipe = parse_recipe("PT-SFT", rc.distill, rc.train.pretrain_epochs,
                               rc.train.finetune_epochs);
  RunRecord record = execute_recipe(recipe, teacher, nullptr, data, rc.train,
                                    format_run_config(rc), outdir, rc.train.seed);
  save_checkpoint(outdir / "teacher.ckpt", teacher, format_run_config(rc));
  return {std::move(teacher), std::move(record)};
}

// ---------------------------------------------------------------------------
// Ablation harness

enum class AblationAxis { Recipes, Divergences, Targets, TeacherSizes };

inline AblationAxis parse_axis(const std::string& s) {
  if (s == "recipes") return AblationAxis::Recipes;
  if (s == "divergences") return AblationAxis::Divergences;
  if (s == "targets") return AblationAxis::Targets;
  if (s == "teacher_sizes") return AblationAxis::TeacherSizes;
  throw ConfigError("unknown ablation axis '" + s +
                    "' (valid: recipes, divergences, targets, teacher_sizes)");
}

inline const char* format_axis(AblationAxis a) {
  switch (a) {
    case AblationAxis::Recipes: return "recipes";
    case AblationAxis::Divergences: return "divergences";
    case AblationAxis::Targets: return "targets";
    case AblationAxis::TeacherSizes: return "teacher_sizes";
  }
  return "?";
}

// The six training-scheme rows of the recipe study.
inline std::vector<std::string> recipe_axis_labels() {
  return {"PT-SFT", "DPT-SFT", "PT-DFT", "DPT-DFT", "PT-SFT-DFT", "DPT-SFT-DFT"};
}

// Adjusts only the LLM capacity fields; encoder geometry and the rest stay
// as configured so the teacher remains compatible with the student.
inline ModelPreset teacher_size_preset(const std::string& name, ModelPreset base) {
  if (name == "teacher-large") {
    base.embed_dim = 128;
    base.llm_layers = 4;
    base.llm_heads = 4;
    return base;
  }
  if (name == "teacher-small") {
    base.embed_dim = 96;
    base.llm_layers = 3;
    base.llm_heads = 4;
    return base;
  }
  throw ConfigError("unknown teacher size preset '" + name + "'");
}

struct AblationCell {
  std::string label;
  RunRecord record;
};

struct AblationTable {
  std::string axis;
  std::vector<AblationCell> cells;  // ranked by exact match, descending

  std::string render_text() const {
    std::ostringstream os;
    os << "ablation axis: " << axis << "\n";
    os << std::left << std::setw(34) << "cell" << std::right << std::setw(12)
       << "exact_match" << std::setw(14) << "response_ce" << std::setw(10)
       << "seed" << "\n";
    for (const auto& c : cells) {
      os << std::left << std::setw(34) << c.label << std::right << std::setw(12)
         << std::fixed << std::setprecision(4) << c.record.eval_exact_match
         << std::setw(14) << std::setprecision(4) << c.record.eval_response_ce
         << std::setw(10) << c.record.seed << "\n";
    }
    return os.str();
  }

  json to_json_table() const {
    json rows = json::array();
    for (const auto& c : cells)
      rows.push_back(json{{"cell", c.label}, {"record", to_json(c.record)}});
    return json{{"axis", axis}, {"cells", rows}};
  }
};

// One training run per cell, all cells sharing the base seed; rows are
// ranked but orderings are reported, not asserted.
template <class S>
AblationTable ablation_matrix(AblationAxis axis, const RunConfig& rc,
                              MultimodalModelT<S>* teacher, const Dataset& data,
                              const std::filesystem::path& outdir) {
  rc.validate();
  AblationTable table;
  table.axis = format_axis(axis);

  auto cell_recipe = [&](const RunConfig& cfg) {
    return parse_recipe(cfg.recipe, cfg.distill, cfg.train.pretrain_epochs,
                        cfg.train.finetune_epochs);
  };
  auto slug = [](std::string s) {
    for (auto& c : s)
      if (c == ',' || c == ':' || c == ' ') c = '_';
    return s;
  };

  switch (axis) {
    case AblationAxis::Recipes: {
      for (const std::string& label : recipe_axis_labels()) {
        Recipe r = parse_recipe(label, rc.distill, rc.train.pretrain_epochs,
                                rc.train.finetune_epochs);
        RunRecord rec = run_recipe<S>(r, rc, r.needs_teacher() ? teacher : nullptr,
                                      data, rc.train.seed, outdir / slug(label));
        table.cells.push_back({label, std::move(rec)});
      }
      break;
    }
    case AblationAxis::Divergences: {
      for (Divergence d : {Divergence::FKL, Divergence::RKL, Divergence::JSD}) {
        RunConfig cfg = rc;
        cfg.distill.divergence = d;
        Recipe r = cell_recipe(cfg);
        RunRecord rec = run_recipe<S>(r, cfg, r.needs_teacher() ? teacher : nullptr,
                                      data, cfg.train.seed,
                                      outdir / slug(format_divergence(d)));
        table.cells.push_back({format_divergence(d), std::move(rec)});
      }
      break;
    }
    case AblationAxis::Targets: {
      // Four masks applied to one distilled stage at a time, on the full
      // three-stage pipeline.
      const TargetMask masks[4] = {{.prompt = false, .visual = false},
                                   {.prompt = true, .visual = false},
                                   {.prompt = false, .visual = true},
                                   {.prompt = true, .visual = true}};
      for (StageKind varied : {StageKind::DPT, StageKind::DFT}) {
        for (const TargetMask& mask : masks) {
          RunConfig cfg = rc;
          cfg.recipe = "DPT-SFT-DFT";
          Recipe r = cell_recipe(cfg);
          for (Stage& st : r.stages)
            if (st.kind == varied) st.distill.targets = mask;
          const std::string label = std::string(format_stage_kind(varied)) + ":" +
                                    format_target_mask(mask);
          RunRecord rec = run_recipe<S>(r, cfg, teacher, data, cfg.train.seed,
                                        outdir / slug(label));
          table.cells.push_back({label, std::move(rec)});
        }
      }
      break;
    }
    case AblationAxis::TeacherSizes: {
      for (const char* name : {"teacher-small", "teacher-large"}) {
        RunConfig cfg = rc;
        cfg.teacher = teacher_size_preset(name, rc.teacher);
        auto [sized_teacher, teacher_rec] =
            train_teacher<S>(cfg, data, outdir / slug(name) / "teacher");
        Recipe r = cell_recipe(cfg);
        RunRecord rec = run_recipe<S>(r, cfg, &sized_teacher, data, cfg.train.seed,
                                      outdir / slug(name) / "student");
        table.cells.push_back({name, std::move(rec)});
      }
      break;
    }
  }

  std::stable_sort(table.cells.begin(), table.cells.end(),
                   [](const AblationCell& a, const AblationCell& b) {
                     return a.record.eval_exact_match > b.record.eval_exact_match;
                   });
  return table;
}

}  // namespace mmkd
