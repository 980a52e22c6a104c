// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: teacher training, student recipes, ablation
// matrices, checkpoint evaluation and inspection. All behaviour is driven
// by an INI config file; MMKD_OUT_DIR overrides the configured output
// directory. Commands exit 0 only when all requested work completed; a
// directory holding partial outputs keeps an INCOMPLETE marker file.

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "mmkd/checkpoint.hpp"
#include "mmkd/config.hpp"
#include "mmkd/data.hpp"
#include "mmkd/metrics.hpp"
#include "mmkd/model.hpp"
#include "mmkd/schedule.hpp"

namespace fs = std::filesystem;
using namespace mmkd;

namespace {

fs::path resolve_outdir(const RunConfig& rc) {
  if (const char* env = std::getenv("MMKD_OUT_DIR"); env && *env) return env;
  return rc.output_dir;
}

// RAII marker: present while a command is writing, removed on success.
class IncompleteMarker {
 public:
  explicit IncompleteMarker(const fs::path& dir) : marker_(dir / "INCOMPLETE") {
    fs::create_directories(dir);
    std::ofstream(marker_) << "command in progress or aborted\n";
  }
  void complete() {
    std::error_code ec;
    fs::remove(marker_, ec);
    done_ = true;
  }
  ~IncompleteMarker() {
    if (!done_) std::cerr << "note: partial outputs marked by " << marker_ << "\n";
  }

 private:
  fs::path marker_;
  bool done_ = false;
};

template <class S>
MultimodalModelT<S> model_from_blob(const CheckpointBlob& blob, RunConfig& rc_out) {
  rc_out = parse_run_config_text(blob.config_echo, "checkpoint config echo");
  ModelConfig mc = model_config(rc_out, blob.role);
  auto model = build_model<S>(mc, 0, rc_out.encoder_seed);
  apply_checkpoint(model, blob);
  set_frozen(model);
  return model;
}

template <class S>
int do_train_teacher(const RunConfig& rc) {
  rc.validate();
  const fs::path outdir = resolve_outdir(rc) / "teacher";
  IncompleteMarker marker(outdir);
  Dataset data = generate_dataset(rc.data, rc.train.seed);
  auto [teacher, record] = train_teacher<S>(rc, data, outdir);
  marker.complete();
  std::cout << "teacher checkpoint: " << (outdir / "teacher.ckpt").string() << "\n";
  std::cout << "teacher exact-match accuracy: " << record.eval_exact_match << "\n";
  return 0;
}

template <class S>
int do_run(const RunConfig& rc, const std::string& recipe_label,
           const std::optional<std::string>& teacher_path,
           std::optional<std::uint64_t> seed) {
  rc.validate();
  Recipe recipe = parse_recipe(recipe_label, rc.distill, rc.train.pretrain_epochs,
                               rc.train.finetune_epochs);
  const std::uint64_t run_seed = seed.value_or(rc.train.seed);

  std::optional<MultimodalModelT<S>> teacher;
  RunConfig teacher_rc;
  if (teacher_path) {
    teacher = model_from_blob<S>(load_checkpoint(*teacher_path), teacher_rc);
    if (teacher->cfg.role != "teacher")
      throw ConfigError("checkpoint " + *teacher_path + " holds a " +
                        teacher->cfg.role + ", not a teacher");
  } else if (recipe.needs_teacher()) {
    throw ConfigError("recipe '" + recipe_label +
                      "' contains distillation stages (DPT/DFT); pass --teacher "
                      "with a trained teacher checkpoint");
  }

  const fs::path outdir = resolve_outdir(rc) /
                          (recipe_label + "-seed" + std::to_string(run_seed));
  IncompleteMarker marker(outdir);
  Dataset data = generate_dataset(rc.data, rc.train.seed);
  RunRecord record = run_recipe<S>(recipe, rc, teacher ? &*teacher : nullptr, data,
                                   run_seed, outdir);
  marker.complete();
  std::cout << "run record: " << (outdir / "run_record.json").string() << "\n";
  std::cout << "recipe " << record.recipe << " seed " << record.seed
            << " exact-match " << record.eval_exact_match << " response-ce "
            << record.eval_response_ce << "\n";
  return 0;
}

template <class S>
int do_ablate(const RunConfig& rc, const std::string& axis_name,
              const std::optional<std::string>& teacher_path) {
  rc.validate();
  const AblationAxis axis = parse_axis(axis_name);

  std::optional<MultimodalModelT<S>> teacher;
  RunConfig teacher_rc;
  if (teacher_path) {
    teacher = model_from_blob<S>(load_checkpoint(*teacher_path), teacher_rc);
  } else if (axis != AblationAxis::TeacherSizes) {
    throw ConfigError("ablate --axis " + axis_name +
                      " requires --teacher (teacher_sizes trains its own)");
  }

  const fs::path outdir = resolve_outdir(rc) / ("ablate-" + axis_name);
  IncompleteMarker marker(outdir);
  Dataset data = generate_dataset(rc.data, rc.train.seed);
  AblationTable table =
      ablation_matrix<S>(axis, rc, teacher ? &*teacher : nullptr, data, outdir);

  const std::string rendered = table.render_text();
  std::cout << rendered;
  std::ofstream(outdir / "table.txt") << rendered;
  std::ofstream(outdir / "table.json") << table.to_json_table().dump(2) << "\n";
  marker.complete();
  std::cout << "table written to " << (outdir / "table.json").string() << "\n";
  return 0;
}

template <class S>
int do_eval(const std::string& checkpoint_path,
            const std::optional<std::string>& config_path) {
  CheckpointBlob blob = load_checkpoint(checkpoint_path);
  RunConfig rc;
  auto model = model_from_blob<S>(blob, rc);
  if (config_path) rc = load_run_config(*config_path);
  Dataset data = generate_dataset(rc.data, rc.train.seed);
  if (data.vocab.size() != model.cfg.vocab_size)
    throw ConfigError("eval data vocabulary differs from the checkpoint's");
  const double acc = exact_match_eval(model, data);
  const double ce = eval_response_ce(model, data);
  std::cout << "exact-match accuracy: " << acc << "\n";
  std::cout << "response cross-entropy: " << ce << "\n";
  return 0;
}

int do_inspect(const std::string& checkpoint_path) {
  CheckpointBlob blob = load_checkpoint(checkpoint_path);
  std::cout << "format version: " << blob.version << "\n";
  std::cout << "scalar width: " << static_cast<int>(blob.scalar_bytes) * 8
            << "-bit\n";
  std::cout << "role: " << blob.role << "\n";
  std::size_t total = 0;
  std::string current;
  std::size_t group_count = 0;
  auto flush = [&] {
    if (!current.empty())
      std::cout << "  " << current << ": " << group_count << " parameters\n";
  };
  std::cout << "parameter groups:\n";
  for (const auto& t : blob.tensors) {
    const std::string group = t.name.substr(0, t.name.find('/'));
    if (group != current) {
      flush();
      current = group;
      group_count = 0;
    }
    group_count += t.raw.size();
    total += t.raw.size();
  }
  flush();
  std::cout << "total parameters: " << total << "\n";
  std::cout << "config echo:\n" << blob.config_echo;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale multimodal knowledge-distillation lab"};
  app.require_subcommand(1);

  std::string config_path;
  std::string recipe_label;
  std::string axis_name;
  std::string checkpoint_path;
  std::optional<std::string> teacher_path;
  std::optional<std::string> eval_config;
  std::optional<std::uint64_t> seed;

  auto* train = app.add_subcommand("train-teacher", "train the teacher (PT then SFT)");
  train->add_option("--config", config_path, "run config file")->required();

  auto* run = app.add_subcommand("run", "run a student training recipe");
  run->add_option("--config", config_path, "run config file")->required();
  run->add_option("--recipe", recipe_label,
                  "recipe label, e.g. PT-SFT or DPT-SFT-DFT (default from config)");
  run->add_option("--teacher", teacher_path, "teacher checkpoint (for DPT/DFT)");
  run->add_option("--seed", seed, "override the student seed");

  auto* ablate = app.add_subcommand("ablate", "run an ablation matrix");
  ablate->add_option("--config", config_path, "run config file")->required();
  ablate->add_option("--axis", axis_name,
                     "recipes | divergences | targets | teacher_sizes")
      ->required();
  ablate->add_option("--teacher", teacher_path, "teacher checkpoint");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the eval split");
  eval->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();
  eval->add_option("--config", eval_config,
                   "data/config override (defaults to the checkpoint's echo)");

  auto* inspect = app.add_subcommand("inspect", "describe a checkpoint");
  inspect->add_option("--checkpoint", checkpoint_path, "model checkpoint")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) {
      RunConfig rc = load_run_config(config_path);
      return rc.precision == "f32" ? do_train_teacher<float>(rc)
                                   : do_train_teacher<double>(rc);
    }
    if (run->parsed()) {
      RunConfig rc = load_run_config(config_path);
      const std::string label = recipe_label.empty() ? rc.recipe : recipe_label;
      return rc.precision == "f32" ? do_run<float>(rc, label, teacher_path, seed)
                                   : do_run<double>(rc, label, teacher_path, seed);
    }
    if (ablate->parsed()) {
      RunConfig rc = load_run_config(config_path);
      return rc.precision == "f32" ? do_ablate<float>(rc, axis_name, teacher_path)
                                   : do_ablate<double>(rc, axis_name, teacher_path);
    }
    if (eval->parsed()) {
      CheckpointBlob blob = load_checkpoint(checkpoint_path);
      return blob.scalar_bytes == 4 ? do_eval<float>(checkpoint_path, eval_config)
                                    : do_eval<double>(checkpoint_path, eval_config);
    }
    if (inspect->parsed()) return do_inspect(checkpoint_path);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
