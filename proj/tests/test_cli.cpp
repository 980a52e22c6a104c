// SPDX-License-Identifier: Apache-2.0
//
// End-to-end checks of the command-line surface, driving the built binary.

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "mmkd/checkpoint.hpp"
#include "mmkd/config.hpp"
#include "mmkd/metrics.hpp"

using namespace mmkd;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int exit_code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

struct CliFixture {
  fs::path dir;

  CliFixture() {
    static int counter = 0;
    dir = fs::temp_directory_path() /
          ("mmkd_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(dir);
  }
  ~CliFixture() {
    std::error_code ec;
    fs::remove_all(dir, ec);
  }

  CliResult run(const std::string& args, const std::string& env = "") const {
    const fs::path out = dir / "stdout.txt";
    const fs::path err = dir / "stderr.txt";
    const std::string cmd = env + " \"" + MMKD_CLI_PATH + "\" " + args + " > \"" +
                            out.string() + "\" 2> \"" + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out);
    r.err = slurp(err);
    return r;
  }

  fs::path write_config(const std::string& name = "tiny.ini") const {
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
    rc.train.seed = 13;
    rc.train.eval_each_epoch = false;
    rc.output_dir = (dir / "runs").string();
    const fs::path p = dir / name;
    std::ofstream(p) << format_run_config(rc);
    return p;
  }
};

double parse_metric(const std::string& text, const std::string& prefix) {
  const auto pos = text.find(prefix);
  REQUIRE(pos != std::string::npos);
  return std::stod(text.substr(pos + prefix.size()));
}

}  // namespace

TEST_CASE("missing config file exits nonzero and names the path") {
  CliFixture fx;
  const auto r = fx.run("train-teacher --config /no/such/config.ini");
  REQUIRE(r.exit_code != 0);
  REQUIRE(r.err.find("/no/such/config.ini") != std::string::npos);
}

TEST_CASE("unknown config keys exit nonzero with a line-anchored message") {
  CliFixture fx;
  const fs::path bad = fx.dir / "bad.ini";
  std::ofstream(bad) << "[train]\nlr = 0.001\nwarmup = 5\n";
  const auto r = fx.run("run --config \"" + bad.string() + "\" --recipe PT-SFT");
  REQUIRE(r.exit_code != 0);
  REQUIRE(r.err.find("bad.ini:3") != std::string::npos);
  REQUIRE(r.err.find("warmup") != std::string::npos);
}

TEST_CASE("teacher pipeline: train, eval reproduces the reported accuracy, inspect") {
  CliFixture fx;
  const fs::path cfg = fx.write_config();

  const auto train = fx.run("train-teacher --config \"" + cfg.string() + "\"");
  CAPTURE(train.err);
  REQUIRE(train.exit_code == 0);
  const double trained_acc = parse_metric(train.out, "teacher exact-match accuracy: ");

  const fs::path ckpt = fx.dir / "runs" / "teacher" / "teacher.ckpt";
  REQUIRE(fs::exists(ckpt));
  REQUIRE_FALSE(fs::exists(fx.dir / "runs" / "teacher" / "INCOMPLETE"));

  const auto eval = fx.run("eval --checkpoint \"" + ckpt.string() + "\"");
  REQUIRE(eval.exit_code == 0);
  const double eval_acc = parse_metric(eval.out, "exact-match accuracy: ");
  REQUIRE(eval_acc == trained_acc);

  const auto inspect = fx.run("inspect --checkpoint \"" + ckpt.string() + "\"");
  REQUIRE(inspect.exit_code == 0);
  REQUIRE(inspect.out.find("format version: 1") != std::string::npos);
  REQUIRE(inspect.out.find("role: teacher") != std::string::npos);
  // Projector parameters: C*H + H + H*D + D with C=8, H=D=24.
  const std::size_t expected_proj = 8 * 24 + 24 + 24 * 24 + 24;
  REQUIRE(inspect.out.find("projector: " + std::to_string(expected_proj) +
                           " parameters") != std::string::npos);
  REQUIRE(inspect.out.find("[distill]") != std::string::npos);
}

TEST_CASE("student recipes: teacher requirements and deterministic reruns") {
  CliFixture fx;
  const fs::path cfg = fx.write_config();

  const auto no_teacher = fx.run("run --config \"" + cfg.string() +
                                 "\" --recipe DPT-SFT-DFT");
  REQUIRE(no_teacher.exit_code != 0);
  REQUIRE(no_teacher.err.find("--teacher") != std::string::npos);

  const auto pt_sft = fx.run("run --config \"" + cfg.string() + "\" --recipe PT-SFT");
  CAPTURE(pt_sft.err);
  REQUIRE(pt_sft.exit_code == 0);
  const fs::path rr1 = fx.dir / "runs" / "PT-SFT-seed13" / "run_record.json";
  REQUIRE(fs::exists(rr1));

  // Re-running the same (recipe, seed) reproduces the record's metrics.
  RunRecord first = load_run_record(rr1);
  const auto again = fx.run("run --config \"" + cfg.string() + "\" --recipe PT-SFT");
  REQUIRE(again.exit_code == 0);
  RunRecord second = load_run_record(rr1);
  REQUIRE(first.metrics_equal(second));

  // Train a teacher, then a distillation recipe must succeed.
  const auto train = fx.run("train-teacher --config \"" + cfg.string() + "\"");
  REQUIRE(train.exit_code == 0);
  const fs::path ckpt = fx.dir / "runs" / "teacher" / "teacher.ckpt";
  const auto kd = fx.run("run --config \"" + cfg.string() +
                         "\" --recipe DPT-SFT-DFT --teacher \"" + ckpt.string() +
                         "\" --seed 21");
  CAPTURE(kd.err);
  REQUIRE(kd.exit_code == 0);
  RunRecord kd_rec =
      load_run_record(fx.dir / "runs" / "DPT-SFT-DFT-seed21" / "run_record.json");
  REQUIRE(kd_rec.stages.size() == 3);
  REQUIRE(kd_rec.seed == 21);

  // A student checkpoint cannot be passed as the teacher.
  const fs::path student_ckpt =
      fx.dir / "runs" / "PT-SFT-seed13" / "stage1_SFT.ckpt";
  const auto wrong = fx.run("run --config \"" + cfg.string() +
                            "\" --recipe DPT-SFT --teacher \"" +
                            student_ckpt.string() + "\"");
  REQUIRE(wrong.exit_code != 0);
  REQUIRE(wrong.err.find("not a teacher") != std::string::npos);
}

TEST_CASE("ablate validates its axis and emits ranked tables") {
  CliFixture fx;
  const fs::path cfg = fx.write_config();

  const auto bad = fx.run("ablate --config \"" + cfg.string() + "\" --axis losses");
  REQUIRE(bad.exit_code != 0);
  REQUIRE(bad.err.find("recipes") != std::string::npos);
  REQUIRE(bad.err.find("divergences") != std::string::npos);
  REQUIRE(bad.err.find("targets") != std::string::npos);
  REQUIRE(bad.err.find("teacher_sizes") != std::string::npos);

  const auto no_teacher =
      fx.run("ablate --config \"" + cfg.string() + "\" --axis divergences");
  REQUIRE(no_teacher.exit_code != 0);

  const auto train = fx.run("train-teacher --config \"" + cfg.string() + "\"");
  REQUIRE(train.exit_code == 0);
  const fs::path ckpt = fx.dir / "runs" / "teacher" / "teacher.ckpt";

  const auto div = fx.run("ablate --config \"" + cfg.string() +
                          "\" --axis divergences --teacher \"" + ckpt.string() + "\"");
  CAPTURE(div.err);
  REQUIRE(div.exit_code == 0);
  REQUIRE(div.out.find("fkl") != std::string::npos);
  REQUIRE(div.out.find("rkl") != std::string::npos);
  REQUIRE(div.out.find("jsd") != std::string::npos);

  std::ifstream table(fx.dir / "runs" / "ablate-divergences" / "table.json");
  REQUIRE(table.good());
  const json j = json::parse(table);
  REQUIRE(j.at("axis") == "divergences");
  REQUIRE(j.at("cells").size() == 3);
}

TEST_CASE("MMKD_OUT_DIR overrides the configured output directory") {
  CliFixture fx;
  const fs::path cfg = fx.write_config();
  const fs::path alt = fx.dir / "elsewhere";
  const auto r = fx.run("run --config \"" + cfg.string() + "\" --recipe SFT",
                        "MMKD_OUT_DIR=\"" + alt.string() + "\"");
  CAPTURE(r.err);
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(alt / "SFT-seed13" / "run_record.json"));
  REQUIRE_FALSE(fs::exists(fx.dir / "runs" / "SFT-seed13"));
}

TEST_CASE("corrupt checkpoints produce a clean nonzero eval/inspect failure") {
  CliFixture fx;
  const fs::path cfg = fx.write_config();
  const auto train = fx.run("train-teacher --config \"" + cfg.string() + "\"");
  REQUIRE(train.exit_code == 0);
  const fs::path ckpt = fx.dir / "runs" / "teacher" / "teacher.ckpt";

  // Truncate the checkpoint to half its size.
  std::ifstream is(ckpt, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(is)),
                    std::istreambuf_iterator<char>());
  is.close();
  const fs::path cut = fx.dir / "cut.ckpt";
  std::ofstream(cut, std::ios::binary) << bytes.substr(0, bytes.size() / 2);

  const auto ev = fx.run("eval --checkpoint \"" + cut.string() + "\"");
  REQUIRE(ev.exit_code != 0);
  REQUIRE(ev.err.find("truncated") != std::string::npos);
  const auto ins = fx.run("inspect --checkpoint \"" + cut.string() + "\"");
  REQUIRE(ins.exit_code != 0);
}
