// SPDX-License-Identifier: Apache-2.0
//
// Run artifacts: an append-only JSONL metrics stream (one record per
// epoch) and the per-run summary record. Wall-clock time and file paths
// are excluded from metric equality so determinism checks compare only
// reproducible quantities.

#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmkd/error.hpp"

namespace mmkd {

using nlohmann::json;

struct EpochRecord {
  std::string stage;       // PT | DPT | SFT | DFT
  std::size_t stage_index = 0;
  std::size_t epoch = 0;
  double reg = 0, res = 0, vis = 0, rel = 0, total = 0;
  double eval_exact_match = -1;   // -1 when evaluation was skipped
  double eval_response_ce = -1;
};

inline json to_json(const EpochRecord& r) {
  return json{{"stage", r.stage},
              {"stage_index", r.stage_index},
              {"epoch", r.epoch},
              {"loss_reg", r.reg},
              {"loss_res", r.res},
              {"loss_vis", r.vis},
              {"loss_rel", r.rel},
              {"loss_total", r.total},
              {"eval_exact_match", r.eval_exact_match},
              {"eval_response_ce", r.eval_response_ce}};
}

class MetricsWriter {
 public:
  MetricsWriter() = default;
  explicit MetricsWriter(const std::filesystem::path& path) : path_(path) {
    std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::app);
    if (!out_) throw Error("cannot open metrics stream: " + path.string());
  }

  void append(const EpochRecord& r) {
    if (!out_.is_open()) return;  // metrics are optional in library use
    out_ << to_json(r).dump() << '\n';
    out_.flush();
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

struct StageSummary {
  std::string kind;
  std::size_t epochs = 0;
  double final_reg = 0, final_res = 0, final_vis = 0, final_rel = 0, final_total = 0;
  std::string checkpoint;

  bool metrics_equal(const StageSummary& o) const {
    return kind == o.kind && epochs == o.epochs && final_reg == o.final_reg &&
           final_res == o.final_res && final_vis == o.final_vis &&
           final_rel == o.final_rel && final_total == o.final_total;
  }
};

struct RunRecord {
  std::string recipe;
  std::uint64_t seed = 0;
  std::vector<StageSummary> stages;
  double eval_exact_match = 0;
  double eval_response_ce = 0;
  double wall_seconds = 0;

  void validate() const {
    for (double v : {eval_exact_match, eval_response_ce, wall_seconds})
      if (!std::isfinite(v)) throw Error("run record holds non-finite metrics");
  }

  // Equality of everything reproducible (paths and timing excluded).
  bool metrics_equal(const RunRecord& o) const {
    if (recipe != o.recipe || seed != o.seed || stages.size() != o.stages.size() ||
        eval_exact_match != o.eval_exact_match ||
        eval_response_ce != o.eval_response_ce)
      return false;
    for (std::size_t i = 0; i < stages.size(); ++i)
      if (!stages[i].metrics_equal(o.stages[i])) return false;
    return true;
  }
};

inline json to_json(const RunRecord& r) {
  json stages = json::array();
  for (const auto& s : r.stages)
    stages.push_back(json{{"kind", s.kind},
                          {"epochs", s.epochs},
                          {"final_reg", s.final_reg},
                          {"final_res", s.final_res},
                          {"final_vis", s.final_vis},
                          {"final_rel", s.final_rel},
                          {"final_total", s.final_total},
                          {"checkpoint", s.checkpoint}});
  return json{{"recipe", r.recipe},
              {"seed", r.seed},
              {"stages", stages},
              {"eval_exact_match", r.eval_exact_match},
              {"eval_response_ce", r.eval_response_ce},
              {"wall_seconds", r.wall_seconds}};
}

inline RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.recipe = j.at("recipe").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& s : j.at("stages")) {
    StageSummary ss;
    ss.kind = s.at("kind").get<std::string>();
    ss.epochs = s.at("epochs").get<std::size_t>();
    ss.final_reg = s.at("final_reg").get<double>();
    ss.final_res = s.at("final_res").get<double>();
    ss.final_vis = s.at("final_vis").get<double>();
    ss.final_rel = s.at("final_rel").get<double>();
    ss.final_total = s.at("final_total").get<double>();
    ss.checkpoint = s.at("checkpoint").get<std::string>();
    r.stages.push_back(std::move(ss));
  }
  r.eval_exact_match = j.at("eval_exact_match").get<double>();
  r.eval_response_ce = j.at("eval_response_ce").get<double>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

inline void save_run_record(const std::filesystem::path& path, const RunRecord& r) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw Error("cannot write run record: " + path.string());
  os << to_json(r).dump(2) << '\n';
}

inline RunRecord load_run_record(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error("cannot read run record: " + path.string());
  json j = json::parse(is);
  return run_record_from_json(j);
}

}  // namespace mmkd
