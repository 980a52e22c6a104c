// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic multimodal task: colored K x K grids rendered to
// small RGB images, captioned row-major for the pretrain split and queried
// cell-by-cell ("color at ( i , j ) ?") for the finetune and eval splits.
// The vocabulary is closed over palette words, coordinates, and control
// tokens and is shared verbatim by teacher and student.

#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mmkd/error.hpp"
#include "mmkd/image.hpp"
#include "mmkd/model.hpp"
#include "mmkd/rng.hpp"

namespace mmkd {

struct PaletteEntry {
  const char* word;
  double r, g, b;
};

inline constexpr PaletteEntry kPalette[] = {
    {"red", 1.0, 0.0, 0.0},    {"green", 0.0, 1.0, 0.0},
    {"blue", 0.0, 0.0, 1.0},   {"yellow", 1.0, 1.0, 0.0},
    {"purple", 0.6, 0.0, 0.8}, {"orange", 1.0, 0.55, 0.0},
    {"cyan", 0.0, 1.0, 1.0},   {"white", 1.0, 1.0, 1.0}};

inline constexpr std::size_t kPaletteSize = sizeof(kPalette) / sizeof(kPalette[0]);

struct DataSpec {
  std::size_t grid_k = 3;
  std::size_t palette = 6;
  std::size_t image_size = 24;
  std::size_t patch_size = 8;
  std::size_t pretrain_samples = 2000;
  std::size_t finetune_samples = 2000;
  std::size_t eval_samples = 500;

  std::size_t cells() const { return grid_k * grid_k; }
  std::size_t n_patches() const {
    const std::size_t s = image_size / patch_size;
    return s * s;
  }

  void validate() const {
    if (palette < 2 || palette > kPaletteSize)
      throw ConfigError("data spec: palette must be in [2," +
                        std::to_string(kPaletteSize) + "], got " +
                        std::to_string(palette));
    if (grid_k == 0 || image_size % grid_k != 0)
      throw ConfigError("data spec: image_size must be divisible by grid_k");
    if (patch_size == 0 || image_size % patch_size != 0)
      throw ConfigError("data spec: image_size must be divisible by patch_size");
    if (pretrain_samples < 1 || finetune_samples < 1 || eval_samples < 1)
      throw ConfigError("data spec: split sizes must be >= 1");
  }
};

class Vocab {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kImg = 3;

  static Vocab build(const DataSpec& spec) {
    spec.validate();
    Vocab v;
    v.palette_ = spec.palette;
    v.push("<pad>");
    v.push("<bos>");
    v.push("<eos>");
    v.push("<img>");
    for (std::size_t i = 0; i < spec.palette; ++i) v.push(kPalette[i].word);
    for (std::size_t i = 0; i < spec.grid_k; ++i) v.push(std::to_string(i));
    for (const char* w : {"describe", "the", "grid", "color", "at", "(", ")", ",", "?"})
      v.push(w);
    return v;
  }

  std::size_t size() const { return words_.size(); }

  int id(const std::string& word) const {
    auto it = ids_.find(word);
    if (it == ids_.end())
      throw TokenizeError("tokenize: '" + word + "' is outside the lexicon");
    return it->second;
  }

  const std::string& word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
      throw TokenizeError("detokenize: id " + std::to_string(id) +
                          " outside vocabulary of size " + std::to_string(size()));
    return words_[static_cast<std::size_t>(id)];
  }

  int color_id(std::size_t palette_index) const {
    if (palette_index >= palette_)
      throw ContractError("color_id: palette index out of range");
    return static_cast<int>(4 + palette_index);
  }

  // Inverse of color_id; -1 when the token is not a palette word.
  int palette_index(int token) const {
    const int base = 4;
    if (token < base || token >= base + static_cast<int>(palette_)) return -1;
    return token - base;
  }

  std::vector<int> tokenize(const std::string& text) const {
    std::vector<int> out;
    std::istringstream is(text);
    std::string w;
    while (is >> w) out.push_back(id(w));
    return out;
  }

  std::string detokenize(std::span<const int> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += word(ids[i]);
    }
    return out;
  }

 private:
  void push(std::string w) {
    ids_.emplace(w, static_cast<int>(words_.size()));
    words_.push_back(std::move(w));
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> ids_;
  std::size_t palette_ = 0;
};

enum class Split { Pretrain, Finetune, Eval };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Pretrain: return "pretrain";
    case Split::Finetune: return "finetune";
    case Split::Eval: return "eval";
  }
  return "?";
}

struct Sample {
  std::vector<std::uint8_t> cells;  // K*K palette indices, row-major
  std::string prompt_text;
  std::string response_text;
  std::vector<int> prompt;    // <bos> + prompt words
  std::vector<int> response;  // response words + <eos>
  Split split = Split::Pretrain;
  int q_row = -1, q_col = -1;  // question cell; -1 for captions
};

struct Dataset {
  DataSpec spec;
  Vocab vocab;
  std::vector<Sample> samples;
  std::vector<std::size_t> pretrain_ids, finetune_ids, eval_ids;

  const std::vector<std::size_t>& split_indices(Split s) const {
    switch (s) {
      case Split::Pretrain: return pretrain_ids;
      case Split::Finetune: return finetune_ids;
      case Split::Eval: return eval_ids;
    }
    throw ContractError("split_indices: unknown split");
  }
};

// The answer rule: the palette index of the queried cell.
inline std::size_t rule_answer(const DataSpec& spec,
                               std::span<const std::uint8_t> cells, std::size_t row,
                               std::size_t col) {
  return cells[row * spec.grid_k + col];
}

inline Image render_grid(const DataSpec& spec, std::span<const std::uint8_t> cells) {
  Image img;
  img.height = img.width = spec.image_size;
  img.rgb.assign(img.height * img.width * 3, 0.0);
  const std::size_t cell_px = spec.image_size / spec.grid_k;
  for (std::size_t y = 0; y < img.height; ++y) {
    for (std::size_t x = 0; x < img.width; ++x) {
      const PaletteEntry& p = kPalette[cells[(y / cell_px) * spec.grid_k + x / cell_px]];
      img.at(y, x, 0) = p.r;
      img.at(y, x, 1) = p.g;
      img.at(y, x, 2) = p.b;
    }
  }
  return img;
}

namespace detail {

inline std::string caption_text(const DataSpec& spec,
                                std::span<const std::uint8_t> cells) {
  std::string out;
  for (std::size_t i = 0; i < spec.cells(); ++i) {
    if (i) out += ' ';
    out += kPalette[cells[i]].word;
  }
  return out;
}

inline std::string question_text(std::size_t row, std::size_t col) {
  return "color at ( " + std::to_string(row) + " , " + std::to_string(col) + " ) ?";
}

}  // namespace detail

// Deterministic generation: grids are drawn without replacement, so no
// configuration appears in more than one split; eval questions cycle the
// grid row-major so every cell is covered uniformly.
inline Dataset generate_dataset(const DataSpec& spec, std::uint64_t seed) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  ds.vocab = Vocab::build(spec);

  const std::size_t total =
      spec.pretrain_samples + spec.finetune_samples + spec.eval_samples;
  // Distinct-grid capacity: palette^cells, saturated at 2^63.
  double capacity = 1.0;
  for (std::size_t i = 0; i < spec.cells(); ++i)
    capacity = std::min(capacity * static_cast<double>(spec.palette), 9.3e18);
  if (static_cast<double>(total) > capacity)
    throw ConfigError("data spec: " + std::to_string(total) +
                      " samples requested but only " +
                      std::to_string(static_cast<unsigned long long>(capacity)) +
                      " distinct grids exist");

  auto rng = make_rng(seed, "dataset");
  std::uniform_int_distribution<std::size_t> color(0, spec.palette - 1);
  std::set<std::vector<std::uint8_t>> used;
  auto fresh_grid = [&] {
    std::vector<std::uint8_t> cells(spec.cells());
    while (true) {
      for (auto& c : cells) c = static_cast<std::uint8_t>(color(rng));
      if (used.insert(cells).second) return cells;
    }
  };

  auto add_caption = [&](std::vector<std::uint8_t> cells) {
    Sample s;
    s.cells = std::move(cells);
    s.split = Split::Pretrain;
    s.prompt_text = "describe the grid";
    s.response_text = detail::caption_text(spec, s.cells);
    s.prompt = ds.vocab.tokenize(s.prompt_text);
    s.prompt.insert(s.prompt.begin(), Vocab::kBos);
    s.response = ds.vocab.tokenize(s.response_text);
    s.response.push_back(Vocab::kEos);
    ds.pretrain_ids.push_back(ds.samples.size());
    ds.samples.push_back(std::move(s));
  };

  auto add_question = [&](std::vector<std::uint8_t> cells, std::size_t row,
                          std::size_t col, Split split) {
    Sample s;
    s.cells = std::move(cells);
    s.split = split;
    s.q_row = static_cast<int>(row);
    s.q_col = static_cast<int>(col);
    s.prompt_text = detail::question_text(row, col);
    s.response_text = kPalette[rule_answer(spec, s.cells, row, col)].word;
    s.prompt = ds.vocab.tokenize(s.prompt_text);
    s.prompt.insert(s.prompt.begin(), Vocab::kBos);
    s.response = ds.vocab.tokenize(s.response_text);
    s.response.push_back(Vocab::kEos);
    (split == Split::Finetune ? ds.finetune_ids : ds.eval_ids)
        .push_back(ds.samples.size());
    ds.samples.push_back(std::move(s));
  };

  std::uniform_int_distribution<std::size_t> coord(0, spec.grid_k - 1);
  for (std::size_t i = 0; i < spec.pretrain_samples; ++i) add_caption(fresh_grid());
  for (std::size_t i = 0; i < spec.finetune_samples; ++i) {
    auto cells = fresh_grid();
    const std::size_t r = coord(rng), c = coord(rng);
    add_question(std::move(cells), r, c, Split::Finetune);
  }
  for (std::size_t i = 0; i < spec.eval_samples; ++i) {
    auto cells = fresh_grid();
    const std::size_t flat = i % spec.cells();
    add_question(std::move(cells), flat / spec.grid_k, flat % spec.grid_k,
                 Split::Eval);
  }
  return ds;
}

// One padded batch. Token rows hold <img> placeholders at visual positions
// and <pad> beyond each sample's true length; segments index the unpadded
// sequence, so pads never enter a forward pass or a loss.
struct Batch {
  std::vector<std::size_t> sample_ids;
  std::vector<std::vector<int>> tokens;
  std::vector<TokenSegments> segments;
  std::vector<std::size_t> true_len;
};

inline std::vector<int> sequence_tokens(const Sample& s, std::size_t n_patches) {
  std::vector<int> seq = s.prompt;
  seq.insert(seq.end(), n_patches, Vocab::kImg);
  seq.insert(seq.end(), s.response.begin(), s.response.end());
  return seq;
}

inline TokenSegments sequence_segments(const Sample& s, std::size_t n_patches) {
  TokenSegments seg;
  seg.prompt_begin = 0;
  seg.prompt_end = s.prompt.size();
  seg.visual_begin = seg.prompt_end;
  seg.visual_end = seg.visual_begin + n_patches;
  seg.response_begin = seg.visual_end;
  seg.response_end = seg.response_begin + s.response.size();
  return seg;
}

// Deterministic shuffled batches; order is a pure function of (seed, split,
// epoch).
inline std::vector<Batch> batch_iterator(const Dataset& ds, Split split,
                                         std::size_t batch_size, std::uint64_t seed,
                                         std::size_t epoch) {
  if (batch_size < 1) throw ContractError("batch_iterator: batch_size must be >= 1");
  const auto& ids = ds.split_indices(split);
  if (ids.empty())
    throw ContractError(std::string("batch_iterator: split '") + split_name(split) +
                        "' is empty");
  std::vector<std::size_t> order = ids;
  auto rng = make_rng(seed, split_name(split), epoch);
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t np = ds.spec.n_patches();
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(start + batch_size, order.size());
    Batch b;
    std::size_t max_len = 0;
    for (std::size_t i = start; i < end; ++i) {
      const Sample& s = ds.samples[order[i]];
      b.sample_ids.push_back(order[i]);
      b.tokens.push_back(sequence_tokens(s, np));
      b.segments.push_back(sequence_segments(s, np));
      b.true_len.push_back(b.tokens.back().size());
      max_len = std::max(max_len, b.true_len.back());
    }
    for (auto& row : b.tokens) row.resize(max_len, Vocab::kPad);
    batches.push_back(std::move(b));
  }
  return batches;
}

// Exact-match accuracy of a palette-index predictor over the eval split.
inline double exact_match_eval(const Dataset& ds,
                               const std::function<std::size_t(const Sample&)>& predict) {
  const auto& ids = ds.split_indices(Split::Eval);
  if (ids.empty()) throw ContractError("exact_match_eval: eval split is empty");
  std::size_t hits = 0;
  for (std::size_t id : ids) {
    const Sample& s = ds.samples[id];
    const std::size_t truth =
        rule_answer(ds.spec, s.cells, static_cast<std::size_t>(s.q_row),
                    static_cast<std::size_t>(s.q_col));
    if (predict(s) == truth) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(ids.size());
}

// Closed-set scoring for the QA task: the answer distribution is read at
// the first response position and the argmax is taken over palette words
// only (ties go to the lowest token id).
template <class S>
std::size_t predict_color(const MultimodalModelT<S>& model, const Dataset& ds,
                          const Sample& sample) {
  Image img = render_grid(ds.spec, sample.cells);
  auto res = model.forward(img, sample.prompt, {});
  const std::size_t last = res.segments.total() - 1;
  const auto& logits = res.output.logits;
  std::size_t best = 0;
  double best_v = -std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < ds.spec.palette; ++p) {
    const double v = static_cast<double>(
        logits.at(last, static_cast<std::size_t>(ds.vocab.color_id(p))));
    if (v > best_v) {
      best_v = v;
      best = p;
    }
  }
  return best;
}

template <class S>
double exact_match_eval(const MultimodalModelT<S>& model, const Dataset& ds) {
  return exact_match_eval(
      ds, [&](const Sample& s) { return predict_color(model, ds, s); });
}

}  // namespace mmkd
