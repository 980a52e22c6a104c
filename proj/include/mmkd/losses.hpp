// SPDX-License-Identifier: Apache-2.0
//
// The loss family: autoregressive next-token loss over response positions,
// token-level teacher/student divergences (forward KL, reverse KL, JSD)
// applied per segment, Gram-matrix relation distillation, and the weighted
// composite objectives used by the distilled training stages. Teacher-side
// inputs are gradient-detached inside every loss.

#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "mmkd/error.hpp"
#include "mmkd/model.hpp"
#include "mmkd/tensor.hpp"

namespace mmkd {

// Probabilities are clamped at this floor inside logarithms.
inline constexpr double kProbFloor = 1e-12;

enum class Divergence { FKL, RKL, JSD };
enum class Reduction { Sum, TokenMean };

inline Divergence parse_divergence(const std::string& s) {
  if (s == "fkl" || s == "FKL") return Divergence::FKL;
  if (s == "rkl" || s == "RKL") return Divergence::RKL;
  if (s == "jsd" || s == "JSD") return Divergence::JSD;
  throw ParseError("unknown divergence '" + s + "' (expected fkl, rkl, or jsd)");
}

inline const char* format_divergence(Divergence d) {
  switch (d) {
    case Divergence::FKL: return "fkl";
    case Divergence::RKL: return "rkl";
    case Divergence::JSD: return "jsd";
  }
  return "?";
}

inline Reduction parse_reduction(const std::string& s) {
  if (s == "token-mean") return Reduction::TokenMean;
  if (s == "sum") return Reduction::Sum;
  throw ParseError("unknown reduction '" + s + "' (expected token-mean or sum)");
}

inline const char* format_reduction(Reduction r) {
  return r == Reduction::Sum ? "sum" : "token-mean";
}

// Distillation targets. Response is always distilled; prompt and visual
// positions are selectable.
struct TargetMask {
  bool prompt = false;
  bool visual = true;

  bool operator==(const TargetMask&) const = default;
};

inline TargetMask parse_target_mask(const std::string& s) {
  TargetMask m{.prompt = false, .visual = false};
  bool response = false;
  std::string cur;
  auto take = [&](const std::string& w) {
    if (w.empty()) return;
    if (w == "response") response = true;
    else if (w == "prompt") m.prompt = true;
    else if (w == "visual") m.visual = true;
    else throw ParseError("unknown distillation target '" + w + "'");
  };
  for (char c : s) {
    if (c == ',' || c == ' ') {
      take(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  take(cur);
  if (!response)
    throw ConfigError("distillation targets must include 'response'");
  return m;
}

inline std::string format_target_mask(const TargetMask& m) {
  std::string s = "response";
  if (m.prompt) s += ",prompt";
  if (m.visual) s += ",visual";
  return s;
}

struct DistillConfig {
  double alpha = 1.0;
  double beta = 1.0;
  double gamma = 0.5;
  double alpha_prime = 1.0;
  double beta_prime = 1.0;
  double gamma_prime = 0.5;
  Divergence divergence = Divergence::FKL;
  TargetMask targets;
  double temperature = 1.0;
  Reduction reduction = Reduction::TokenMean;

  void validate() const {
    for (double w : {alpha, beta, gamma, alpha_prime, beta_prime, gamma_prime})
      if (!(std::isfinite(w) && w >= 0.0))
        throw ConfigError("distill config: loss weights must be finite and >= 0");
    if (!(temperature > 0.0))
      throw ConfigError("distill config: temperature must be positive");
  }
};

// ---------------------------------------------------------------------------
// Autoregressive loss (response positions only)

// Negative log-likelihood of the response tokens given their prefixes; the
// distribution for position t is read from the logits row at t-1. Targets
// outside the response range are never touched.
template <class S>
TensorT<S> autoregressive_loss(const TensorT<S>& logits, std::span<const int> targets,
                               const TokenSegments& seg, Reduction reduction) {
  if (seg.response_len() == 0)
    throw ContractError("autoregressive_loss: empty response segment");
  if (logits.ndim() != 2 || logits.shape()[0] < seg.response_end)
    throw ShapeError("autoregressive_loss: logits " + shape_str(logits.shape()) +
                     " shorter than segments");
  if (targets.size() < seg.response_end)
    throw ContractError("autoregressive_loss: targets shorter than the sequence");
  TensorT<S> rows = slice_rows(logits, seg.response_begin - 1, seg.response_end - 1);
  TensorT<S> probs = softmax(rows, 1.0);
  TensorT<S> logp = log_floor(probs, kProbFloor);
  std::vector<int> picked(targets.begin() + seg.response_begin,
                          targets.begin() + seg.response_end);
  TensorT<S> chosen = select_per_row(logp, picked);
  TensorT<S> total = neg(sum(chosen));
  if (reduction == Reduction::TokenMean)
    total = scale(total, 1.0 / static_cast<double>(seg.response_len()));
  return total;
}

// ---------------------------------------------------------------------------
// Token-level divergences

namespace detail {

// Sum over rows of the chosen divergence between two logit matrices; the
// teacher side enters detached.
template <class S>
TensorT<S> divergence_rows(const TensorT<S>& teacher_logits,
                           const TensorT<S>& student_logits, Divergence kind,
                           double temperature) {
  if (teacher_logits.shape() != student_logits.shape())
    throw ShapeError("divergence: teacher " + shape_str(teacher_logits.shape()) +
                     " vs student " + shape_str(student_logits.shape()));
  TensorT<S> pt = softmax(teacher_logits.detach(), temperature);
  TensorT<S> ps = softmax(student_logits, temperature);
  switch (kind) {
    case Divergence::FKL:
      return sum(mul(pt, sub(log_floor(pt, kProbFloor), log_floor(ps, kProbFloor))));
    case Divergence::RKL:
      return sum(mul(ps, sub(log_floor(ps, kProbFloor), log_floor(pt, kProbFloor))));
    case Divergence::JSD: {
      TensorT<S> m = scale(add(pt, ps), 0.5);
      TensorT<S> logm = log_floor(m, kProbFloor);
      TensorT<S> t_side = sum(mul(pt, sub(log_floor(pt, kProbFloor), logm)));
      TensorT<S> s_side = sum(mul(ps, sub(log_floor(ps, kProbFloor), logm)));
      return scale(add(t_side, s_side), 0.5);
    }
  }
  throw ContractError("divergence: unknown kind");
}

}  // namespace detail

// Divergence between two single-token distributions (1-d logit rows).
template <class S>
TensorT<S> token_divergence(const TensorT<S>& teacher_row, const TensorT<S>& student_row,
                            Divergence kind, double temperature) {
  if (teacher_row.ndim() != 1 || student_row.ndim() != 1)
    throw ShapeError("token_divergence: expected 1-d logit rows");
  TensorT<S> t2 = reshape(teacher_row, {1, teacher_row.numel()});
  TensorT<S> s2 = reshape(student_row, {1, student_row.numel()});
  return detail::divergence_rows(t2, s2, kind, temperature);
}

namespace detail {

template <class S>
TensorT<S> segment_divergence(const ForwardOutputT<S>& teacher,
                              const ForwardOutputT<S>& student, std::size_t begin,
                              std::size_t end, const DistillConfig& cfg) {
  if (teacher.logits.shape() != student.logits.shape())
    throw ContractError("distill loss: teacher/student logits disagree: " +
                        shape_str(teacher.logits.shape()) + " vs " +
                        shape_str(student.logits.shape()));
  if (begin == end) return TensorT<S>::scalar(S(0));
  TensorT<S> t_rows = slice_rows(teacher.logits, begin, end).detach();
  TensorT<S> s_rows = slice_rows(student.logits, begin, end);
  TensorT<S> d = divergence_rows(t_rows, s_rows, cfg.divergence, cfg.temperature);
  if (cfg.reduction == Reduction::TokenMean)
    d = scale(d, 1.0 / static_cast<double>(end - begin));
  return d;
}

}  // namespace detail

template <class S>
TensorT<S> response_distill_loss(const ForwardOutputT<S>& teacher,
                                 const ForwardOutputT<S>& student,
                                 const TokenSegments& seg, const DistillConfig& cfg) {
  return detail::segment_divergence(teacher, student, seg.response_begin,
                                    seg.response_end, cfg);
}

template <class S>
TensorT<S> visual_distill_loss(const ForwardOutputT<S>& teacher,
                               const ForwardOutputT<S>& student,
                               const TokenSegments& seg, const DistillConfig& cfg) {
  if (!cfg.targets.visual)
    throw ConfigError("visual_distill_loss: 'visual' is not in the target mask");
  return detail::segment_divergence(teacher, student, seg.visual_begin,
                                    seg.visual_end, cfg);
}

template <class S>
TensorT<S> prompt_distill_loss(const ForwardOutputT<S>& teacher,
                               const ForwardOutputT<S>& student,
                               const TokenSegments& seg, const DistillConfig& cfg) {
  if (!cfg.targets.prompt)
    throw ConfigError("prompt_distill_loss: 'prompt' is not in the target mask");
  return detail::segment_divergence(teacher, student, seg.prompt_begin,
                                    seg.prompt_end, cfg);
}

// ---------------------------------------------------------------------------
// Relation distillation

template <class S>
struct RelationMatrixT {
  TensorT<S> values;  // [N_p x N_p] Gram matrix, symmetric PSD
};

// Self-correlation of token representations: R = Y * Y^T.
template <class S>
RelationMatrixT<S> relation_matrix(const TensorT<S>& token_repr) {
  if (token_repr.ndim() != 2 || token_repr.shape()[0] == 0)
    throw ShapeError("relation_matrix: expected non-empty 2-d input, got " +
                     shape_str(token_repr.shape()));
  return {matmul(token_repr, transpose(token_repr))};
}

// 1 - Frobenius cosine of the two matrices; the teacher side (second
// operand) is gradient-detached. The single-sqrt denominator makes the
// loss exactly zero on identical and power-of-two-scaled operands.
template <class S>
TensorT<S> relation_loss(const RelationMatrixT<S>& student,
                         const RelationMatrixT<S>& teacher) {
  const TensorT<S>& rs = student.values;
  TensorT<S> rt = teacher.values.detach();
  if (rs.shape() != rt.shape())
    throw ShapeError("relation_loss: shape mismatch " + shape_str(rs.shape()) +
                     " vs " + shape_str(rt.shape()));
  TensorT<S> ss = sum(mul(rs, rs));
  TensorT<S> tt = sum(mul(rt, rt));
  if (!(ss.item() > S(0)) || !(tt.item() > S(0)))
    throw NumericError(
        "relation_loss: zero-norm relation matrix (degenerate hidden states)");
  TensorT<S> dot = sum(mul(rs, rt));
  TensorT<S> cosine = div(dot, sqrt_elem(mul(ss, tt)));
  return clamp_min(sub(TensorT<S>::scalar(S(1)), cosine), 0.0);
}

// ---------------------------------------------------------------------------
// Composite stage objectives

template <class S>
struct LossPartsT {
  TensorT<S> reg = TensorT<S>::scalar(S(0));
  TensorT<S> res = TensorT<S>::scalar(S(0));
  TensorT<S> vis = TensorT<S>::scalar(S(0));
  TensorT<S> rel = TensorT<S>::scalar(S(0));
};

namespace detail {

template <class S>
TensorT<S> composite_loss(const LossPartsT<S>& parts, double a, double b, double g,
                          const TargetMask& mask) {
  TensorT<S> total = add(parts.reg, scale(parts.res, a));
  if (mask.visual) total = add(total, scale(parts.vis, b));
  total = add(total, scale(parts.rel, g));
  return total;
}

}  // namespace detail

// Distilled pre-training objective: L_reg + a*L_res + b*L_vis + g*L_rel,
// with masked-off terms contributing zero.
template <class S>
TensorT<S> dpt_loss(const LossPartsT<S>& parts, const DistillConfig& cfg) {
  return detail::composite_loss(parts, cfg.alpha, cfg.beta, cfg.gamma, cfg.targets);
}

// Distilled fine-tuning objective; same shape with the primed weights.
template <class S>
TensorT<S> dft_loss(const LossPartsT<S>& parts, const DistillConfig& cfg) {
  return detail::composite_loss(parts, cfg.alpha_prime, cfg.beta_prime,
                                cfg.gamma_prime, cfg.targets);
}

using RelationMatrix = RelationMatrixT<double>;
using LossParts = LossPartsT<double>;

}  // namespace mmkd
