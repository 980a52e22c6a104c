// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "mmkd/error.hpp"
#include "mmkd/tensor.hpp"

namespace mmkd {

// A named, individually freezable set of parameters. Tensors are shared
// handles, so a group can be copied into an optimizer or a second model
// without duplicating storage.
template <class S>
struct ParameterGroupT {
  std::string name;
  bool trainable = true;
  std::vector<std::pair<std::string, TensorT<S>>> params;

  TensorT<S>& add(const std::string& pname, TensorT<S> t) {
    for (const auto& [existing, unused] : params)
      if (existing == pname)
        throw ContractError("parameter group '" + name + "': duplicate parameter '" +
                            pname + "'");
    t.set_requires_grad(trainable);
    params.emplace_back(pname, std::move(t));
    return params.back().second;
  }

  TensorT<S>& find(const std::string& pname) {
    for (auto& [n, t] : params)
      if (n == pname) return t;
    throw ContractError("parameter group '" + name + "': no parameter '" + pname + "'");
  }

  void set_trainable(bool v) {
    trainable = v;
    for (auto& [unused, t] : params) t.set_requires_grad(v);
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [unused, t] : params) n += t.numel();
    return n;
  }
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment accumulators are created only for
// parameters in groups that are trainable at construction; everything else
// is untouched by step(). step() zeroes the grads it consumed.
template <class S>
class AdamT {
 public:
  AdamT(AdamOptions opts, const std::vector<ParameterGroupT<S>*>& groups)
      : opts_(opts) {
    for (auto* g : groups) {
      if (!g->trainable) continue;
      for (auto& [unused, t] : g->params) {
        Slot s;
        s.param = t;
        s.m.assign(t.numel(), S(0));
        s.v.assign(t.numel(), S(0));
        slots_.push_back(std::move(s));
      }
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (auto& slot : slots_) {
      if (!slot.param.has_grad())
        throw ContractError("optimizer step: trainable parameter has no gradient");
      auto& g = slot.param.grad();
      auto& x = slot.param.data();
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double m = opts_.beta1 * static_cast<double>(slot.m[i]) +
                         (1.0 - opts_.beta1) * gi;
        const double v = opts_.beta2 * static_cast<double>(slot.v[i]) +
                         (1.0 - opts_.beta2) * gi * gi;
        slot.m[i] = static_cast<S>(m);
        slot.v[i] = static_cast<S>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        x[i] = static_cast<S>(static_cast<double>(x[i]) -
                              opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps));
      }
      slot.param.zero_grad();
    }
  }

  std::size_t step_count() const { return t_; }
  std::size_t tracked_parameters() const { return slots_.size(); }

 private:
  struct Slot {
    TensorT<S> param;
    std::vector<S> m, v;
  };
  AdamOptions opts_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

}  // namespace mmkd
