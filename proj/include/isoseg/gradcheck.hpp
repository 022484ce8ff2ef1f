#pragma once

// Central-difference gradient verification.  The caller supplies a builder
// that constructs a scalar loss on a fresh graph from the current parameter
// values; the harness perturbs every component of every input and compares
// the finite-difference quotient against the analytic gradient.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "isoseg/autograd.hpp"
#include "isoseg/tensor.hpp"

namespace isoseg {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_input;  // name of the input holding the worst component
  std::size_t worst_index = 0;
  double analytic = 0.0, numeric = 0.0;
  std::size_t checked = 0;
};

template <typename S>
struct GradCheckInput {
  std::string name;
  Tensor<S>* tensor;  // perturbed in place; restored after each probe
};

/// `build` receives a graph plus leaf ids for each input (same order) and
/// must return the scalar loss id.  Uses double-precision tensors in practice
/// (h = 1e-4 assumes ~1e-8 truncation + rounding error floor).
template <typename S>
GradCheckReport grad_check(
    std::vector<GradCheckInput<S>> inputs,
    const std::function<GId<S>(Graph<S>&, const std::vector<GId<S>>&)>& build,
    double h = 1e-4, std::uint64_t dropout_seed = 0) {
  GradCheckReport rep;

  auto eval = [&](std::vector<Tensor<S>>* grads_out) -> double {
    Graph<S> g(dropout_seed);
    std::vector<GId<S>> ids;
    ids.reserve(inputs.size());
    for (auto& in : inputs) ids.push_back(g.leaf(*in.tensor, grads_out != nullptr));
    GId<S> loss = build(g, ids);
    const double value = static_cast<double>(g.value(loss).item());
    if (grads_out) {
      g.backward(loss);
      grads_out->clear();
      for (auto id : ids) grads_out->push_back(g.grad(id));
    }
    return value;
  };

  std::vector<Tensor<S>> analytic;
  eval(&analytic);

  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<S>& t = *inputs[k].tensor;
    for (std::size_t i = 0; i < t.size(); ++i) {
      const S keep = t.data[i];
      t.data[i] = keep + static_cast<S>(h);
      const double fp = eval(nullptr);
      t.data[i] = keep - static_cast<S>(h);
      const double fm = eval(nullptr);
      t.data[i] = keep;
      const double num = (fp - fm) / (2.0 * h);
      const double ana = static_cast<double>(analytic[k].data[i]);
      const double rel =
          std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), 1e-8});
      ++rep.checked;
      if (rel > rep.max_rel_error) {
        rep.max_rel_error = rel;
        rep.worst_input = inputs[k].name;
        rep.worst_index = i;
        rep.analytic = ana;
        rep.numeric = num;
      }
    }
  }
  return rep;
}

}  // namespace isoseg
