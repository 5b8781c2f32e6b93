#pragma once

#include <cmath>
#include <vector>

#include "msme/tape.hpp"

namespace msme {

struct GradCheckOptions {
  // Probe steps. Central differences at one step face a two-sided tradeoff:
  // coordinates with strong curvature are truncation-limited (want smaller h)
  // while coordinates with tiny gradients are roundoff-limited (want larger
  // h). A coordinate counts as checked at its best step; a wrong analytic
  // gradient fails at every step.
  std::vector<double> steps{1e-5};
  // 0 = probe every coordinate; otherwise probe this many random coordinates
  // per parameter tensor (large graphs would need millions of forward passes
  // otherwise).
  int max_coords_per_param = 0;
  uint64_t seed = 0;
};

// Compares the tape's analytic gradients against central finite differences.
// `build` must be a pure function of the parameter values: it gets a fresh
// tape plus the parameter leaves and returns the scalar loss node. Returns
// the max over probed coordinates of |ga-gn| / max(1e-8, |ga|+|gn|).
template <class BuildFn>
double grad_check(BuildFn&& build, const std::vector<Tensor<double>>& params,
                  const GradCheckOptions& opt = {}) {
  if (opt.steps.empty()) throw ContractError("grad_check: no probe steps");
  auto run = [&](const std::vector<Tensor<double>>& p, bool with_grad,
                 std::vector<Tensor<double>>* grads_out) -> double {
    Tape<double> tape;
    std::vector<NodeId> ids;
    ids.reserve(p.size());
    for (const auto& t : p) ids.push_back(tape.leaf(t, with_grad));
    NodeId loss = build(tape, ids);
    double value = tape.value(loss).data[0];
    if (!std::isfinite(value)) throw NumericError("grad_check: non-finite loss");
    if (with_grad) {
      tape.backward(loss);
      grads_out->clear();
      for (NodeId id : ids)
        grads_out->push_back(tape.grad_touched(id) ? tape.grad(id)
                                                   : Tensor<double>::zeros(tape.value(id).shape));
    }
    return value;
  };

  std::vector<Tensor<double>> analytic;
  run(params, true, &analytic);

  Rng rng(opt.seed);
  std::vector<Tensor<double>> work = params;
  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    size_t n = params[pi].numel();
    std::vector<size_t> coords;
    if (opt.max_coords_per_param <= 0 || static_cast<size_t>(opt.max_coords_per_param) >= n) {
      coords.resize(n);
      for (size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      for (int i = 0; i < opt.max_coords_per_param; ++i)
        coords.push_back(static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(n))));
    }
    for (size_t ci : coords) {
      double orig = work[pi].data[ci];
      double ga = analytic[pi].data[ci];
      if (!std::isfinite(ga)) throw NumericError("grad_check: non-finite gradient");
      double best = std::numeric_limits<double>::infinity();
      for (double h : opt.steps) {
        work[pi].data[ci] = orig + h;
        double fp = run(work, false, nullptr);
        work[pi].data[ci] = orig - h;
        double fm = run(work, false, nullptr);
        double gn = (fp - fm) / (2.0 * h);
        if (!std::isfinite(gn)) throw NumericError("grad_check: non-finite gradient");
        double rel = std::fabs(ga - gn) / std::max(1e-8, std::fabs(ga) + std::fabs(gn));
        best = std::min(best, rel);
      }
      work[pi].data[ci] = orig;
      if (best > max_rel) max_rel = best;
    }
  }
  return max_rel;
}

}  // namespace msme
