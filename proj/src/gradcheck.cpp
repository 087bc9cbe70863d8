#include "abc/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "abc/rng.hpp"

namespace abc {

namespace {

double eval_loss(const LossBuilder& build, const ParamMap& params) {
  Graph g;
  std::map<std::string, NodeId> leaves;
  for (const auto& [name, p] : params) leaves[name] = g.leaf(p.value, name, p.trainable);
  NodeId loss = build(g, leaves);
  const Tensor& v = g.value(loss);
  if (v.numel() != 1)
    throw std::invalid_argument("gradcheck: loss must be scalar, got " + shape_str(v.shape));
  return v.data[0];
}

}  // namespace

GradcheckReport gradcheck_against(const GradMap& analytic, const LossBuilder& build,
                                  const ParamMap& params, const GradcheckOptions& opt) {
  GradcheckReport report;
  ParamMap work = params;

  for (const auto& [name, p] : params) {
    if (!p.trainable) continue;
    const std::size_t n = p.value.numel();

    std::vector<std::size_t> coords;
    if (opt.probes_per_leaf == 0 || opt.probes_per_leaf >= n) {
      coords.resize(n);
      for (std::size_t i = 0; i < n; ++i) coords[i] = i;
    } else {
      Rng rng(mix_seed(opt.probe_seed, name));
      coords = rng.sample_without_replacement(n, opt.probes_per_leaf);
      std::sort(coords.begin(), coords.end());
    }

    auto it = analytic.find(name);
    double leaf_max = 0.0;
    for (std::size_t idx : coords) {
      // A leaf the loss never touches is checked against an all-zero gradient.
      const double a = (it == analytic.end()) ? 0.0 : it->second.data[idx];
      double& slot = work.at(name).value.data[idx];
      const double saved = slot;
      slot = saved + opt.h;
      const double fp = eval_loss(build, work);
      slot = saved - opt.h;
      const double fm = eval_loss(build, work);
      slot = saved;
      const double num = (fp - fm) / (2.0 * opt.h);
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-8});
      leaf_max = std::max(leaf_max, rel);
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.coords_checked;
      if (rel > opt.rel_tol) report.flagged.push_back({name, idx, a, num, rel});
    }
    report.per_leaf_max[name] = leaf_max;
  }

  report.passed = report.flagged.empty();
  return report;
}

GradcheckReport gradcheck(const LossBuilder& build, const ParamMap& params,
                          const GradcheckOptions& opt) {
  Graph g;
  std::map<std::string, NodeId> leaves;
  for (const auto& [name, p] : params) leaves[name] = g.leaf(p.value, name, p.trainable);
  NodeId loss = build(g, leaves);
  GradMap analytic = g.backward(loss);
  return gradcheck_against(analytic, build, params, opt);
}

}  // namespace abc
