#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "abc/graph.hpp"
#include "abc/tensor.hpp"

namespace abc {

struct Param {
  Tensor value;
  bool trainable = true;
};
using ParamMap = std::map<std::string, Param>;

// Rebuilds the computation from scratch for every probe, so the builder must
// be a pure function of the bound leaves.
using LossBuilder = std::function<NodeId(Graph&, const std::map<std::string, NodeId>&)>;

struct GradcheckOptions {
  double h = 1e-5;
  double rel_tol = 1e-4;
  // 0 checks every coordinate; otherwise a seeded random subset per leaf.
  std::size_t probes_per_leaf = 0;
  uint64_t probe_seed = 0x5eed;
};

struct GradcheckCoord {
  std::string leaf;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradcheckReport {
  bool passed = false;
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
  std::vector<GradcheckCoord> flagged;            // every coordinate over rel_tol
  std::map<std::string, double> per_leaf_max;     // worst relative error per leaf
};

// Central differences (f(x+h) − f(x−h)) / 2h against backward(), relative
// error |a−n| / max(|a|, |n|, 1e-8).
GradcheckReport gradcheck(const LossBuilder& build, const ParamMap& params,
                          const GradcheckOptions& opt = {});

// Comparison core with caller-supplied analytic gradients; lets tests feed a
// deliberately corrupted adjoint and watch it get flagged.
GradcheckReport gradcheck_against(const GradMap& analytic, const LossBuilder& build,
                                  const ParamMap& params, const GradcheckOptions& opt = {});

}  // namespace abc
