#pragma once

#include <string>
#include <vector>

#include "l2aot/graph.hpp"
#include "l2aot/rng.hpp"

namespace l2aot {

struct GradCheckSettings {
  double tolerance = 1e-4;
  double step_scale = 1e-5;          // h = step_scale * (1 + |x|)
  int64_t max_probes_per_tensor = 20;  // probe all elements when numel is smaller
  uint64_t probe_seed = 0x9d5f;
};

// Central finite differences against one analytic backward sweep.
struct GradReport {
  struct Entry {
    std::string name;
    int64_t probe_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
  };
  std::vector<Entry> worst;  // worst probe per checked tensor
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  double step_scale = 0.0;
  bool pass = false;  // pass <=> max_rel_err <= tolerance

  std::string summary() const;
};

// Probes named leaves (parameters or inputs). The graph is re-executed per
// probe, so call with the graph already evaluated. Leaves listed must carry
// gradient tracking; frozen parameters are rejected (their analytic gradient
// is zero by contract and FD would disagree).
GradReport grad_check(Graph& g, NodeId loss, const std::vector<std::string>& leaves,
                      const GradCheckSettings& s = {});

double relative_grad_error(double analytic, double numeric);

}  // namespace l2aot
