#include "l2aot/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace l2aot {

double relative_grad_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) /
         std::max({1.0, std::abs(analytic), std::abs(numeric)});
}

std::string GradReport::summary() const {
  std::ostringstream os;
  os << (pass ? "PASS" : "FAIL") << " max_rel_err=" << max_rel_err << " tol=" << tolerance;
  for (const auto& e : worst) {
    os << "\n  " << e.name << "[" << e.probe_index << "] analytic=" << e.analytic
       << " numeric=" << e.numeric << " rel_err=" << e.rel_err;
  }
  return os.str();
}

GradReport grad_check(Graph& g, NodeId loss, const std::vector<std::string>& leaves,
                      const GradCheckSettings& s) {
  GradReport report;
  report.tolerance = s.tolerance;
  report.step_scale = s.step_scale;

  g.re_execute();
  ParamSet param_grads = g.backward(loss);

  Rng rng(s.probe_seed);
  for (const std::string& name : leaves) {
    const NodeId leaf = g.node_of(name);
    if (!g.tracks_grad(leaf)) {
      throw std::invalid_argument("grad_check: leaf '" + name + "' does not track gradients");
    }
    const Tensor base = g.value(leaf);
    const Tensor analytic = g.grad(leaf);

    std::vector<int64_t> probes;
    const int64_t n = base.numel();
    if (n <= s.max_probes_per_tensor) {
      for (int64_t i = 0; i < n; ++i) probes.push_back(i);
    } else {
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      rng.shuffle(all);
      probes.assign(all.begin(), all.begin() + s.max_probes_per_tensor);
      std::sort(probes.begin(), probes.end());
    }

    GradReport::Entry worst;
    worst.name = name;
    for (int64_t idx : probes) {
      const double x = base.at(idx);
      const double h = s.step_scale * (1.0 + std::abs(x));
      g.set_param_value(name, base.with_value(idx, x + h));
      g.re_execute();
      const double lp = g.scalar_value(loss);
      g.set_param_value(name, base.with_value(idx, x - h));
      g.re_execute();
      const double lm = g.scalar_value(loss);
      const double numeric = (lp - lm) / (2.0 * h);
      const double err = relative_grad_error(analytic.at(idx), numeric);
      if (err >= worst.rel_err) {
        worst.probe_index = idx;
        worst.analytic = analytic.at(idx);
        worst.numeric = numeric;
        worst.rel_err = err;
      }
    }
    g.set_param_value(name, base);
    report.worst.push_back(worst);
    report.max_rel_err = std::max(report.max_rel_err, worst.rel_err);
  }
  g.re_execute();  // restore clean forward state

  report.pass = report.max_rel_err <= report.tolerance;
  return report;
}

}  // namespace l2aot
