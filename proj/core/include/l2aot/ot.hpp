#pragma once

#include <cstdint>
#include <vector>

#include "l2aot/graph.hpp"
#include "l2aot/tensor.hpp"

namespace l2aot {

// Pairwise transport costs with attached marginals. Marginals are uniform
// for everything this project does (mini-batches are unweighted samples).
struct CostMatrix {
  int64_t n = 0, m = 0;
  std::vector<double> cost;          // n*m row-major
  std::vector<double> row_marginal;  // length n, sums to 1
  std::vector<double> col_marginal;  // length m, sums to 1

  double at(int64_t i, int64_t j) const { return cost[static_cast<size_t>(i * m + j)]; }
  double mean_cost() const;
};

CostMatrix uniform_cost_matrix(int64_t n, int64_t m, std::vector<double> cost);

// epsilon is RELATIVE to mean cost; the solver works with
// eps_abs = epsilon * mean(C).
struct SinkhornSettings {
  double epsilon = 0.1;
  int64_t max_iterations = 200;
  double tolerance = 1e-6;  // max marginal violation
  bool log_domain = true;   // the only implemented mode

  void validate() const;
};

struct TransportPlan {
  int64_t n = 0, m = 0;
  std::vector<double> mass;  // n*m, nonnegative, total 1
  double marginal_violation = 0.0;
  int64_t iterations = 0;
  bool converged = false;

  double at(int64_t i, int64_t j) const { return mass[static_cast<size_t>(i * m + j)]; }
  double total_mass() const;
};

struct SinkhornResult {
  TransportPlan plan;
  double sharp_cost = 0.0;         // <M, C>, the reported distance
  double regularized_value = 0.0;  // sharp + eps * KL(M | a b^T); Danskin checks only
};

// Log-domain Sinkhorn on dual potentials. Non-convergence sets the flag,
// it never throws.
SinkhornResult sinkhorn(const CostMatrix& c, const SinkhornSettings& s);

// Exact discrete OT for square uniform problems via permutation enumeration
// (a permutation is optimal for uniform square marginals). n <= 6.
double exact_ot_bruteforce(const CostMatrix& c);

// C_ij = 1 - <f_i, g_j> / (|f_i| |g_j|), norms floored at 1e-12.
CostMatrix cosine_cost_matrix(const Tensor& fa, const Tensor& fb);

struct EnergyDistanceParts {
  double w_ab = 0.0, w_aa = 0.0, w_bb = 0.0;
  bool all_converged = true;
  double value() const { return 2.0 * w_ab - w_aa - w_bb; }
};

// Generalized squared energy distance between two feature distributions from
// two independent half-batches each: 2 W(Xa,Xb) - W(Xa,Xa') - W(Xb,Xb').
EnergyDistanceParts energy_distance_parts(const Tensor& fa, const Tensor& fa_prime,
                                          const Tensor& fb, const Tensor& fb_prime,
                                          const SinkhornSettings& s);
double energy_distance(const Tensor& fa, const Tensor& fa_prime, const Tensor& fb,
                       const Tensor& fb_prime, const SinkhornSettings& s);

// ---- differentiable path ----------------------------------------------
// The plan is solved outside the graph and frozen as a constant; the sharp
// cost enters as sum(M .* C). By the envelope rule the gradient of the
// regularized optimum w.r.t. C is exactly M, so backprop through this node
// reproduces it while the graph only ever sees a linear form.

struct SinkhornCostNode {
  NodeId node = -1;
  TransportPlan plan;
  double sharp_cost = 0.0;
  double regularized_value = 0.0;
};

SinkhornCostNode sinkhorn_sharp_cost_node(Graph& g, NodeId cost_node, const SinkhornSettings& s);

struct EnergyDistanceNode {
  NodeId node = -1;
  SinkhornCostNode ab, aa, bb;
  bool all_converged = true;
};

EnergyDistanceNode energy_distance_node(Graph& g, NodeId fa, NodeId fa_prime, NodeId fb,
                                        NodeId fb_prime, const SinkhornSettings& s);

}  // namespace l2aot
