#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "l2aot/tensor.hpp"

namespace l2aot {

using NodeId = int32_t;

enum class OpKind : uint8_t {
  kInput,
  kConstant,
  kParameter,
  kAdd,
  kSub,
  kMul,
  kScalarMul,
  kMatMul,
  kRelu,
  kTanh,
  kSum,
  kMean,
  kReshape,
  kConcatChannel,
  kBroadcastTo,
  kConv2d,
  kConvTranspose2d,
  kMaxPool2x2,
  kInstanceNorm,
  kSoftmaxCrossEntropy,
  kL1Loss,
  kCosineCost,
  kGlobalAvgPool,
};

const char* op_name(OpKind k);

struct OpAttrs {
  int64_t stride = 1;
  int64_t padding = 0;
  int64_t output_padding = 0;
  double scalar = 0.0;
  double epsilon = 0.0;
  Shape target_shape;
  std::vector<int64_t> labels;
};

struct Node {
  OpKind kind;
  std::vector<NodeId> inputs;
  OpAttrs attrs;
  std::string name;  // kInput / kParameter only
  Shape shape;       // inferred when the node is added
  bool trainable = false;
  bool needs_grad = false;
  Tensor value;
  bool has_value = false;
  std::vector<double> grad;  // reverse-sweep accumulator
};

// Tape-structured compute graph. Nodes are appended in topological order and
// evaluated eagerly when their inputs already carry values, so training code
// can read intermediate results while building. execute() replays the whole
// tape against (re)bound inputs; backward() runs one reverse sweep.
//
// Invariants: evaluation order equals insertion order; every op validates
// shapes when added; every produced value is checked finite.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // --- leaves ---
  NodeId input(const std::string& name, Shape shape, bool requires_grad = false);
  NodeId input(const std::string& name, Tensor value);  // grad tracking per value.requires_grad()
  NodeId constant(Tensor value);
  NodeId scalar_constant(double v) { return constant(Tensor::scalar(v)); }
  // Registers a named parameter; calling again with the same name returns the
  // existing node (weight sharing across repeated sub-network applications).
  NodeId param(const std::string& name, const Tensor& value, bool trainable = true);

  // --- elementwise / structural ---
  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scalar_mul(NodeId a, double s);
  NodeId matmul(NodeId a, NodeId b);
  NodeId relu(NodeId a);
  NodeId tanh(NodeId a);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId reshape(NodeId a, Shape shape);
  NodeId concat_channels(NodeId a, NodeId b);
  NodeId broadcast_to(NodeId a, Shape shape);

  // --- network ops ---
  NodeId conv2d(NodeId x, NodeId w, NodeId bias, int64_t stride, int64_t padding);
  NodeId conv_transpose2d(NodeId x, NodeId w, NodeId bias, int64_t stride, int64_t padding,
                          int64_t output_padding);
  NodeId max_pool2x2(NodeId x);
  NodeId instance_norm(NodeId x, NodeId gain, NodeId bias, double epsilon = 1e-5);
  NodeId softmax_cross_entropy(NodeId logits, std::vector<int64_t> labels);
  NodeId l1_loss(NodeId a, NodeId b);
  NodeId cosine_cost(NodeId fa, NodeId fb);
  NodeId global_avg_pool(NodeId x);

  // --- execution ---
  void mark_output(NodeId id, const std::string& name);
  std::map<std::string, Tensor> execute(const std::map<std::string, Tensor>& inputs);
  void bind(const std::string& name, Tensor value);
  void re_execute();  // replay with currently bound leaves

  // Reverse sweep from a scalar loss. Returns one gradient tensor per
  // registered parameter: accumulated values for trainable parameters the
  // loss reaches, exact zeros for frozen or unreached ones.
  ParamSet backward(NodeId loss);

  const Tensor& value(NodeId id) const;
  double scalar_value(NodeId id) const { return value(id).scalar_value(); }
  Tensor grad(NodeId id) const;  // valid after backward(); zeros if untracked

  void set_param_value(const std::string& name, Tensor v);
  NodeId node_of(const std::string& name) const;  // input or parameter
  const Shape& node_shape(NodeId id) const;
  bool tracks_grad(NodeId id) const;
  std::vector<std::string> param_names(bool trainable_only = false) const;
  size_t node_count() const { return nodes_.size(); }

 private:
  NodeId add_node(Node n);
  Node& at(NodeId id);
  const Node& at(NodeId id) const;
  void check_id(NodeId id) const;
  void eval_node(NodeId id);
  void backward_node(NodeId id);
  std::vector<double>& grad_buf(NodeId id);
  void accumulate(NodeId id, const double* g, int64_t n);

  std::vector<Node> nodes_;
  std::unordered_map<std::string, NodeId> by_name_;
  std::vector<std::pair<std::string, NodeId>> params_;
  std::vector<std::pair<std::string, NodeId>> outputs_;
  bool executed_ = false;
  bool backward_done_ = false;
};

}  // namespace l2aot
