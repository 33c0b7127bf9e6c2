#include "l2aot/graph.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "kernels.hpp"

namespace l2aot {

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScalarMul: return "scalar_mul";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kRelu: return "relu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kReshape: return "reshape";
    case OpKind::kConcatChannel: return "concat_channels";
    case OpKind::kBroadcastTo: return "broadcast_to";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kConvTranspose2d: return "conv_transpose2d";
    case OpKind::kMaxPool2x2: return "max_pool2x2";
    case OpKind::kInstanceNorm: return "instance_norm";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kL1Loss: return "l1_loss";
    case OpKind::kCosineCost: return "cosine_cost";
    case OpKind::kGlobalAvgPool: return "global_avg_pool";
  }
  return "?";
}

namespace {

[[noreturn]] void shape_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

void require(bool cond, const std::string& op, const std::string& detail) {
  if (!cond) shape_error(op, detail);
}

kernels::Conv2dGeom conv_geom(const Shape& x, const Shape& w, int64_t stride, int64_t padding) {
  kernels::Conv2dGeom g;
  g.in_c = x[1];
  g.in_h = x[2];
  g.in_w = x[3];
  g.out_c = w[0];
  g.kernel = w[2];
  g.stride = stride;
  g.padding = padding;
  g.out_h = (x[2] + 2 * padding - w[2]) / stride + 1;
  g.out_w = (x[3] + 2 * padding - w[3]) / stride + 1;
  return g;
}

kernels::ConvT2dGeom convt_geom(const Shape& x, const Shape& w, int64_t stride, int64_t padding,
                                int64_t output_padding) {
  kernels::ConvT2dGeom g;
  g.in_c = x[1];
  g.in_h = x[2];
  g.in_w = x[3];
  g.out_c = w[1];
  g.kernel = w[2];
  g.stride = stride;
  g.padding = padding;
  g.output_padding = output_padding;
  g.out_h = (x[2] - 1) * stride - 2 * padding + w[2] + output_padding;
  g.out_w = (x[3] - 1) * stride - 2 * padding + w[3] + output_padding;
  return g;
}

// Right-aligned numpy-style broadcast bookkeeping: returns per-output-dim
// input strides (0 where the input extent is 1).
std::vector<int64_t> broadcast_strides(const Shape& in, const Shape& out, const char* op) {
  const size_t r = out.size();
  if (in.size() > r) shape_error(op, "input rank exceeds target rank");
  Shape padded(r, 1);
  std::copy(in.begin(), in.end(), padded.begin() + static_cast<int64_t>(r - in.size()));
  std::vector<int64_t> in_strides(r, 0);
  int64_t s = 1;
  for (int64_t i = static_cast<int64_t>(r) - 1; i >= 0; --i) {
    const auto ui = static_cast<size_t>(i);
    if (padded[ui] != out[ui] && padded[ui] != 1) {
      shape_error(op, "cannot broadcast " + shape_str(in) + " to " + shape_str(out));
    }
    in_strides[ui] = (padded[ui] == 1) ? 0 : s;
    s *= padded[ui];
  }
  return in_strides;
}

}  // namespace

// ---------------------------------------------------------------------------
// construction
// ---------------------------------------------------------------------------

NodeId Graph::add_node(Node n) {
  for (NodeId in : n.inputs) {
    check_id(in);
    if (at(in).needs_grad) n.needs_grad = true;
  }
  nodes_.push_back(std::move(n));
  const NodeId id = static_cast<NodeId>(nodes_.size() - 1);
  Node& node = nodes_.back();
  if (node.kind != OpKind::kInput && node.kind != OpKind::kConstant &&
      node.kind != OpKind::kParameter) {
    bool ready = true;
    for (NodeId in : node.inputs) {
      if (!at(in).has_value) {
        ready = false;
        break;
      }
    }
    if (ready) eval_node(id);
  }
  return id;
}

Node& Graph::at(NodeId id) { return nodes_[static_cast<size_t>(id)]; }
const Node& Graph::at(NodeId id) const { return nodes_[static_cast<size_t>(id)]; }

void Graph::check_id(NodeId id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size()) {
    throw std::invalid_argument("graph: node id " + std::to_string(id) + " does not exist");
  }
}

NodeId Graph::input(const std::string& name, Shape shape, bool requires_grad) {
  if (by_name_.count(name)) throw std::invalid_argument("graph: duplicate leaf name " + name);
  Node n;
  n.kind = OpKind::kInput;
  n.name = name;
  n.shape = std::move(shape);
  n.needs_grad = requires_grad;
  const NodeId id = add_node(std::move(n));
  by_name_[name] = id;
  return id;
}

NodeId Graph::input(const std::string& name, Tensor value) {
  const NodeId id = input(name, value.shape(), value.requires_grad());
  at(id).value = std::move(value);
  at(id).has_value = true;
  return id;
}

NodeId Graph::constant(Tensor value) {
  Node n;
  n.kind = OpKind::kConstant;
  n.shape = value.shape();
  n.value = std::move(value);
  n.has_value = true;
  return add_node(std::move(n));
}

NodeId Graph::param(const std::string& name, const Tensor& value, bool trainable) {
  auto it = by_name_.find(name);
  if (it != by_name_.end()) {
    const Node& existing = at(it->second);
    if (existing.kind != OpKind::kParameter) {
      throw std::invalid_argument("graph: name " + name + " already used by an input");
    }
    if (!same_shape(existing.shape, value.shape()) || existing.trainable != trainable ||
        !existing.value.same_data(value)) {
      throw std::invalid_argument("graph: parameter " + name + " re-registered with different contents");
    }
    return it->second;
  }
  Node n;
  n.kind = OpKind::kParameter;
  n.name = name;
  n.shape = value.shape();
  n.trainable = trainable;
  n.needs_grad = trainable;
  n.value = value;
  n.has_value = true;
  const NodeId id = add_node(std::move(n));
  by_name_[name] = id;
  params_.emplace_back(name, id);
  return id;
}

// ---------------------------------------------------------------------------
// op builders (shape inference + validation)
// ---------------------------------------------------------------------------

NodeId Graph::add(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  require(same_shape(at(a).shape, at(b).shape), "add",
          "shape mismatch " + shape_str(at(a).shape) + " vs " + shape_str(at(b).shape));
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a, b};
  n.shape = at(a).shape;
  return add_node(std::move(n));
}

NodeId Graph::sub(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  require(same_shape(at(a).shape, at(b).shape), "sub",
          "shape mismatch " + shape_str(at(a).shape) + " vs " + shape_str(at(b).shape));
  Node n;
  n.kind = OpKind::kSub;
  n.inputs = {a, b};
  n.shape = at(a).shape;
  return add_node(std::move(n));
}

NodeId Graph::mul(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  require(same_shape(at(a).shape, at(b).shape), "mul",
          "shape mismatch " + shape_str(at(a).shape) + " vs " + shape_str(at(b).shape));
  Node n;
  n.kind = OpKind::kMul;
  n.inputs = {a, b};
  n.shape = at(a).shape;
  return add_node(std::move(n));
}

NodeId Graph::scalar_mul(NodeId a, double s) {
  check_id(a);
  Node n;
  n.kind = OpKind::kScalarMul;
  n.inputs = {a};
  n.attrs.scalar = s;
  n.shape = at(a).shape;
  return add_node(std::move(n));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  const Shape& sa = at(a).shape;
  const Shape& sb = at(b).shape;
  require(sa.size() == 2 && sb.size() == 2, "matmul", "operands must be rank-2");
  require(sa[1] == sb[0], "matmul",
          "inner dims disagree: " + shape_str(sa) + " x " + shape_str(sb));
  Node n;
  n.kind = OpKind::kMatMul;
  n.inputs = {a, b};
  n.shape = {sa[0], sb[1]};
  return add_node(std::move(n));
}

NodeId Graph::relu(NodeId a) {
  check_id(a);
  Node n;
  n.kind = OpKind::kRelu;
  n.inputs = {a};
  n.shape = at(a).shape;
  return add_node(std::move(n));
}

NodeId Graph::tanh(NodeId a) {
  check_id(a);
  Node n;
  n.kind = OpKind::kTanh;
  n.inputs = {a};
  n.shape = at(a).shape;
  return add_node(std::move(n));
}

NodeId Graph::sum(NodeId a) {
  check_id(a);
  Node n;
  n.kind = OpKind::kSum;
  n.inputs = {a};
  n.shape = {};
  return add_node(std::move(n));
}

NodeId Graph::mean(NodeId a) {
  check_id(a);
  Node n;
  n.kind = OpKind::kMean;
  n.inputs = {a};
  n.shape = {};
  return add_node(std::move(n));
}

NodeId Graph::reshape(NodeId a, Shape shape) {
  check_id(a);
  require(shape_numel(shape) == shape_numel(at(a).shape), "reshape",
          "element count changes " + shape_str(at(a).shape) + " -> " + shape_str(shape));
  Node n;
  n.kind = OpKind::kReshape;
  n.inputs = {a};
  n.attrs.target_shape = shape;
  n.shape = std::move(shape);
  return add_node(std::move(n));
}

NodeId Graph::concat_channels(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  const Shape& sa = at(a).shape;
  const Shape& sb = at(b).shape;
  require(sa.size() == 4 && sb.size() == 4, "concat_channels", "operands must be NCHW");
  require(sa[0] == sb[0] && sa[2] == sb[2] && sa[3] == sb[3], "concat_channels",
          "non-channel dims disagree: " + shape_str(sa) + " vs " + shape_str(sb));
  Node n;
  n.kind = OpKind::kConcatChannel;
  n.inputs = {a, b};
  n.shape = {sa[0], sa[1] + sb[1], sa[2], sa[3]};
  return add_node(std::move(n));
}

NodeId Graph::broadcast_to(NodeId a, Shape shape) {
  check_id(a);
  broadcast_strides(at(a).shape, shape, "broadcast_to");  // validates
  Node n;
  n.kind = OpKind::kBroadcastTo;
  n.inputs = {a};
  n.attrs.target_shape = shape;
  n.shape = std::move(shape);
  return add_node(std::move(n));
}

NodeId Graph::conv2d(NodeId x, NodeId w, NodeId bias, int64_t stride, int64_t padding) {
  check_id(x);
  check_id(w);
  check_id(bias);
  const Shape& sx = at(x).shape;
  const Shape& sw = at(w).shape;
  require(sx.size() == 4, "conv2d", "input must be NCHW, got " + shape_str(sx));
  require(sw.size() == 4, "conv2d", "weight must be OIKK, got " + shape_str(sw));
  require(sw[2] == sw[3], "conv2d", "kernel must be square");
  require(sx[1] == sw[1], "conv2d",
          "channel mismatch: input " + shape_str(sx) + " vs weight " + shape_str(sw));
  require(stride == 1 || stride == 2, "conv2d", "stride must be 1 or 2");
  require(padding >= 0, "conv2d", "padding must be >= 0");
  require(at(bias).shape == Shape{sw[0]}, "conv2d", "bias must have shape [out_channels]");
  const auto g = conv_geom(sx, sw, stride, padding);
  require(g.out_h >= 1 && g.out_w >= 1, "conv2d", "output would be empty");
  Node n;
  n.kind = OpKind::kConv2d;
  n.inputs = {x, w, bias};
  n.attrs.stride = stride;
  n.attrs.padding = padding;
  n.shape = {sx[0], g.out_c, g.out_h, g.out_w};
  return add_node(std::move(n));
}

NodeId Graph::conv_transpose2d(NodeId x, NodeId w, NodeId bias, int64_t stride, int64_t padding,
                               int64_t output_padding) {
  check_id(x);
  check_id(w);
  check_id(bias);
  const Shape& sx = at(x).shape;
  const Shape& sw = at(w).shape;
  require(sx.size() == 4, "conv_transpose2d", "input must be NCHW, got " + shape_str(sx));
  require(sw.size() == 4, "conv_transpose2d", "weight must be [in,out,K,K], got " + shape_str(sw));
  require(sw[2] == sw[3], "conv_transpose2d", "kernel must be square");
  require(sx[1] == sw[0], "conv_transpose2d",
          "channel mismatch: input " + shape_str(sx) + " vs weight " + shape_str(sw));
  require(stride == 1 || stride == 2, "conv_transpose2d", "stride must be 1 or 2");
  require(padding >= 0, "conv_transpose2d", "padding must be >= 0");
  require(output_padding >= 0 && output_padding < stride, "conv_transpose2d",
          "output_padding must be in [0, stride)");
  require(at(bias).shape == Shape{sw[1]}, "conv_transpose2d", "bias must have shape [out_channels]");
  const auto g = convt_geom(sx, sw, stride, padding, output_padding);
  require(g.out_h >= 1 && g.out_w >= 1, "conv_transpose2d", "output would be empty");
  Node n;
  n.kind = OpKind::kConvTranspose2d;
  n.inputs = {x, w, bias};
  n.attrs.stride = stride;
  n.attrs.padding = padding;
  n.attrs.output_padding = output_padding;
  n.shape = {sx[0], g.out_c, g.out_h, g.out_w};
  return add_node(std::move(n));
}

NodeId Graph::max_pool2x2(NodeId x) {
  check_id(x);
  const Shape& sx = at(x).shape;
  require(sx.size() == 4, "max_pool2x2", "input must be NCHW");
  require(sx[2] % 2 == 0 && sx[3] % 2 == 0, "max_pool2x2",
          "spatial dims must be even, got " + shape_str(sx));
  Node n;
  n.kind = OpKind::kMaxPool2x2;
  n.inputs = {x};
  n.shape = {sx[0], sx[1], sx[2] / 2, sx[3] / 2};
  return add_node(std::move(n));
}

NodeId Graph::instance_norm(NodeId x, NodeId gain, NodeId bias, double epsilon) {
  check_id(x);
  check_id(gain);
  check_id(bias);
  const Shape& sx = at(x).shape;
  require(sx.size() == 4, "instance_norm", "input must be NCHW");
  require(at(gain).shape == Shape{sx[1]} && at(bias).shape == Shape{sx[1]}, "instance_norm",
          "gain/bias must have shape [channels]");
  require(epsilon > 0, "instance_norm", "epsilon must be positive");
  Node n;
  n.kind = OpKind::kInstanceNorm;
  n.inputs = {x, gain, bias};
  n.attrs.epsilon = epsilon;
  n.shape = sx;
  return add_node(std::move(n));
}

NodeId Graph::softmax_cross_entropy(NodeId logits, std::vector<int64_t> labels) {
  check_id(logits);
  const Shape& s = at(logits).shape;
  require(s.size() == 2, "softmax_cross_entropy", "logits must be [N,C]");
  require(static_cast<int64_t>(labels.size()) == s[0], "softmax_cross_entropy",
          "label count must equal batch size");
  for (int64_t y : labels) {
    require(y >= 0 && y < s[1], "softmax_cross_entropy",
            "label " + std::to_string(y) + " out of range [0," + std::to_string(s[1]) + ")");
  }
  Node n;
  n.kind = OpKind::kSoftmaxCrossEntropy;
  n.inputs = {logits};
  n.attrs.labels = std::move(labels);
  n.shape = {};
  return add_node(std::move(n));
}

NodeId Graph::l1_loss(NodeId a, NodeId b) {
  check_id(a);
  check_id(b);
  require(same_shape(at(a).shape, at(b).shape), "l1_loss",
          "shape mismatch " + shape_str(at(a).shape) + " vs " + shape_str(at(b).shape));
  Node n;
  n.kind = OpKind::kL1Loss;
  n.inputs = {a, b};
  n.shape = {};
  return add_node(std::move(n));
}

NodeId Graph::cosine_cost(NodeId fa, NodeId fb) {
  check_id(fa);
  check_id(fb);
  const Shape& sa = at(fa).shape;
  const Shape& sb = at(fb).shape;
  require(sa.size() == 2 && sb.size() == 2, "cosine_cost", "features must be rank-2");
  require(sa[1] == sb[1], "cosine_cost",
          "feature dims disagree: " + shape_str(sa) + " vs " + shape_str(sb));
  Node n;
  n.kind = OpKind::kCosineCost;
  n.inputs = {fa, fb};
  n.shape = {sa[0], sb[0]};
  return add_node(std::move(n));
}

NodeId Graph::global_avg_pool(NodeId x) {
  check_id(x);
  const Shape& sx = at(x).shape;
  require(sx.size() == 4, "global_avg_pool", "input must be NCHW");
  Node n;
  n.kind = OpKind::kGlobalAvgPool;
  n.inputs = {x};
  n.shape = {sx[0], sx[1]};
  return add_node(std::move(n));
}

// ---------------------------------------------------------------------------
// forward evaluation
// ---------------------------------------------------------------------------

namespace {
constexpr double kCosineNormFloor = 1e-12;
}

void Graph::eval_node(NodeId id) {
  Node& n = at(id);
  auto in_val = [&](size_t i) -> const Tensor& { return at(n.inputs[i]).value; };

  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kParameter:
      if (!n.has_value) {
        throw std::runtime_error("graph: leaf '" + n.name + "' has no bound value");
      }
      return;  // value already present
    case OpKind::kConstant:
      return;
    default:
      break;
  }

  const int64_t out_n = shape_numel(n.shape);
  std::vector<double> out(static_cast<size_t>(out_n));

  switch (n.kind) {
    case OpKind::kAdd: {
      const double* a = in_val(0).data();
      const double* b = in_val(1).data();
      for (int64_t i = 0; i < out_n; ++i) out[i] = a[i] + b[i];
      break;
    }
    case OpKind::kSub: {
      const double* a = in_val(0).data();
      const double* b = in_val(1).data();
      for (int64_t i = 0; i < out_n; ++i) out[i] = a[i] - b[i];
      break;
    }
    case OpKind::kMul: {
      const double* a = in_val(0).data();
      const double* b = in_val(1).data();
      for (int64_t i = 0; i < out_n; ++i) out[i] = a[i] * b[i];
      break;
    }
    case OpKind::kScalarMul: {
      const double* a = in_val(0).data();
      for (int64_t i = 0; i < out_n; ++i) out[i] = n.attrs.scalar * a[i];
      break;
    }
    case OpKind::kMatMul: {
      const Shape& sa = in_val(0).shape();
      const Shape& sb = in_val(1).shape();
      kernels::gemm_nn(sa[0], sb[1], sa[1], in_val(0).data(), in_val(1).data(), out.data(), false);
      break;
    }
    case OpKind::kRelu: {
      const double* a = in_val(0).data();
      for (int64_t i = 0; i < out_n; ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
      break;
    }
    case OpKind::kTanh: {
      const double* a = in_val(0).data();
      for (int64_t i = 0; i < out_n; ++i) out[i] = std::tanh(a[i]);
      break;
    }
    case OpKind::kSum: {
      const double* a = in_val(0).data();
      double acc = 0.0;
      for (int64_t i = 0; i < in_val(0).numel(); ++i) acc += a[i];
      out[0] = acc;
      break;
    }
    case OpKind::kMean: {
      const double* a = in_val(0).data();
      double acc = 0.0;
      const int64_t m = in_val(0).numel();
      for (int64_t i = 0; i < m; ++i) acc += a[i];
      out[0] = acc / static_cast<double>(m);
      break;
    }
    case OpKind::kReshape: {
      n.value = in_val(0).reshaped(n.shape);
      n.has_value = true;
      if (!n.value.all_finite()) {
        throw std::runtime_error(std::string("graph: op ") + op_name(n.kind) + " (node " +
                                 std::to_string(id) + ") produced non-finite values");
      }
      return;
    }
    case OpKind::kConcatChannel: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      const int64_t N = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
      for (int64_t s = 0; s < N; ++s) {
        std::memcpy(out.data() + s * (ca + cb) * hw, a.data() + s * ca * hw,
                    static_cast<size_t>(ca * hw) * sizeof(double));
        std::memcpy(out.data() + (s * (ca + cb) + ca) * hw, b.data() + s * cb * hw,
                    static_cast<size_t>(cb * hw) * sizeof(double));
      }
      break;
    }
    case OpKind::kBroadcastTo: {
      const Tensor& a = in_val(0);
      const auto strides = broadcast_strides(a.shape(), n.shape, "broadcast_to");
      const size_t r = n.shape.size();
      std::vector<int64_t> idx(r, 0);
      const double* src = a.data();
      for (int64_t o = 0; o < out_n; ++o) {
        int64_t off = 0;
        for (size_t d = 0; d < r; ++d) off += idx[d] * strides[d];
        out[static_cast<size_t>(o)] = src[off];
        for (int64_t d = static_cast<int64_t>(r) - 1; d >= 0; --d) {
          const auto ud = static_cast<size_t>(d);
          if (++idx[ud] < n.shape[ud]) break;
          idx[ud] = 0;
        }
      }
      break;
    }
    case OpKind::kConv2d: {
      const auto g = conv_geom(in_val(0).shape(), in_val(1).shape(), n.attrs.stride, n.attrs.padding);
      kernels::conv2d_forward(in_val(0).data(), in_val(1).data(), in_val(2).data(), out.data(),
                              in_val(0).dim(0), g);
      break;
    }
    case OpKind::kConvTranspose2d: {
      const auto g = convt_geom(in_val(0).shape(), in_val(1).shape(), n.attrs.stride,
                                n.attrs.padding, n.attrs.output_padding);
      kernels::conv_transpose2d_forward(in_val(0).data(), in_val(1).data(), in_val(2).data(),
                                        out.data(), in_val(0).dim(0), g);
      break;
    }
    case OpKind::kMaxPool2x2: {
      const Tensor& x = in_val(0);
      const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
      const int64_t oh = H / 2, ow = W / 2;
      const double* src = x.data();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const double* plane = src + nc * H * W;
        double* dst = out.data() + nc * oh * ow;
        for (int64_t i = 0; i < oh; ++i) {
          for (int64_t j = 0; j < ow; ++j) {
            // row-major window scan; strict > keeps the first max on ties
            double best = plane[(2 * i) * W + 2 * j];
            if (plane[(2 * i) * W + 2 * j + 1] > best) best = plane[(2 * i) * W + 2 * j + 1];
            if (plane[(2 * i + 1) * W + 2 * j] > best) best = plane[(2 * i + 1) * W + 2 * j];
            if (plane[(2 * i + 1) * W + 2 * j + 1] > best) best = plane[(2 * i + 1) * W + 2 * j + 1];
            dst[i * ow + j] = best;
          }
        }
      }
      break;
    }
    case OpKind::kInstanceNorm: {
      const Tensor& x = in_val(0);
      const double* gain = in_val(1).data();
      const double* bias = in_val(2).data();
      const int64_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
      const double* src = x.data();
      for (int64_t s = 0; s < N; ++s) {
        for (int64_t c = 0; c < C; ++c) {
          const double* p = src + (s * C + c) * hw;
          double* q = out.data() + (s * C + c) * hw;
          double mu = 0.0;
          for (int64_t i = 0; i < hw; ++i) mu += p[i];
          mu /= static_cast<double>(hw);
          double var = 0.0;
          for (int64_t i = 0; i < hw; ++i) var += (p[i] - mu) * (p[i] - mu);
          var /= static_cast<double>(hw);
          const double inv = 1.0 / std::sqrt(var + n.attrs.epsilon);
          const double g = gain[c], b = bias[c];
          for (int64_t i = 0; i < hw; ++i) q[i] = g * ((p[i] - mu) * inv) + b;
        }
      }
      break;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      const Tensor& logits = in_val(0);
      const int64_t N = logits.dim(0), C = logits.dim(1);
      const double* l = logits.data();
      double acc = 0.0;
      for (int64_t s = 0; s < N; ++s) {
        const double* row = l + s * C;
        double m = row[0];
        for (int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
        double z = 0.0;
        for (int64_t c = 0; c < C; ++c) z += std::exp(row[c] - m);
        acc += std::log(z) - (row[n.attrs.labels[static_cast<size_t>(s)]] - m);
      }
      out[0] = acc / static_cast<double>(N);
      break;
    }
    case OpKind::kL1Loss: {
      const double* a = in_val(0).data();
      const double* b = in_val(1).data();
      const int64_t m = in_val(0).numel();
      double acc = 0.0;
      for (int64_t i = 0; i < m; ++i) acc += std::abs(a[i] - b[i]);
      out[0] = acc / static_cast<double>(m);
      break;
    }
    case OpKind::kCosineCost: {
      const Tensor& fa = in_val(0);
      const Tensor& fb = in_val(1);
      const int64_t na = fa.dim(0), nb = fb.dim(0), d = fa.dim(1);
      const double* A = fa.data();
      const double* B = fb.data();
      for (int64_t i = 0; i < na; ++i) {
        const double* u = A + i * d;
        double nu = 0.0;
        for (int64_t k = 0; k < d; ++k) nu += u[k] * u[k];
        nu = std::max(std::sqrt(nu), kCosineNormFloor);
        for (int64_t j = 0; j < nb; ++j) {
          const double* v = B + j * d;
          double nv = 0.0, dot = 0.0;
          for (int64_t k = 0; k < d; ++k) {
            nv += v[k] * v[k];
            dot += u[k] * v[k];
          }
          nv = std::max(std::sqrt(nv), kCosineNormFloor);
          out[static_cast<size_t>(i * nb + j)] = 1.0 - dot / (nu * nv);
        }
      }
      break;
    }
    case OpKind::kGlobalAvgPool: {
      const Tensor& x = in_val(0);
      const int64_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
      const double* src = x.data();
      for (int64_t i = 0; i < nc; ++i) {
        double acc = 0.0;
        for (int64_t k = 0; k < hw; ++k) acc += src[i * hw + k];
        out[static_cast<size_t>(i)] = acc / static_cast<double>(hw);
      }
      break;
    }
    default:
      throw std::logic_error("graph: eval dispatch missed op");
  }

  n.value = Tensor::from(n.shape, std::move(out));
  n.has_value = true;
  if (!n.value.all_finite()) {
    throw std::runtime_error(std::string("graph: op ") + op_name(n.kind) + " (node " +
                             std::to_string(id) + ") produced non-finite values");
  }
}

// ---------------------------------------------------------------------------
// execution surface
// ---------------------------------------------------------------------------

void Graph::mark_output(NodeId id, const std::string& name) {
  check_id(id);
  outputs_.emplace_back(name, id);
}

void Graph::bind(const std::string& name, Tensor value) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::invalid_argument("graph: no leaf named " + name);
  Node& n = at(it->second);
  if (n.kind != OpKind::kInput) throw std::invalid_argument("graph: " + name + " is not an input");
  if (!same_shape(n.shape, value.shape())) {
    throw std::invalid_argument("graph: input " + name + " expects " + shape_str(n.shape) +
                                ", got " + shape_str(value.shape()));
  }
  n.value = std::move(value);
  n.has_value = true;
}

std::map<std::string, Tensor> Graph::execute(const std::map<std::string, Tensor>& inputs) {
  for (const auto& [name, value] : inputs) bind(name, value);
  re_execute();
  std::map<std::string, Tensor> named;
  for (const auto& [name, id] : outputs_) named[name] = at(id).value;
  return named;
}

void Graph::re_execute() {
  for (NodeId id = 0; id < static_cast<NodeId>(nodes_.size()); ++id) eval_node(id);
  executed_ = true;
}

const Tensor& Graph::value(NodeId id) const {
  check_id(id);
  const Node& n = at(id);
  if (!n.has_value) {
    throw std::runtime_error(std::string("graph: node ") + std::to_string(id) + " (" +
                             op_name(n.kind) + ") has no value; run execute() first");
  }
  return n.value;
}

Tensor Graph::grad(NodeId id) const {
  check_id(id);
  const Node& n = at(id);
  if (n.grad.empty()) return Tensor::zeros(n.shape.empty() ? Shape{} : n.shape);
  return Tensor::from(n.shape, n.grad);
}

void Graph::set_param_value(const std::string& name, Tensor v) {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::invalid_argument("graph: no parameter named " + name);
  Node& n = at(it->second);
  if (n.kind == OpKind::kInput) {
    bind(name, std::move(v));
    return;
  }
  if (!same_shape(n.shape, v.shape())) {
    throw std::invalid_argument("graph: parameter " + name + " expects " + shape_str(n.shape));
  }
  n.value = std::move(v);
  n.has_value = true;
}

NodeId Graph::node_of(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw std::invalid_argument("graph: no leaf named " + name);
  return it->second;
}

const Shape& Graph::node_shape(NodeId id) const {
  check_id(id);
  return at(id).shape;
}

bool Graph::tracks_grad(NodeId id) const {
  check_id(id);
  return at(id).needs_grad;
}

std::vector<std::string> Graph::param_names(bool trainable_only) const {
  std::vector<std::string> names;
  for (const auto& [name, id] : params_) {
    if (!trainable_only || at(id).trainable) names.push_back(name);
  }
  return names;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

std::vector<double>& Graph::grad_buf(NodeId id) {
  Node& n = at(id);
  if (n.grad.empty()) n.grad.assign(static_cast<size_t>(shape_numel(n.shape)), 0.0);
  return n.grad;
}

void Graph::accumulate(NodeId id, const double* g, int64_t count) {
  auto& buf = grad_buf(id);
  for (int64_t i = 0; i < count; ++i) buf[static_cast<size_t>(i)] += g[i];
}

ParamSet Graph::backward(NodeId loss) {
  check_id(loss);
  const Node& ln = at(loss);
  if (shape_numel(ln.shape) != 1) {
    throw std::invalid_argument("backward: loss node must be scalar, got " + shape_str(ln.shape));
  }
  for (const Node& n : nodes_) {
    if (!n.has_value) {
      throw std::runtime_error("backward called before forward: node '" + n.name +
                               "' has no value");
    }
  }
  for (Node& n : nodes_) n.grad.clear();
  grad_buf(loss)[0] = 1.0;

  for (NodeId id = loss; id >= 0; --id) {
    Node& n = at(id);
    if (n.grad.empty() || !n.needs_grad) continue;
    backward_node(id);
  }
  backward_done_ = true;

  ParamSet grads;
  for (const auto& [name, id] : params_) {
    const Node& n = at(id);
    if (n.trainable && !n.grad.empty()) {
      grads.add(name, Tensor::from(n.shape, n.grad));
    } else {
      grads.add(name, Tensor::zeros(n.shape));
    }
  }
  return grads;
}

void Graph::backward_node(NodeId id) {
  Node& n = at(id);
  const double* g = n.grad.data();
  const int64_t gn = static_cast<int64_t>(n.grad.size());
  auto in_node = [&](size_t i) -> Node& { return at(n.inputs[i]); };
  auto in_val = [&](size_t i) -> const Tensor& { return at(n.inputs[i]).value; };
  auto wants = [&](size_t i) { return in_node(i).needs_grad; };

  switch (n.kind) {
    case OpKind::kInput:
    case OpKind::kConstant:
    case OpKind::kParameter:
      return;  // leaves absorb
    case OpKind::kAdd: {
      if (wants(0)) accumulate(n.inputs[0], g, gn);
      if (wants(1)) accumulate(n.inputs[1], g, gn);
      return;
    }
    case OpKind::kSub: {
      if (wants(0)) accumulate(n.inputs[0], g, gn);
      if (wants(1)) {
        auto& buf = grad_buf(n.inputs[1]);
        for (int64_t i = 0; i < gn; ++i) buf[static_cast<size_t>(i)] -= g[i];
      }
      return;
    }
    case OpKind::kMul: {
      const double* a = in_val(0).data();
      const double* b = in_val(1).data();
      if (wants(0)) {
        auto& buf = grad_buf(n.inputs[0]);
        for (int64_t i = 0; i < gn; ++i) buf[static_cast<size_t>(i)] += g[i] * b[i];
      }
      if (wants(1)) {
        auto& buf = grad_buf(n.inputs[1]);
        for (int64_t i = 0; i < gn; ++i) buf[static_cast<size_t>(i)] += g[i] * a[i];
      }
      return;
    }
    case OpKind::kScalarMul: {
      if (wants(0)) {
        auto& buf = grad_buf(n.inputs[0]);
        for (int64_t i = 0; i < gn; ++i) buf[static_cast<size_t>(i)] += n.attrs.scalar * g[i];
      }
      return;
    }
    case OpKind::kMatMul: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
      if (wants(0)) kernels::gemm_nt(M, K, N, g, b.data(), grad_buf(n.inputs[0]).data(), true);
      if (wants(1)) kernels::gemm_tn(K, N, M, a.data(), g, grad_buf(n.inputs[1]).data(), true);
      return;
    }
    case OpKind::kRelu: {
      if (wants(0)) {
        const double* x = in_val(0).data();
        auto& buf = grad_buf(n.inputs[0]);
        for (int64_t i = 0; i < gn; ++i) {
          if (x[i] > 0.0) buf[static_cast<size_t>(i)] += g[i];
        }
      }
      return;
    }
    case OpKind::kTanh: {
      if (wants(0)) {
        const double* y = n.value.data();
        auto& buf = grad_buf(n.inputs[0]);
        for (int64_t i = 0; i < gn; ++i) buf[static_cast<size_t>(i)] += g[i] * (1.0 - y[i] * y[i]);
      }
      return;
    }
    case OpKind::kSum: {
      if (wants(0)) {
        const double up = g[0];
        auto& buf = grad_buf(n.inputs[0]);
        for (auto& v : buf) v += up;
      }
      return;
    }
    case OpKind::kMean: {
      if (wants(0)) {
        auto& buf = grad_buf(n.inputs[0]);
        const double up = g[0] / static_cast<double>(buf.size());
        for (auto& v : buf) v += up;
      }
      return;
    }
    case OpKind::kReshape: {
      if (wants(0)) accumulate(n.inputs[0], g, gn);
      return;
    }
    case OpKind::kConcatChannel: {
      const Tensor& a = in_val(0);
      const Tensor& b = in_val(1);
      const int64_t N = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
      if (wants(0)) {
        auto& buf = grad_buf(n.inputs[0]);
        for (int64_t s = 0; s < N; ++s) {
          const double* src = g + s * (ca + cb) * hw;
          double* dst = buf.data() + s * ca * hw;
          for (int64_t i = 0; i < ca * hw; ++i) dst[i] += src[i];
        }
      }
      if (wants(1)) {
        auto& buf = grad_buf(n.inputs[1]);
        for (int64_t s = 0; s < N; ++s) {
          const double* src = g + (s * (ca + cb) + ca) * hw;
          double* dst = buf.data() + s * cb * hw;
          for (int64_t i = 0; i < cb * hw; ++i) dst[i] += src[i];
        }
      }
      return;
    }
    case OpKind::kBroadcastTo: {
      if (wants(0)) {
        const auto strides = broadcast_strides(in_val(0).shape(), n.shape, "broadcast_to");
        const size_t r = n.shape.size();
        std::vector<int64_t> idx(r, 0);
        auto& buf = grad_buf(n.inputs[0]);
        for (int64_t o = 0; o < gn; ++o) {
          int64_t off = 0;
          for (size_t d = 0; d < r; ++d) off += idx[d] * strides[d];
          buf[static_cast<size_t>(off)] += g[o];
          for (int64_t d = static_cast<int64_t>(r) - 1; d >= 0; --d) {
            const auto ud = static_cast<size_t>(d);
            if (++idx[ud] < n.shape[ud]) break;
            idx[ud] = 0;
          }
        }
      }
      return;
    }
    case OpKind::kConv2d: {
      const auto geom =
          conv_geom(in_val(0).shape(), in_val(1).shape(), n.attrs.stride, n.attrs.padding);
      double* dx = wants(0) ? grad_buf(n.inputs[0]).data() : nullptr;
      double* dw = wants(1) ? grad_buf(n.inputs[1]).data() : nullptr;
      double* db = wants(2) ? grad_buf(n.inputs[2]).data() : nullptr;
      kernels::conv2d_backward(in_val(0).data(), in_val(1).data(), g, dx, dw, db, in_val(0).dim(0),
                               geom);
      return;
    }
    case OpKind::kConvTranspose2d: {
      const auto geom = convt_geom(in_val(0).shape(), in_val(1).shape(), n.attrs.stride,
                                   n.attrs.padding, n.attrs.output_padding);
      double* dx = wants(0) ? grad_buf(n.inputs[0]).data() : nullptr;
      double* dw = wants(1) ? grad_buf(n.inputs[1]).data() : nullptr;
      double* db = wants(2) ? grad_buf(n.inputs[2]).data() : nullptr;
      kernels::conv_transpose2d_backward(in_val(0).data(), in_val(1).data(), g, dx, dw, db,
                                         in_val(0).dim(0), geom);
      return;
    }
    case OpKind::kMaxPool2x2: {
      if (wants(0)) {
        const Tensor& x = in_val(0);
        const int64_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
        const int64_t oh = H / 2, ow = W / 2;
        const double* src = x.data();
        auto& buf = grad_buf(n.inputs[0]);
        for (int64_t nc = 0; nc < NC; ++nc) {
          const double* plane = src + nc * H * W;
          double* dst = buf.data() + nc * H * W;
          const double* gp = g + nc * oh * ow;
          for (int64_t i = 0; i < oh; ++i) {
            for (int64_t j = 0; j < ow; ++j) {
              int64_t best = (2 * i) * W + 2 * j;
              if (plane[(2 * i) * W + 2 * j + 1] > plane[best]) best = (2 * i) * W + 2 * j + 1;
              if (plane[(2 * i + 1) * W + 2 * j] > plane[best]) best = (2 * i + 1) * W + 2 * j;
              if (plane[(2 * i + 1) * W + 2 * j + 1] > plane[best])
                best = (2 * i + 1) * W + 2 * j + 1;
              dst[best] += gp[i * ow + j];
            }
          }
        }
      }
      return;
    }
    case OpKind::kInstanceNorm: {
      const Tensor& x = in_val(0);
      const double* gain = in_val(1).data();
      const int64_t N = x.dim(0), C = x.dim(1), hw = x.dim(2) * x.dim(3);
      const double* src = x.data();
      const double inv_hw = 1.0 / static_cast<double>(hw);
      double* dx = wants(0) ? grad_buf(n.inputs[0]).data() : nullptr;
      double* dgain = wants(1) ? grad_buf(n.inputs[1]).data() : nullptr;
      double* dbias = wants(2) ? grad_buf(n.inputs[2]).data() : nullptr;
      for (int64_t s = 0; s < N; ++s) {
        for (int64_t c = 0; c < C; ++c) {
          const double* p = src + (s * C + c) * hw;
          const double* gp = g + (s * C + c) * hw;
          double mu = 0.0;
          for (int64_t i = 0; i < hw; ++i) mu += p[i];
          mu *= inv_hw;
          double var = 0.0;
          for (int64_t i = 0; i < hw; ++i) var += (p[i] - mu) * (p[i] - mu);
          var *= inv_hw;
          const double inv = 1.0 / std::sqrt(var + n.attrs.epsilon);
          double sum_g = 0.0, sum_gx = 0.0;
          for (int64_t i = 0; i < hw; ++i) {
            sum_g += gp[i];
            sum_gx += gp[i] * ((p[i] - mu) * inv);
          }
          if (dbias) dbias[c] += sum_g;
          if (dgain) dgain[c] += sum_gx;
          if (dx) {
            const double k = gain[c] * inv;
            const double mg = sum_g * inv_hw;
            const double mgx = sum_gx * inv_hw;
            double* q = dx + (s * C + c) * hw;
            for (int64_t i = 0; i < hw; ++i) {
              const double xhat = (p[i] - mu) * inv;
              q[i] += k * (gp[i] - mg - xhat * mgx);
            }
          }
        }
      }
      return;
    }
    case OpKind::kSoftmaxCrossEntropy: {
      if (wants(0)) {
        const Tensor& logits = in_val(0);
        const int64_t N = logits.dim(0), C = logits.dim(1);
        const double* l = logits.data();
        const double up = g[0] / static_cast<double>(N);
        auto& buf = grad_buf(n.inputs[0]);
        for (int64_t s = 0; s < N; ++s) {
          const double* row = l + s * C;
          double m = row[0];
          for (int64_t c = 1; c < C; ++c) m = std::max(m, row[c]);
          double z = 0.0;
          for (int64_t c = 0; c < C; ++c) z += std::exp(row[c] - m);
          for (int64_t c = 0; c < C; ++c) {
            double p = std::exp(row[c] - m) / z;
            if (c == n.attrs.labels[static_cast<size_t>(s)]) p -= 1.0;
            buf[static_cast<size_t>(s * C + c)] += up * p;
          }
        }
      }
      return;
    }
    case OpKind::kL1Loss: {
      const double* a = in_val(0).data();
      const double* b = in_val(1).data();
      const int64_t m = in_val(0).numel();
      const double up = g[0] / static_cast<double>(m);
      // subgradient 0 at exact ties
      if (wants(0)) {
        auto& buf = grad_buf(n.inputs[0]);
        for (int64_t i = 0; i < m; ++i) {
          const double d = a[i] - b[i];
          if (d > 0.0) buf[static_cast<size_t>(i)] += up;
          else if (d < 0.0) buf[static_cast<size_t>(i)] -= up;
        }
      }
      if (wants(1)) {
        auto& buf = grad_buf(n.inputs[1]);
        for (int64_t i = 0; i < m; ++i) {
          const double d = a[i] - b[i];
          if (d > 0.0) buf[static_cast<size_t>(i)] -= up;
          else if (d < 0.0) buf[static_cast<size_t>(i)] += up;
        }
      }
      return;
    }
    case OpKind::kCosineCost: {
      const Tensor& fa = in_val(0);
      const Tensor& fb = in_val(1);
      const int64_t na = fa.dim(0), nb = fb.dim(0), d = fa.dim(1);
      const double* A = fa.data();
      const double* B = fb.data();
      double* dfa = wants(0) ? grad_buf(n.inputs[0]).data() : nullptr;
      double* dfb = wants(1) ? grad_buf(n.inputs[1]).data() : nullptr;
      if (!dfa && !dfb) return;
      // Precompute floored norms; the floor makes the norm locally constant,
      // so its derivative contribution is dropped when active.
      std::vector<double> norm_a(static_cast<size_t>(na)), norm_b(static_cast<size_t>(nb));
      std::vector<bool> floored_a(static_cast<size_t>(na)), floored_b(static_cast<size_t>(nb));
      for (int64_t i = 0; i < na; ++i) {
        double s = 0.0;
        for (int64_t k = 0; k < d; ++k) s += A[i * d + k] * A[i * d + k];
        s = std::sqrt(s);
        floored_a[static_cast<size_t>(i)] = s < kCosineNormFloor;
        norm_a[static_cast<size_t>(i)] = std::max(s, kCosineNormFloor);
      }
      for (int64_t j = 0; j < nb; ++j) {
        double s = 0.0;
        for (int64_t k = 0; k < d; ++k) s += B[j * d + k] * B[j * d + k];
        s = std::sqrt(s);
        floored_b[static_cast<size_t>(j)] = s < kCosineNormFloor;
        norm_b[static_cast<size_t>(j)] = std::max(s, kCosineNormFloor);
      }
      for (int64_t i = 0; i < na; ++i) {
        const double* u = A + i * d;
        const double nu = norm_a[static_cast<size_t>(i)];
        for (int64_t j = 0; j < nb; ++j) {
          const double gc = g[i * nb + j];
          if (gc == 0.0) continue;
          const double* v = B + j * d;
          const double nv = norm_b[static_cast<size_t>(j)];
          double dot = 0.0;
          for (int64_t k = 0; k < d; ++k) dot += u[k] * v[k];
          const double denom = nu * nv;
          if (dfa) {
            double* out = dfa + i * d;
            const double su = floored_a[static_cast<size_t>(i)] ? 0.0 : dot / (nu * nu);
            for (int64_t k = 0; k < d; ++k) out[k] += gc * (-(v[k] - su * u[k]) / denom);
          }
          if (dfb) {
            double* out = dfb + j * d;
            const double sv = floored_b[static_cast<size_t>(j)] ? 0.0 : dot / (nv * nv);
            for (int64_t k = 0; k < d; ++k) out[k] += gc * (-(u[k] - sv * v[k]) / denom);
          }
        }
      }
      return;
    }
    case OpKind::kGlobalAvgPool: {
      if (wants(0)) {
        const Tensor& x = in_val(0);
        const int64_t nc = x.dim(0) * x.dim(1), hw = x.dim(2) * x.dim(3);
        auto& buf = grad_buf(n.inputs[0]);
        const double inv = 1.0 / static_cast<double>(hw);
        for (int64_t i = 0; i < nc; ++i) {
          const double up = g[i] * inv;
          double* dst = buf.data() + i * hw;
          for (int64_t k = 0; k < hw; ++k) dst[k] += up;
        }
      }
      return;
    }
  }
}

}  // namespace l2aot
