#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "stockgan/common.hpp"

namespace stockgan::nn {

// Row-major dense matrix of doubles. Training runs in 64-bit precision so the
// finite-difference tolerances in the test suite can be tight.
class Tensor {
 public:
  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), v_(rows * cols, fill) {}

  static Tensor from_values(std::size_t rows, std::size_t cols, std::vector<double> values) {
    if (values.size() != rows * cols) {
      throw ValidationError("tensor value count does not match shape");
    }
    Tensor t;
    t.rows_ = rows;
    t.cols_ = cols;
    t.v_ = std::move(values);
    return t;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return v_.size(); }

  double& operator()(std::size_t r, std::size_t c) { return v_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v_[r * cols_ + c]; }

  double* data() { return v_.data(); }
  const double* data() const { return v_.data(); }
  double* row(std::size_t r) { return v_.data() + r * cols_; }
  const double* row(std::size_t r) const { return v_.data() + r * cols_; }

  auto begin() { return v_.begin(); }
  auto end() { return v_.end(); }
  auto begin() const { return v_.begin(); }
  auto end() const { return v_.end(); }

  bool same_shape(const Tensor& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const {
    for (double x : v_) {
      if (!std::isfinite(x)) return false;
    }
    return true;
  }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> v_;
};

// C += A * B^T.  A is (m x k), B is (n x k), C is (m x n).
// Both operands are contracted along their contiguous dimension.
inline void mm_nt_acc(Tensor& c, const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a.row(i);
    double* ci = c.row(i);
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b.row(j);
      double s = 0.0;
      for (std::size_t t = 0; t < k; ++t) s += ai[t] * bj[t];
      ci[j] += s;
    }
  }
}

// C += A * B.  A is (m x k), B is (k x n), C is (m x n).
inline void mm_nn_acc(Tensor& c, const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.row(i);
    for (std::size_t t = 0; t < k; ++t) {
      const double av = a(i, t);
      if (av == 0.0) continue;
      const double* bt = b.row(t);
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bt[j];
    }
  }
}

// C += A^T * B.  A is (m x k), B is (m x n), C is (k x n).
inline void mm_tn_acc(Tensor& c, const Tensor& a, const Tensor& b) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a.row(i);
    const double* bi = b.row(i);
    for (std::size_t t = 0; t < k; ++t) {
      const double av = ai[t];
      if (av == 0.0) continue;
      double* ct = c.row(t);
      for (std::size_t j = 0; j < n; ++j) ct[j] += av * bi[j];
    }
  }
}

enum class Activation { LeakyRelu, Tanh, Sigmoid, Identity };

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::LeakyRelu: return "leaky_relu";
    case Activation::Tanh: return "tanh";
    case Activation::Sigmoid: return "sigmoid";
    case Activation::Identity: return "identity";
  }
  return "?";
}

inline double act_value(Activation k, double slope, double x) {
  switch (k) {
    case Activation::LeakyRelu: return x >= 0.0 ? x : slope * x;
    case Activation::Tanh: return std::tanh(x);
    case Activation::Sigmoid: return 1.0 / (1.0 + std::exp(-x));
    case Activation::Identity: return x;
  }
  return x;
}

inline double act_grad(Activation k, double slope, double x) {
  switch (k) {
    case Activation::LeakyRelu: return x >= 0.0 ? 1.0 : slope;
    case Activation::Tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::Sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 - s);
    }
    case Activation::Identity: return 1.0;
  }
  return 1.0;
}

// Second derivative. LeakyReLU is treated as locally linear: zero everywhere
// away from the kink, which is exactly what the penalty pass needs.
inline double act_grad2(Activation k, double /*slope*/, double x) {
  switch (k) {
    case Activation::LeakyRelu: return 0.0;
    case Activation::Tanh: {
      const double t = std::tanh(x);
      return -2.0 * t * (1.0 - t * t);
    }
    case Activation::Sigmoid: {
      const double s = 1.0 / (1.0 + std::exp(-x));
      return s * (1.0 - s) * (1.0 - 2.0 * s);
    }
    case Activation::Identity: return 0.0;
  }
  return 0.0;
}

struct DenseLayer {
  Tensor weight;  // out x in
  Tensor bias;    // 1 x out
};

struct ActivationLayer {
  Activation kind = Activation::Identity;
  double negative_slope = 0.01;
};

struct DropoutLayer {
  double rate = 0.3;
};

using Layer = std::variant<DenseLayer, ActivationLayer, DropoutLayer>;

// Ordered stack of dense / activation / dropout layers. Adjacent dense
// dimensions are validated when layers are added and when checkpoints load.
class Sequential {
 public:
  Sequential& dense(std::size_t in, std::size_t out) {
    if (in == 0 || out == 0) throw ValidationError("dense layer dims must be positive");
    if (current_dim_ != 0 && current_dim_ != in) {
      throw ValidationError("dense layer input dim " + std::to_string(in) +
                            " does not match previous layer output dim " +
                            std::to_string(current_dim_));
    }
    DenseLayer d;
    d.weight = Tensor(out, in);
    d.bias = Tensor(1, out);
    layers_.push_back(std::move(d));
    if (input_dim_ == 0) input_dim_ = in;
    current_dim_ = out;
    return *this;
  }

  Sequential& activation(Activation kind, double negative_slope = 0.01) {
    if (kind == Activation::LeakyRelu && negative_slope <= 0.0) {
      throw ValidationError("leaky relu negative_slope must be positive");
    }
    layers_.push_back(ActivationLayer{kind, negative_slope});
    return *this;
  }

  Sequential& dropout(double rate) {
    if (rate < 0.0 || rate >= 1.0) throw ValidationError("dropout rate must be in [0, 1)");
    layers_.push_back(DropoutLayer{rate});
    return *this;
  }

  // Balanced-variance uniform init, seed-deterministic across layers in order.
  void init_params(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& l : layers_) {
      if (auto* d = std::get_if<DenseLayer>(&l)) {
        const double fan_in = static_cast<double>(d->weight.cols());
        const double fan_out = static_cast<double>(d->weight.rows());
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        std::uniform_real_distribution<double> u(-bound, bound);
        for (double& w : d->weight) w = u(rng);
        for (double& b : d->bias) b = 0.0;
      }
    }
  }

  std::size_t input_dim() const { return input_dim_; }
  std::size_t output_dim() const { return current_dim_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) {
      if (const auto* d = std::get_if<DenseLayer>(&l)) n += d->weight.size() + d->bias.size();
    }
    return n;
  }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (auto& l : layers_) {
      if (auto* d = std::get_if<DenseLayer>(&l)) {
        out.push_back(&d->weight);
        out.push_back(&d->bias);
      }
    }
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (const auto& l : layers_) {
      if (const auto* d = std::get_if<DenseLayer>(&l)) {
        out.push_back(&d->weight);
        out.push_back(&d->bias);
      }
    }
    return out;
  }

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

 private:
  std::vector<Layer> layers_;
  std::size_t input_dim_ = 0;
  std::size_t current_dim_ = 0;
};

enum class Mode { Train, Eval };

// Reverse-mode tape over whole-tensor operations. Values are computed eagerly;
// each op records a closure that scatters its upstream gradient to its inputs.
// The gradient-penalty pass expresses the critic's input gradient as tape ops
// (using activation_grad nodes), so one backward() over that extended graph
// yields exact second-order parameter gradients.
class Tape {
 public:
  using NodeId = std::uint32_t;

  void set_context(std::string ctx) { context_ = std::move(ctx); }

  NodeId leaf(Tensor value) { return push(std::move(value), nullptr, "leaf"); }

  const Tensor& value(NodeId id) const { return nodes_[id].value; }

  const Tensor& grad(NodeId id) const {
    if (grads_.empty()) throw ValidationError("tape backward() has not run");
    return grads_[id];
  }

  NodeId matmul_nt(NodeId a, NodeId w) {
    const Tensor& av = value(a);
    const Tensor& wv = value(w);
    if (av.cols() != wv.cols()) {
      throw ValidationError("matmul dim mismatch: batch has " + std::to_string(av.cols()) +
                            " columns, layer expects " + std::to_string(wv.cols()) +
                            (context_.empty() ? "" : " in " + context_));
    }
    Tensor y(av.rows(), wv.rows());
    mm_nt_acc(y, av, wv);
    return push(std::move(y), [a, w](Tape& t, NodeId out) {
      mm_nn_acc(t.grads_[a], t.grads_[out], t.value(w));
      mm_tn_acc(t.grads_[w], t.grads_[out], t.value(a));
    }, "matmul_nt");
  }

  NodeId matmul_nn(NodeId a, NodeId b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (av.cols() != bv.rows()) throw ValidationError("matmul_nn dim mismatch");
    Tensor y(av.rows(), bv.cols());
    mm_nn_acc(y, av, bv);
    return push(std::move(y), [a, b](Tape& t, NodeId out) {
      mm_nt_acc(t.grads_[a], t.grads_[out], t.value(b));
      mm_tn_acc(t.grads_[b], t.value(a), t.grads_[out]);
    }, "matmul_nn");
  }

  NodeId add_bias(NodeId x, NodeId b) {
    const Tensor& xv = value(x);
    const Tensor& bv = value(b);
    if (bv.rows() != 1 || bv.cols() != xv.cols()) throw ValidationError("bias dim mismatch");
    Tensor y = xv;
    for (std::size_t i = 0; i < y.rows(); ++i) {
      double* yi = y.row(i);
      const double* bb = bv.row(0);
      for (std::size_t j = 0; j < y.cols(); ++j) yi[j] += bb[j];
    }
    return push(std::move(y), [x, b](Tape& t, NodeId out) {
      const Tensor& dy = t.grads_[out];
      Tensor& dx = t.grads_[x];
      Tensor& db = t.grads_[b];
      for (std::size_t i = 0; i < dy.rows(); ++i) {
        const double* di = dy.row(i);
        double* xi = dx.row(i);
        double* bb = db.row(0);
        for (std::size_t j = 0; j < dy.cols(); ++j) {
          xi[j] += di[j];
          bb[j] += di[j];
        }
      }
    }, "add_bias");
  }

  NodeId activation(NodeId x, Activation kind, double slope) {
    const Tensor& xv = value(x);
    Tensor y = xv;
    for (double& v : y) v = act_value(kind, slope, v);
    return push(std::move(y), [x, kind, slope](Tape& t, NodeId out) {
      const Tensor& dy = t.grads_[out];
      const Tensor& xv = t.value(x);
      Tensor& dx = t.grads_[x];
      for (std::size_t i = 0; i < dy.size(); ++i) {
        dx.data()[i] += dy.data()[i] * act_grad(kind, slope, xv.data()[i]);
      }
    }, "activation");
  }

  // sigma'(x) as a forward value; its own derivative is sigma''(x).
  NodeId activation_grad(NodeId x, Activation kind, double slope) {
    const Tensor& xv = value(x);
    Tensor y = xv;
    for (double& v : y) v = act_grad(kind, slope, v);
    return push(std::move(y), [x, kind, slope](Tape& t, NodeId out) {
      const Tensor& dy = t.grads_[out];
      const Tensor& xv = t.value(x);
      Tensor& dx = t.grads_[x];
      for (std::size_t i = 0; i < dy.size(); ++i) {
        dx.data()[i] += dy.data()[i] * act_grad2(kind, slope, xv.data()[i]);
      }
    }, "activation_grad");
  }

  NodeId add(NodeId a, NodeId b) { return elementwise(a, b, EwOp::Add); }
  NodeId sub(NodeId a, NodeId b) { return elementwise(a, b, EwOp::Sub); }
  NodeId mul(NodeId a, NodeId b) { return elementwise(a, b, EwOp::Mul); }
  NodeId div(NodeId a, NodeId b) { return elementwise(a, b, EwOp::Div); }

  NodeId affine(NodeId a, double mul, double add) {
    Tensor y = value(a);
    for (double& v : y) v = mul * v + add;
    return push(std::move(y), [a, mul](Tape& t, NodeId out) {
      const Tensor& dy = t.grads_[out];
      Tensor& da = t.grads_[a];
      for (std::size_t i = 0; i < dy.size(); ++i) da.data()[i] += mul * dy.data()[i];
    }, "affine");
  }

  // Per-row L2 norm, (m x n) -> (m x 1). At a zero row the subgradient 0 is
  // used, so a zero input gradient contributes a flat penalty derivative.
  NodeId row_norm(NodeId a) {
    const Tensor& av = value(a);
    Tensor y(av.rows(), 1);
    for (std::size_t i = 0; i < av.rows(); ++i) {
      const double* ai = av.row(i);
      double s = 0.0;
      for (std::size_t j = 0; j < av.cols(); ++j) s += ai[j] * ai[j];
      y(i, 0) = std::sqrt(s);
    }
    return push(std::move(y), [a](Tape& t, NodeId out) {
      const Tensor& dy = t.grads_[out];
      const Tensor& yv = t.value(out);
      const Tensor& av = t.value(a);
      Tensor& da = t.grads_[a];
      for (std::size_t i = 0; i < av.rows(); ++i) {
        const double n = yv(i, 0);
        if (n == 0.0) continue;
        const double coef = dy(i, 0) / n;
        const double* ai = av.row(i);
        double* di = da.row(i);
        for (std::size_t j = 0; j < av.cols(); ++j) di[j] += coef * ai[j];
      }
    }, "row_norm");
  }

  // (1 x 1) scalar = factor * sum of all elements.
  NodeId sum_scaled(NodeId a, double factor) {
    const Tensor& av = value(a);
    double s = 0.0;
    for (double v : av) s += v;
    Tensor y(1, 1, factor * s);
    return push(std::move(y), [a, factor](Tape& t, NodeId out) {
      const double d = factor * t.grads_[out](0, 0);
      Tensor& da = t.grads_[a];
      for (double& v : da) v += d;
    }, "sum_scaled");
  }

  NodeId slice_cols(NodeId a, std::size_t begin, std::size_t count) {
    const Tensor& av = value(a);
    if (begin + count > av.cols()) throw ValidationError("slice_cols out of range");
    Tensor y(av.rows(), count);
    for (std::size_t i = 0; i < av.rows(); ++i) {
      const double* ai = av.row(i) + begin;
      double* yi = y.row(i);
      for (std::size_t j = 0; j < count; ++j) yi[j] = ai[j];
    }
    return push(std::move(y), [a, begin, count](Tape& t, NodeId out) {
      const Tensor& dy = t.grads_[out];
      Tensor& da = t.grads_[a];
      for (std::size_t i = 0; i < dy.rows(); ++i) {
        const double* di = dy.row(i);
        double* ai = da.row(i) + begin;
        for (std::size_t j = 0; j < count; ++j) ai[j] += di[j];
      }
    }, "slice_cols");
  }

  // Runs reverse accumulation from `root`. With no upstream tensor the root
  // must be scalar and is seeded with 1.
  void backward(NodeId root, const Tensor* upstream = nullptr) {
    grads_.assign(nodes_.size(), Tensor());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      grads_[i] = Tensor(nodes_[i].value.rows(), nodes_[i].value.cols());
    }
    if (upstream != nullptr) {
      if (!upstream->same_shape(nodes_[root].value)) {
        throw ValidationError("upstream gradient shape does not match output shape");
      }
      grads_[root] = *upstream;
    } else {
      if (nodes_[root].value.size() != 1) {
        throw ValidationError("backward without upstream requires a scalar root");
      }
      grads_[root](0, 0) = 1.0;
    }
    for (NodeId id = root + 1; id-- > 0;) {
      if (nodes_[id].back) nodes_[id].back(*this, id);
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::function<void(Tape&, NodeId)> back;
  };

  NodeId push(Tensor value, std::function<void(Tape&, NodeId)> back, const char* op) {
    if (!value.all_finite()) {
      throw NonFiniteError(std::string("non-finite value produced by op '") + op + "'" +
                           (context_.empty() ? "" : " in " + context_));
    }
    nodes_.push_back(Node{std::move(value), std::move(back)});
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  enum class EwOp { Add, Sub, Mul, Div };

  NodeId elementwise(NodeId a, NodeId b, EwOp op) {
    static const char* names[] = {"add", "sub", "mul", "div"};
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    if (!av.same_shape(bv)) {
      throw ValidationError(std::string(names[static_cast<int>(op)]) + ": shape mismatch");
    }
    Tensor y(av.rows(), av.cols());
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double x = av.data()[i], z = bv.data()[i];
      switch (op) {
        case EwOp::Add: y.data()[i] = x + z; break;
        case EwOp::Sub: y.data()[i] = x - z; break;
        case EwOp::Mul: y.data()[i] = x * z; break;
        case EwOp::Div: y.data()[i] = x / z; break;
      }
    }
    auto back = [a, b, op](Tape& t, NodeId out) {
      const Tensor& dy = t.grads_[out];
      const Tensor& av2 = t.value(a);
      const Tensor& bv2 = t.value(b);
      Tensor& da = t.grads_[a];
      Tensor& db = t.grads_[b];
      for (std::size_t i = 0; i < dy.size(); ++i) {
        const double d = dy.data()[i];
        switch (op) {
          case EwOp::Add:
            da.data()[i] += d;
            db.data()[i] += d;
            break;
          case EwOp::Sub:
            da.data()[i] += d;
            db.data()[i] -= d;
            break;
          case EwOp::Mul:
            da.data()[i] += d * bv2.data()[i];
            db.data()[i] += d * av2.data()[i];
            break;
          case EwOp::Div: {
            const double bb = bv2.data()[i];
            da.data()[i] += d / bb;
            db.data()[i] -= d * av2.data()[i] / (bb * bb);
            break;
          }
        }
      }
    };
    return push(std::move(y), std::move(back), names[static_cast<int>(op)]);
  }

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::string context_;
};

// Handles produced by appending a net's forward ops to a tape.
struct NetTrace {
  Tape::NodeId input = 0;
  Tape::NodeId output = 0;
  std::vector<Tape::NodeId> params;        // weight, bias per dense layer, in order
  std::vector<Tape::NodeId> layer_inputs;  // node feeding each layer
  Mode mode = Mode::Eval;
  bool dropout_active = false;
};

inline NetTrace append_net(Tape& tape, const Sequential& net, Tape::NodeId input, Mode mode,
                           std::uint64_t dropout_seed, const std::string& label) {
  NetTrace tr;
  tr.input = input;
  tr.mode = mode;
  std::mt19937_64 rng(dropout_seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tape::NodeId cur = input;
  std::size_t index = 0;
  for (const Layer& layer : net.layers()) {
    tr.layer_inputs.push_back(cur);
    if (const auto* d = std::get_if<DenseLayer>(&layer)) {
      tape.set_context(label + " layer " + std::to_string(index) + " (dense " +
                       std::to_string(d->weight.cols()) + "->" + std::to_string(d->weight.rows()) + ")");
      Tape::NodeId w = tape.leaf(d->weight);
      Tape::NodeId b = tape.leaf(d->bias);
      tr.params.push_back(w);
      tr.params.push_back(b);
      cur = tape.add_bias(tape.matmul_nt(cur, w), b);
    } else if (const auto* a = std::get_if<ActivationLayer>(&layer)) {
      tape.set_context(label + " layer " + std::to_string(index) + " (" +
                       activation_name(a->kind) + ")");
      cur = tape.activation(cur, a->kind, a->negative_slope);
    } else {
      const auto& dr = std::get<DropoutLayer>(layer);
      if (mode == Mode::Train && dr.rate > 0.0) {
        tape.set_context(label + " layer " + std::to_string(index) + " (dropout)");
        const Tensor& x = tape.value(cur);
        const double keep = 1.0 - dr.rate;
        Tensor mask(x.rows(), x.cols());
        for (double& v : mask) v = unit(rng) < keep ? 1.0 / keep : 0.0;
        cur = tape.mul(cur, tape.leaf(std::move(mask)));
        tr.dropout_active = true;
      }
    }
    ++index;
  }
  tape.set_context("");
  tr.output = cur;
  return tr;
}

// Appends the computation of d(sum of outputs)/d(input) as differentiable tape
// ops. For a critic with one output per row this is the per-sample input
// gradient. Requires a dropout-free trace: the penalty is defined on the
// deterministic critic.
inline Tape::NodeId append_input_grad(Tape& tape, const Sequential& net, const NetTrace& tr) {
  if (tr.dropout_active) {
    throw ValidationError("input-gradient graph requires an eval-mode (dropout-free) forward pass");
  }
  const Tensor& out = tape.value(tr.output);
  Tape::NodeId u = tape.leaf(Tensor(out.rows(), out.cols(), 1.0));
  const auto& layers = net.layers();
  // weight node ids per dense layer, in forward order
  std::vector<Tape::NodeId> dense_weight_nodes;
  for (std::size_t i = 0; i < tr.params.size(); i += 2) {
    dense_weight_nodes.push_back(tr.params[i]);
  }
  std::size_t dense_idx = dense_weight_nodes.size();
  for (std::size_t i = layers.size(); i-- > 0;) {
    if (std::holds_alternative<DenseLayer>(layers[i])) {
      --dense_idx;
      u = tape.matmul_nn(u, dense_weight_nodes[dense_idx]);
    } else if (const auto* a = std::get_if<ActivationLayer>(&layers[i])) {
      u = tape.mul(u, tape.activation_grad(tr.layer_inputs[i], a->kind, a->negative_slope));
    }
    // dropout layers are inactive in an eval trace
  }
  return u;
}

// One recorded forward pass: the spec-level (output, tape) pair.
struct ForwardPass {
  Tape tape;
  NetTrace trace;

  const Tensor& output() const { return tape.value(trace.output); }
};

inline ForwardPass forward(const Sequential& net, const Tensor& batch, Mode mode,
                           std::uint64_t dropout_seed = 0) {
  ForwardPass fp;
  Tape::NodeId in = fp.tape.leaf(batch);
  fp.trace = append_net(fp.tape, net, in, mode, dropout_seed, "net");
  return fp;
}

struct Gradients {
  std::vector<Tensor> params;  // aligned with Sequential::parameters()
  Tensor input;
};

inline Gradients backward(ForwardPass& fp, const Tensor& upstream) {
  fp.tape.backward(fp.trace.output, &upstream);
  Gradients g;
  g.params.reserve(fp.trace.params.size());
  for (Tape::NodeId id : fp.trace.params) g.params.push_back(fp.tape.grad(id));
  g.input = fp.tape.grad(fp.trace.input);
  return g;
}

struct PenaltyResult {
  double value = 0.0;
  std::vector<Tensor> param_grads;
};

// lambda * mean over rows of (||grad_x D(x_hat)||_2 - 1)^2, plus its exact
// parameter gradients via double backpropagation through the extended tape.
inline PenaltyResult input_grad_penalty_backward(const Sequential& net, const Tensor& xhat,
                                                 double lambda) {
  if (net.output_dim() != 1) {
    throw ValidationError("gradient penalty requires a net with one output per sample");
  }
  if (xhat.rows() == 0) throw ValidationError("gradient penalty batch is empty");
  Tape tape;
  Tape::NodeId in = tape.leaf(xhat);
  NetTrace tr = append_net(tape, net, in, Mode::Eval, 0, "critic");
  Tape::NodeId g = append_input_grad(tape, net, tr);
  Tape::NodeId nrm = tape.row_norm(g);
  Tape::NodeId diff = tape.affine(nrm, 1.0, -1.0);
  Tape::NodeId sq = tape.mul(diff, diff);
  Tape::NodeId pen = tape.sum_scaled(sq, lambda / static_cast<double>(xhat.rows()));
  tape.backward(pen);
  PenaltyResult r;
  r.value = tape.value(pen)(0, 0);
  r.param_grads.reserve(tr.params.size());
  for (Tape::NodeId id : tr.params) r.param_grads.push_back(tape.grad(id));
  return r;
}

// --- Optimizers -------------------------------------------------------------

struct AdamState {
  std::vector<Tensor> m, v;
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

inline AdamState make_adam_state(const std::vector<Tensor*>& params, double beta1, double beta2,
                                 double eps = 1e-8) {
  AdamState st;
  st.beta1 = beta1;
  st.beta2 = beta2;
  st.eps = eps;
  for (const Tensor* p : params) {
    st.m.emplace_back(p->rows(), p->cols());
    st.v.emplace_back(p->rows(), p->cols());
  }
  return st;
}

inline void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                      AdamState& st, double lr) {
  if (params.size() != grads.size() || params.size() != st.m.size()) {
    throw ValidationError("adam_step: parameter/gradient/state count mismatch");
  }
  st.step += 1;
  const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& theta = *params[p];
    const Tensor& g = grads[p];
    if (!theta.same_shape(g)) throw ValidationError("adam_step: gradient shape mismatch");
    Tensor& m = st.m[p];
    Tensor& v = st.v[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g.data()[i];
      m.data()[i] = st.beta1 * m.data()[i] + (1.0 - st.beta1) * gi;
      v.data()[i] = st.beta2 * v.data()[i] + (1.0 - st.beta2) * gi * gi;
      const double mhat = m.data()[i] / bc1;
      const double vhat = v.data()[i] / bc2;
      theta.data()[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
    }
  }
}

struct RmsPropState {
  std::vector<Tensor> avg;
  double alpha = 0.99;
  double eps = 1e-8;
};

inline RmsPropState make_rmsprop_state(const std::vector<Tensor*>& params, double alpha = 0.99,
                                       double eps = 1e-8) {
  RmsPropState st;
  st.alpha = alpha;
  st.eps = eps;
  for (const Tensor* p : params) st.avg.emplace_back(p->rows(), p->cols());
  return st;
}

inline void rmsprop_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                         RmsPropState& st, double lr) {
  if (params.size() != grads.size() || params.size() != st.avg.size()) {
    throw ValidationError("rmsprop_step: parameter/gradient/state count mismatch");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& theta = *params[p];
    const Tensor& g = grads[p];
    if (!theta.same_shape(g)) throw ValidationError("rmsprop_step: gradient shape mismatch");
    Tensor& avg = st.avg[p];
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g.data()[i];
      avg.data()[i] = st.alpha * avg.data()[i] + (1.0 - st.alpha) * gi * gi;
      theta.data()[i] -= lr * gi / (std::sqrt(avg.data()[i]) + st.eps);
    }
  }
}

// --- Serialization (GANM format family) -------------------------------------
//
// GANM file: magic "GANM", u32 version, u8 kind. Kind 0 holds one net block
// (this module); kind 1 holds a full model checkpoint (written by the gan
// module on top of the same net blocks).

inline constexpr std::uint32_t kGanmVersion = 1;
inline constexpr std::uint8_t kGanmKindNet = 0;
inline constexpr std::uint8_t kGanmKindModel = 1;

inline void write_net_block(std::ostream& os, const Sequential& net) {
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(net.layers().size()));
  for (const Layer& l : net.layers()) {
    if (const auto* d = std::get_if<DenseLayer>(&l)) {
      io::write_le<std::uint8_t>(os, 0);
      io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d->weight.rows()));
      io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d->weight.cols()));
    } else if (const auto* a = std::get_if<ActivationLayer>(&l)) {
      io::write_le<std::uint8_t>(os, 1);
      io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(a->kind));
      io::write_f64(os, a->negative_slope);
    } else {
      io::write_le<std::uint8_t>(os, 2);
      io::write_f64(os, std::get<DropoutLayer>(l).rate);
    }
  }
  for (const Layer& l : net.layers()) {
    if (const auto* d = std::get_if<DenseLayer>(&l)) {
      for (double v : d->weight) io::write_f64(os, v);
      for (double v : d->bias) io::write_f64(os, v);
    }
  }
}

inline Sequential read_net_block(std::istream& is) {
  Sequential net;
  const auto n_layers = io::read_le<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const auto tag = io::read_le<std::uint8_t>(is);
    if (tag == 0) {
      const auto out = io::read_le<std::uint32_t>(is);
      const auto in = io::read_le<std::uint32_t>(is);
      net.dense(in, out);
    } else if (tag == 1) {
      const auto kind = io::read_le<std::uint8_t>(is);
      if (kind > 3) throw FormatError("unknown activation kind in net block");
      const double slope = io::read_f64(is);
      net.activation(static_cast<Activation>(kind), slope);
    } else if (tag == 2) {
      net.dropout(io::read_f64(is));
    } else {
      throw FormatError("unknown layer tag in net block");
    }
  }
  for (Layer& l : net.layers()) {
    if (auto* d = std::get_if<DenseLayer>(&l)) {
      for (double& v : d->weight) v = io::read_f64(is);
      for (double& v : d->bias) v = io::read_f64(is);
    }
  }
  return net;
}

inline void write_ganm_header(std::ostream& os, std::uint8_t kind) {
  os.write("GANM", 4);
  io::write_le<std::uint32_t>(os, kGanmVersion);
  io::write_le<std::uint8_t>(os, kind);
}

inline std::uint8_t read_ganm_header(std::istream& is) {
  char magic[4];
  io::read_bytes(is, magic, 4);
  if (std::string(magic, 4) != "GANM") throw FormatError("bad magic: not a GANM file");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kGanmVersion) {
    throw FormatError("unsupported GANM version " + std::to_string(version));
  }
  return io::read_le<std::uint8_t>(is);
}

inline void save_sequential(const std::string& path, const Sequential& net) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open for writing: " + path);
  write_ganm_header(f, kGanmKindNet);
  write_net_block(f, net);
  if (!f) throw FormatError("write failed: " + path);
}

inline Sequential load_sequential(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ValidationError("cannot open for reading: " + path);
  if (read_ganm_header(f) != kGanmKindNet) {
    throw FormatError("GANM file does not hold a single net: " + path);
  }
  return read_net_block(f);
}

}  // namespace stockgan::nn
