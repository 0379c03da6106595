#pragma once
// Define-by-run computation graph with reverse-mode differentiation.
//
// Building an op only records it (and checks shapes); values are produced by
// forward(), which binds named placeholders and evaluates nodes in insertion
// order. Insertion order is a valid topological order because an op can only
// reference nodes that already exist.

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "prunefuse/tensor.hpp"

namespace prunefuse {

struct Var {
  int id = -1;
};

enum class OpKind {
  kConstant,
  kPlaceholder,
  kParameter,
  kMatmul,
  kAdd,
  kAddBias,
  kMul,
  kScale,
  kSoftmax,
  kLayerNorm,
  kGelu,
  kTanh,
  kEmbedding,
  kCrossEntropy,
  kKlDivergence,
  kReshape,
  kTranspose,
  kGatherRows,
  kSum,
  kMean,
};

const char* to_string(OpKind kind);

class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // Leaves.
  Var constant(Tensor value);
  Var placeholder(std::string name, Shape shape);
  // The graph keeps a pointer to `p`; backward() accumulates into p.grad.
  Var parameter(Parameter& p);

  // a: [..., m, k]. b: [k, n] (shared across leading dims) or [..., k, n] with
  // the same leading dims as a. transpose_b reads b as [.., n, k].
  Var matmul(Var a, Var b, bool transpose_b = false);
  Var add(Var a, Var b);
  // x: [..., n], bias: [n]
  Var add_bias(Var x, Var bias);
  Var mul(Var a, Var b);
  Var scale(Var x, double s);
  // Softmax over the last axis.
  Var softmax(Var x);
  // x: [B, H, Q, K], key_mask: [B, K] with 1 = attend, 0 = padding. Masked
  // keys get exactly zero probability.
  Var masked_softmax(Var x, Var key_mask);
  // Normalizes over the last axis; gamma/beta: [n].
  Var layernorm(Var x, Var gamma, Var beta, double eps = 1e-12);
  // tanh approximation
  Var gelu(Var x);
  Var tanh(Var x);
  // table: [V, d], ids: [N] (integral values) -> [N, d]
  Var embedding(Var table, Var ids);
  // logits: [B, C], labels: [B] -> [1], mean over the batch
  Var cross_entropy(Var logits, Var labels);
  // mean over the batch of KL(softmax(t/T) || softmax(s/T)); no gradient
  // flows into the teacher logits.
  Var kl_divergence(Var teacher_logits, Var student_logits, double temperature);
  Var reshape(Var x, Shape shape);
  Var transpose(Var x, std::vector<std::size_t> perm);
  // x: [N, d] -> [rows.size(), d]
  Var gather_rows(Var x, std::vector<std::size_t> rows);
  Var sum(Var x);
  Var mean(Var x);

  void forward(const std::map<std::string, Tensor>& inputs = {});
  // Inference mode: forward() frees each intermediate value once its last
  // consumer has run, except for retained nodes. value() on a freed node is
  // an error and backward() is refused.
  void release_intermediates(bool on) { release_ = on; }
  void retain(Var v);
  // Seeds d(loss)/d(loss) = 1 and accumulates into every reachable
  // Parameter::grad. Callers zero parameter grads beforehand.
  void backward(Var loss);

  bool evaluated() const { return evaluated_; }
  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  const Shape& shape(Var v) const;
  OpKind kind(Var v) const;
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    OpKind kind;
    std::vector<int> inputs;
    Shape shape;
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    bool retained = false;
    bool released = false;
    std::string name;
    Parameter* param = nullptr;
    std::function<void(Graph&, Node&)> forward;
    std::function<void(Graph&, Node&)> backward;
  };

  Var push(Node node);
  Node& at(Var v);
  const Node& at(Var v) const;
  Tensor& input_value(const Node& n, std::size_t i) { return nodes_[n.inputs[i]].value; }
  // Gradient buffer of an input, or nullptr when it does not need one.
  Tensor* input_grad(const Node& n, std::size_t i);

  std::vector<Node> nodes_;
  bool evaluated_ = false;
  bool release_ = false;
};

}  // namespace prunefuse
