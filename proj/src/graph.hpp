#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace lbsac {

// Reverse-mode autodiff over rank-2 float32 tensors.
//
// A Graph owns its nodes; Values are handles into it. backward() does not
// accumulate numeric adjoints directly: it emits the adjoint computation as
// new graph nodes built from the same primitives, so gradients are
// themselves differentiable (grad-of-grad falls out of running backward on
// a scalar assembled from gradient nodes). Forward evaluation is float32;
// a float64 shadow path exists for gradient checking only.
//
// A graph is confined to one thread for its lifetime. Graphs are built per
// use and discarded; there is no persistent tape.

class Graph;

struct Value {
  int id = -1;
  const Graph* owner = nullptr;
  bool valid() const { return id >= 0 && owner != nullptr; }
};

struct GraphError : std::runtime_error {
  explicit GraphError(const std::string& what) : std::runtime_error(what) {}
};

enum class Op : std::uint8_t {
  kLeaf,
  kMatMul,      // flags ta/tb fold the transposed variants into one op
  kTranspose,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kScale,       // x * c0
  kAddScalar,   // x + c0
  kTanh,
  kRelu,
  kExp,
  kLog,
  kSquare,
  kSqrt,
  kClamp,       // [c0, c1]
  kSum,         // axis -1 = all, 0 = down rows, 1 = across cols
  kMean,
  kMinAxis,
  kBroadcast,
  kSlice,       // axis, i0 = start, i1 = len
  kPad,         // axis, i0 = before, i1 = after (zero fill)
  kConcat,
  kGatherRows,
  kScatterRows,  // adjoint of gather: scatter-add rows into i0 rows
  kGtZeroMask,   // 1 where x > 0 (relu subgradient: 0 at the kink)
  kInsideMask,   // 1 where c0 < x < c1 (clamp passes gradient strictly inside)
  kMinMask,      // one-hot of first minimum along axis
};

constexpr int kAxisAll = -1;

class Graph {
 public:
  Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // --- leaves ---
  Value leaf(const Tensor& init);
  Value leaf(int rows, int cols);  // unbound; must be set before evaluation
  Value constant(const Tensor& t) { return leaf(t); }
  Value constant_scalar(float v) { return leaf(Tensor::scalar(v)); }
  void set_leaf(Value v, const Tensor& t);
  bool is_leaf(Value v) const;

  // --- primitive ops ---
  Value matmul(Value a, Value b, bool ta = false, bool tb = false);
  Value transpose(Value a);
  Value add(Value a, Value b);
  Value sub(Value a, Value b);
  Value mul(Value a, Value b);
  Value div(Value a, Value b);
  Value scale(Value a, double c);
  Value add_scalar(Value a, double c);
  Value tanh(Value a);
  Value relu(Value a);
  Value exp(Value a);
  Value log(Value a);
  Value square(Value a);
  Value sqrt(Value a);
  Value clamp(Value a, double lo, double hi);
  Value sum(Value a, int axis = kAxisAll);
  Value mean(Value a, int axis = kAxisAll);
  Value min_axis(Value a, int axis);
  Value broadcast_to(Value a, int rows, int cols);
  Value slice(Value a, int axis, int start, int len);
  Value concat(Value a, Value b, int axis);
  Value gather_rows(Value a, std::vector<int> rows);

  // --- composites ---
  // Per-row normalization: (x - mean) / sqrt(var + eps), no affine.
  // Zero-variance rows come out as zeros.
  Value layernorm(Value a, double eps = 1e-5);
  Value neg(Value a) { return scale(a, -1.0); }

  // --- evaluation ---
  const Tensor& eval(Value v);
  // Shadow evaluation in float64 from the float32 leaf bindings, optionally
  // with a single leaf element perturbed (used by the finite-difference check).
  std::vector<double> eval_f64(Value v);
  std::vector<double> eval_f64_perturbed(Value v, Value leaf, int elem, double delta);

  // --- differentiation ---
  // Gradient of a scalar root w.r.t. each requested leaf, as graph nodes.
  std::vector<Value> gradient_nodes(Value root, std::span<const Value> wrt);
  // Same, evaluated to tensors.
  std::vector<Tensor> backward(Value root, std::span<const Value> wrt);

  struct FdReport {
    double max_rel_error = 0.0;
    int compared = 0;
    int excluded_kinks = 0;
    int nan_count = 0;
  };
  // Central finite differences in the float64 shadow path against the
  // graph-built gradient. Elements whose +/-eps evaluations land on
  // different sides of a kink (relu at 0, clamp bounds, min ties) are
  // excluded. max_elements > 0 checks an evenly strided subset.
  FdReport finite_diff_check(Value root, Value leaf, double eps, int max_elements = 0);

  bool contains(Value v) const { return v.owner == this && v.id >= 0 && v.id < (int)nodes_.size(); }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  int rows_of(Value v) const;
  int cols_of(Value v) const;

 private:
  struct Node {
    Op op = Op::kLeaf;
    int rows = 0, cols = 0;
    int a = -1, b = -1;
    double c0 = 0.0, c1 = 0.0;
    int axis = kAxisAll;
    int i0 = 0, i1 = 0;
    bool ta = false, tb = false;
    std::shared_ptr<const std::vector<int>> rows_idx;
    Tensor value;
    std::uint64_t epoch = 0;
    std::vector<double> value64;
    std::uint64_t epoch64 = 0;
    bool bound = false;  // leaves only
  };

  int push(Node n);
  Value make(Op op, int rows, int cols, int a, int b);
  const Node& node(Value v) const;
  void check_owned(Value v, const char* op) const;
  std::vector<int> topo_order(int root) const;
  template <typename T>
  void compute_node(int id, std::vector<T> Node::* cache) const;
  void ensure_f32(int id);
  void ensure_f64(int id);

  mutable std::vector<Node> nodes_;
  std::uint64_t epoch_ = 1;
  std::uint64_t epoch64_ = 1;
  // Perturbation applied during shadow evaluation (leaf id, element, delta).
  int perturb_leaf_ = -1;
  int perturb_elem_ = 0;
  double perturb_delta_ = 0.0;
};

// Second derivatives: differentiate sum(d root / d inner) w.r.t. the outer
// leaves. For a scalar-shaped inner leaf the sum is the gradient itself.
std::vector<Tensor> grad_of_grad(Graph& g, Value root, Value inner,
                                 std::span<const Value> outer);

}  // namespace lbsac
