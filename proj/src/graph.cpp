#include "graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "blas.hpp"

namespace lbsac {

namespace {

std::string shape_str(int r, int c) {
  return std::to_string(r) + "x" + std::to_string(c);
}

void gemm(bool ta, bool tb, int m, int n, int k, const float* a, const float* b,
          float* c) {
  gemm_f32(ta, tb, m, n, k, a, b, c);
}
void gemm(bool ta, bool tb, int m, int n, int k, const double* a, const double* b,
          double* c) {
  gemm_f64(ta, tb, m, n, k, a, b, c);
}

}  // namespace

Graph::Graph() { nodes_.reserve(256); }

int Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

const Graph::Node& Graph::node(Value v) const { return nodes_[v.id]; }

void Graph::check_owned(Value v, const char* op) const {
  if (v.owner != this || v.id < 0 || v.id >= static_cast<int>(nodes_.size())) {
    throw GraphError(std::string(op) + ": value does not belong to this graph");
  }
}

int Graph::rows_of(Value v) const {
  check_owned(v, "rows_of");
  return node(v).rows;
}
int Graph::cols_of(Value v) const {
  check_owned(v, "cols_of");
  return node(v).cols;
}

Value Graph::leaf(const Tensor& init) {
  Node n;
  n.op = Op::kLeaf;
  n.rows = init.rows;
  n.cols = init.cols;
  n.value = init;
  n.bound = true;
  return Value{push(std::move(n)), this};
}

Value Graph::leaf(int rows, int cols) {
  if (rows < 1 || cols < 1) throw GraphError("leaf: dimensions must be >= 1");
  Node n;
  n.op = Op::kLeaf;
  n.rows = rows;
  n.cols = cols;
  return Value{push(std::move(n)), this};
}

void Graph::set_leaf(Value v, const Tensor& t) {
  check_owned(v, "set_leaf");
  Node& n = nodes_[v.id];
  if (n.op != Op::kLeaf) throw GraphError("set_leaf: value is not a leaf");
  if (t.rows != n.rows || t.cols != n.cols) {
    throw GraphError("set_leaf: shape " + t.shape_str() + " does not match leaf " +
                     shape_str(n.rows, n.cols));
  }
  n.value = t;
  n.bound = true;
  epoch_++;
  epoch64_++;
}

bool Graph::is_leaf(Value v) const {
  check_owned(v, "is_leaf");
  return node(v).op == Op::kLeaf;
}

Value Graph::make(Op op, int rows, int cols, int a, int b) {
  Node n;
  n.op = op;
  n.rows = rows;
  n.cols = cols;
  n.a = a;
  n.b = b;
  return Value{push(std::move(n)), this};
}

Value Graph::matmul(Value a, Value b, bool ta, bool tb) {
  check_owned(a, "matmul");
  check_owned(b, "matmul");
  const Node& na = node(a);
  const Node& nb = node(b);
  const int m = ta ? na.cols : na.rows;
  const int ka = ta ? na.rows : na.cols;
  const int kb = tb ? nb.cols : nb.rows;
  const int n = tb ? nb.rows : nb.cols;
  if (ka != kb) {
    throw GraphError(std::string("matmul: inner dimensions mismatch: ") +
                     shape_str(na.rows, na.cols) + (ta ? "^T" : "") + " * " +
                     shape_str(nb.rows, nb.cols) + (tb ? "^T" : ""));
  }
  Value v = make(Op::kMatMul, m, n, a.id, b.id);
  nodes_[v.id].ta = ta;
  nodes_[v.id].tb = tb;
  return v;
}

Value Graph::transpose(Value a) {
  check_owned(a, "transpose");
  return make(Op::kTranspose, node(a).cols, node(a).rows, a.id, -1);
}

#define LBSAC_BINARY_SAME_SHAPE(fname, opk)                                         \
  Value Graph::fname(Value a, Value b) {                                            \
    check_owned(a, #fname);                                                         \
    check_owned(b, #fname);                                                         \
    const Node& na = node(a);                                                       \
    const Node& nb = node(b);                                                       \
    if (na.rows != nb.rows || na.cols != nb.cols) {                                 \
      throw GraphError(std::string(#fname) + ": shape mismatch: " +                 \
                       shape_str(na.rows, na.cols) + " vs " +                       \
                       shape_str(nb.rows, nb.cols));                                \
    }                                                                               \
    return make(opk, na.rows, na.cols, a.id, b.id);                                 \
  }

LBSAC_BINARY_SAME_SHAPE(add, Op::kAdd)
LBSAC_BINARY_SAME_SHAPE(sub, Op::kSub)
LBSAC_BINARY_SAME_SHAPE(mul, Op::kMul)
LBSAC_BINARY_SAME_SHAPE(div, Op::kDiv)
#undef LBSAC_BINARY_SAME_SHAPE

#define LBSAC_UNARY(fname, opk)                                     \
  Value Graph::fname(Value a) {                                     \
    check_owned(a, #fname);                                         \
    return make(opk, node(a).rows, node(a).cols, a.id, -1);         \
  }

LBSAC_UNARY(tanh, Op::kTanh)
LBSAC_UNARY(relu, Op::kRelu)
LBSAC_UNARY(exp, Op::kExp)
LBSAC_UNARY(log, Op::kLog)
LBSAC_UNARY(square, Op::kSquare)
LBSAC_UNARY(sqrt, Op::kSqrt)
#undef LBSAC_UNARY

Value Graph::scale(Value a, double c) {
  check_owned(a, "scale");
  Value v = make(Op::kScale, node(a).rows, node(a).cols, a.id, -1);
  nodes_[v.id].c0 = c;
  return v;
}

Value Graph::add_scalar(Value a, double c) {
  check_owned(a, "add_scalar");
  Value v = make(Op::kAddScalar, node(a).rows, node(a).cols, a.id, -1);
  nodes_[v.id].c0 = c;
  return v;
}

Value Graph::clamp(Value a, double lo, double hi) {
  check_owned(a, "clamp");
  if (!(lo <= hi)) throw GraphError("clamp: lo must be <= hi");
  Value v = make(Op::kClamp, node(a).rows, node(a).cols, a.id, -1);
  nodes_[v.id].c0 = lo;
  nodes_[v.id].c1 = hi;
  return v;
}

namespace {
void reduced_shape(int rows, int cols, int axis, int* r, int* c, const char* op) {
  if (axis == kAxisAll) {
    *r = 1;
    *c = 1;
  } else if (axis == 0) {
    *r = 1;
    *c = cols;
  } else if (axis == 1) {
    *r = rows;
    *c = 1;
  } else {
    throw GraphError(std::string(op) + ": axis must be -1, 0 or 1");
  }
}
}  // namespace

Value Graph::sum(Value a, int axis) {
  check_owned(a, "sum");
  int r, c;
  reduced_shape(node(a).rows, node(a).cols, axis, &r, &c, "sum");
  Value v = make(Op::kSum, r, c, a.id, -1);
  nodes_[v.id].axis = axis;
  return v;
}

Value Graph::mean(Value a, int axis) {
  check_owned(a, "mean");
  int r, c;
  reduced_shape(node(a).rows, node(a).cols, axis, &r, &c, "mean");
  Value v = make(Op::kMean, r, c, a.id, -1);
  nodes_[v.id].axis = axis;
  return v;
}

Value Graph::min_axis(Value a, int axis) {
  check_owned(a, "min_axis");
  if (axis != 0 && axis != 1) throw GraphError("min_axis: axis must be 0 or 1");
  int r, c;
  reduced_shape(node(a).rows, node(a).cols, axis, &r, &c, "min_axis");
  Value v = make(Op::kMinAxis, r, c, a.id, -1);
  nodes_[v.id].axis = axis;
  return v;
}

Value Graph::broadcast_to(Value a, int rows, int cols) {
  check_owned(a, "broadcast");
  const Node& na = node(a);
  const bool ok_r = na.rows == rows || na.rows == 1;
  const bool ok_c = na.cols == cols || na.cols == 1;
  if (!ok_r || !ok_c || rows < 1 || cols < 1) {
    throw GraphError("broadcast: cannot expand " + shape_str(na.rows, na.cols) +
                     " to " + shape_str(rows, cols));
  }
  return make(Op::kBroadcast, rows, cols, a.id, -1);
}

Value Graph::slice(Value a, int axis, int start, int len) {
  check_owned(a, "slice");
  const Node& na = node(a);
  if (axis != 0 && axis != 1) throw GraphError("slice: axis must be 0 or 1");
  const int extent = axis == 0 ? na.rows : na.cols;
  if (start < 0 || len < 1 || start + len > extent) {
    throw GraphError("slice: range [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") out of bounds for " +
                     shape_str(na.rows, na.cols));
  }
  Value v = make(Op::kSlice, axis == 0 ? len : na.rows, axis == 0 ? na.cols : len,
                 a.id, -1);
  nodes_[v.id].axis = axis;
  nodes_[v.id].i0 = start;
  nodes_[v.id].i1 = len;
  return v;
}

Value Graph::concat(Value a, Value b, int axis) {
  check_owned(a, "concat");
  check_owned(b, "concat");
  const Node& na = node(a);
  const Node& nb = node(b);
  if (axis != 0 && axis != 1) throw GraphError("concat: axis must be 0 or 1");
  if (axis == 0 ? na.cols != nb.cols : na.rows != nb.rows) {
    throw GraphError("concat: shape mismatch: " + shape_str(na.rows, na.cols) +
                     " vs " + shape_str(nb.rows, nb.cols));
  }
  Value v = make(Op::kConcat, axis == 0 ? na.rows + nb.rows : na.rows,
                 axis == 0 ? na.cols : na.cols + nb.cols, a.id, b.id);
  nodes_[v.id].axis = axis;
  return v;
}

Value Graph::gather_rows(Value a, std::vector<int> rows) {
  check_owned(a, "gather_rows");
  const Node& na = node(a);
  if (rows.empty()) throw GraphError("gather_rows: empty index list");
  for (int r : rows) {
    if (r < 0 || r >= na.rows) {
      throw GraphError("gather_rows: index " + std::to_string(r) +
                       " out of bounds for " + shape_str(na.rows, na.cols));
    }
  }
  Value v = make(Op::kGatherRows, static_cast<int>(rows.size()), na.cols, a.id, -1);
  nodes_[v.id].rows_idx = std::make_shared<const std::vector<int>>(std::move(rows));
  return v;
}

Value Graph::layernorm(Value a, double eps) {
  check_owned(a, "layernorm");
  Value m = mean(a, 1);
  Value centered = sub(a, broadcast_to(m, node(a).rows, node(a).cols));
  Value var = mean(square(centered), 1);
  Value denom = sqrt(add_scalar(var, eps));
  return div(centered, broadcast_to(denom, node(a).rows, node(a).cols));
}

// ---------------------------------------------------------------------------
// evaluation

std::vector<int> Graph::topo_order(int root) const {
  std::vector<int> order;
  std::vector<std::uint8_t> state(nodes_.size(), 0);
  std::vector<int> stack{root};
  order.reserve(64);
  while (!stack.empty()) {
    const int v = stack.back();
    if (state[v] == 0) {
      state[v] = 1;
      const Node& n = nodes_[v];
      if (n.a >= 0 && state[n.a] == 0) stack.push_back(n.a);
      if (n.b >= 0 && state[n.b] == 0) stack.push_back(n.b);
    } else {
      stack.pop_back();
      if (state[v] == 1) {
        state[v] = 2;
        order.push_back(v);
      }
    }
  }
  return order;
}

template <typename T>
struct CacheAccess;

template <>
struct CacheAccess<float> {
  static std::vector<float>& buf(Graph* g, void* node);
};

namespace {

template <typename T>
void compute_kernel(Op op, int rows, int cols, int a_rows, int a_cols, bool ta, bool tb,
                    double c0, double c1, int axis, int i0,
                    const std::vector<int>* idx, const T* pa, const T* pb, T* out) {
  const size_t n_out = static_cast<size_t>(rows) * cols;
  switch (op) {
    case Op::kLeaf:
      break;
    case Op::kMatMul: {
      const int k = ta ? a_rows : a_cols;
      gemm(ta, tb, rows, cols, k, pa, pb, out);
      break;
    }
    case Op::kTranspose:
      for (int i = 0; i < rows; i++)
        for (int j = 0; j < cols; j++)
          out[static_cast<size_t>(i) * cols + j] = pa[static_cast<size_t>(j) * rows + i];
      break;
    case Op::kAdd:
      for (size_t i = 0; i < n_out; i++) out[i] = pa[i] + pb[i];
      break;
    case Op::kSub:
      for (size_t i = 0; i < n_out; i++) out[i] = pa[i] - pb[i];
      break;
    case Op::kMul:
      for (size_t i = 0; i < n_out; i++) out[i] = pa[i] * pb[i];
      break;
    case Op::kDiv:
      for (size_t i = 0; i < n_out; i++) out[i] = pa[i] / pb[i];
      break;
    case Op::kScale: {
      const T c = static_cast<T>(c0);
      for (size_t i = 0; i < n_out; i++) out[i] = pa[i] * c;
      break;
    }
    case Op::kAddScalar: {
      const T c = static_cast<T>(c0);
      for (size_t i = 0; i < n_out; i++) out[i] = pa[i] + c;
      break;
    }
    case Op::kTanh:
      for (size_t i = 0; i < n_out; i++) out[i] = std::tanh(pa[i]);
      break;
    case Op::kRelu:
      for (size_t i = 0; i < n_out; i++) out[i] = pa[i] > T(0) ? pa[i] : T(0);
      break;
    case Op::kExp:
      for (size_t i = 0; i < n_out; i++) out[i] = std::exp(pa[i]);
      break;
    case Op::kLog:
      for (size_t i = 0; i < n_out; i++) out[i] = std::log(pa[i]);
      break;
    case Op::kSquare:
      for (size_t i = 0; i < n_out; i++) out[i] = pa[i] * pa[i];
      break;
    case Op::kSqrt:
      for (size_t i = 0; i < n_out; i++) out[i] = std::sqrt(pa[i]);
      break;
    case Op::kClamp: {
      const T lo = static_cast<T>(c0), hi = static_cast<T>(c1);
      for (size_t i = 0; i < n_out; i++) out[i] = std::min(std::max(pa[i], lo), hi);
      break;
    }
    case Op::kSum:
    case Op::kMean: {
      // double accumulators keep large-batch reductions stable
      const bool is_mean = op == Op::kMean;
      if (axis == kAxisAll) {
        double acc = 0.0;
        const size_t n_in = static_cast<size_t>(a_rows) * a_cols;
        for (size_t i = 0; i < n_in; i++) acc += static_cast<double>(pa[i]);
        out[0] = static_cast<T>(is_mean ? acc / static_cast<double>(n_in) : acc);
      } else if (axis == 0) {
        for (int j = 0; j < a_cols; j++) {
          double acc = 0.0;
          for (int i = 0; i < a_rows; i++) acc += pa[static_cast<size_t>(i) * a_cols + j];
          out[j] = static_cast<T>(is_mean ? acc / a_rows : acc);
        }
      } else {
        for (int i = 0; i < a_rows; i++) {
          double acc = 0.0;
          const T* row = pa + static_cast<size_t>(i) * a_cols;
          for (int j = 0; j < a_cols; j++) acc += row[j];
          out[i] = static_cast<T>(is_mean ? acc / a_cols : acc);
        }
      }
      break;
    }
    case Op::kMinAxis:
      if (axis == 0) {
        for (int j = 0; j < a_cols; j++) {
          T best = pa[j];
          for (int i = 1; i < a_rows; i++)
            best = std::min(best, pa[static_cast<size_t>(i) * a_cols + j]);
          out[j] = best;
        }
      } else {
        for (int i = 0; i < a_rows; i++) {
          const T* row = pa + static_cast<size_t>(i) * a_cols;
          T best = row[0];
          for (int j = 1; j < a_cols; j++) best = std::min(best, row[j]);
          out[i] = best;
        }
      }
      break;
    case Op::kBroadcast:
      for (int i = 0; i < rows; i++) {
        const int si = a_rows == 1 ? 0 : i;
        for (int j = 0; j < cols; j++) {
          const int sj = a_cols == 1 ? 0 : j;
          out[static_cast<size_t>(i) * cols + j] = pa[static_cast<size_t>(si) * a_cols + sj];
        }
      }
      break;
    case Op::kSlice:
      if (axis == 0) {
        std::memcpy(out, pa + static_cast<size_t>(i0) * a_cols, n_out * sizeof(T));
      } else {
        for (int i = 0; i < rows; i++)
          std::memcpy(out + static_cast<size_t>(i) * cols,
                      pa + static_cast<size_t>(i) * a_cols + i0, cols * sizeof(T));
      }
      break;
    case Op::kPad:
      std::memset(out, 0, n_out * sizeof(T));
      if (axis == 0) {
        std::memcpy(out + static_cast<size_t>(i0) * cols, pa,
                    static_cast<size_t>(a_rows) * a_cols * sizeof(T));
      } else {
        for (int i = 0; i < a_rows; i++)
          std::memcpy(out + static_cast<size_t>(i) * cols + i0,
                      pa + static_cast<size_t>(i) * a_cols, a_cols * sizeof(T));
      }
      break;
    case Op::kConcat:
      if (axis == 0) {
        std::memcpy(out, pa, static_cast<size_t>(a_rows) * a_cols * sizeof(T));
        std::memcpy(out + static_cast<size_t>(a_rows) * a_cols, pb,
                    n_out * sizeof(T) - static_cast<size_t>(a_rows) * a_cols * sizeof(T));
      } else {
        const int b_cols = cols - a_cols;
        for (int i = 0; i < rows; i++) {
          std::memcpy(out + static_cast<size_t>(i) * cols,
                      pa + static_cast<size_t>(i) * a_cols, a_cols * sizeof(T));
          std::memcpy(out + static_cast<size_t>(i) * cols + a_cols,
                      pb + static_cast<size_t>(i) * b_cols, b_cols * sizeof(T));
        }
      }
      break;
    case Op::kGatherRows:
      for (int i = 0; i < rows; i++)
        std::memcpy(out + static_cast<size_t>(i) * cols,
                    pa + static_cast<size_t>((*idx)[i]) * cols, cols * sizeof(T));
      break;
    case Op::kScatterRows:
      std::memset(out, 0, n_out * sizeof(T));
      for (int i = 0; i < a_rows; i++) {
        T* dst = out + static_cast<size_t>((*idx)[i]) * cols;
        const T* src = pa + static_cast<size_t>(i) * cols;
        for (int j = 0; j < cols; j++) dst[j] += src[j];
      }
      break;
    case Op::kGtZeroMask:
      for (size_t i = 0; i < n_out; i++) out[i] = pa[i] > T(0) ? T(1) : T(0);
      break;
    case Op::kInsideMask: {
      const T lo = static_cast<T>(c0), hi = static_cast<T>(c1);
      for (size_t i = 0; i < n_out; i++)
        out[i] = (pa[i] > lo && pa[i] < hi) ? T(1) : T(0);
      break;
    }
    case Op::kMinMask:
      if (axis == 0) {
        std::memset(out, 0, n_out * sizeof(T));
        for (int j = 0; j < a_cols; j++) {
          int arg = 0;
          T best = pa[j];
          for (int i = 1; i < a_rows; i++) {
            const T v = pa[static_cast<size_t>(i) * a_cols + j];
            if (v < best) {
              best = v;
              arg = i;
            }
          }
          out[static_cast<size_t>(arg) * a_cols + j] = T(1);
        }
      } else {
        std::memset(out, 0, n_out * sizeof(T));
        for (int i = 0; i < a_rows; i++) {
          const T* row = pa + static_cast<size_t>(i) * a_cols;
          int arg = 0;
          T best = row[0];
          for (int j = 1; j < a_cols; j++) {
            if (row[j] < best) {
              best = row[j];
              arg = j;
            }
          }
          out[static_cast<size_t>(i) * a_cols + arg] = T(1);
        }
      }
      break;
  }
}

}  // namespace

void Graph::ensure_f32(int id) {
  if (nodes_[id].epoch == epoch_) return;
  for (int v : topo_order(id)) {
    Node& n = nodes_[v];
    if (n.epoch == epoch_) continue;
    if (n.op == Op::kLeaf) {
      if (!n.bound) throw GraphError("evaluate: leaf is not bound to a value");
    } else {
      n.value.rows = n.rows;
      n.value.cols = n.cols;
      n.value.data.resize(static_cast<size_t>(n.rows) * n.cols);
      const Node& a = nodes_[n.a];
      const float* pa = a.value.data.data();
      const float* pb = n.b >= 0 ? nodes_[n.b].value.data.data() : nullptr;
      compute_kernel<float>(n.op, n.rows, n.cols, a.rows, a.cols, n.ta, n.tb, n.c0,
                            n.c1, n.axis, n.i0,
                            n.rows_idx ? n.rows_idx.get() : nullptr, pa, pb,
                            n.value.data.data());
    }
    n.epoch = epoch_;
  }
}

void Graph::ensure_f64(int id) {
  if (nodes_[id].epoch64 == epoch64_) return;
  for (int v : topo_order(id)) {
    Node& n = nodes_[v];
    if (n.epoch64 == epoch64_) continue;
    if (n.op == Op::kLeaf) {
      if (!n.bound) throw GraphError("evaluate: leaf is not bound to a value");
      n.value64.resize(n.value.data.size());
      for (size_t i = 0; i < n.value64.size(); i++)
        n.value64[i] = static_cast<double>(n.value.data[i]);
      if (v == perturb_leaf_) n.value64[perturb_elem_] += perturb_delta_;
    } else {
      n.value64.resize(static_cast<size_t>(n.rows) * n.cols);
      const Node& a = nodes_[n.a];
      const double* pa = a.value64.data();
      const double* pb = n.b >= 0 ? nodes_[n.b].value64.data() : nullptr;
      compute_kernel<double>(n.op, n.rows, n.cols, a.rows, a.cols, n.ta, n.tb, n.c0,
                             n.c1, n.axis, n.i0,
                             n.rows_idx ? n.rows_idx.get() : nullptr, pa, pb,
                             n.value64.data());
    }
    n.epoch64 = epoch64_;
  }
}

const Tensor& Graph::eval(Value v) {
  check_owned(v, "evaluate");
  ensure_f32(v.id);
  return nodes_[v.id].value;
}

std::vector<double> Graph::eval_f64(Value v) {
  check_owned(v, "evaluate");
  ensure_f64(v.id);
  return nodes_[v.id].value64;
}

std::vector<double> Graph::eval_f64_perturbed(Value v, Value leaf, int elem,
                                              double delta) {
  check_owned(v, "evaluate");
  check_owned(leaf, "evaluate");
  const Node& ln = node(leaf);
  if (ln.op != Op::kLeaf || !ln.bound) throw GraphError("perturb: not a bound leaf");
  if (elem < 0 || elem >= static_cast<int>(ln.value.data.size())) {
    throw GraphError("perturb: element index out of range");
  }
  perturb_leaf_ = leaf.id;
  perturb_elem_ = elem;
  perturb_delta_ = delta;
  epoch64_++;
  ensure_f64(v.id);
  std::vector<double> out = nodes_[v.id].value64;
  perturb_leaf_ = -1;
  perturb_delta_ = 0.0;
  epoch64_++;
  return out;
}

// ---------------------------------------------------------------------------
// reverse mode

std::vector<Value> Graph::gradient_nodes(Value root, std::span<const Value> wrt) {
  check_owned(root, "backward");
  const Node& rn = node(root);
  if (rn.rows != 1 || rn.cols != 1) {
    throw GraphError("backward: root must be a scalar, got " +
                     shape_str(rn.rows, rn.cols));
  }
  for (const Value& w : wrt) {
    check_owned(w, "backward");
    if (node(w).op != Op::kLeaf) {
      throw GraphError("backward: wrt value is not a leaf");
    }
  }

  const std::vector<int> order = topo_order(root.id);
  const size_t n_orig = nodes_.size();
  std::vector<char> needs(n_orig, 0);
  for (const Value& w : wrt) needs[w.id] = 1;
  for (int id : order) {
    const Node& n = nodes_[id];
    if ((n.a >= 0 && needs[n.a]) || (n.b >= 0 && needs[n.b])) needs[id] = 1;
  }

  std::vector<int> adj(n_orig, -1);
  const auto accumulate = [&](int target, Value contrib) {
    adj[target] = adj[target] < 0
                      ? contrib.id
                      : add(Value{adj[target], this}, contrib).id;
  };

  adj[root.id] = constant(Tensor::scalar(1.0f)).id;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const int id = *it;
    if (adj[id] < 0 || !needs[id]) continue;
    // copy fields: emitting vjp nodes may reallocate nodes_
    const Op op = nodes_[id].op;
    const int pa = nodes_[id].a, pb = nodes_[id].b;
    const double c0 = nodes_[id].c0, c1 = nodes_[id].c1;
    const int axis = nodes_[id].axis, i0 = nodes_[id].i0;
    const bool ta = nodes_[id].ta, tb = nodes_[id].tb;
    const auto rows_idx = nodes_[id].rows_idx;
    const Value x{pa, this}, y{pb, this}, out{id, this};
    const Value g{adj[id], this};
    const bool need_a = pa >= 0 && needs[pa];
    const bool need_b = pb >= 0 && needs[pb];

    switch (op) {
      case Op::kLeaf:
      case Op::kGtZeroMask:
      case Op::kInsideMask:
      case Op::kMinMask:
        break;  // constant or piecewise-constant: no gradient flows
      case Op::kMatMul:
        if (!ta && !tb) {
          if (need_a) accumulate(pa, matmul(g, y, false, true));
          if (need_b) accumulate(pb, matmul(x, g, true, false));
        } else if (ta && !tb) {
          if (need_a) accumulate(pa, matmul(y, g, false, true));
          if (need_b) accumulate(pb, matmul(x, g, false, false));
        } else if (!ta && tb) {
          if (need_a) accumulate(pa, matmul(g, y, false, false));
          if (need_b) accumulate(pb, matmul(g, x, true, false));
        } else {
          if (need_a) accumulate(pa, matmul(y, g, true, true));
          if (need_b) accumulate(pb, matmul(g, x, true, true));
        }
        break;
      case Op::kTranspose:
        if (need_a) accumulate(pa, transpose(g));
        break;
      case Op::kAdd:
        if (need_a) accumulate(pa, g);
        if (need_b) accumulate(pb, g);
        break;
      case Op::kSub:
        if (need_a) accumulate(pa, g);
        if (need_b) accumulate(pb, scale(g, -1.0));
        break;
      case Op::kMul:
        if (need_a) accumulate(pa, mul(g, y));
        if (need_b) accumulate(pb, mul(g, x));
        break;
      case Op::kDiv:
        if (need_a) accumulate(pa, div(g, y));
        if (need_b) accumulate(pb, scale(mul(g, div(out, y)), -1.0));
        break;
      case Op::kScale:
        if (need_a) accumulate(pa, scale(g, c0));
        break;
      case Op::kAddScalar:
        if (need_a) accumulate(pa, g);
        break;
      case Op::kTanh:
        if (need_a) accumulate(pa, mul(g, add_scalar(scale(square(out), -1.0), 1.0)));
        break;
      case Op::kRelu:
        if (need_a) accumulate(pa, mul(g, make(Op::kGtZeroMask, nodes_[pa].rows,
                                               nodes_[pa].cols, pa, -1)));
        break;
      case Op::kExp:
        if (need_a) accumulate(pa, mul(g, out));
        break;
      case Op::kLog:
        if (need_a) accumulate(pa, div(g, x));
        break;
      case Op::kSquare:
        if (need_a) accumulate(pa, mul(g, scale(x, 2.0)));
        break;
      case Op::kSqrt:
        if (need_a) accumulate(pa, div(g, scale(out, 2.0)));
        break;
      case Op::kClamp:
        if (need_a) {
          Value m = make(Op::kInsideMask, nodes_[pa].rows, nodes_[pa].cols, pa, -1);
          nodes_[m.id].c0 = c0;
          nodes_[m.id].c1 = c1;
          accumulate(pa, mul(g, m));
        }
        break;
      case Op::kSum:
        if (need_a) accumulate(pa, broadcast_to(g, nodes_[pa].rows, nodes_[pa].cols));
        break;
      case Op::kMean:
        if (need_a) {
          const int nr = nodes_[pa].rows, nc = nodes_[pa].cols;
          const double cnt = axis == kAxisAll ? static_cast<double>(nr) * nc
                             : axis == 0      ? nr
                                              : nc;
          accumulate(pa, scale(broadcast_to(g, nr, nc), 1.0 / cnt));
        }
        break;
      case Op::kMinAxis:
        if (need_a) {
          Value m = make(Op::kMinMask, nodes_[pa].rows, nodes_[pa].cols, pa, -1);
          nodes_[m.id].axis = axis;
          accumulate(pa, mul(broadcast_to(g, nodes_[pa].rows, nodes_[pa].cols), m));
        }
        break;
      case Op::kBroadcast:
        if (need_a) {
          const int nr = nodes_[pa].rows, nc = nodes_[pa].cols;
          const int orows = nodes_[id].rows, ocols = nodes_[id].cols;
          if (nr == orows && nc == ocols) {
            accumulate(pa, g);
          } else if (nr == 1 && nc == 1) {
            accumulate(pa, sum(g, kAxisAll));
          } else if (nr == 1) {
            accumulate(pa, sum(g, 0));
          } else {
            accumulate(pa, sum(g, 1));
          }
        }
        break;
      case Op::kSlice:
        if (need_a) {
          const int extent = axis == 0 ? nodes_[pa].rows : nodes_[pa].cols;
          Value p = make(Op::kPad, nodes_[pa].rows, nodes_[pa].cols, g.id, -1);
          nodes_[p.id].axis = axis;
          nodes_[p.id].i0 = i0;
          nodes_[p.id].i1 = extent - i0 - nodes_[id].i1;
          accumulate(pa, p);
        }
        break;
      case Op::kPad:
        if (need_a) {
          accumulate(pa, slice(g, axis, i0, axis == 0 ? nodes_[pa].rows : nodes_[pa].cols));
        }
        break;
      case Op::kConcat: {
        const int ea = axis == 0 ? nodes_[pa].rows : nodes_[pa].cols;
        const int eb = axis == 0 ? nodes_[pb].rows : nodes_[pb].cols;
        if (need_a) accumulate(pa, slice(g, axis, 0, ea));
        if (need_b) accumulate(pb, slice(g, axis, ea, eb));
        break;
      }
      case Op::kGatherRows:
        if (need_a) {
          Value s = make(Op::kScatterRows, nodes_[pa].rows, nodes_[pa].cols, g.id, -1);
          nodes_[s.id].rows_idx = rows_idx;
          accumulate(pa, s);
        }
        break;
      case Op::kScatterRows:
        if (need_a) {
          Value gv = make(Op::kGatherRows, nodes_[pa].rows, nodes_[pa].cols, g.id, -1);
          nodes_[gv.id].rows_idx = rows_idx;
          accumulate(pa, gv);
        }
        break;
    }
  }

  std::vector<Value> result;
  result.reserve(wrt.size());
  for (const Value& w : wrt) {
    if (adj[w.id] >= 0) {
      result.push_back(Value{adj[w.id], this});
    } else {
      result.push_back(constant(Tensor::zeros(node(w).rows, node(w).cols)));
    }
  }
  return result;
}

std::vector<Tensor> Graph::backward(Value root, std::span<const Value> wrt) {
  std::vector<Value> gs = gradient_nodes(root, wrt);
  std::vector<Tensor> out;
  out.reserve(gs.size());
  for (Value g : gs) out.push_back(eval(g));
  return out;
}

std::vector<Tensor> grad_of_grad(Graph& g, Value root, Value inner,
                                 std::span<const Value> outer) {
  const Value inner_grads[] = {inner};
  Value gi = g.gradient_nodes(root, inner_grads)[0];
  Value s = (g.rows_of(gi) == 1 && g.cols_of(gi) == 1) ? gi : g.sum(gi);
  return g.backward(s, outer);
}

// ---------------------------------------------------------------------------
// finite differences

Graph::FdReport Graph::finite_diff_check(Value root, Value leaf, double eps,
                                         int max_elements) {
  check_owned(root, "finite_diff_check");
  check_owned(leaf, "finite_diff_check");
  if (!(eps > 0.0)) throw GraphError("finite_diff_check: epsilon must be > 0");

  const Value wrt[] = {leaf};
  Value gnode = gradient_nodes(root, wrt)[0];
  const std::vector<double> grad = eval_f64(gnode);

  // Kink carriers in the forward subgraph: a perturbation that lands the
  // two central-difference evaluations on different sides of a kink makes
  // the difference quotient meaningless for that element.
  std::vector<int> kinks;
  for (int id : topo_order(root.id)) {
    const Op op = nodes_[id].op;
    if (op == Op::kRelu || op == Op::kClamp || op == Op::kMinAxis) kinks.push_back(id);
  }
  const auto signature = [&]() {
    std::vector<std::uint8_t> sig;
    for (int id : kinks) {
      const Node& n = nodes_[id];
      const std::vector<double>& in = nodes_[n.a].value64;
      if (n.op == Op::kRelu) {
        for (double v : in) sig.push_back(v > 0.0 ? 1 : 0);
      } else if (n.op == Op::kClamp) {
        for (double v : in) sig.push_back(v <= n.c0 ? 0 : v >= n.c1 ? 2 : 1);
      } else {
        // argmin pattern along the reduction axis
        const int ar = nodes_[n.a].rows, ac = nodes_[n.a].cols;
        if (n.axis == 0) {
          for (int j = 0; j < ac; j++) {
            int arg = 0;
            double best = in[j];
            for (int i = 1; i < ar; i++) {
              const double v = in[static_cast<size_t>(i) * ac + j];
              if (v < best) {
                best = v;
                arg = i;
              }
            }
            sig.push_back(static_cast<std::uint8_t>(arg & 0xff));
          }
        } else {
          for (int i = 0; i < ar; i++) {
            int arg = 0;
            double best = in[static_cast<size_t>(i) * ac];
            for (int j = 1; j < ac; j++) {
              const double v = in[static_cast<size_t>(i) * ac + j];
              if (v < best) {
                best = v;
                arg = j;
              }
            }
            sig.push_back(static_cast<std::uint8_t>(arg & 0xff));
          }
        }
      }
    }
    return sig;
  };

  FdReport report;
  const int n = static_cast<int>(node(leaf).value.data.size());
  const int stride = (max_elements > 0 && max_elements < n)
                         ? (n + max_elements - 1) / max_elements
                         : 1;
  for (int e = 0; e < n; e += stride) {
    const std::vector<double> fp = eval_f64_perturbed(root, leaf, e, eps);
    // signature from the +eps evaluation: caches are intact until the
    // next evaluation, so read it before perturbing again
    const std::vector<std::uint8_t> sig_p = signature();
    const std::vector<double> fm = eval_f64_perturbed(root, leaf, e, -eps);
    const std::vector<std::uint8_t> sig_m = signature();
    if (sig_p != sig_m) {
      report.excluded_kinks++;
      continue;
    }
    if (std::isnan(fp[0]) || std::isnan(fm[0])) {
      report.nan_count++;
      continue;
    }
    const double fd = (fp[0] - fm[0]) / (2.0 * eps);
    const double gv = grad[e];
    const double denom = std::max({std::abs(gv), std::abs(fd), 1e-6});
    const double rel = std::abs(gv - fd) / denom;
    report.compared++;
    report.max_rel_error = std::max(report.max_rel_error, rel);
  }
  return report;
}

}  // namespace lbsac
