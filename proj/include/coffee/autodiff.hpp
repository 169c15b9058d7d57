#pragma once

// Reverse-mode autodiff over a closed op set, built around an explicit tape.
// Storage is float32; every reduction (matmul inner loops, sums, means, norms)
// accumulates in double so results are independent of batching and identical
// between graph ops and the no-grad kernels below, which both call into
// detail::*. Gradients accumulate additively: running backward() twice on the
// same graph doubles what has been accumulated.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "coffee/tensor.hpp"

namespace coffee {

namespace detail {

inline double dot_d(const float* a, const float* b, size_t n) {
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += double(a[i]) * double(b[i]);
  return s;
}

// C[m,n] = A[m,k] * B[k,n]; per output row, a double accumulator array is
// filled in k-major order. Row results do not depend on m, so batched and
// single-row calls agree bitwise.
inline void matmul(const float* A, int64_t m, int64_t k, const float* B, int64_t n, float* C) {
  std::vector<double> acc(size_t(n), 0.0);
  for (int64_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const float* a = A + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double av = a[p];
      const float* b = B + p * n;
      for (int64_t j = 0; j < n; ++j) acc[size_t(j)] += av * double(b[j]);
    }
    float* c = C + i * n;
    for (int64_t j = 0; j < n; ++j) c[j] = float(acc[size_t(j)]);
  }
}

// C[m,k] += A[m,n] * B[k,n]^T  (used for dA = g * B^T)
inline void matmul_abt_acc(const float* A, int64_t m, int64_t n, const float* B, int64_t k, float* C) {
  for (int64_t i = 0; i < m; ++i)
    for (int64_t p = 0; p < k; ++p)
      C[i * k + p] += float(dot_d(A + i * n, B + p * n, size_t(n)));
}

// C[k,n] += A[m,k]^T * B[m,n]  (used for dB = A^T * g)
inline void matmul_atb_acc(const float* A, int64_t m, int64_t k, const float* B, int64_t n, float* C) {
  std::vector<double> acc(size_t(n), 0.0);
  for (int64_t p = 0; p < k; ++p) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int64_t i = 0; i < m; ++i) {
      const double av = A[i * k + p];
      const float* b = B + i * n;
      for (int64_t j = 0; j < n; ++j) acc[size_t(j)] += av * double(b[j]);
    }
    float* c = C + p * n;
    for (int64_t j = 0; j < n; ++j) c[j] += float(acc[size_t(j)]);
  }
}

inline double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline float silu_f(float x) {
  const double xd = x;
  return float(xd * sigmoid_d(xd));
}

inline double silu_grad_d(double x) {
  const double s = sigmoid_d(x);
  return s + x * s * (1.0 - s);
}

// Column means over selected rows of a [V,d] table, double accumulation.
inline void mean_rows(const float* table, int64_t d, const std::vector<int>& ids, float* out) {
  std::vector<double> acc(size_t(d), 0.0);
  for (int id : ids) {
    const float* row = table + int64_t(id) * d;
    for (int64_t j = 0; j < d; ++j) acc[size_t(j)] += double(row[j]);
  }
  // divide (not multiply by reciprocal) to match the graph mean op bitwise
  for (int64_t j = 0; j < d; ++j) out[j] = float(acc[size_t(j)] / double(ids.size()));
}

inline double cosine_d(const float* a, const float* b, size_t n) {
  const double dot = dot_d(a, b, n);
  double den = std::sqrt(dot_d(a, a, n)) * std::sqrt(dot_d(b, b, n));
  if (den < 1e-12) den = 1e-12;
  return dot / den;
}

inline double mse_d(const float* a, const float* b, size_t n) {
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) {
    const double d = double(a[i]) - double(b[i]);
    s += d * d;
  }
  return s / double(n);
}

// Sinusoidal embedding of an integer timestep: [sin(t*f_0..f_{h-1}),
// cos(t*f_0..f_{h-1})] with f_i = 10000^(-i/h), h = dim/2.
inline void sinusoid(int64_t t, int64_t dim, float* out) {
  const int64_t half = dim / 2;
  for (int64_t i = 0; i < half; ++i) {
    const double f = std::exp(-std::log(10000.0) * double(i) / double(half));
    const double a = double(t) * f;
    out[i] = float(std::sin(a));
    out[half + i] = float(std::cos(a));
  }
}

}  // namespace detail

inline std::vector<float> sinusoid_embed(int64_t t, int64_t dim) {
  if (dim < 2 || dim % 2 != 0)
    throw Error(Error::Kind::shape, "sinusoid_embed: dim must be even and >= 2, got " + std::to_string(dim));
  if (t < 0) throw Error(Error::Kind::contract, "sinusoid_embed: t must be >= 0, got " + std::to_string(t));
  std::vector<float> out(size_t(dim), 0.0f);
  detail::sinusoid(t, dim, out.data());
  return out;
}

enum class OpKind {
  leaf,
  matmul,
  add,
  mul,
  concat,
  silu,
  relu,
  sum,
  mean,
  mse,
  cosine,
  abs_val,
  scale,
  index_rows,
  sinusoid
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::concat: return "concat";
    case OpKind::silu: return "silu";
    case OpKind::relu: return "relu";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::mse: return "mse";
    case OpKind::cosine: return "cosine_similarity";
    case OpKind::abs_val: return "abs";
    case OpKind::scale: return "scale";
    case OpKind::index_rows: return "index_rows";
    case OpKind::sinusoid: return "sinusoid_embed";
  }
  return "?";
}

// kAxisAll reduces over every element.
inline constexpr int kAxisAll = -1;

class Graph {
 public:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<int> inputs;
    Tensor value;
    std::vector<float> grad;    // accumulated d(root)/d(node) across backward() calls
    int axis = kAxisAll;        // sum / mean / concat
    float scalar = 0.0f;        // scale
    std::vector<int> rows;      // index_rows ids, sinusoid t values
    int64_t dim = 0;            // sinusoid output dim
    Tensor* bound = nullptr;    // leaf: external tensor receiving gradients
  };

  int size() const { return int(nodes_.size()); }

  const Tensor& val(int id) const { return at(id).value; }

  // Accumulated gradient for a node (zeros if backward never reached it).
  std::vector<float> grad(int id) const {
    const Node& n = at(id);
    if (!n.grad.empty()) return n.grad;
    return std::vector<float>(n.value.data.size(), 0.0f);
  }

  // Leaf bound to an external tensor; gradients flow into t.grad when
  // t.requires_grad is set.
  int param(Tensor& t) {
    t.validate();
    check_finite(t, "leaf");
    Node n;
    n.kind = OpKind::leaf;
    n.value = t;  // copy of the current value
    n.bound = &t;
    return push(std::move(n));
  }

  // Constant leaf; never receives gradients.
  int input(Tensor t) {
    t.validate();
    check_finite(t, "leaf");
    Node n;
    n.kind = OpKind::leaf;
    n.value = std::move(t);
    return push(std::move(n));
  }

  int input(Shape s, std::vector<float> d) { return input(Tensor(std::move(s), std::move(d))); }

  int matmul(int a, int b) {
    const Tensor& A = at(a).value;
    const Tensor& B = at(b).value;
    if (A.rank() != 2 || B.rank() != 2 || A.shape[1] != B.shape[0])
      throw shape_error("matmul", {a, b});
    Node n = op(OpKind::matmul, {a, b});
    n.value = Tensor::zeros({A.shape[0], B.shape[1]});
    detail::matmul(A.data.data(), A.shape[0], A.shape[1], B.data.data(), B.shape[1],
                   n.value.data.data());
    return push(std::move(n));
  }

  // Elementwise same-shape add, or bias broadcast [m,n] + [n].
  int add(int a, int b) {
    const Tensor& A = at(a).value;
    const Tensor& B = at(b).value;
    Node n = op(OpKind::add, {a, b});
    if (A.shape == B.shape) {
      n.value = Tensor::zeros(A.shape);
      for (size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = A.data[i] + B.data[i];
    } else if (A.rank() == 2 && B.rank() == 1 && A.shape[1] == B.shape[0]) {
      n.value = Tensor::zeros(A.shape);
      const int64_t m = A.shape[0], c = A.shape[1];
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < c; ++j)
          n.value.data[size_t(i * c + j)] = A.data[size_t(i * c + j)] + B.data[size_t(j)];
    } else {
      throw shape_error("add", {a, b});
    }
    return push(std::move(n));
  }

  int mul(int a, int b) {
    const Tensor& A = at(a).value;
    const Tensor& B = at(b).value;
    if (A.shape != B.shape) throw shape_error("mul", {a, b});
    Node n = op(OpKind::mul, {a, b});
    n.value = Tensor::zeros(A.shape);
    for (size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = A.data[i] * B.data[i];
    return push(std::move(n));
  }

  // axis 0 stacks rank-1 vectors (or rank-2 blocks) as rows; axis 1 joins
  // columns of rank-2 operands (or joins rank-1 vectors end to end).
  int concat(const std::vector<int>& ins, int axis) {
    if (ins.empty()) throw Error(Error::Kind::shape, "concat: no inputs");
    if (axis != 0 && axis != 1)
      throw Error(Error::Kind::shape, "concat: axis must be 0 or 1, got " + std::to_string(axis));
    Node n = op(OpKind::concat, ins);
    n.axis = axis;
    if (axis == 0) {
      const int64_t cols = at(ins[0]).value.rank() == 1 ? at(ins[0]).value.shape[0]
                                                        : at(ins[0]).value.shape[1];
      int64_t rows = 0;
      for (int id : ins) {
        const Tensor& T = at(id).value;
        const int64_t c = T.rank() == 1 ? T.shape[0] : T.shape[1];
        if (T.rank() > 2 || c != cols) throw shape_error("concat", ins);
        rows += T.rank() == 1 ? 1 : T.shape[0];
      }
      n.value = Tensor::zeros({rows, cols});
      float* out = n.value.data.data();
      for (int id : ins) {
        const Tensor& T = at(id).value;
        std::copy(T.data.begin(), T.data.end(), out);
        out += T.data.size();
      }
    } else {
      const int rank = at(ins[0]).value.rank();
      if (rank == 1) {
        int64_t total = 0;
        for (int id : ins) {
          if (at(id).value.rank() != 1) throw shape_error("concat", ins);
          total += at(id).value.shape[0];
        }
        n.value = Tensor::zeros({total});
        float* out = n.value.data.data();
        for (int id : ins) {
          const Tensor& T = at(id).value;
          std::copy(T.data.begin(), T.data.end(), out);
          out += T.data.size();
        }
      } else {
        const int64_t m = at(ins[0]).value.shape[0];
        int64_t cols = 0;
        for (int id : ins) {
          const Tensor& T = at(id).value;
          if (T.rank() != 2 || T.shape[0] != m) throw shape_error("concat", ins);
          cols += T.shape[1];
        }
        n.value = Tensor::zeros({m, cols});
        int64_t off = 0;
        for (int id : ins) {
          const Tensor& T = at(id).value;
          const int64_t c = T.shape[1];
          for (int64_t i = 0; i < m; ++i)
            std::copy(T.data.begin() + i * c, T.data.begin() + (i + 1) * c,
                      n.value.data.begin() + i * cols + off);
          off += c;
        }
      }
    }
    return push(std::move(n));
  }

  int silu(int a) {
    const Tensor& A = at(a).value;
    Node n = op(OpKind::silu, {a});
    n.value = Tensor::zeros(A.shape);
    for (size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = detail::silu_f(A.data[i]);
    return push(std::move(n));
  }

  int relu(int a) {
    const Tensor& A = at(a).value;
    Node n = op(OpKind::relu, {a});
    n.value = Tensor::zeros(A.shape);
    for (size_t i = 0; i < A.data.size(); ++i)
      n.value.data[i] = A.data[i] > 0.0f ? A.data[i] : 0.0f;
    return push(std::move(n));
  }

  int sum(int a, int axis = kAxisAll) { return reduce(OpKind::sum, a, axis); }
  int mean(int a, int axis = kAxisAll) { return reduce(OpKind::mean, a, axis); }

  int mse(int a, int b) {
    const Tensor& A = at(a).value;
    const Tensor& B = at(b).value;
    if (A.shape != B.shape) throw shape_error("mse", {a, b});
    Node n = op(OpKind::mse, {a, b});
    n.value = Tensor::scalar(float(detail::mse_d(A.data.data(), B.data.data(), A.data.size())));
    return push(std::move(n));
  }

  int cosine(int a, int b) {
    const Tensor& A = at(a).value;
    const Tensor& B = at(b).value;
    if (A.rank() != 1 || B.rank() != 1 || A.shape != B.shape) throw shape_error("cosine_similarity", {a, b});
    Node n = op(OpKind::cosine, {a, b});
    n.value = Tensor::scalar(float(detail::cosine_d(A.data.data(), B.data.data(), A.data.size())));
    return push(std::move(n));
  }

  int abs_val(int a) {
    const Tensor& A = at(a).value;
    Node n = op(OpKind::abs_val, {a});
    n.value = Tensor::zeros(A.shape);
    for (size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = std::fabs(A.data[i]);
    return push(std::move(n));
  }

  int scale(int a, float c) {
    if (!std::isfinite(c)) throw Error(Error::Kind::numeric, "scale: non-finite factor");
    const Tensor& A = at(a).value;
    Node n = op(OpKind::scale, {a});
    n.scalar = c;
    n.value = Tensor::zeros(A.shape);
    for (size_t i = 0; i < A.data.size(); ++i) n.value.data[i] = c * A.data[i];
    return push(std::move(n));
  }

  // Gathers rows of a [V,d] table; gradient scatter-adds back in id order.
  int index_rows(int table, const std::vector<int>& ids) {
    const Tensor& T = at(table).value;
    if (T.rank() != 2) throw shape_error("index_rows", {table});
    if (ids.empty()) throw Error(Error::Kind::shape, "index_rows: empty id list");
    for (int id : ids)
      if (id < 0 || id >= T.shape[0])
        throw Error(Error::Kind::shape, "index_rows: id " + std::to_string(id) +
                                            " out of range for table " + shape_str(T.shape));
    Node n = op(OpKind::index_rows, {table});
    n.rows = ids;
    const int64_t d = T.shape[1];
    n.value = Tensor::zeros({int64_t(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
      std::copy(T.data.begin() + int64_t(ids[i]) * d, T.data.begin() + (int64_t(ids[i]) + 1) * d,
                n.value.data.begin() + int64_t(i) * d);
    return push(std::move(n));
  }

  // Constant-producing op: stacked sinusoidal embeddings of integer timesteps.
  int sinusoid(const std::vector<int>& t_values, int64_t dim) {
    if (dim < 2 || dim % 2 != 0)
      throw Error(Error::Kind::shape, "sinusoid_embed: dim must be even and >= 2");
    if (t_values.empty()) throw Error(Error::Kind::shape, "sinusoid_embed: no timesteps");
    Node n = op(OpKind::sinusoid, {});
    n.rows = t_values;
    n.dim = dim;
    n.value = Tensor::zeros({int64_t(t_values.size()), dim});
    for (size_t i = 0; i < t_values.size(); ++i) {
      if (t_values[i] < 0) throw Error(Error::Kind::contract, "sinusoid_embed: t must be >= 0");
      detail::sinusoid(t_values[i], dim, n.value.data.data() + int64_t(i) * dim);
    }
    return push(std::move(n));
  }

  // Reverse-topological accumulation from a scalar root. Pass gradients are
  // added into each node's persistent grad and into bound tensors with
  // requires_grad set, so repeated calls accumulate additively.
  void backward(int root) {
    const Node& r = at(root);
    if (r.value.numel() != 1)
      throw Error(Error::Kind::shape, "backward: root must be scalar, got " + shape_str(r.value.shape));
    std::vector<std::vector<float>> g(nodes_.size());
    g[size_t(root)].assign(1, 1.0f);
    for (int id = root; id >= 0; --id) {
      if (g[size_t(id)].empty()) continue;
      propagate(id, g);
    }
    for (size_t id = 0; id < nodes_.size(); ++id) {
      if (g[id].empty()) continue;
      Node& n = nodes_[id];
      if (n.grad.empty()) n.grad.assign(n.value.data.size(), 0.0f);
      for (size_t i = 0; i < g[id].size(); ++i) n.grad[i] += g[id][i];
      if (n.bound && n.bound->requires_grad) {
        n.bound->ensure_grad();
        for (size_t i = 0; i < g[id].size(); ++i) n.bound->grad[i] += g[id][i];
      }
    }
  }

 private:
  std::vector<Node> nodes_;

  const Node& at(int id) const {
    if (id < 0 || id >= int(nodes_.size()))
      throw Error(Error::Kind::contract, "invalid node id " + std::to_string(id));
    return nodes_[size_t(id)];
  }

  Node op(OpKind k, std::vector<int> ins) {
    for (int id : ins) at(id);  // validate ids
    Node n;
    n.kind = k;
    n.inputs = std::move(ins);
    return n;
  }

  int push(Node n) {
    check_finite(n.value, op_name(n.kind));
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
  }

  Error shape_error(const std::string& opname, const std::vector<int>& ins) const {
    std::string msg = opname + ": incompatible shapes";
    for (int id : ins) msg += " " + shape_str(at(id).value.shape);
    return Error(Error::Kind::shape, msg);
  }

  int reduce(OpKind k, int a, int axis) {
    const Tensor& A = at(a).value;
    if (axis != kAxisAll && axis != 0 && axis != 1)
      throw Error(Error::Kind::shape, std::string(op_name(k)) + ": bad axis " + std::to_string(axis));
    if (axis == 1 && A.rank() != 2) throw shape_error(op_name(k), {a});
    Node n = op(k, {a});
    n.axis = axis;
    const bool is_mean = k == OpKind::mean;
    if (axis == kAxisAll || A.rank() == 1) {
      double s = 0.0;
      for (float v : A.data) s += double(v);
      if (is_mean) s /= double(A.data.size());
      n.value = Tensor::scalar(float(s));
      n.axis = kAxisAll;
    } else if (axis == 0) {
      const int64_t m = A.shape[0], c = A.shape[1];
      n.value = Tensor::zeros({c});
      for (int64_t j = 0; j < c; ++j) {
        double s = 0.0;
        for (int64_t i = 0; i < m; ++i) s += double(A.data[size_t(i * c + j)]);
        if (is_mean) s /= double(m);
        n.value.data[size_t(j)] = float(s);
      }
    } else {
      const int64_t m = A.shape[0], c = A.shape[1];
      n.value = Tensor::zeros({m});
      for (int64_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < c; ++j) s += double(A.data[size_t(i * c + j)]);
        if (is_mean) s /= double(c);
        n.value.data[size_t(i)] = float(s);
      }
    }
    return push(std::move(n));
  }

  void add_into(std::vector<float>& dst, size_t n, size_t off, const float* src, size_t cnt) {
    if (dst.empty()) dst.assign(n, 0.0f);
    for (size_t i = 0; i < cnt; ++i) dst[off + i] += src[i];
  }

  void propagate(int id, std::vector<std::vector<float>>& g) {
    Node& n = nodes_[size_t(id)];
    const std::vector<float>& up = g[size_t(id)];
    auto in_val = [&](int slot) -> const Tensor& { return nodes_[size_t(n.inputs[size_t(slot)])].value; };
    auto in_grad = [&](int slot) -> std::vector<float>& {
      std::vector<float>& dst = g[size_t(n.inputs[size_t(slot)])];
      if (dst.empty()) dst.assign(in_val(slot).data.size(), 0.0f);
      return dst;
    };
    switch (n.kind) {
      case OpKind::leaf:
      case OpKind::sinusoid:
        break;
      case OpKind::matmul: {
        const Tensor& A = in_val(0);
        const Tensor& B = in_val(1);
        detail::matmul_abt_acc(up.data(), A.shape[0], B.shape[1], B.data.data(), B.shape[0],
                               in_grad(0).data());
        detail::matmul_atb_acc(A.data.data(), A.shape[0], A.shape[1], up.data(), B.shape[1],
                               in_grad(1).data());
        break;
      }
      case OpKind::add: {
        const Tensor& A = in_val(0);
        const Tensor& B = in_val(1);
        std::vector<float>& da = in_grad(0);
        for (size_t i = 0; i < up.size(); ++i) da[i] += up[i];
        std::vector<float>& db = in_grad(1);
        if (A.shape == B.shape) {
          for (size_t i = 0; i < up.size(); ++i) db[i] += up[i];
        } else {  // bias broadcast: column-sum with double accumulation
          const int64_t m = A.shape[0], c = A.shape[1];
          for (int64_t j = 0; j < c; ++j) {
            double s = 0.0;
            for (int64_t i = 0; i < m; ++i) s += double(up[size_t(i * c + j)]);
            db[size_t(j)] += float(s);
          }
        }
        break;
      }
      case OpKind::mul: {
        const Tensor& A = in_val(0);
        const Tensor& B = in_val(1);
        std::vector<float>& da = in_grad(0);
        std::vector<float>& db = in_grad(1);
        for (size_t i = 0; i < up.size(); ++i) {
          da[i] += up[i] * B.data[i];
          db[i] += up[i] * A.data[i];
        }
        break;
      }
      case OpKind::concat: {
        size_t off = 0;
        if (n.axis == 0 || in_val(0).rank() == 1) {
          for (size_t s = 0; s < n.inputs.size(); ++s) {
            const size_t cnt = in_val(int(s)).data.size();
            std::vector<float>& d = in_grad(int(s));
            for (size_t i = 0; i < cnt; ++i) d[i] += up[off + i];
            off += cnt;
          }
        } else {  // axis 1, rank-2 operands
          const int64_t m = n.value.shape[0], cols = n.value.shape[1];
          int64_t coff = 0;
          for (size_t s = 0; s < n.inputs.size(); ++s) {
            const int64_t c = in_val(int(s)).shape[1];
            std::vector<float>& d = in_grad(int(s));
            for (int64_t i = 0; i < m; ++i)
              for (int64_t j = 0; j < c; ++j)
                d[size_t(i * c + j)] += up[size_t(i * cols + coff + j)];
            coff += c;
          }
        }
        break;
      }
      case OpKind::silu: {
        const Tensor& A = in_val(0);
        std::vector<float>& da = in_grad(0);
        for (size_t i = 0; i < up.size(); ++i)
          da[i] += float(double(up[i]) * detail::silu_grad_d(double(A.data[i])));
        break;
      }
      case OpKind::relu: {
        const Tensor& A = in_val(0);
        std::vector<float>& da = in_grad(0);
        for (size_t i = 0; i < up.size(); ++i)
          if (A.data[i] > 0.0f) da[i] += up[i];
        break;
      }
      case OpKind::sum:
      case OpKind::mean: {
        const Tensor& A = in_val(0);
        std::vector<float>& da = in_grad(0);
        const bool is_mean = n.kind == OpKind::mean;
        if (n.axis == kAxisAll) {
          const double f = is_mean ? double(up[0]) / double(A.data.size()) : double(up[0]);
          for (size_t i = 0; i < da.size(); ++i) da[i] += float(f);
        } else if (n.axis == 0) {
          const int64_t m = A.shape[0], c = A.shape[1];
          for (int64_t j = 0; j < c; ++j) {
            const double f = is_mean ? double(up[size_t(j)]) / double(m) : double(up[size_t(j)]);
            for (int64_t i = 0; i < m; ++i) da[size_t(i * c + j)] += float(f);
          }
        } else {
          const int64_t m = A.shape[0], c = A.shape[1];
          for (int64_t i = 0; i < m; ++i) {
            const double f = is_mean ? double(up[size_t(i)]) / double(c) : double(up[size_t(i)]);
            for (int64_t j = 0; j < c; ++j) da[size_t(i * c + j)] += float(f);
          }
        }
        break;
      }
      case OpKind::mse: {
        const Tensor& A = in_val(0);
        const Tensor& B = in_val(1);
        std::vector<float>& da = in_grad(0);
        std::vector<float>& db = in_grad(1);
        const double f = 2.0 * double(up[0]) / double(A.data.size());
        for (size_t i = 0; i < A.data.size(); ++i) {
          const double d = f * (double(A.data[i]) - double(B.data[i]));
          da[i] += float(d);
          db[i] -= float(d);
        }
        break;
      }
      case OpKind::cosine: {
        const Tensor& A = in_val(0);
        const Tensor& B = in_val(1);
        const size_t len = A.data.size();
        const double dot = detail::dot_d(A.data.data(), B.data.data(), len);
        const double na2 = detail::dot_d(A.data.data(), A.data.data(), len);
        const double nb2 = detail::dot_d(B.data.data(), B.data.data(), len);
        const double na = std::sqrt(na2), nb = std::sqrt(nb2);
        double den = na * nb;
        if (den < 1e-12) den = 1e-12;
        const double c = dot / den;
        std::vector<float>& da = in_grad(0);
        std::vector<float>& db = in_grad(1);
        const double u = double(up[0]);
        for (size_t i = 0; i < len; ++i) {
          da[i] += float(u * (double(B.data[i]) / den - c * double(A.data[i]) / std::max(na2, 1e-24)));
          db[i] += float(u * (double(A.data[i]) / den - c * double(B.data[i]) / std::max(nb2, 1e-24)));
        }
        break;
      }
      case OpKind::abs_val: {
        const Tensor& A = in_val(0);
        std::vector<float>& da = in_grad(0);
        for (size_t i = 0; i < up.size(); ++i) {
          if (A.data[i] > 0.0f) da[i] += up[i];
          else if (A.data[i] < 0.0f) da[i] -= up[i];
          // subgradient 0 at exactly 0
        }
        break;
      }
      case OpKind::scale: {
        std::vector<float>& da = in_grad(0);
        for (size_t i = 0; i < up.size(); ++i) da[i] += n.scalar * up[i];
        break;
      }
      case OpKind::index_rows: {
        const Tensor& T = in_val(0);
        std::vector<float>& dt = in_grad(0);
        const int64_t d = T.shape[1];
        for (size_t i = 0; i < n.rows.size(); ++i)
          for (int64_t j = 0; j < d; ++j)
            dt[size_t(int64_t(n.rows[i]) * d + j)] += up[size_t(int64_t(i) * d + j)];
        break;
      }
    }
  }
};

inline void zero_grad(const std::vector<Tensor*>& params) {
  for (Tensor* p : params) p->zero_grad();
}

}  // namespace coffee
