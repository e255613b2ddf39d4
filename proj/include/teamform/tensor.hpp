#pragma once

// Dense row-major tensors with reverse-mode gradient propagation.
//
// Every op builds a node holding its parents and a backward closure; calling
// backward() on a scalar output walks the graph in reverse topological order
// and accumulates gradients into each tensor's grad buffer. Tensors are
// immutable once written by an op's forward pass; independent graphs may run
// on independent threads (the grad/finite-check toggles are thread_local).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace teamform {

// Runtime toggle for NaN/Inf screening of op outputs. On by default in debug
// builds; tests flip it explicitly where they exercise the error path.
inline bool& finite_checks() {
#ifdef NDEBUG
  thread_local bool on = false;
#else
  thread_local bool on = true;
#endif
  return on;
}

inline bool& grad_enabled() {
  thread_local bool on = true;
  return on;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_enabled()) { grad_enabled() = false; }
  ~NoGradGuard() { grad_enabled() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

namespace detail {

inline std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

[[noreturn]] inline void dim_error(const std::string& op, const std::vector<int>& a,
                                   const std::vector<int>& b) {
  throw std::invalid_argument(op + ": incompatible shapes " + shape_str(a) + " vs " +
                              shape_str(b));
}

}  // namespace detail

// Binary agent-by-entity (or generic) mask. Kept separate from Tensor: masks
// never carry gradients and are compared/validated bitwise.
struct BinaryMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<uint8_t> v;

  BinaryMatrix() = default;
  BinaryMatrix(int r, int c, uint8_t fill = 0) : rows(r), cols(c), v(size_t(r) * c, fill) {}

  static BinaryMatrix ones(int r, int c) { return BinaryMatrix(r, c, 1); }
  static BinaryMatrix zeros(int r, int c) { return BinaryMatrix(r, c, 0); }

  uint8_t operator()(int r, int c) const { return v[size_t(r) * cols + c]; }
  uint8_t& operator()(int r, int c) { return v[size_t(r) * cols + c]; }
  bool same_shape(const BinaryMatrix& o) const { return rows == o.rows && cols == o.cols; }
  bool operator==(const BinaryMatrix& o) const {
    return rows == o.rows && cols == o.cols && v == o.v;
  }
  int row_sum(int r) const {
    int n = 0;
    for (int c = 0; c < cols; ++c) n += (*this)(r, c);
    return n;
  }
};

template <class Real>
struct Node;

template <class Real>
struct Tensor {
  static_assert(std::is_floating_point_v<Real>);

  std::vector<int> shape;
  std::shared_ptr<std::vector<Real>> data;
  std::shared_ptr<std::vector<Real>> grad;  // same length as data when present
  bool requires_grad = false;
  std::shared_ptr<Node<Real>> node;

  Tensor() = default;

  int numel() const {
    if (shape.empty()) return 0;
    int n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  int rank() const { return int(shape.size()); }
  int rows() const { return shape.empty() ? 0 : shape[0]; }
  int cols() const { return rank() < 2 ? (rank() == 1 ? 1 : 0) : shape[1]; }
  bool defined() const { return static_cast<bool>(data); }

  std::vector<Real>& vals() { return *data; }
  const std::vector<Real>& vals() const { return *data; }

  Real& at(int r, int c) { return (*data)[size_t(r) * shape[1] + c]; }
  Real at(int r, int c) const { return (*data)[size_t(r) * shape[1] + c]; }
  Real& at(int i) { return (*data)[i]; }
  Real at(int i) const { return (*data)[i]; }

  // Scalar read; contract: numel() == 1.
  Real value() const {
    if (numel() != 1) throw std::invalid_argument("Tensor::value: tensor is not scalar");
    return (*data)[0];
  }

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false) {
    Tensor t;
    t.shape = std::move(shape);
    for (int d : t.shape)
      if (d <= 0) throw std::invalid_argument("Tensor: nonpositive dimension");
    t.data = std::make_shared<std::vector<Real>>(size_t(t.numel()), Real(0));
    t.requires_grad = requires_grad;
    if (requires_grad) t.grad = std::make_shared<std::vector<Real>>(size_t(t.numel()), Real(0));
    return t;
  }

  static Tensor from(std::vector<int> shape, std::vector<Real> values,
                     bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    if (int(values.size()) != t.numel())
      throw std::invalid_argument("Tensor::from: value count does not match shape");
    *t.data = std::move(values);
    return t;
  }

  static Tensor scalar(Real v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  template <class Rng>
  static Tensor randu(std::vector<int> shape, Rng& rng, double lo, double hi,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& x : *t.data) x = Real(dist(rng));
    return t;
  }

  // Value copy with no graph history.
  Tensor detached() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<Real>>(*data);
    t.requires_grad = false;
    return t;
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), Real(0));
  }
};

template <class Real>
struct Node {
  std::vector<Tensor<Real>> parents;
  std::function<void()> backward;  // closures capture parents + output grad buffer
  const char* op = "";
};

namespace detail {

template <class Real>
void check_finite(const Tensor<Real>& t, const char* op) {
  if (!finite_checks()) return;
  for (Real x : *t.data) {
    if (!std::isfinite(double(x)))
      throw std::runtime_error(std::string(op) + ": non-finite value in output");
  }
}

template <class Real>
Tensor<Real> make_out(std::vector<int> shape, bool track, const char* op,
                      std::vector<Tensor<Real>> parents) {
  Tensor<Real> out = Tensor<Real>::zeros(std::move(shape), track);
  if (track) {
    out.node = std::make_shared<Node<Real>>();
    out.node->parents = std::move(parents);
    out.node->op = op;
  }
  return out;
}

template <class Real>
bool track(const Tensor<Real>& a) {
  return grad_enabled() && a.requires_grad;
}
template <class Real>
bool track(const Tensor<Real>& a, const Tensor<Real>& b) {
  return grad_enabled() && (a.requires_grad || b.requires_grad);
}

}  // namespace detail

// Reverse-mode sweep from a scalar root. Each node runs once; the graph is
// released as it is consumed, so a tensor cannot be backpropagated twice.
template <class Real>
void backward(const Tensor<Real>& root) {
  if (root.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar, got shape " +
                                detail::shape_str(root.shape));
  if (!root.requires_grad || !root.grad) return;
  (*root.grad)[0] += Real(1);
  if (!root.node) return;

  // Iterative post-order DFS; reversed order runs every consumer before its
  // producers. Shared ownership in `order` keeps ancestors alive while their
  // consumers release parent links.
  std::vector<std::shared_ptr<Node<Real>>> order;
  std::unordered_set<Node<Real>*> visited;
  std::vector<std::pair<std::shared_ptr<Node<Real>>, size_t>> stack;
  stack.push_back({root.node, 0});
  visited.insert(root.node.get());
  while (!stack.empty()) {
    Node<Real>* n = stack.back().first.get();
    size_t i = stack.back().second;
    if (i < n->parents.size()) {
      stack.back().second = i + 1;  // advance before push_back may reallocate
      const std::shared_ptr<Node<Real>>& p = n->parents[i].node;
      if (p && !visited.count(p.get())) {
        visited.insert(p.get());
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(stack.back().first);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<Real>* n = it->get();
    if (n->backward) n->backward();
    n->backward = nullptr;
    n->parents.clear();
  }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

template <class Real>
Tensor<Real> matmul(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
    detail::dim_error("matmul", a.shape, b.shape);
  const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
  bool tr = detail::track(a, b);
  Tensor<Real> out = detail::make_out<Real>({m, n}, tr, "matmul", {a, b});
  const Real* pa = a.data->data();
  const Real* pb = b.data->data();
  Real* po = out.data->data();
  for (int i = 0; i < m; ++i) {
    for (int p = 0; p < k; ++p) {
      const Real av = pa[size_t(i) * k + p];
      if (av == Real(0)) continue;
      const Real* brow = pb + size_t(p) * n;
      Real* orow = po + size_t(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  detail::check_finite(out, "matmul");
  if (tr) {
    auto gout = out.grad;
    out.node->backward = [a, b, gout, m, k, n]() {
      const Real* g = gout->data();
      if (a.requires_grad) {
        Real* ga = a.grad->data();
        const Real* pb2 = b.data->data();
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            Real s = 0;
            const Real* grow = g + size_t(i) * n;
            const Real* brow = pb2 + size_t(p) * n;
            for (int j = 0; j < n; ++j) s += grow[j] * brow[j];
            ga[size_t(i) * k + p] += s;
          }
      }
      if (b.requires_grad) {
        Real* gb = b.grad->data();
        const Real* pa2 = a.data->data();
        for (int i = 0; i < m; ++i) {
          const Real* grow = g + size_t(i) * n;
          for (int p = 0; p < k; ++p) {
            const Real av = pa2[size_t(i) * k + p];
            if (av == Real(0)) continue;
            Real* gbrow = gb + size_t(p) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
        }
      }
    };
  }
  return out;
}

template <class Real>
Tensor<Real> transpose(const Tensor<Real>& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: rank-2 tensor required");
  const int m = a.shape[0], n = a.shape[1];
  bool tr = detail::track(a);
  Tensor<Real> out = detail::make_out<Real>({n, m}, tr, "transpose", {a});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) (*out.data)[size_t(j) * m + i] = (*a.data)[size_t(i) * n + j];
  if (tr) {
    auto gout = out.grad;
    out.node->backward = [a, gout, m, n]() {
      if (!a.requires_grad) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
          (*a.grad)[size_t(i) * n + j] += (*gout)[size_t(j) * m + i];
    };
  }
  return out;
}

namespace detail {

// Shared skeleton for same-shape binary elementwise ops.
template <class Real, class Fwd, class Bwd>
Tensor<Real> binary_elem(const char* name, const Tensor<Real>& a, const Tensor<Real>& b,
                         Fwd fwd, Bwd bwd) {
  if (a.shape != b.shape) detail::dim_error(name, a.shape, b.shape);
  bool tr = detail::track(a, b);
  Tensor<Real> out = detail::make_out<Real>(a.shape, tr, name, {a, b});
  const int n = a.numel();
  for (int i = 0; i < n; ++i) (*out.data)[i] = fwd((*a.data)[i], (*b.data)[i]);
  detail::check_finite(out, name);
  if (tr) {
    auto gout = out.grad;
    out.node->backward = [a, b, gout, n, bwd]() {
      for (int i = 0; i < n; ++i) {
        Real ga, gb;
        bwd((*a.data)[i], (*b.data)[i], (*gout)[i], ga, gb);
        if (a.requires_grad) (*a.grad)[i] += ga;
        if (b.requires_grad) (*b.grad)[i] += gb;
      }
    };
  }
  return out;
}

// Unary elementwise: fwd(x) -> y, bwd(x, y, g) -> gx.
template <class Real, class Fwd, class Bwd>
Tensor<Real> unary_elem(const char* name, const Tensor<Real>& a, Fwd fwd, Bwd bwd) {
  bool tr = detail::track(a);
  Tensor<Real> out = detail::make_out<Real>(a.shape, tr, name, {a});
  const int n = a.numel();
  for (int i = 0; i < n; ++i) (*out.data)[i] = fwd((*a.data)[i]);
  detail::check_finite(out, name);
  if (tr) {
    auto gout = out.grad;
    auto odata = out.data;
    out.node->backward = [a, gout, odata, n, bwd]() {
      if (!a.requires_grad) return;
      for (int i = 0; i < n; ++i)
        (*a.grad)[i] += bwd((*a.data)[i], (*odata)[i], (*gout)[i]);
    };
  }
  return out;
}

}  // namespace detail

template <class Real>
Tensor<Real> add(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_elem<Real>(
      "add", a, b, [](Real x, Real y) { return x + y; },
      [](Real, Real, Real g, Real& ga, Real& gb) { ga = g; gb = g; });
}

template <class Real>
Tensor<Real> sub(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_elem<Real>(
      "sub", a, b, [](Real x, Real y) { return x - y; },
      [](Real, Real, Real g, Real& ga, Real& gb) { ga = g; gb = -g; });
}

template <class Real>
Tensor<Real> mul(const Tensor<Real>& a, const Tensor<Real>& b) {
  return detail::binary_elem<Real>(
      "mul", a, b, [](Real x, Real y) { return x * y; },
      [](Real x, Real y, Real g, Real& ga, Real& gb) { ga = g * y; gb = g * x; });
}

template <class Real>
Tensor<Real> emax(const Tensor<Real>& a, const Tensor<Real>& b) {
  // Ties route the gradient to the first argument.
  return detail::binary_elem<Real>(
      "emax", a, b, [](Real x, Real y) { return x >= y ? x : y; },
      [](Real x, Real y, Real g, Real& ga, Real& gb) {
        if (x >= y) { ga = g; gb = 0; } else { ga = 0; gb = g; }
      });
}

// out = scale * a + shift, elementwise.
template <class Real>
Tensor<Real> affine(const Tensor<Real>& a, double scale, double shift) {
  return detail::unary_elem<Real>(
      "affine", a,
      [scale, shift](Real x) { return Real(scale) * x + Real(shift); },
      [scale](Real, Real, Real g) { return Real(scale) * g; });
}

template <class Real>
Tensor<Real> relu(const Tensor<Real>& a) {
  return detail::unary_elem<Real>(
      "relu", a, [](Real x) { return x > Real(0) ? x : Real(0); },
      [](Real x, Real, Real g) { return x > Real(0) ? g : Real(0); });
}

template <class Real>
Tensor<Real> tanh(const Tensor<Real>& a) {
  return detail::unary_elem<Real>(
      "tanh", a, [](Real x) { return std::tanh(x); },
      [](Real, Real y, Real g) { return g * (Real(1) - y * y); });
}

template <class Real>
Tensor<Real> sigmoid(const Tensor<Real>& a) {
  return detail::unary_elem<Real>(
      "sigmoid", a, [](Real x) { return Real(1) / (Real(1) + std::exp(-x)); },
      [](Real, Real y, Real g) { return g * y * (Real(1) - y); });
}

template <class Real>
Tensor<Real> elu(const Tensor<Real>& a) {
  return detail::unary_elem<Real>(
      "elu", a, [](Real x) { return x > Real(0) ? x : std::exp(x) - Real(1); },
      [](Real x, Real y, Real g) { return x > Real(0) ? g : g * (y + Real(1)); });
}

template <class Real>
Tensor<Real> abs_val(const Tensor<Real>& a) {
  // Subgradient 0 at the kink.
  return detail::unary_elem<Real>(
      "abs_val", a, [](Real x) { return std::abs(x); },
      [](Real x, Real, Real g) { return x > Real(0) ? g : (x < Real(0) ? -g : Real(0)); });
}

// x: [m,n], bias: [n]; adds bias to every row.
template <class Real>
Tensor<Real> add_rowwise(const Tensor<Real>& x, const Tensor<Real>& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || bias.shape[0] != x.shape[1])
    detail::dim_error("add_rowwise", x.shape, bias.shape);
  const int m = x.shape[0], n = x.shape[1];
  bool tr = detail::track(x, bias);
  Tensor<Real> out = detail::make_out<Real>({m, n}, tr, "add_rowwise", {x, bias});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      (*out.data)[size_t(i) * n + j] = (*x.data)[size_t(i) * n + j] + (*bias.data)[j];
  detail::check_finite(out, "add_rowwise");
  if (tr) {
    auto gout = out.grad;
    out.node->backward = [x, bias, gout, m, n]() {
      if (x.requires_grad)
        for (int i = 0; i < m * n; ++i) (*x.grad)[i] += (*gout)[i];
      if (bias.requires_grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) (*bias.grad)[j] += (*gout)[size_t(i) * n + j];
    };
  }
  return out;
}

// Masked, numerically stabilized softmax. Masked entries get weight exactly
// zero; each slice along `axis` must keep at least one unmasked entry.
// Rank-1 logits are treated as a single slice.
template <class Real>
Tensor<Real> softmax_masked(const Tensor<Real>& logits, const BinaryMatrix& mask,
                            int axis = 1) {
  int m, n;
  if (logits.rank() == 1) {
    m = 1;
    n = logits.shape[0];
    axis = 1;
  } else if (logits.rank() == 2) {
    m = logits.shape[0];
    n = logits.shape[1];
  } else {
    throw std::invalid_argument("softmax_masked: rank-1 or rank-2 tensor required");
  }
  if (mask.rows * mask.cols != m * n ||
      (logits.rank() == 2 && (mask.rows != m || mask.cols != n)))
    detail::dim_error("softmax_masked (mask)", logits.shape, {mask.rows, mask.cols});
  if (axis != 0 && axis != 1)
    throw std::invalid_argument("softmax_masked: axis must be 0 or 1");

  const int slices = (axis == 1) ? m : n;
  const int width = (axis == 1) ? n : m;
  auto idx = [axis, n](int s, int k) {
    return (axis == 1) ? size_t(s) * n + k : size_t(k) * n + s;
  };

  bool tr = detail::track(logits);
  Tensor<Real> out = detail::make_out<Real>(logits.shape, tr, "softmax_masked", {logits});
  for (int s = 0; s < slices; ++s) {
    Real mx = -std::numeric_limits<Real>::infinity();
    int live = 0;
    for (int k = 0; k < width; ++k)
      if (mask.v[idx(s, k)]) {
        mx = std::max(mx, (*logits.data)[idx(s, k)]);
        ++live;
      }
    if (live == 0)
      throw std::runtime_error("softmax_masked: fully masked slice " + std::to_string(s));
    Real z = 0;
    for (int k = 0; k < width; ++k)
      if (mask.v[idx(s, k)]) {
        Real e = std::exp((*logits.data)[idx(s, k)] - mx);
        (*out.data)[idx(s, k)] = e;
        z += e;
      }
    for (int k = 0; k < width; ++k)
      if (mask.v[idx(s, k)]) (*out.data)[idx(s, k)] /= z;
  }
  detail::check_finite(out, "softmax_masked");
  if (tr) {
    auto gout = out.grad;
    auto odata = out.data;
    auto mv = mask.v;
    out.node->backward = [logits, gout, odata, mv, slices, width, idx]() {
      if (!logits.requires_grad) return;
      for (int s = 0; s < slices; ++s) {
        Real dot = 0;
        for (int k = 0; k < width; ++k)
          if (mv[idx(s, k)]) dot += (*gout)[idx(s, k)] * (*odata)[idx(s, k)];
        for (int k = 0; k < width; ++k)
          if (mv[idx(s, k)]) {
            size_t p = idx(s, k);
            (*logits.grad)[p] += (*odata)[p] * ((*gout)[p] - dot);
          }
      }
    };
  }
  return out;
}

template <class Real>
Tensor<Real> concat_cols(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0])
    detail::dim_error("concat_cols", a.shape, b.shape);
  const int m = a.shape[0], p = a.shape[1], q = b.shape[1];
  bool tr = detail::track(a, b);
  Tensor<Real> out = detail::make_out<Real>({m, p + q}, tr, "concat_cols", {a, b});
  for (int i = 0; i < m; ++i) {
    std::copy_n(a.data->data() + size_t(i) * p, p, out.data->data() + size_t(i) * (p + q));
    std::copy_n(b.data->data() + size_t(i) * q, q, out.data->data() + size_t(i) * (p + q) + p);
  }
  if (tr) {
    auto gout = out.grad;
    out.node->backward = [a, b, gout, m, p, q]() {
      for (int i = 0; i < m; ++i) {
        if (a.requires_grad)
          for (int j = 0; j < p; ++j)
            (*a.grad)[size_t(i) * p + j] += (*gout)[size_t(i) * (p + q) + j];
        if (b.requires_grad)
          for (int j = 0; j < q; ++j)
            (*b.grad)[size_t(i) * q + j] += (*gout)[size_t(i) * (p + q) + p + j];
      }
    };
  }
  return out;
}

template <class Real>
Tensor<Real> concat_rows(const Tensor<Real>& a, const Tensor<Real>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1])
    detail::dim_error("concat_rows", a.shape, b.shape);
  const int p = a.shape[0], q = b.shape[0], n = a.shape[1];
  bool tr = detail::track(a, b);
  Tensor<Real> out = detail::make_out<Real>({p + q, n}, tr, "concat_rows", {a, b});
  std::copy_n(a.data->data(), size_t(p) * n, out.data->data());
  std::copy_n(b.data->data(), size_t(q) * n, out.data->data() + size_t(p) * n);
  if (tr) {
    auto gout = out.grad;
    out.node->backward = [a, b, gout, p, q, n]() {
      if (a.requires_grad)
        for (size_t i = 0; i < size_t(p) * n; ++i) (*a.grad)[i] += (*gout)[i];
      if (b.requires_grad)
        for (size_t i = 0; i < size_t(q) * n; ++i) (*b.grad)[i] += (*gout)[size_t(p) * n + i];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> slice_rows(const Tensor<Real>& a, int r0, int r1) {
  if (a.rank() != 2 || r0 < 0 || r1 > a.shape[0] || r0 >= r1)
    throw std::invalid_argument("slice_rows: bad range [" + std::to_string(r0) + "," +
                                std::to_string(r1) + ") for shape " +
                                detail::shape_str(a.shape));
  const int n = a.shape[1], k = r1 - r0;
  bool tr = detail::track(a);
  Tensor<Real> out = detail::make_out<Real>({k, n}, tr, "slice_rows", {a});
  std::copy_n(a.data->data() + size_t(r0) * n, size_t(k) * n, out.data->data());
  if (tr) {
    auto gout = out.grad;
    out.node->backward = [a, gout, r0, k, n]() {
      if (!a.requires_grad) return;
      for (size_t i = 0; i < size_t(k) * n; ++i)
        (*a.grad)[size_t(r0) * n + i] += (*gout)[i];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> slice_cols(const Tensor<Real>& a, int c0, int c1) {
  if (a.rank() != 2 || c0 < 0 || c1 > a.shape[1] || c0 >= c1)
    throw std::invalid_argument("slice_cols: bad range [" + std::to_string(c0) + "," +
                                std::to_string(c1) + ") for shape " +
                                detail::shape_str(a.shape));
  const int m = a.shape[0], n = a.shape[1], k = c1 - c0;
  bool tr = detail::track(a);
  Tensor<Real> out = detail::make_out<Real>({m, k}, tr, "slice_cols", {a});
  for (int i = 0; i < m; ++i)
    std::copy_n(a.data->data() + size_t(i) * n + c0, k, out.data->data() + size_t(i) * k);
  if (tr) {
    auto gout = out.grad;
    out.node->backward = [a, gout, m, n, c0, k]() {
      if (!a.requires_grad) return;
      for (int i = 0; i < m; ++i)
        for (int j = 0; j < k; ++j)
          (*a.grad)[size_t(i) * n + c0 + j] += (*gout)[size_t(i) * k + j];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> reshape(const Tensor<Real>& a, std::vector<int> shape) {
  int n = 1;
  for (int d : shape) n *= d;
  if (n != a.numel())
    detail::dim_error("reshape", a.shape, shape);
  bool tr = detail::track(a);
  Tensor<Real> out = detail::make_out<Real>(shape, tr, "reshape", {a});
  *out.data = *a.data;
  if (tr) {
    auto gout = out.grad;
    out.node->backward = [a, gout, n]() {
      if (!a.requires_grad) return;
      for (int i = 0; i < n; ++i) (*a.grad)[i] += (*gout)[i];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> sum_all(const Tensor<Real>& a) {
  bool tr = detail::track(a);
  Tensor<Real> out = detail::make_out<Real>({1}, tr, "sum_all", {a});
  Real s = 0;
  for (Real x : *a.data) s += x;
  (*out.data)[0] = s;
  if (tr) {
    auto gout = out.grad;
    out.node->backward = [a, gout]() {
      if (!a.requires_grad) return;
      for (auto& g : *a.grad) g += (*gout)[0];
    };
  }
  return out;
}

template <class Real>
Tensor<Real> mean_all(const Tensor<Real>& a) {
  return affine(sum_all(a), 1.0 / a.numel(), 0.0);
}

// out[i,0] = x[i, idx[i]].
template <class Real>
Tensor<Real> gather_per_row(const Tensor<Real>& x, const std::vector<int>& idx) {
  if (x.rank() != 2 || int(idx.size()) != x.shape[0])
    throw std::invalid_argument("gather_per_row: index count must equal row count");
  const int m = x.shape[0], n = x.shape[1];
  for (int i = 0; i < m; ++i)
    if (idx[i] < 0 || idx[i] >= n)
      throw std::invalid_argument("gather_per_row: index out of range in row " +
                                  std::to_string(i));
  bool tr = detail::track(x);
  Tensor<Real> out = detail::make_out<Real>({m, 1}, tr, "gather_per_row", {x});
  for (int i = 0; i < m; ++i) (*out.data)[i] = (*x.data)[size_t(i) * n + idx[i]];
  if (tr) {
    auto gout = out.grad;
    out.node->backward = [x, gout, idx, n, m]() {
      if (!x.requires_grad) return;
      for (int i = 0; i < m; ++i) (*x.grad)[size_t(i) * n + idx[i]] += (*gout)[i];
    };
  }
  return out;
}

// out[r,:] = x[idx[r],:]; duplicate indices accumulate on backward.
template <class Real>
Tensor<Real> gather_rows(const Tensor<Real>& x, const std::vector<int>& idx) {
  if (x.rank() != 2) throw std::invalid_argument("gather_rows: rank-2 tensor required");
  const int n = x.shape[1], k = int(idx.size());
  if (k == 0) throw std::invalid_argument("gather_rows: empty index list");
  for (int r : idx)
    if (r < 0 || r >= x.shape[0])
      throw std::invalid_argument("gather_rows: row index out of range");
  bool tr = detail::track(x);
  Tensor<Real> out = detail::make_out<Real>({k, n}, tr, "gather_rows", {x});
  for (int r = 0; r < k; ++r)
    std::copy_n(x.data->data() + size_t(idx[r]) * n, n, out.data->data() + size_t(r) * n);
  if (tr) {
    auto gout = out.grad;
    out.node->backward = [x, gout, idx, n, k]() {
      if (!x.requires_grad) return;
      for (int r = 0; r < k; ++r)
        for (int j = 0; j < n; ++j)
          (*x.grad)[size_t(idx[r]) * n + j] += (*gout)[size_t(r) * n + j];
    };
  }
  return out;
}

// Columnwise max over a selected set of rows -> [1,n]. Gradient routes to the
// first row attaining the max in each column.
template <class Real>
Tensor<Real> rowset_max(const Tensor<Real>& x, const std::vector<int>& rows) {
  if (x.rank() != 2) throw std::invalid_argument("rowset_max: rank-2 tensor required");
  if (rows.empty()) throw std::invalid_argument("rowset_max: empty row set");
  const int n = x.shape[1];
  for (int r : rows)
    if (r < 0 || r >= x.shape[0])
      throw std::invalid_argument("rowset_max: row index out of range");
  bool tr = detail::track(x);
  Tensor<Real> out = detail::make_out<Real>({1, n}, tr, "rowset_max", {x});
  std::vector<int> argmax(n, rows[0]);
  for (int j = 0; j < n; ++j) {
    Real best = (*x.data)[size_t(rows[0]) * n + j];
    for (size_t r = 1; r < rows.size(); ++r) {
      Real v = (*x.data)[size_t(rows[r]) * n + j];
      if (v > best) {
        best = v;
        argmax[j] = rows[r];
      }
    }
    (*out.data)[j] = best;
  }
  if (tr) {
    auto gout = out.grad;
    out.node->backward = [x, gout, argmax, n]() {
      if (!x.requires_grad) return;
      for (int j = 0; j < n; ++j) (*x.grad)[size_t(argmax[j]) * n + j] += (*gout)[j];
    };
  }
  return out;
}

// Rows scaled to unit Euclidean norm (rows of all-zeros stay zero via eps).
template <class Real>
Tensor<Real> normalize_rows(const Tensor<Real>& x, double eps = 1e-12) {
  if (x.rank() != 2) throw std::invalid_argument("normalize_rows: rank-2 tensor required");
  const int m = x.shape[0], n = x.shape[1];
  bool tr = detail::track(x);
  Tensor<Real> out = detail::make_out<Real>({m, n}, tr, "normalize_rows", {x});
  std::vector<Real> norms(m);
  for (int i = 0; i < m; ++i) {
    Real s = 0;
    for (int j = 0; j < n; ++j) {
      Real v = (*x.data)[size_t(i) * n + j];
      s += v * v;
    }
    norms[i] = std::sqrt(s + Real(eps));
    for (int j = 0; j < n; ++j)
      (*out.data)[size_t(i) * n + j] = (*x.data)[size_t(i) * n + j] / norms[i];
  }
  detail::check_finite(out, "normalize_rows");
  if (tr) {
    auto gout = out.grad;
    auto odata = out.data;
    out.node->backward = [x, gout, odata, norms, m, n]() {
      if (!x.requires_grad) return;
      for (int i = 0; i < m; ++i) {
        Real dot = 0;
        for (int j = 0; j < n; ++j)
          dot += (*gout)[size_t(i) * n + j] * (*odata)[size_t(i) * n + j];
        for (int j = 0; j < n; ++j) {
          size_t p = size_t(i) * n + j;
          (*x.grad)[p] += ((*gout)[p] - dot * (*odata)[p]) / norms[i];
        }
      }
    };
  }
  return out;
}

// Per-row generated linear layer: row a of `gen` packs a weight matrix
// (in_dim x out_dim, input-major) followed by an out_dim bias; applied to the
// matching row of z. out[a,u] = sum_k z[a,k] * gen[a, k*out_dim+u] + gen[a, in_dim*out_dim+u].
template <class Real>
Tensor<Real> rowwise_generated_linear(const Tensor<Real>& z, const Tensor<Real>& gen,
                                      int in_dim, int out_dim) {
  if (z.rank() != 2 || gen.rank() != 2 || z.shape[0] != gen.shape[0] ||
      z.shape[1] != in_dim || gen.shape[1] != (in_dim + 1) * out_dim)
    detail::dim_error("rowwise_generated_linear", z.shape, gen.shape);
  const int m = z.shape[0];
  bool tr = detail::track(z, gen);
  Tensor<Real> out = detail::make_out<Real>({m, out_dim}, tr, "rowwise_generated_linear",
                                            {z, gen});
  const int bias_off = in_dim * out_dim;
  for (int a = 0; a < m; ++a) {
    const Real* zr = z.data->data() + size_t(a) * in_dim;
    const Real* gr = gen.data->data() + size_t(a) * gen.shape[1];
    Real* or_ = out.data->data() + size_t(a) * out_dim;
    for (int u = 0; u < out_dim; ++u) or_[u] = gr[bias_off + u];
    for (int k = 0; k < in_dim; ++k) {
      const Real zv = zr[k];
      if (zv == Real(0)) continue;
      for (int u = 0; u < out_dim; ++u) or_[u] += zv * gr[size_t(k) * out_dim + u];
    }
  }
  detail::check_finite(out, "rowwise_generated_linear");
  if (tr) {
    auto gout = out.grad;
    int gw = gen.shape[1];
    out.node->backward = [z, gen, gout, m, in_dim, out_dim, bias_off, gw]() {
      for (int a = 0; a < m; ++a) {
        const Real* g = gout->data() + size_t(a) * out_dim;
        const Real* zr = z.data->data() + size_t(a) * in_dim;
        const Real* gr = gen.data->data() + size_t(a) * gw;
        if (z.requires_grad) {
          Real* gz = z.grad->data() + size_t(a) * in_dim;
          for (int k = 0; k < in_dim; ++k) {
            Real s = 0;
            for (int u = 0; u < out_dim; ++u) s += g[u] * gr[size_t(k) * out_dim + u];
            gz[k] += s;
          }
        }
        if (gen.requires_grad) {
          Real* gg = gen.grad->data() + size_t(a) * gw;
          for (int k = 0; k < in_dim; ++k) {
            const Real zv = zr[k];
            if (zv == Real(0)) continue;
            for (int u = 0; u < out_dim; ++u) gg[size_t(k) * out_dim + u] += g[u] * zv;
          }
          for (int u = 0; u < out_dim; ++u) gg[bias_off + u] += g[u];
        }
      }
    };
  }
  return out;
}

// x * W + b with a rank-1 bias; the workhorse affine map.
template <class Real>
Tensor<Real> linear(const Tensor<Real>& x, const Tensor<Real>& w, const Tensor<Real>& b) {
  return add_rowwise(matmul(x, w), b);
}

}  // namespace teamform
