#pragma once

// Minimal dense tensor with reverse-mode differentiation.
//
// Tensors are row-major, f32 or f64 (chosen by template parameter), and
// immutable once produced by an op. Differentiable ops record a backward
// closure on the thread-local active Tape; Tape::backward replays them in
// reverse. Reshape is metadata-only: the value and gradient buffers are
// shared between the view and its base, so no tape node is needed for it.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hlip {

class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

using Shape = std::vector<int64_t>;

inline int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

template <class T>
struct TensorData {
  Shape shape;
  std::shared_ptr<std::vector<T>> val;
  std::shared_ptr<std::vector<T>> grad;  // allocated iff requires_grad
  bool requires_grad = false;
};

template <class T>
class Tape;

template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = shape;
    for (int64_t d : shape)
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    t.d_->val = std::make_shared<std::vector<T>>(static_cast<size_t>(numel_of(shape)), T(0));
    if (requires_grad) t.enable_grad();
    return t;
  }

  static Tensor from_vector(const Shape& shape, const std::vector<T>& v,
                            bool requires_grad = false) {
    Tensor t = zeros(shape, requires_grad);
    if (static_cast<int64_t>(v.size()) != t.numel())
      throw ShapeError("from_vector: " + std::to_string(v.size()) + " values for shape " +
                       shape_str(shape));
    *t.d_->val = v;
    return t;
  }

  static Tensor scalar(T v, bool requires_grad = false) {
    return from_vector({1}, {v}, requires_grad);
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int64_t dim(size_t i) const { return d_->shape[i]; }
  size_t rank() const { return d_->shape.size(); }
  int64_t numel() const { return numel_of(d_->shape); }
  bool requires_grad() const { return d_->requires_grad; }

  std::vector<T>& vals() { return *d_->val; }
  const std::vector<T>& vals() const { return *d_->val; }
  T* data() { return d_->val->data(); }
  const T* data() const { return d_->val->data(); }
  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return (*d_->val)[0];
  }

  std::vector<T>& grads() {
    if (!d_->grad) throw std::runtime_error("tensor has no gradient buffer");
    return *d_->grad;
  }
  const std::vector<T>& grads() const {
    if (!d_->grad) throw std::runtime_error("tensor has no gradient buffer");
    return *d_->grad;
  }
  T* grad_data() { return d_->grad ? d_->grad->data() : nullptr; }
  bool has_grad() const { return d_->grad != nullptr; }

  void enable_grad() {
    d_->requires_grad = true;
    if (!d_->grad)
      d_->grad = std::make_shared<std::vector<T>>(static_cast<size_t>(numel()), T(0));
  }
  void zero_grad() {
    if (d_->grad) std::fill(d_->grad->begin(), d_->grad->end(), T(0));
  }

  // Metadata-only reshape: the returned tensor shares value and gradient
  // buffers, so gradients written through the view land on the base.
  Tensor reshape(const Shape& shape) const {
    if (numel_of(shape) != numel())
      throw ShapeError("reshape: cannot view " + shape_str(this->shape()) + " as " +
                       shape_str(shape));
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = shape;
    t.d_->val = d_->val;
    t.d_->grad = d_->grad;
    t.d_->requires_grad = d_->requires_grad;
    return t;
  }

  Tensor detach() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = d_->shape;
    t.d_->val = d_->val;
    t.d_->requires_grad = false;
    return t;
  }

  Tensor clone() const {
    Tensor t = zeros(shape(), requires_grad());
    *t.d_->val = *d_->val;
    return t;
  }

  template <class U>
  Tensor<U> astype() const {
    Tensor<U> t = Tensor<U>::zeros(shape());
    const auto& src = vals();
    auto& dst = t.vals();
    for (size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<U>(src[i]);
    return t;
  }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

// Records backward closures of differentiable ops executed while active.
template <class T>
class Tape {
 public:
  Tape() {
    prev_ = current_;
    current_ = this;
  }
  ~Tape() { deactivate(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current() { return current_; }

  // Stops recording onto this tape while keeping it replayable; backward can
  // still be called later. Only the innermost active tape may deactivate.
  void deactivate() {
    if (current_ == this) current_ = prev_;
  }

  void record(std::function<void()> backward) { nodes_.push_back(std::move(backward)); }
  size_t size() const { return nodes_.size(); }

  // Seeds `output.grad` with `seed` (ones for a scalar loss when empty) and
  // replays the tape in reverse. A tape can be walked once.
  void backward(Tensor<T>& output, const std::vector<T>* seed = nullptr) {
    if (consumed_) throw std::runtime_error("backward: tape already consumed");
    if (!output.requires_grad())
      throw std::runtime_error("backward: output is detached from the tape");
    if (!seed) {
      if (output.numel() != 1)
        throw std::runtime_error("backward: loss must be scalar, got shape " +
                                 shape_str(output.shape()));
      output.grads()[0] += T(1);
    } else {
      if (static_cast<int64_t>(seed->size()) != output.numel())
        throw ShapeError("backward: seed size mismatch");
      auto& g = output.grads();
      for (size_t i = 0; i < seed->size(); ++i) g[i] += (*seed)[i];
    }
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    consumed_ = true;
  }

 private:
  std::vector<std::function<void()>> nodes_;
  Tape* prev_ = nullptr;
  bool consumed_ = false;
  static thread_local Tape* current_;
};

template <class T>
thread_local Tape<T>* Tape<T>::current_ = nullptr;

namespace detail {

template <class T>
inline bool track(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::current()) return false;
  for (const Tensor<T>* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

template <class T>
inline void mark_output(Tensor<T>& out) {
  out.enable_grad();
}

// a (rows x inner) times b (inner x cols) accumulated into c, ikj order.
// Rows are processed four at a time so each streamed row of b feeds four
// output rows; the per-element accumulation order matches the plain loop.
template <class T>
inline void gemm_acc(const T* a, const T* b, T* c, int64_t rows, int64_t inner, int64_t cols) {
  int64_t i = 0;
  for (; i + 4 <= rows; i += 4) {
    const T* a0 = a + i * inner;
    const T* a1 = a0 + inner;
    const T* a2 = a1 + inner;
    const T* a3 = a2 + inner;
    T* c0 = c + i * cols;
    T* c1 = c0 + cols;
    T* c2 = c1 + cols;
    T* c3 = c2 + cols;
    for (int64_t p = 0; p < inner; ++p) {
      T v0 = a0[p], v1 = a1[p], v2 = a2[p], v3 = a3[p];
      const T* bp = b + p * cols;
      for (int64_t j = 0; j < cols; ++j) {
        T bv = bp[j];
        c0[j] += v0 * bv;
        c1[j] += v1 * bv;
        c2[j] += v2 * bv;
        c3[j] += v3 * bv;
      }
    }
  }
  for (; i < rows; ++i) {
    const T* ai = a + i * inner;
    T* ci = c + i * cols;
    for (int64_t p = 0; p < inner; ++p) {
      T av = ai[p];
      const T* bp = b + p * cols;
      for (int64_t j = 0; j < cols; ++j) ci[j] += av * bp[j];
    }
  }
}

// c += a (rows x inner) times b^T where b is (cols x inner). Transposes b
// into scratch so the inner loop runs unit-stride like gemm_acc.
template <class T>
inline void gemm_bt_acc(const T* a, const T* b, T* c, int64_t rows, int64_t inner, int64_t cols) {
  std::vector<T> bt(static_cast<size_t>(inner) * cols);
  for (int64_t j = 0; j < cols; ++j)
    for (int64_t p = 0; p < inner; ++p) bt[p * cols + j] = b[j * inner + p];
  gemm_acc(a, bt.data(), c, rows, inner, cols);
}

// c += a^T (a is inner x rows) times b (inner x cols). The reduction axis is
// processed four at a time so each pass over c applies four terms; groups of
// four are summed before hitting c, which is deterministic but rounds
// differently from the plain loop.
template <class T>
inline void gemm_at_acc(const T* a, const T* b, T* c, int64_t rows, int64_t inner, int64_t cols) {
  int64_t p = 0;
  for (; p + 4 <= inner; p += 4) {
    const T* a0 = a + p * rows;
    const T* a1 = a0 + rows;
    const T* a2 = a1 + rows;
    const T* a3 = a2 + rows;
    const T* b0 = b + p * cols;
    const T* b1 = b0 + cols;
    const T* b2 = b1 + cols;
    const T* b3 = b2 + cols;
    for (int64_t i = 0; i < rows; ++i) {
      T v0 = a0[i], v1 = a1[i], v2 = a2[i], v3 = a3[i];
      T* ci = c + i * cols;
      for (int64_t j = 0; j < cols; ++j)
        ci[j] += ((v0 * b0[j] + v1 * b1[j]) + v2 * b2[j]) + v3 * b3[j];
    }
  }
  for (; p < inner; ++p) {
    const T* ap = a + p * rows;
    const T* bp = b + p * cols;
    for (int64_t i = 0; i < rows; ++i) {
      T av = ap[i];
      T* ci = c + i * cols;
      for (int64_t j = 0; j < cols; ++j) ci[j] += av * bp[j];
    }
  }
}

}  // namespace detail

// Batched matrix product. Batch dimensions must match exactly; a rank-2
// operand is treated as shared across the other operand's batch.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  int64_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
  int64_t k2 = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (k != k2)
    throw ShapeError("matmul: inner dimensions disagree: " + shape_str(sa) + " x " +
                     shape_str(sb));
  Shape batch_a(sa.begin(), sa.end() - 2), batch_b(sb.begin(), sb.end() - 2);
  Shape batch;
  if (batch_a.empty())
    batch = batch_b;
  else if (batch_b.empty())
    batch = batch_a;
  else if (batch_a == batch_b)
    batch = batch_a;
  else
    throw ShapeError("matmul: batch dimensions disagree: " + shape_str(sa) + " x " +
                     shape_str(sb));
  int64_t nb = numel_of(batch);
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  int64_t stride_a = batch_a.empty() ? 0 : m * k;
  int64_t stride_b = batch_b.empty() ? 0 : k * n;
  for (int64_t bi = 0; bi < nb; ++bi)
    detail::gemm_acc(a.data() + bi * stride_a, b.data() + bi * stride_b,
                     out.data() + bi * m * n, m, k, n);
  if (detail::track<T>({&a, &b})) {
    detail::mark_output(out);
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::current()->record([ac, bc, oc, nb, m, k, n, stride_a, stride_b]() mutable {
      const T* go = oc.grads().data();
      if (ac.requires_grad()) {
        T* ga = ac.grads().data();
        for (int64_t bi = 0; bi < nb; ++bi)
          detail::gemm_bt_acc(go + bi * m * n, bc.data() + bi * stride_b, ga + bi * stride_a, m,
                              n, k);
      }
      if (bc.requires_grad()) {
        T* gb = bc.grads().data();
        for (int64_t bi = 0; bi < nb; ++bi)
          detail::gemm_at_acc(ac.data() + bi * stride_a, go + bi * m * n, gb + bi * stride_b, k,
                              m, n);
      }
    });
  }
  return out;
}

// Softmax over the last dimension, max-subtracted. NaN inputs propagate NaN.
template <class T>
Tensor<T> softmax_lastdim(const Tensor<T>& x) {
  if (x.rank() < 1 || x.shape().back() < 1)
    throw ShapeError("softmax_lastdim: need a non-empty last dimension");
  int64_t cols = x.shape().back();
  int64_t rows = x.numel() / cols;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * cols;
    T* orow = po + r * cols;
    T mx = xr[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, xr[j]);
    T sum = T(0);
    for (int64_t j = 0; j < cols; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      sum += orow[j];
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < cols; ++j) orow[j] *= inv;
  }
  if (detail::track<T>({&x})) {
    detail::mark_output(out);
    Tensor<T> xc = x, oc = out;
    Tape<T>::current()->record([xc, oc, rows, cols]() mutable {
      const T* y = oc.data();
      const T* gy = oc.grads().data();
      T* gx = xc.grads().data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* yr = y + r * cols;
        const T* gr = gy + r * cols;
        T* gxr = gx + r * cols;
        T dot = T(0);
        for (int64_t j = 0; j < cols; ++j) dot += yr[j] * gr[j];
        for (int64_t j = 0; j < cols; ++j) gxr[j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

// Per-row normalization over the last dimension followed by affine (gamma, beta).
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  if (eps <= T(0)) throw std::invalid_argument("layer_norm: eps must be positive");
  int64_t c = x.shape().back();
  if (gamma.numel() != c || beta.numel() != c)
    throw ShapeError("layer_norm: gamma/beta size mismatch with " + shape_str(x.shape()));
  int64_t rows = x.numel() / c;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> inv_std(static_cast<size_t>(rows));
  std::vector<T> xhat(static_cast<size_t>(x.numel()));
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * c;
    T mean = T(0);
    for (int64_t j = 0; j < c; ++j) mean += xr[j];
    mean /= static_cast<T>(c);
    T var = T(0);
    for (int64_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(c);
    T is = T(1) / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = is;
    T* orow = po + r * c;
    T* xh = xhat.data() + r * c;
    for (int64_t j = 0; j < c; ++j) {
      xh[j] = (xr[j] - mean) * is;
      orow[j] = xh[j] * pg[j] + pb[j];
    }
  }
  if (detail::track<T>({&x, &gamma, &beta})) {
    detail::mark_output(out);
    Tensor<T> xc = x, gc = gamma, bc = beta, oc = out;
    auto istd = std::make_shared<std::vector<T>>(std::move(inv_std));
    auto xh = std::make_shared<std::vector<T>>(std::move(xhat));
    Tape<T>::current()->record([xc, gc, bc, oc, istd, xh, rows, c]() mutable {
      const T* gy = oc.grads().data();
      const T* pg = gc.data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* gr = gy + r * c;
        const T* xhr = xh->data() + r * c;
        if (gc.requires_grad() || bc.requires_grad()) {
          T* gg = gc.requires_grad() ? gc.grads().data() : nullptr;
          T* gb = bc.requires_grad() ? bc.grads().data() : nullptr;
          for (int64_t j = 0; j < c; ++j) {
            if (gg) gg[j] += gr[j] * xhr[j];
            if (gb) gb[j] += gr[j];
          }
        }
        if (xc.requires_grad()) {
          T* gx = xc.grads().data() + r * c;
          T is = (*istd)[static_cast<size_t>(r)];
          T sum_g = T(0), sum_gx = T(0);
          for (int64_t j = 0; j < c; ++j) {
            T gj = gr[j] * pg[j];
            sum_g += gj;
            sum_gx += gj * xhr[j];
          }
          T invc = T(1) / static_cast<T>(c);
          for (int64_t j = 0; j < c; ++j) {
            T gj = gr[j] * pg[j];
            gx[j] += is * (gj - invc * sum_g - xhr[j] * invc * sum_gx);
          }
        }
      }
    });
  }
  return out;
}

namespace detail {

// Right-aligned broadcast check: every rhs dim must equal the lhs dim or 1.
template <class T>
inline void check_bcast(const Tensor<T>& a, const Tensor<T>& b, const char* opname) {
  if (b.rank() > a.rank())
    throw ShapeError(std::string(opname) + ": rhs rank exceeds lhs: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  size_t off = a.rank() - b.rank();
  for (size_t i = 0; i < b.rank(); ++i)
    if (b.dim(i) != a.dim(off + i) && b.dim(i) != 1)
      throw ShapeError(std::string(opname) + ": shapes not broadcastable: " +
                       shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// Maps a flat lhs index to the corresponding flat rhs index under broadcast.
struct BcastIndexer {
  Shape a_shape, b_shape;
  std::vector<int64_t> b_strides;  // per lhs axis

  BcastIndexer(const Shape& a, const Shape& b) : a_shape(a) {
    b_shape.assign(a.size(), 1);
    std::copy(b.begin(), b.end(), b_shape.end() - static_cast<int64_t>(b.size()));
    b_strides.assign(a.size(), 0);
    int64_t s = 1;
    for (int64_t i = static_cast<int64_t>(a.size()) - 1; i >= 0; --i) {
      b_strides[static_cast<size_t>(i)] = (b_shape[static_cast<size_t>(i)] == 1) ? 0 : s;
      s *= b_shape[static_cast<size_t>(i)];
    }
  }

  bool trivial() const {
    for (size_t i = 0; i < a_shape.size(); ++i)
      if (b_shape[i] != a_shape[i]) return true;
    return false;
  }

  int64_t map(int64_t flat) const {
    int64_t idx = 0;
    for (int64_t i = static_cast<int64_t>(a_shape.size()) - 1; i >= 0; --i) {
      int64_t d = a_shape[static_cast<size_t>(i)];
      int64_t coord = flat % d;
      flat /= d;
      if (b_strides[static_cast<size_t>(i)] != 0)
        idx += (coord % b_shape[static_cast<size_t>(i)]) * b_strides[static_cast<size_t>(i)];
    }
    return idx;
  }
};

// Visits every flat index of a permuted view together with its source index.
// The source index is carried incrementally through an odometer so the inner
// loop is a tight strided copy.
template <class F>
inline void permute_walk(const Shape& os, const std::vector<int64_t>& strides, F&& visit) {
  size_t rank = os.size();
  int64_t n = numel_of(os);
  if (n == 0) return;
  if (rank == 0) {
    visit(0, 0);
    return;
  }
  int64_t inner = os[rank - 1];
  int64_t istride = strides[rank - 1];
  // adj[i]: source delta when axis i increments and all later (non-inner)
  // axes wrap back to zero.
  std::vector<int64_t> adj(rank > 1 ? rank - 1 : 0);
  for (size_t i = 0; i + 1 < rank; ++i) {
    int64_t back = 0;
    for (size_t j = i + 1; j + 1 < rank; ++j) back += (os[j] - 1) * strides[j];
    adj[i] = strides[i] - back;
  }
  std::vector<int64_t> coord(rank > 1 ? rank - 1 : 0, 0);
  int64_t src = 0;
  for (int64_t f = 0; f < n; f += inner) {
    if (istride == 1) {
      for (int64_t k = 0; k < inner; ++k) visit(f + k, src + k);
    } else {
      for (int64_t k = 0; k < inner; ++k) visit(f + k, src + k * istride);
    }
    for (size_t i = rank - 1; i-- > 0;) {
      if (++coord[i] < os[i]) {
        src += adj[i];
        break;
      }
      coord[i] = 0;
    }
  }
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_bcast(a, b, "add");
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  int64_t n = a.numel();
  bool tail = true;  // rhs matches a trailing slice of lhs exactly
  {
    size_t off = a.rank() - b.rank();
    for (size_t i = 0; i < b.rank(); ++i) tail &= (b.dim(i) == a.dim(off + i));
  }
  if (tail) {
    int64_t bn = b.numel();
    for (int64_t base = 0; base < n; base += bn)
      for (int64_t i = 0; i < bn; ++i) po[base + i] = pa[base + i] + pb[i];
  } else {
    detail::BcastIndexer ix(a.shape(), b.shape());
    for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[ix.map(i)];
  }
  if (detail::track<T>({&a, &b})) {
    detail::mark_output(out);
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::current()->record([ac, bc, oc, n]() mutable {
      const T* go = oc.grads().data();
      if (ac.requires_grad()) {
        T* ga = ac.grads().data();
        for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grads().data();
        bool tail2 = true;
        size_t off = ac.rank() - bc.rank();
        for (size_t i = 0; i < bc.rank(); ++i) tail2 &= (bc.dim(i) == ac.dim(off + i));
        if (tail2) {
          int64_t bn = bc.numel();
          for (int64_t base = 0; base < n; base += bn)
            for (int64_t i = 0; i < bn; ++i) gb[i] += go[base + i];
        } else {
          detail::BcastIndexer ix(ac.shape(), bc.shape());
          for (int64_t i = 0; i < n; ++i) gb[ix.map(i)] += go[i];
        }
      }
    });
  }
  return out;
}

// Elementwise product; shapes must match exactly.
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shapes differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  int64_t n = a.numel();
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (detail::track<T>({&a, &b})) {
    detail::mark_output(out);
    Tensor<T> ac = a, bc = b, oc = out;
    Tape<T>::current()->record([ac, bc, oc, n]() mutable {
      const T* go = oc.grads().data();
      if (ac.requires_grad()) {
        T* ga = ac.grads().data();
        const T* pb2 = bc.data();
        for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * pb2[i];
      }
      if (bc.requires_grad()) {
        T* gb = bc.grads().data();
        const T* pa2 = ac.data();
        for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * pa2[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  int64_t n = a.numel();
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  if (detail::track<T>({&a})) {
    detail::mark_output(out);
    Tensor<T> ac = a, oc = out;
    Tape<T>::current()->record([ac, oc, s, n]() mutable {
      const T* go = oc.grads().data();
      T* ga = ac.grads().data();
      for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * s;
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, T(-1)));
}

// GELU, tanh approximation (fixed; bit-stable across platforms).
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k1 = T(0.044715);
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  int64_t n = x.numel();
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) {
    T v = px[i];
    T u = std::tanh(k0 * (v + k1 * v * v * v));
    po[i] = T(0.5) * v * (T(1) + u);
  }
  if (detail::track<T>({&x})) {
    detail::mark_output(out);
    Tensor<T> xc = x, oc = out;
    Tape<T>::current()->record([xc, oc, n]() mutable {
      const T* go = oc.grads().data();
      const T* px2 = xc.data();
      T* gx = xc.grads().data();
      for (int64_t i = 0; i < n; ++i) {
        T v = px2[i];
        T inner = k0 * (v + k1 * v * v * v);
        T u = std::tanh(inner);
        T du = (T(1) - u * u) * k0 * (T(1) + T(3) * k1 * v * v);
        gx[i] += go[i] * (T(0.5) * (T(1) + u) + T(0.5) * v * du);
      }
    });
  }
  return out;
}

// Sum over one axis, removing it.
template <class T>
Tensor<T> sum_axis(const Tensor<T>& x, size_t axis) {
  if (axis >= x.rank()) throw ShapeError("sum_axis: axis out of range");
  const Shape& s = x.shape();
  int64_t outer = 1, mid = s[axis], inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape os;
  for (size_t i = 0; i < s.size(); ++i)
    if (i != axis) os.push_back(s[i]);
  if (os.empty()) os.push_back(1);
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t m = 0; m < mid; ++m) {
      const T* src = px + (o * mid + m) * inner;
      T* dst = po + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  if (detail::track<T>({&x})) {
    detail::mark_output(out);
    Tensor<T> xc = x, oc = out;
    Tape<T>::current()->record([xc, oc, outer, mid, inner]() mutable {
      const T* go = oc.grads().data();
      T* gx = xc.grads().data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t m = 0; m < mid; ++m) {
          T* dst = gx + (o * mid + m) * inner;
          const T* src = go + o * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_axis(const Tensor<T>& x, size_t axis) {
  return scale(sum_axis(x, axis), T(1) / static_cast<T>(x.shape()[axis]));
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& x) {
  Tensor<T> flat = x.reshape({x.numel()});
  return sum_axis(flat, 0);
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return scale(sum_all(x), T(1) / static_cast<T>(x.numel()));
}

// General axis permutation (materializing).
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<size_t>& axes) {
  if (axes.size() != x.rank()) throw ShapeError("permute: axes size mismatch");
  const Shape& s = x.shape();
  Shape os(s.size());
  std::vector<bool> seen(s.size(), false);
  for (size_t i = 0; i < axes.size(); ++i) {
    if (axes[i] >= s.size() || seen[axes[i]]) throw ShapeError("permute: invalid axes");
    seen[axes[i]] = true;
    os[i] = s[axes[i]];
  }
  std::vector<int64_t> in_strides(s.size());
  int64_t st = 1;
  for (int64_t i = static_cast<int64_t>(s.size()) - 1; i >= 0; --i) {
    in_strides[static_cast<size_t>(i)] = st;
    st *= s[static_cast<size_t>(i)];
  }
  std::vector<int64_t> map_strides(s.size());
  for (size_t i = 0; i < axes.size(); ++i) map_strides[i] = in_strides[axes[i]];
  Tensor<T> out = Tensor<T>::zeros(os);
  detail::permute_walk(os, map_strides,
                       [px = x.data(), po = out.data()](int64_t f, int64_t src) { po[f] = px[src]; });
  if (detail::track<T>({&x})) {
    detail::mark_output(out);
    Tensor<T> xc = x, oc = out;
    auto ms = std::make_shared<std::vector<int64_t>>(map_strides);
    auto osh = std::make_shared<Shape>(os);
    Tape<T>::current()->record([xc, oc, ms, osh]() mutable {
      const T* go = oc.grads().data();
      T* gx = xc.grads().data();
      detail::permute_walk(*osh, *ms, [go, gx](int64_t f, int64_t src) { gx[src] += go[f]; });
    });
  }
  return out;
}

// Swap the last two axes (batched matrix transpose, specialized loop).
template <class T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last2: rank must be >= 2");
  std::vector<size_t> axes(x.rank());
  for (size_t i = 0; i < axes.size(); ++i) axes[i] = i;
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

// Concatenate along an axis.
template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.rank() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (size_t i = 0; i < s0.size(); ++i)
      if (i != axis && p.shape()[i] != s0[i])
        throw ShapeError("concat: shape mismatch at non-concat axis: " + shape_str(s0) +
                         " vs " + shape_str(p.shape()));
    total += p.shape()[axis];
  }
  Shape os = s0;
  os[axis] = total;
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= s0[i];
  for (size_t i = axis + 1; i < s0.size(); ++i) inner *= s0[i];
  Tensor<T> out = Tensor<T>::zeros(os);
  T* po = out.data();
  int64_t row_out = total * inner;
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t mid = p.shape()[axis];
    const T* pp = p.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(po + o * row_out + off * inner, pp + o * mid * inner,
                  static_cast<size_t>(mid * inner) * sizeof(T));
    off += mid;
  }
  bool any_grad = false;
  for (const auto& p : parts) any_grad |= p.requires_grad();
  if (Tape<T>::current() && any_grad) {
    detail::mark_output(out);
    Tensor<T> oc = out;
    auto pc = std::make_shared<std::vector<Tensor<T>>>(parts);
    Tape<T>::current()->record([pc, oc, outer, inner, row_out, axis]() mutable {
      const T* go = oc.grads().data();
      int64_t off = 0;
      for (auto& p : *pc) {
        int64_t mid = p.shape()[axis];
        if (p.requires_grad()) {
          T* gp = p.grads().data();
          for (int64_t o = 0; o < outer; ++o) {
            const T* src = go + o * row_out + off * inner;
            T* dst = gp + o * mid * inner;
            for (int64_t i = 0; i < mid * inner; ++i) dst[i] += src[i];
          }
        }
        off += mid;
      }
    });
  }
  return out;
}

// Contiguous slice [start, start+len) along an axis.
template <class T>
Tensor<T> slice(const Tensor<T>& x, size_t axis, int64_t start, int64_t len) {
  const Shape& s = x.shape();
  if (axis >= s.size() || start < 0 || len <= 0 || start + len > s[axis])
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") invalid for " + shape_str(s));
  Shape os = s;
  os[axis] = len;
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  int64_t mid = s[axis];
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(po + o * len * inner, px + (o * mid + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(T));
  if (detail::track<T>({&x})) {
    detail::mark_output(out);
    Tensor<T> xc = x, oc = out;
    Tape<T>::current()->record([xc, oc, outer, inner, mid, start, len]() mutable {
      const T* go = oc.grads().data();
      T* gx = xc.grads().data();
      for (int64_t o = 0; o < outer; ++o) {
        const T* src = go + o * len * inner;
        T* dst = gx + (o * mid + start) * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// Select rows along an axis by a shared index list. Differentiable in x;
// the index bookkeeping itself carries no gradient.
template <class T>
Tensor<T> index_select(const Tensor<T>& x, size_t axis, const std::vector<int64_t>& indices) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw ShapeError("index_select: axis out of range");
  int64_t mid = s[axis];
  for (int64_t idx : indices)
    if (idx < 0 || idx >= mid)
      throw ShapeError("index_select: index " + std::to_string(idx) + " out of range for axis of size " +
                       std::to_string(mid));
  int64_t outer = 1, inner = 1;
  for (size_t i = 0; i < axis; ++i) outer *= s[i];
  for (size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  Shape os = s;
  os[axis] = static_cast<int64_t>(indices.size());
  int64_t k = os[axis];
  Tensor<T> out = Tensor<T>::zeros(os);
  const T* px = x.data();
  T* po = out.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < k; ++j)
      std::memcpy(po + (o * k + j) * inner, px + (o * mid + indices[static_cast<size_t>(j)]) * inner,
                  static_cast<size_t>(inner) * sizeof(T));
  if (detail::track<T>({&x})) {
    detail::mark_output(out);
    Tensor<T> xc = x, oc = out;
    auto idx = std::make_shared<std::vector<int64_t>>(indices);
    Tape<T>::current()->record([xc, oc, idx, outer, inner, mid, k]() mutable {
      const T* go = oc.grads().data();
      T* gx = xc.grads().data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < k; ++j) {
          const T* src = go + (o * k + j) * inner;
          T* dst = gx + (o * mid + (*idx)[static_cast<size_t>(j)]) * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

// Per-batch row gather: x is (N, T, c), idx is N lists of K row indices.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<std::vector<int64_t>>& idx) {
  if (x.rank() != 3) throw ShapeError("gather_rows: expected rank-3 input, got " + shape_str(x.shape()));
  int64_t nb = x.dim(0), rows = x.dim(1), c = x.dim(2);
  if (static_cast<int64_t>(idx.size()) != nb)
    throw ShapeError("gather_rows: batch count mismatch");
  int64_t k = static_cast<int64_t>(idx[0].size());
  for (const auto& v : idx) {
    if (static_cast<int64_t>(v.size()) != k)
      throw ShapeError("gather_rows: ragged index lists");
    for (int64_t i : v)
      if (i < 0 || i >= rows) throw ShapeError("gather_rows: row index out of range");
  }
  Tensor<T> out = Tensor<T>::zeros({nb, k, c});
  const T* px = x.data();
  T* po = out.data();
  for (int64_t b = 0; b < nb; ++b)
    for (int64_t j = 0; j < k; ++j)
      std::memcpy(po + (b * k + j) * c, px + (b * rows + idx[static_cast<size_t>(b)][static_cast<size_t>(j)]) * c,
                  static_cast<size_t>(c) * sizeof(T));
  if (detail::track<T>({&x})) {
    detail::mark_output(out);
    Tensor<T> xc = x, oc = out;
    auto ic = std::make_shared<std::vector<std::vector<int64_t>>>(idx);
    Tape<T>::current()->record([xc, oc, ic, nb, rows, c, k]() mutable {
      const T* go = oc.grads().data();
      T* gx = xc.grads().data();
      for (int64_t b = 0; b < nb; ++b)
        for (int64_t j = 0; j < k; ++j) {
          const T* src = go + (b * k + j) * c;
          T* dst = gx + (b * rows + (*ic)[static_cast<size_t>(b)][static_cast<size_t>(j)]) * c;
          for (int64_t i = 0; i < c; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

// Embedding rows for a flat id sequence.
template <class T>
Tensor<T> embedding_lookup(const Tensor<T>& table, const std::vector<int64_t>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2");
  return index_select(table, 0, ids);
}

// Mean cross entropy of row-wise softmax(logits) against integer targets.
template <class T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits, const std::vector<int64_t>& targets) {
  if (logits.rank() != 2) throw ShapeError("cross_entropy_with_logits: logits must be (B,K)");
  int64_t nb = logits.dim(0), k = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != nb)
    throw ShapeError("cross_entropy_with_logits: target count mismatch");
  for (int64_t t : targets)
    if (t < 0 || t >= k) throw ShapeError("cross_entropy_with_logits: target out of range");
  Tensor<T> out = Tensor<T>::zeros({1});
  std::vector<T> probs(static_cast<size_t>(nb * k));
  const T* pl = logits.data();
  T loss = T(0);
  for (int64_t r = 0; r < nb; ++r) {
    const T* lr = pl + r * k;
    T mx = lr[0];
    for (int64_t j = 1; j < k; ++j) mx = std::max(mx, lr[j]);
    T sum = T(0);
    for (int64_t j = 0; j < k; ++j) {
      probs[static_cast<size_t>(r * k + j)] = std::exp(lr[j] - mx);
      sum += probs[static_cast<size_t>(r * k + j)];
    }
    T inv = T(1) / sum;
    for (int64_t j = 0; j < k; ++j) probs[static_cast<size_t>(r * k + j)] *= inv;
    loss -= std::log(probs[static_cast<size_t>(r * k + targets[static_cast<size_t>(r)])]);
  }
  out.vals()[0] = loss / static_cast<T>(nb);
  if (detail::track<T>({&logits})) {
    detail::mark_output(out);
    Tensor<T> lc = logits, oc = out;
    auto pr = std::make_shared<std::vector<T>>(std::move(probs));
    auto tg = std::make_shared<std::vector<int64_t>>(targets);
    Tape<T>::current()->record([lc, oc, pr, tg, nb, k]() mutable {
      T g = oc.grads()[0] / static_cast<T>(nb);
      T* gl = lc.grads().data();
      for (int64_t r = 0; r < nb; ++r)
        for (int64_t j = 0; j < k; ++j) {
          T p = (*pr)[static_cast<size_t>(r * k + j)];
          T y = (j == (*tg)[static_cast<size_t>(r)]) ? T(1) : T(0);
          gl[r * k + j] += g * (p - y);
        }
    });
  }
  return out;
}

// Row-wise x / ||x||_2 over the last dimension.
template <class T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-12)) {
  int64_t c = x.shape().back();
  int64_t rows = x.numel() / c;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> inv_norm(static_cast<size_t>(rows));
  const T* px = x.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * c;
    T s = T(0);
    for (int64_t j = 0; j < c; ++j) s += xr[j] * xr[j];
    T in = T(1) / std::sqrt(s + eps);
    inv_norm[static_cast<size_t>(r)] = in;
    for (int64_t j = 0; j < c; ++j) po[r * c + j] = xr[j] * in;
  }
  if (detail::track<T>({&x})) {
    detail::mark_output(out);
    Tensor<T> xc = x, oc = out;
    auto invn = std::make_shared<std::vector<T>>(std::move(inv_norm));
    Tape<T>::current()->record([xc, oc, invn, rows, c]() mutable {
      const T* y = oc.data();
      const T* gy = oc.grads().data();
      T* gx = xc.grads().data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* yr = y + r * c;
        const T* gr = gy + r * c;
        T in = (*invn)[static_cast<size_t>(r)];
        T dot = T(0);
        for (int64_t j = 0; j < c; ++j) dot += yr[j] * gr[j];
        for (int64_t j = 0; j < c; ++j) gx[r * c + j] += in * (gr[j] - yr[j] * dot);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> exp_op(const Tensor<T>& x) {
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  int64_t n = x.numel();
  const T* px = x.data();
  T* po = out.data();
  for (int64_t i = 0; i < n; ++i) po[i] = std::exp(px[i]);
  if (detail::track<T>({&x})) {
    detail::mark_output(out);
    Tensor<T> xc = x, oc = out;
    Tape<T>::current()->record([xc, oc, n]() mutable {
      const T* go = oc.grads().data();
      const T* y = oc.data();
      T* gx = xc.grads().data();
      for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * y[i];
    });
  }
  return out;
}

}  // namespace hlip
