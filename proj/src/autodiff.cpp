#include "taffseg/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "taffseg/errors.hpp"

namespace taff::ad {

namespace {

thread_local bool g_grad_enabled = true;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

Var make(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool req = false;
  if (g_grad_enabled) {
    for (const auto& v : inputs) req = req || (v.defined() && v.requires_grad());
  }
  if (req) {
    node->requires_grad = true;
    for (const auto& v : inputs) node->parents.push_back(v.defined() ? v.node() : nullptr);
    node->backward_fn = std::move(fn);
  }
  return Var(std::move(node));
}

// Grad buffer of parent i, or nullptr when that input needs no gradient.
Tensor* pgrad(Node& n, std::size_t i) {
  auto& p = n.parents[i];
  if (!p || !p->requires_grad) return nullptr;
  return &p->ensure_grad();
}

const Tensor& pval(Node& n, std::size_t i) { return n.parents[i]->value; }

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Var& a, int rank, const char* op) {
  if (a.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(a.shape()));
  }
}

template <typename F>
Tensor map_unary(const Tensor& a, F f) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
  return out;
}

struct AxisSplit {
  std::size_t outer = 1;
  std::size_t n = 1;
  std::size_t inner = 1;
};

AxisSplit split_axis(const Shape& s, int axis) {
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_str(s));
  AxisSplit out;
  for (int i = 0; i < axis; ++i) out.outer *= s[i];
  out.n = s[axis];
  for (int i = axis + 1; i < r; ++i) out.inner *= s[i];
  return out;
}

// Output columns [lo, hi) whose input column ox * stride - pad + kx lies inside [0, w).
inline void valid_columns(int w, int wo, int stride, int pad, int kx, int& lo, int& hi) {
  const int off = kx - pad;
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  hi = (w - 1 - off) < 0 ? 0 : std::min(wo, (w - 1 - off) / stride + 1);
  if (hi < lo) hi = lo;
}

void im2col(const double* x, int ci, int h, int w, int kh, int kw, const Conv2dOptions& o, int ho,
            int wo, double* col) {
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        double* row = col + (static_cast<std::size_t>(c) * kh * kw + ky * kw + kx) * plane;
        int lo, hi;
        valid_columns(w, wo, o.stride_w, o.pad_w, kx, lo, hi);
        const int off = kx - o.pad_w;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * o.stride_h - o.pad_h + ky;
          double* dst = row + static_cast<std::size_t>(oy) * wo;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + wo, 0.0);
            continue;
          }
          const double* src = x + (static_cast<std::size_t>(c) * h + iy) * w + off;
          std::fill(dst, dst + lo, 0.0);
          if (o.stride_w == 1) {
            std::copy(src + lo, src + hi, dst + lo);
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * o.stride_w];
          }
          std::fill(dst + hi, dst + wo, 0.0);
        }
      }
    }
  }
}

void col2im(const double* col, int ci, int h, int w, int kh, int kw, const Conv2dOptions& o, int ho,
            int wo, double* x) {
  const std::size_t plane = static_cast<std::size_t>(ho) * wo;
  for (int c = 0; c < ci; ++c) {
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const double* row = col + (static_cast<std::size_t>(c) * kh * kw + ky * kw + kx) * plane;
        int lo, hi;
        valid_columns(w, wo, o.stride_w, o.pad_w, kx, lo, hi);
        const int off = kx - o.pad_w;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * o.stride_h - o.pad_h + ky;
          if (iy < 0 || iy >= h) continue;
          const double* src = row + static_cast<std::size_t>(oy) * wo;
          double* dst = x + (static_cast<std::size_t>(c) * h + iy) * w + off;
          if (o.stride_w == 1) {
            for (int ox = lo; ox < hi; ++ox) dst[ox] += src[ox];
          } else {
            for (int ox = lo; ox < hi; ++ox) dst[ox * o.stride_w] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor& Node::ensure_grad() {
  if (grad.shape() != value.shape()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
  if (!node_->grad.empty()) node_->grad.fill(0.0);
}

double Var::item() const {
  if (value().size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return value()[0];
}

void backward(const Var& root) {
  if (!root.defined() || !root.requires_grad()) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p && p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad().fill(1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var constant(Tensor value) { return Var(std::move(value), false); }

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make(std::move(out), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k)
      if (Tensor* g = pgrad(n, k))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make(std::move(out), {a, b}, [](Node& n) {
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    if (Tensor* g = pgrad(n, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= n.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = pval(n, 0);
    const Tensor& bv = pval(n, 1);
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * bv[i];
    if (Tensor* g = pgrad(n, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * av[i];
  });
}

Var div(const Var& a, const Var& b) {
  require_same(a, b, "div");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] / b.value()[i];
  return make(std::move(out), {a, b}, [](Node& n) {
    const Tensor& av = pval(n, 0);
    const Tensor& bv = pval(n, 1);
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] / bv[i];
    if (Tensor* g = pgrad(n, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
  });
}

Var scale(const Var& a, double s) {
  Tensor out = map_unary(a.value(), [s](double v) { return v * s; });
  return make(std::move(out), {a}, [s](Node& n) {
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * s;
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = map_unary(a.value(), [s](double v) { return v + s; });
  return make(std::move(out), {a}, [](Node& n) {
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
  });
}

Var square(const Var& a) {
  Tensor out = map_unary(a.value(), [](double v) { return v * v; });
  return make(std::move(out), {a}, [](Node& n) {
    const Tensor& av = pval(n, 0);
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += 2.0 * av[i] * n.grad[i];
  });
}

Var log(const Var& a) {
  Tensor out = map_unary(a.value(), [](double v) { return std::log(v); });
  return make(std::move(out), {a}, [](Node& n) {
    const Tensor& av = pval(n, 0);
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] / av[i];
  });
}

Var leaky_relu(const Var& a, double slope) {
  Tensor out = map_unary(a.value(), [slope](double v) { return v > 0.0 ? v : slope * v; });
  return make(std::move(out), {a}, [slope](Node& n) {
    const Tensor& av = pval(n, 0);
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += av[i] > 0.0 ? n.grad[i] : slope * n.grad[i];
  });
}

Var xlogx(const Var& a) {
  Tensor out = map_unary(a.value(), [](double v) { return v > 0.0 ? v * std::log(v) : 0.0; });
  return make(std::move(out), {a}, [](Node& n) {
    const Tensor& av = pval(n, 0);
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i)
        if (av[i] > 0.0) (*g)[i] += n.grad[i] * (std::log(av[i]) + 1.0);
  });
}

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return make(Tensor({1}, s), {a}, [](Node& n) {
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[0];
  });
}

Var mean(const Var& a) {
  const double count = static_cast<double>(a.value().size());
  if (count == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(a), 1.0 / count);
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make(std::move(out), {a}, [](Node& n) {
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
  });
}

Var transpose_last2(const Var& a) {
  require_rank(a, 3, "transpose_last2");
  const int N = a.dim(0), A = a.dim(1), B = a.dim(2);
  Tensor out({N, B, A});
  for (int i = 0; i < N; ++i)
    for (int r = 0; r < A; ++r)
      for (int c = 0; c < B; ++c) out.at(i, c, r) = a.value().at(i, r, c);
  return make(std::move(out), {a}, [N, A, B](Node& n) {
    if (Tensor* g = pgrad(n, 0))
      for (int i = 0; i < N; ++i)
        for (int r = 0; r < A; ++r)
          for (int c = 0; c < B; ++c) g->at(i, r, c) += n.grad.at(i, c, r);
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  Shape shape = parts[0].shape();
  const int r = static_cast<int>(shape.size());
  if (axis < 0) axis += r;
  int total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != r) throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && s[i] != shape[i])
        throw ShapeError("concat: shape mismatch " + shape_str(s) + " vs " + shape_str(shape));
    total += s[axis];
  }
  shape[axis] = total;
  AxisSplit sp = split_axis(shape, axis);
  Tensor out(shape);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t wdt = static_cast<std::size_t>(p.dim(axis)) * sp.inner;
    const double* src = p.value().data();
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy(src + o * wdt, src + (o + 1) * wdt, out.data() + o * total * sp.inner + offset);
    offset += wdt;
    widths.push_back(wdt);
  }
  const std::size_t row = static_cast<std::size_t>(total) * sp.inner;
  return make(std::move(out), parts, [widths, sp, row](Node& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (Tensor* g = pgrad(n, k)) {
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < widths[k]; ++i) (*g)[o * widths[k] + i] += n.grad[o * row + off + i];
      }
      off += widths[k];
    }
  });
}

Var slice(const Var& a, int axis, int begin, int end) {
  const Shape& in = a.shape();
  const int r = static_cast<int>(in.size());
  if (axis < 0) axis += r;
  if (begin < 0 || end > in[axis] || begin >= end) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) + ") out of range for " +
                     shape_str(in));
  }
  AxisSplit sp = split_axis(in, axis);
  Shape shape = in;
  shape[axis] = end - begin;
  Tensor out(shape);
  const std::size_t src_row = sp.n * sp.inner;
  const std::size_t dst_row = static_cast<std::size_t>(end - begin) * sp.inner;
  const std::size_t off = static_cast<std::size_t>(begin) * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy(a.value().data() + o * src_row + off, a.value().data() + o * src_row + off + dst_row,
              out.data() + o * dst_row);
  return make(std::move(out), {a}, [sp, src_row, dst_row, off](Node& n) {
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < dst_row; ++i) (*g)[o * src_row + off + i] += n.grad[o * dst_row + i];
  });
}

Var expand(const Var& a, const Shape& target) {
  const Shape& in = a.shape();
  const int r = static_cast<int>(target.size());
  if (static_cast<int>(in.size()) != r) throw ShapeError("expand: rank mismatch " + shape_str(in));
  std::vector<std::size_t> in_stride(r, 0);
  std::size_t s = 1;
  for (int i = r - 1; i >= 0; --i) {
    if (in[i] != target[i] && in[i] != 1)
      throw ShapeError("expand: cannot broadcast " + shape_str(in) + " to " + shape_str(target));
    in_stride[i] = (in[i] == 1) ? 0 : s;
    s *= in[i];
  }
  // Precompute source index per output element; tensors here are small.
  std::vector<std::size_t> src(numel(target));
  std::vector<int> idx(r, 0);
  std::size_t off = 0;
  for (std::size_t k = 0; k < src.size(); ++k) {
    src[k] = off;
    for (int d = r - 1; d >= 0; --d) {
      ++idx[d];
      off += in_stride[d];
      if (idx[d] < target[d]) break;
      off -= in_stride[d] * idx[d];
      idx[d] = 0;
    }
  }
  Tensor out(target);
  for (std::size_t k = 0; k < src.size(); ++k) out[k] = a.value()[src[k]];
  return make(std::move(out), {a}, [src = std::move(src)](Node& n) {
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t k = 0; k < src.size(); ++k) (*g)[src[k]] += n.grad[k];
  });
}

Var linear(const Var& x, const Var& w, const Var& b) {
  require_rank(x, 2, "linear");
  require_rank(w, 2, "linear");
  const int N = x.dim(0), in = x.dim(1), out_dim = w.dim(0);
  if (w.dim(1) != in)
    throw ShapeError("linear: input width " + std::to_string(in) + " vs weight " + shape_str(w.shape()));
  if (b.defined() && (b.value().rank() != 1 || b.dim(0) != out_dim))
    throw ShapeError("linear: bias shape " + shape_str(b.shape()));
  Tensor out({N, out_dim});
  MapMat y(out.data(), N, out_dim);
  y.noalias() = CMapMat(x.value().data(), N, in) * CMapMat(w.value().data(), out_dim, in).transpose();
  if (b.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.value().data(), out_dim);
  return make(std::move(out), {x, w, b}, [N, in, out_dim](Node& n) {
    CMapMat gy(n.grad.data(), N, out_dim);
    if (Tensor* g = pgrad(n, 0))
      MapMat(g->data(), N, in).noalias() += gy * CMapMat(pval(n, 1).data(), out_dim, in);
    if (Tensor* g = pgrad(n, 1))
      MapMat(g->data(), out_dim, in).noalias() += gy.transpose() * CMapMat(pval(n, 0).data(), N, in);
    if (n.parents[2]) {
      if (Tensor* g = pgrad(n, 2))
        Eigen::Map<Eigen::RowVectorXd>(g->data(), out_dim) += gy.colwise().sum();
    }
  });
}

Var bmm(const Var& a, const Var& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const int B = a.dim(0), n_ = a.dim(1), k = a.dim(2), m = b.dim(2);
  if (b.dim(0) != B || b.dim(1) != k)
    throw ShapeError("bmm: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({B, n_, m});
  for (int i = 0; i < B; ++i) {
    MapMat(out.data() + static_cast<std::size_t>(i) * n_ * m, n_, m).noalias() =
        CMapMat(a.value().data() + static_cast<std::size_t>(i) * n_ * k, n_, k) *
        CMapMat(b.value().data() + static_cast<std::size_t>(i) * k * m, k, m);
  }
  return make(std::move(out), {a, b}, [B, n_, k, m](Node& n) {
    const Tensor& av = pval(n, 0);
    const Tensor& bv = pval(n, 1);
    Tensor* ga = pgrad(n, 0);
    Tensor* gb = pgrad(n, 1);
    for (int i = 0; i < B; ++i) {
      CMapMat gy(n.grad.data() + static_cast<std::size_t>(i) * n_ * m, n_, m);
      if (ga)
        MapMat(ga->data() + static_cast<std::size_t>(i) * n_ * k, n_, k).noalias() +=
            gy * CMapMat(bv.data() + static_cast<std::size_t>(i) * k * m, k, m).transpose();
      if (gb)
        MapMat(gb->data() + static_cast<std::size_t>(i) * k * m, k, m).noalias() +=
            CMapMat(av.data() + static_cast<std::size_t>(i) * n_ * k, n_, k).transpose() * gy;
    }
  });
}

Var softmax(const Var& a, int axis) {
  AxisSplit sp = split_axis(a.shape(), axis);
  Tensor out(a.shape());
  const double* x = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      double mx = -INFINITY;
      for (std::size_t i = 0; i < sp.n; ++i) mx = std::max(mx, x[base + i * sp.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < sp.n; ++i) {
        const double e = std::exp(x[base + i * sp.inner] - mx);
        out[base + i * sp.inner] = e;
        z += e;
      }
      for (std::size_t i = 0; i < sp.n; ++i) out[base + i * sp.inner] /= z;
    }
  }
  return make(std::move(out), {a}, [sp](Node& n) {
    Tensor* g = pgrad(n, 0);
    if (!g) return;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        double dot = 0.0;
        for (std::size_t i = 0; i < sp.n; ++i) dot += n.grad[base + i * sp.inner] * n.value[base + i * sp.inner];
        for (std::size_t i = 0; i < sp.n; ++i) {
          const std::size_t k = base + i * sp.inner;
          (*g)[k] += n.value[k] * (n.grad[k] - dot);
        }
      }
    }
  });
}

Var log_softmax(const Var& a, int axis) {
  AxisSplit sp = split_axis(a.shape(), axis);
  Tensor out(a.shape());
  const double* x = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      double mx = -INFINITY;
      for (std::size_t i = 0; i < sp.n; ++i) mx = std::max(mx, x[base + i * sp.inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < sp.n; ++i) z += std::exp(x[base + i * sp.inner] - mx);
      const double lse = mx + std::log(z);
      for (std::size_t i = 0; i < sp.n; ++i) out[base + i * sp.inner] = x[base + i * sp.inner] - lse;
    }
  }
  return make(std::move(out), {a}, [sp](Node& n) {
    Tensor* g = pgrad(n, 0);
    if (!g) return;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      for (std::size_t in = 0; in < sp.inner; ++in) {
        const std::size_t base = o * sp.n * sp.inner + in;
        double gs = 0.0;
        for (std::size_t i = 0; i < sp.n; ++i) gs += n.grad[base + i * sp.inner];
        for (std::size_t i = 0; i < sp.n; ++i) {
          const std::size_t k = base + i * sp.inner;
          (*g)[k] += n.grad[k] - std::exp(n.value[k]) * gs;
        }
      }
    }
  });
}

Var conv2d(const Var& x, const Var& w, const Var& b, Conv2dOptions opt) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  const int B = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != ci)
    throw ShapeError("conv2d: input channels " + std::to_string(ci) + " vs weight " + shape_str(w.shape()));
  if (b.defined() && (b.value().rank() != 1 || b.dim(0) != co))
    throw ShapeError("conv2d: bias shape " + shape_str(b.shape()));
  const int ho = (h + 2 * opt.pad_h - kh) / opt.stride_h + 1;
  const int wo = (wd + 2 * opt.pad_w - kw) / opt.stride_w + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output for input " + shape_str(x.shape()));
  const int K = ci * kh * kw;
  const int P = ho * wo;
  Tensor out({B, co, ho, wo});
  Storage col(static_cast<std::size_t>(K) * P);
  CMapMat wm(w.value().data(), co, K);
  for (int i = 0; i < B; ++i) {
    im2col(x.value().data() + static_cast<std::size_t>(i) * ci * h * wd, ci, h, wd, kh, kw, opt, ho, wo,
           col.data());
    MapMat y(out.data() + static_cast<std::size_t>(i) * co * P, co, P);
    y.noalias() = wm * CMapMat(col.data(), K, P);
    if (b.defined()) y.colwise() += Eigen::Map<const Eigen::VectorXd>(b.value().data(), co);
  }
  return make(std::move(out), {x, w, b}, [=](Node& n) {
    const Tensor& xv = pval(n, 0);
    const Tensor& wv = pval(n, 1);
    Tensor* gx = pgrad(n, 0);
    Tensor* gw = pgrad(n, 1);
    Tensor* gb = n.parents[2] ? pgrad(n, 2) : nullptr;
    Storage cbuf(static_cast<std::size_t>(K) * P);
    Storage gcol;
    if (gx) gcol.resize(static_cast<std::size_t>(K) * P);
    CMapMat wmat(wv.data(), co, K);
    for (int i = 0; i < B; ++i) {
      CMapMat gy(n.grad.data() + static_cast<std::size_t>(i) * co * P, co, P);
      if (gw) {
        im2col(xv.data() + static_cast<std::size_t>(i) * ci * h * wd, ci, h, wd, kh, kw, opt, ho, wo,
               cbuf.data());
        MapMat(gw->data(), co, K).noalias() += gy * CMapMat(cbuf.data(), K, P).transpose();
      }
      if (gb) Eigen::Map<Eigen::VectorXd>(gb->data(), co) += gy.rowwise().sum();
      if (gx) {
        MapMat(gcol.data(), K, P).noalias() = wmat.transpose() * gy;
        col2im(gcol.data(), ci, h, wd, kh, kw, opt, ho, wo, gx->data() + static_cast<std::size_t>(i) * ci * h * wd);
      }
    }
  });
}

Var conv_transpose2x2(const Var& x, const Var& w, const Var& b) {
  require_rank(x, 4, "conv_transpose2x2");
  require_rank(w, 4, "conv_transpose2x2");
  const int B = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(1);
  if (w.dim(0) != ci || w.dim(2) != 2 || w.dim(3) != 2)
    throw ShapeError("conv_transpose2x2: weight " + shape_str(w.shape()) + " for input " + shape_str(x.shape()));
  if (b.defined() && (b.value().rank() != 1 || b.dim(0) != co))
    throw ShapeError("conv_transpose2x2: bias shape " + shape_str(b.shape()));
  const int P = h * wd;
  // Row (o * 4 + d) of wall holds w[:, o, d / 2, d % 2].
  auto pack = [ci, co](const Tensor& wt) {
    RowMat wall(co * 4, ci);
    for (int c = 0; c < ci; ++c)
      for (int o = 0; o < co; ++o)
        for (int d = 0; d < 4; ++d) wall(o * 4 + d, c) = wt[(static_cast<std::size_t>(c) * co + o) * 4 + d];
    return wall;
  };
  RowMat wall = pack(w.value());
  Tensor out({B, co, 2 * h, 2 * wd});
  RowMat yall(co * 4, P);
  for (int i = 0; i < B; ++i) {
    yall.noalias() = wall * CMapMat(x.value().data() + static_cast<std::size_t>(i) * ci * P, ci, P);
    for (int o = 0; o < co; ++o) {
      const double bias = b.defined() ? b.value()[o] : 0.0;
      for (int d = 0; d < 4; ++d)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < wd; ++xx)
            out.at(i, o, 2 * y + d / 2, 2 * xx + d % 2) = yall(o * 4 + d, y * wd + xx) + bias;
    }
  }
  return make(std::move(out), {x, w, b}, [=](Node& n) {
    const Tensor& xv = pval(n, 0);
    Tensor* gx = pgrad(n, 0);
    Tensor* gw = pgrad(n, 1);
    Tensor* gb = n.parents[2] ? pgrad(n, 2) : nullptr;
    RowMat wl = pack(pval(n, 1));
    RowMat gyall(co * 4, P);
    RowMat gwall = RowMat::Zero(co * 4, ci);
    for (int i = 0; i < B; ++i) {
      for (int o = 0; o < co; ++o)
        for (int d = 0; d < 4; ++d)
          for (int y = 0; y < h; ++y)
            for (int xx = 0; xx < wd; ++xx) gyall(o * 4 + d, y * wd + xx) = n.grad.at(i, o, 2 * y + d / 2, 2 * xx + d % 2);
      CMapMat xm(xv.data() + static_cast<std::size_t>(i) * ci * P, ci, P);
      if (gw) gwall.noalias() += gyall * xm.transpose();
      if (gx) MapMat(gx->data() + static_cast<std::size_t>(i) * ci * P, ci, P).noalias() += wl.transpose() * gyall;
      if (gb)
        for (int o = 0; o < co; ++o) (*gb)[o] += gyall.middleRows(o * 4, 4).sum();
    }
    if (gw)
      for (int c = 0; c < ci; ++c)
        for (int o = 0; o < co; ++o)
          for (int d = 0; d < 4; ++d) (*gw)[(static_cast<std::size_t>(c) * co + o) * 4 + d] += gwall(o * 4 + d, c);
  });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 4, "instance_norm");
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  if (gamma.dim(0) != C || beta.dim(0) != C) throw ShapeError("instance_norm: affine shape mismatch");
  Tensor out(x.shape());
  Tensor xhat(x.shape());
  std::vector<double> inv_std(static_cast<std::size_t>(B) * C);
  for (int i = 0; i < B; ++i) {
    for (int c = 0; c < C; ++c) {
      const std::size_t base = (static_cast<std::size_t>(i) * C + c) * P;
      const double* src = x.value().data() + base;
      double m = 0.0;
      for (std::size_t k = 0; k < P; ++k) m += src[k];
      m /= static_cast<double>(P);
      double v = 0.0;
      for (std::size_t k = 0; k < P; ++k) v += (src[k] - m) * (src[k] - m);
      v /= static_cast<double>(P);
      const double is = 1.0 / std::sqrt(v + eps);
      inv_std[static_cast<std::size_t>(i) * C + c] = is;
      const double g = gamma.value()[c], bt = beta.value()[c];
      for (std::size_t k = 0; k < P; ++k) {
        const double xh = (src[k] - m) * is;
        xhat[base + k] = xh;
        out[base + k] = g * xh + bt;
      }
    }
  }
  return make(std::move(out), {x, gamma, beta},
              [B, C, P, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
                Tensor* gx = pgrad(n, 0);
                Tensor* gg = pgrad(n, 1);
                Tensor* gbt = pgrad(n, 2);
                const Tensor& gam = pval(n, 1);
                for (int i = 0; i < B; ++i) {
                  for (int c = 0; c < C; ++c) {
                    const std::size_t base = (static_cast<std::size_t>(i) * C + c) * P;
                    double sg = 0.0, sgx = 0.0;
                    for (std::size_t k = 0; k < P; ++k) {
                      sg += n.grad[base + k];
                      sgx += n.grad[base + k] * xhat[base + k];
                    }
                    if (gg) (*gg)[c] += sgx;
                    if (gbt) (*gbt)[c] += sg;
                    if (gx) {
                      const double f = gam[c] * inv_std[static_cast<std::size_t>(i) * C + c];
                      const double mg = sg / static_cast<double>(P);
                      const double mgx = sgx / static_cast<double>(P);
                      for (std::size_t k = 0; k < P; ++k)
                        (*gx)[base + k] += f * (n.grad[base + k] - mg - xhat[base + k] * mgx);
                    }
                  }
                }
              });
}

Var global_avg_pool(const Var& x) {
  require_rank(x, 4, "global_avg_pool");
  const int B = x.dim(0), C = x.dim(1);
  const std::size_t P = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor out({B, C});
  for (int i = 0; i < B; ++i)
    for (int c = 0; c < C; ++c) {
      const double* src = x.value().data() + (static_cast<std::size_t>(i) * C + c) * P;
      double s = 0.0;
      for (std::size_t k = 0; k < P; ++k) s += src[k];
      out.at(i, c) = s / static_cast<double>(P);
    }
  return make(std::move(out), {x}, [B, C, P](Node& n) {
    if (Tensor* g = pgrad(n, 0))
      for (int i = 0; i < B; ++i)
        for (int c = 0; c < C; ++c) {
          const double v = n.grad.at(i, c) / static_cast<double>(P);
          double* dst = g->data() + (static_cast<std::size_t>(i) * C + c) * P;
          for (std::size_t k = 0; k < P; ++k) dst[k] += v;
        }
  });
}

Var sum_except_channel(const Var& x) {
  if (x.value().rank() < 2) throw ShapeError("sum_except_channel needs rank >= 2");
  AxisSplit sp = split_axis(x.shape(), 1);
  Tensor out({static_cast<int>(sp.n)});
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t c = 0; c < sp.n; ++c) {
      const double* src = x.value().data() + (o * sp.n + c) * sp.inner;
      double s = 0.0;
      for (std::size_t k = 0; k < sp.inner; ++k) s += src[k];
      out[c] += s;
    }
  return make(std::move(out), {x}, [sp](Node& n) {
    if (Tensor* g = pgrad(n, 0))
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t c = 0; c < sp.n; ++c) {
          double* dst = g->data() + (o * sp.n + c) * sp.inner;
          for (std::size_t k = 0; k < sp.inner; ++k) dst[k] += n.grad[c];
        }
  });
}

}  // namespace taff::ad
