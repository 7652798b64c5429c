#include "wmlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "wmlab/kernels.hpp"

namespace wmlab {

namespace {

thread_local bool g_grad_enabled = true;

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument("tensor: " + msg);
}

std::shared_ptr<TensorNode> make_node(std::vector<int> shape) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->value.assign(static_cast<size_t>(n->numel()), 0.0);
  return n;
}

// Wires parents/backward only when grads are enabled and some parent needs
// them; otherwise the result is a plain constant.
Tensor finish(std::shared_ptr<TensorNode> out,
              std::vector<std::shared_ptr<TensorNode>> parents,
              std::function<void(TensorNode&)> bw) {
  bool track = false;
  if (g_grad_enabled)
    for (const auto& p : parents)
      if (p->requires_grad) track = true;
  if (track) {
    out->requires_grad = true;
    out->grad.assign(out->value.size(), 0.0);
    out->parents = std::move(parents);
    out->backward_fn = std::move(bw);
  }
  return Tensor(std::move(out));
}

bool same_shape(const TensorNode& a, const TensorNode& b) {
  return a.shape == b.shape;
}

bool is_scalar(const TensorNode& a) { return a.shape.empty(); }

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  auto n = make_node(std::move(shape));
  if (requires_grad) {
    n->requires_grad = true;
    n->grad.assign(n->value.size(), 0.0);
  }
  return Tensor(std::move(n));
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.value().begin(), t.value().end(), v);
  return t;
}

Tensor Tensor::from(std::vector<double> data, std::vector<int> shape,
                    bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  check(data.size() == t.value().size(), "from: data size does not match shape");
  t.value() = std::move(data);
  return t;
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return full({}, v, requires_grad);
}

int Tensor::rows() const {
  if (rank() == 2) return node_->shape[0];
  return 1;
}

int Tensor::cols() const {
  if (rank() == 2) return node_->shape[1];
  if (rank() == 1) return node_->shape[0];
  return 1;
}

std::vector<double>& Tensor::grad() {
  if (!node_->requires_grad)
    throw std::runtime_error("tensor: grad() on tensor without requires_grad");
  return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!node_->requires_grad)
    throw std::runtime_error("tensor: grad() on tensor without requires_grad");
  return node_->grad;
}

double Tensor::item() const {
  check(numel() == 1, "item: tensor is not a scalar");
  return node_->value[0];
}

void Tensor::zero_grad() {
  if (node_->requires_grad)
    std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const {
  auto n = make_node(node_->shape);
  n->value = node_->value;
  return Tensor(std::move(n));
}

// ---------------------------------------------------------------------------
// arithmetic

Tensor add(const Tensor& a, const Tensor& b) {
  const auto& an = *a.node();
  const auto& bn = *b.node();
  if (same_shape(an, bn)) {
    auto out = make_node(an.shape);
    for (size_t i = 0; i < out->value.size(); ++i)
      out->value[i] = an.value[i] + bn.value[i];
    auto pa = a.node();
    auto pb = b.node();
    return finish(std::move(out), {pa, pb}, [pa, pb](TensorNode& self) {
      if (pa->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      if (pb->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i];
    });
  }
  if (is_scalar(an) || is_scalar(bn)) {
    const Tensor& s = is_scalar(an) ? a : b;
    const Tensor& t = is_scalar(an) ? b : a;
    auto out = make_node(t.node()->shape);
    const double sv = s.node()->value[0];
    for (size_t i = 0; i < out->value.size(); ++i)
      out->value[i] = t.node()->value[i] + sv;
    auto ps = s.node();
    auto pt = t.node();
    return finish(std::move(out), {ps, pt}, [ps, pt](TensorNode& self) {
      if (ps->requires_grad) {
        double g = 0.0;
        for (double v : self.grad) g += v;
        ps->grad[0] += g;
      }
      if (pt->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) pt->grad[i] += self.grad[i];
    });
  }
  if (an.shape.size() == 2 && bn.shape.size() == 1 && an.shape[1] == bn.shape[0]) {
    const int m = an.shape[0], n = an.shape[1];
    auto out = make_node(an.shape);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j)
        out->value[i * n + j] = an.value[i * n + j] + bn.value[j];
    auto pa = a.node();
    auto pb = b.node();
    return finish(std::move(out), {pa, pb}, [pa, pb, m, n](TensorNode& self) {
      if (pa->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      if (pb->requires_grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) pb->grad[j] += self.grad[i * n + j];
    });
  }
  check(false, "add: incompatible shapes");
  return {};
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto& an = *a.node();
  const auto& bn = *b.node();
  if (same_shape(an, bn)) {
    auto out = make_node(an.shape);
    for (size_t i = 0; i < out->value.size(); ++i)
      out->value[i] = an.value[i] - bn.value[i];
    auto pa = a.node();
    auto pb = b.node();
    return finish(std::move(out), {pa, pb}, [pa, pb](TensorNode& self) {
      if (pa->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      if (pb->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    });
  }
  if (is_scalar(bn)) {
    auto out = make_node(an.shape);
    const double sv = bn.value[0];
    for (size_t i = 0; i < out->value.size(); ++i)
      out->value[i] = an.value[i] - sv;
    auto pa = a.node();
    auto pb = b.node();
    return finish(std::move(out), {pa, pb}, [pa, pb](TensorNode& self) {
      if (pa->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
      if (pb->requires_grad) {
        double g = 0.0;
        for (double v : self.grad) g += v;
        pb->grad[0] -= g;
      }
    });
  }
  if (is_scalar(an)) {
    auto out = make_node(bn.shape);
    const double sv = an.value[0];
    for (size_t i = 0; i < out->value.size(); ++i)
      out->value[i] = sv - bn.value[i];
    auto pa = a.node();
    auto pb = b.node();
    return finish(std::move(out), {pa, pb}, [pa, pb](TensorNode& self) {
      if (pa->requires_grad) {
        double g = 0.0;
        for (double v : self.grad) g += v;
        pa->grad[0] += g;
      }
      if (pb->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    });
  }
  check(false, "sub: incompatible shapes");
  return {};
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto& an = *a.node();
  const auto& bn = *b.node();
  if (same_shape(an, bn)) {
    auto out = make_node(an.shape);
    for (size_t i = 0; i < out->value.size(); ++i)
      out->value[i] = an.value[i] * bn.value[i];
    auto pa = a.node();
    auto pb = b.node();
    return finish(std::move(out), {pa, pb}, [pa, pb](TensorNode& self) {
      if (pa->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i)
          pa->grad[i] += self.grad[i] * pb->value[i];
      if (pb->requires_grad)
        for (size_t i = 0; i < self.grad.size(); ++i)
          pb->grad[i] += self.grad[i] * pa->value[i];
    });
  }
  if (is_scalar(an) || is_scalar(bn)) {
    const Tensor& s = is_scalar(an) ? a : b;
    const Tensor& t = is_scalar(an) ? b : a;
    auto out = make_node(t.node()->shape);
    const double sv = s.node()->value[0];
    for (size_t i = 0; i < out->value.size(); ++i)
      out->value[i] = t.node()->value[i] * sv;
    auto ps = s.node();
    auto pt = t.node();
    return finish(std::move(out), {ps, pt}, [ps, pt](TensorNode& self) {
      if (ps->requires_grad) {
        double g = 0.0;
        for (size_t i = 0; i < self.grad.size(); ++i)
          g += self.grad[i] * pt->value[i];
        ps->grad[0] += g;
      }
      if (pt->requires_grad) {
        const double sv = ps->value[0];
        for (size_t i = 0; i < self.grad.size(); ++i)
          pt->grad[i] += self.grad[i] * sv;
      }
    });
  }
  check(false, "mul: incompatible shapes");
  return {};
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor scale(const Tensor& a, double c) {
  auto out = make_node(a.node()->shape);
  for (size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a.node()->value[i] * c;
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa, c](TensorNode& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += self.grad[i] * c;
  });
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
  const int m = a.shape()[0], k = a.shape()[1];
  check(b.shape()[0] == k, "matmul: inner dimensions do not match");
  const int n = b.shape()[1];
  auto out = make_node({m, n});
  kernels::gemm(false, false, m, n, k, a.value().data(), b.value().data(),
                out->value.data());
  auto pa = a.node();
  auto pb = b.node();
  return finish(std::move(out), {pa, pb}, [pa, pb, m, n, k](TensorNode& self) {
    if (pa->requires_grad)
      kernels::gemm(false, true, m, k, n, self.grad.data(), pb->value.data(),
                    pa->grad.data(), true);
    if (pb->requires_grad)
      kernels::gemm(true, false, k, n, m, pa->value.data(), self.grad.data(),
                    pb->grad.data(), true);
  });
}

Tensor transpose(const Tensor& a) {
  check(a.rank() == 2, "transpose: rank-2 tensor required");
  const int m = a.shape()[0], n = a.shape()[1];
  auto out = make_node({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out->value[j * m + i] = a.value()[i * n + j];
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa, m, n](TensorNode& self) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[j * m + i];
  });
}

// ---------------------------------------------------------------------------
// pointwise

Tensor relu(const Tensor& a) {
  auto out = make_node(a.node()->shape);
  for (size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a.node()->value[i] > 0.0 ? a.node()->value[i] : 0.0;
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa](TensorNode& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (pa->value[i] > 0.0) pa->grad[i] += self.grad[i];
  });
}

Tensor tanh_t(const Tensor& a) {
  auto out = make_node(a.node()->shape);
  for (size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = std::tanh(a.node()->value[i]);
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa](TensorNode& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  });
}

Tensor exp_t(const Tensor& a) {
  auto out = make_node(a.node()->shape);
  for (size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = std::exp(a.node()->value[i]);
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa](TensorNode& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += self.grad[i] * self.value[i];
  });
}

Tensor log_t(const Tensor& a) {
  auto out = make_node(a.node()->shape);
  for (size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = std::log(a.node()->value[i]);
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa](TensorNode& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += self.grad[i] / pa->value[i];
  });
}

Tensor square(const Tensor& a) {
  auto out = make_node(a.node()->shape);
  for (size_t i = 0; i < out->value.size(); ++i)
    out->value[i] = a.node()->value[i] * a.node()->value[i];
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa](TensorNode& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[i] += 2.0 * pa->value[i] * self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// reductions

Tensor sum(const Tensor& a) {
  auto out = make_node({});
  double s = 0.0;
  for (double v : a.value()) s += v;
  out->value[0] = s;
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa](TensorNode& self) {
    for (double& g : pa->grad) g += self.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  auto out = make_node({});
  double s = 0.0;
  for (double v : a.value()) s += v;
  out->value[0] = s * inv;
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa, inv](TensorNode& self) {
    for (double& g : pa->grad) g += self.grad[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// softmax family

namespace {

struct RowView {
  int rows, cols;
};

RowView as_rows(const Tensor& a, const char* who) {
  check(a.rank() == 1 || a.rank() == 2, std::string(who) + ": rank-1 or rank-2 required");
  if (a.rank() == 1) return {1, a.shape()[0]};
  return {a.shape()[0], a.shape()[1]};
}

}  // namespace

Tensor softmax_rows(const Tensor& a) {
  const RowView rv = as_rows(a, "softmax_rows");
  auto out = make_node(a.node()->shape);
  const auto& x = a.value();
  for (int r = 0; r < rv.rows; ++r) {
    const double* xr = x.data() + static_cast<long>(r) * rv.cols;
    double* yr = out->value.data() + static_cast<long>(r) * rv.cols;
    double mx = xr[0];
    for (int j = 1; j < rv.cols; ++j) mx = std::max(mx, xr[j]);
    double s = 0.0;
    for (int j = 0; j < rv.cols; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      s += yr[j];
    }
    for (int j = 0; j < rv.cols; ++j) yr[j] /= s;
  }
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa, rv](TensorNode& self) {
    for (int r = 0; r < rv.rows; ++r) {
      const double* yr = self.value.data() + static_cast<long>(r) * rv.cols;
      const double* gr = self.grad.data() + static_cast<long>(r) * rv.cols;
      double dot = 0.0;
      for (int j = 0; j < rv.cols; ++j) dot += yr[j] * gr[j];
      double* pg = pa->grad.data() + static_cast<long>(r) * rv.cols;
      for (int j = 0; j < rv.cols; ++j) pg[j] += yr[j] * (gr[j] - dot);
    }
  });
}

Tensor log_softmax_rows(const Tensor& a) {
  const RowView rv = as_rows(a, "log_softmax_rows");
  auto out = make_node(a.node()->shape);
  const auto& x = a.value();
  for (int r = 0; r < rv.rows; ++r) {
    const double* xr = x.data() + static_cast<long>(r) * rv.cols;
    double* yr = out->value.data() + static_cast<long>(r) * rv.cols;
    double mx = xr[0];
    for (int j = 1; j < rv.cols; ++j) mx = std::max(mx, xr[j]);
    double s = 0.0;
    for (int j = 0; j < rv.cols; ++j) s += std::exp(xr[j] - mx);
    const double lse = mx + std::log(s);
    for (int j = 0; j < rv.cols; ++j) yr[j] = xr[j] - lse;
  }
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa, rv](TensorNode& self) {
    for (int r = 0; r < rv.rows; ++r) {
      const double* yr = self.value.data() + static_cast<long>(r) * rv.cols;
      const double* gr = self.grad.data() + static_cast<long>(r) * rv.cols;
      double sg = 0.0;
      for (int j = 0; j < rv.cols; ++j) sg += gr[j];
      double* pg = pa->grad.data() + static_cast<long>(r) * rv.cols;
      for (int j = 0; j < rv.cols; ++j) pg[j] += gr[j] - std::exp(yr[j]) * sg;
    }
  });
}

// ---------------------------------------------------------------------------
// shape ops

Tensor reshape(const Tensor& a, std::vector<int> shape) {
  int n = 1;
  for (int d : shape) n *= d;
  check(n == a.numel(), "reshape: element count mismatch");
  auto out = make_node(std::move(shape));
  out->value = a.value();
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa](TensorNode& self) {
    for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
  });
}

Tensor slice_rows(const Tensor& a, int r0, int r1) {
  check(a.rank() == 2, "slice_rows: rank-2 tensor required");
  const int m = a.shape()[0], n = a.shape()[1];
  check(0 <= r0 && r0 < r1 && r1 <= m, "slice_rows: bad range");
  auto out = make_node({r1 - r0, n});
  std::copy(a.value().begin() + static_cast<long>(r0) * n,
            a.value().begin() + static_cast<long>(r1) * n, out->value.begin());
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa, r0, n](TensorNode& self) {
    for (size_t i = 0; i < self.grad.size(); ++i)
      pa->grad[static_cast<size_t>(r0) * n + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, int c0, int c1) {
  check(a.rank() == 2, "slice_cols: rank-2 tensor required");
  const int m = a.shape()[0], n = a.shape()[1];
  check(0 <= c0 && c0 < c1 && c1 <= n, "slice_cols: bad range");
  const int w = c1 - c0;
  auto out = make_node({m, w});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < w; ++j)
      out->value[i * w + j] = a.value()[i * n + c0 + j];
  auto pa = a.node();
  return finish(std::move(out), {pa}, [pa, m, n, c0, w](TensorNode& self) {
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        pa->grad[i * n + c0 + j] += self.grad[i * w + j];
  });
}

Tensor concat_rows(const std::vector<Tensor>& ts) {
  check(!ts.empty(), "concat_rows: empty list");
  const int n = ts[0].cols();
  int m = 0;
  for (const auto& t : ts) {
    check(t.rank() == 2, "concat_rows: rank-2 tensors required");
    check(t.cols() == n, "concat_rows: column mismatch");
    m += t.shape()[0];
  }
  auto out = make_node({m, n});
  std::vector<std::shared_ptr<TensorNode>> parents;
  parents.reserve(ts.size());
  size_t off = 0;
  for (const auto& t : ts) {
    std::copy(t.value().begin(), t.value().end(), out->value.begin() + off);
    off += t.value().size();
    parents.push_back(t.node());
  }
  auto ps = parents;
  return finish(std::move(out), std::move(parents), [ps](TensorNode& self) {
    size_t off = 0;
    for (const auto& p : ps) {
      if (p->requires_grad)
        for (size_t i = 0; i < p->value.size(); ++i)
          p->grad[i] += self.grad[off + i];
      off += p->value.size();
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& ts) {
  check(!ts.empty(), "concat_cols: empty list");
  const int m = ts[0].rows();
  int n = 0;
  for (const auto& t : ts) {
    check(t.rank() == 2, "concat_cols: rank-2 tensors required");
    check(t.shape()[0] == m, "concat_cols: row mismatch");
    n += t.shape()[1];
  }
  auto out = make_node({m, n});
  std::vector<std::shared_ptr<TensorNode>> parents;
  parents.reserve(ts.size());
  int c0 = 0;
  for (const auto& t : ts) {
    const int w = t.shape()[1];
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < w; ++j)
        out->value[i * n + c0 + j] = t.value()[i * w + j];
    c0 += w;
    parents.push_back(t.node());
  }
  auto ps = parents;
  return finish(std::move(out), std::move(parents), [ps, m, n](TensorNode& self) {
    int c0 = 0;
    for (const auto& p : ps) {
      const int w = p->shape[1];
      if (p->requires_grad)
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < w; ++j)
            p->grad[i * w + j] += self.grad[i * n + c0 + j];
      c0 += w;
    }
  });
}

Tensor gather_rows(const Tensor& a, const std::vector<int>& idx) {
  check(a.rank() == 2, "gather_rows: rank-2 tensor required");
  const int m = a.shape()[0], n = a.shape()[1];
  auto out = make_node({static_cast<int>(idx.size()), n});
  for (size_t i = 0; i < idx.size(); ++i) {
    check(idx[i] >= 0 && idx[i] < m, "gather_rows: index out of range");
    std::copy(a.value().begin() + static_cast<long>(idx[i]) * n,
              a.value().begin() + static_cast<long>(idx[i] + 1) * n,
              out->value.begin() + static_cast<long>(i) * n);
  }
  auto pa = a.node();
  auto ids = idx;
  return finish(std::move(out), {pa}, [pa, ids, n](TensorNode& self) {
    for (size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < n; ++j)
        pa->grad[static_cast<size_t>(ids[i]) * n + j] +=
            self.grad[i * n + j];
  });
}

// ---------------------------------------------------------------------------
// layer norm (fused, population variance)

Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps) {
  check(x.rank() == 2, "layer_norm_rows: rank-2 input required");
  const int m = x.shape()[0], n = x.shape()[1];
  check(gain.rank() == 1 && gain.shape()[0] == n, "layer_norm_rows: gain shape");
  check(bias.rank() == 1 && bias.shape()[0] == n, "layer_norm_rows: bias shape");
  auto out = make_node({m, n});
  std::vector<double> xhat(static_cast<size_t>(m) * n);
  std::vector<double> inv_std(m);
  for (int i = 0; i < m; ++i) {
    const double* xr = x.value().data() + static_cast<long>(i) * n;
    double mu = 0.0;
    for (int j = 0; j < n; ++j) mu += xr[j];
    mu /= n;
    double var = 0.0;
    for (int j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = inv;
    for (int j = 0; j < n; ++j) {
      const double xh = (xr[j] - mu) * inv;
      xhat[static_cast<size_t>(i) * n + j] = xh;
      out->value[static_cast<size_t>(i) * n + j] =
          xh * gain.value()[j] + bias.value()[j];
    }
  }
  auto px = x.node();
  auto pg = gain.node();
  auto pb = bias.node();
  return finish(std::move(out), {px, pg, pb},
                [px, pg, pb, m, n, xhat = std::move(xhat),
                 inv_std = std::move(inv_std)](TensorNode& self) {
    for (int i = 0; i < m; ++i) {
      const double* gr = self.grad.data() + static_cast<long>(i) * n;
      const double* xh = xhat.data() + static_cast<long>(i) * n;
      if (pg->requires_grad)
        for (int j = 0; j < n; ++j) pg->grad[j] += gr[j] * xh[j];
      if (pb->requires_grad)
        for (int j = 0; j < n; ++j) pb->grad[j] += gr[j];
      if (px->requires_grad) {
        double t1 = 0.0, t2 = 0.0;
        for (int j = 0; j < n; ++j) {
          const double dxh = gr[j] * pg->value[j];
          t1 += dxh;
          t2 += dxh * xh[j];
        }
        double* pxg = px->grad.data() + static_cast<long>(i) * n;
        for (int j = 0; j < n; ++j) {
          const double dxh = gr[j] * pg->value[j];
          pxg[j] += inv_std[i] * (dxh - t1 / n - xh[j] * t2 / n);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// backward

void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::runtime_error("backward: loss must be a scalar");
  if (!loss.requires_grad())
    throw std::runtime_error("backward: tensor does not require grad");

  // iterative post-order DFS; list comes out leaves-first
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  struct Frame {
    TensorNode* node;
    size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.node().get(), 0});
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->parents.size()) {
      TensorNode* p = f.node->parents[f.next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  // intermediates get this call's gradient only; leaves accumulate
  for (TensorNode* n : order)
    if (!n->parents.empty()) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  loss.node()->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

}  // namespace wmlab
