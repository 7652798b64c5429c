#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace wmlab {

// Reverse-mode autodiff over float64 tensors of rank 0..2, row-major.
// Graph construction and backward are single-threaded; parallelism lives in
// the gemm kernels and above (independent graphs per worker).
//
// Broadcasting is deliberately narrow: scalar-with-tensor, and
// matrix [m,n] + vector [n] (trailing-axis bias). Anything else throws.
//
// backward() accumulates into leaf .grad buffers and never zeroes them, so
// two consecutive backward() calls yield exactly twice the gradient.
// Intermediate (non-leaf) grads are reset at the start of each backward and
// hold that call's gradients afterwards, which is what activation probes
// read.

bool grad_enabled();

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

struct TensorNode {
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized like value iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  int numel() const {
    int n = 1;
    for (int d : shape) n *= d;
    return n;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
  static Tensor from(std::vector<double> data, std::vector<int> shape,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int numel() const { return node_->numel(); }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int rows() const;
  int cols() const;

  std::vector<double>& value() { return node_->value; }
  const std::vector<double>& value() const { return node_->value; }
  std::vector<double>& grad();
  const std::vector<double>& grad() const;
  bool requires_grad() const { return node_->requires_grad; }
  double item() const;

  void zero_grad();
  Tensor detach() const;

  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode> node_;
};

// elementwise and broadcast arithmetic
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
// multiply by a plain constant (no graph edge for the constant)
Tensor scale(const Tensor& a, double c);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor tanh_t(const Tensor& a);
Tensor exp_t(const Tensor& a);
Tensor log_t(const Tensor& a);
Tensor square(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// per-row, max-subtracted
Tensor softmax_rows(const Tensor& a);
Tensor log_softmax_rows(const Tensor& a);

Tensor reshape(const Tensor& a, std::vector<int> shape);
Tensor slice_rows(const Tensor& a, int r0, int r1);
Tensor slice_cols(const Tensor& a, int c0, int c1);
Tensor concat_rows(const std::vector<Tensor>& ts);
Tensor concat_cols(const std::vector<Tensor>& ts);
Tensor gather_rows(const Tensor& a, const std::vector<int>& idx);

// out[r] = (x[r]-mu)/sqrt(var+eps) * gain + bias, per row
Tensor layer_norm_rows(const Tensor& x, const Tensor& gain, const Tensor& bias,
                       double eps = 1e-5);

void backward(const Tensor& loss);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace wmlab
