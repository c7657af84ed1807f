#pragma once

#include "vqat2i/core/tensor.hpp"

#include <functional>
#include <memory>
#include <vector>

namespace vqat2i::ag {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;  // adds into inputs' grads
  bool requires_grad = false;
  std::uint64_t id = 0;  // creation order; inputs always have smaller ids

  Tensor& ensure_grad() {
    if (!grad.defined()) grad = Tensor::zeros(value.shape());
    return grad;
  }
};

/// Handle to a tape node. Cheap to copy.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& value() { return node_->value; }
  const Tensor& grad() const { return node_->grad; }
  Tensor& ensure_grad() { return node_->ensure_grad(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool b) { node_->requires_grad = b; }
  Scalar item() const;

  std::shared_ptr<Node> node() const { return node_; }
  static Var wrap(std::shared_ptr<Node> n) {
    Var v;
    v.node_ = std::move(n);
    return v;
  }

 private:
  std::shared_ptr<Node> node_;
};

/// Reverse-mode sweep from a scalar loss. Accumulates into .grad of every
/// reachable node with requires_grad.
void backward(const Var& loss);

/// While alive, new ops record no tape (constant outputs). Nestable.
struct NoGrad {
  NoGrad();
  ~NoGrad();
  NoGrad(const NoGrad&) = delete;
};
bool grad_enabled();

Var detach(const Var& v);
Var constant(Tensor t);

/// Registers a tape node; building block for ops defined outside autograd.cpp.
Var make_op(Tensor value, std::vector<std::shared_ptr<Node>> inputs,
            std::function<void(Node&)> backward_fn);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var neg(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var leaky_relu(const Var& a, Scalar slope);
Var softplus(const Var& a);  // log(1+e^x), overflow-safe
Var add_scalar(const Var& a, Scalar c);
Var mul_scalar(const Var& a, Scalar c);

// ---- broadcast helpers ----
Var add_rowvec(const Var& x, const Var& b);   // x[m,n] + b[n] per row
Var mul_colvec(const Var& x, const Var& c);   // x[m,n] * c[m] per column
Var add_channel(const Var& x, const Var& b);  // x[N,C,H,W] + b[C]
Var add_cols3(const Var& x, const Var& y);    // x[N,A,L] + y[N,A] per last dim

// ---- reductions ----
Var sum_all(const Var& a);   // -> [1]
Var mean_all(const Var& a);  // -> [1]
Var row_sums(const Var& x);  // x[m,n] -> [m]
Var col_sums(const Var& x);  // x[m,n] -> [n]

// ---- shape ----
Var reshape(const Var& a, std::vector<index_t> shape);
Var transpose(const Var& x);                             // [m,n] -> [n,m]
Var slice_cols(const Var& x, index_t c0, index_t c1);    // [m,n] -> [m,c1-c0]
Var slice_rows(const Var& x, index_t r0, index_t r1);    // [m,n] -> [r1-r0,n]
Var concat_cols(const Var& a, const Var& b);             // [m,n1],[m,n2] -> [m,n1+n2]
Var concat_rows(const Var& a, const Var& b);             // [m1,n],[m2,n] -> [m1+m2,n]
Var concat_channels(const Var& a, const Var& b);         // NCHW along C
Var select0(const Var& x, index_t n);                    // x[N,...] -> [...] (copy)
Var stack_lastdim(const std::vector<Var>& xs);           // T x [m,d] -> [m,d,T]
Var transpose12(const Var& x);                           // [N,A,B] -> [N,B,A]
Var expand0(const Var& x, index_t n);                    // [...] -> [n, ...] (repeat)
Var scale_lastdim(const Var& x, const Var& s);           // x[N,D,R] * s[N,R] per column

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);                                  // [m,k]x[k,n]
Var bmm(const Var& a, const Var& b, bool ta = false, bool tb = false);   // [N,p,q]x[N,q,r]
Var proj3(const Var& w, const Var& x);                                   // w[p,q] x x[N,q,L] -> [N,p,L]
Var linear(const Var& x, const Var& w, const Var& b);                    // x[n,in] w[out,in] -> [n,out]
Var linear_nobias(const Var& x, const Var& w);

// ---- nn ----
Var embedding(const Var& table, const std::vector<index_t>& ids);  // table[V,E] -> [n,E]
Var conv2d(const Var& x, const Var& w, const Var& b, index_t stride, index_t pad);
Var upsample_nearest2(const Var& x);
Var global_avg_pool(const Var& x);  // [N,C,H,W] -> [N,C]
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, Scalar eps = 1e-5);
Var softmax_rows(const Var& x);
Var log_softmax_rows(const Var& x);
/// Softmax over the last dim of x[N,L,T] where sample n only attends to the
/// first valid[n] entries; masked entries get weight 0.
Var softmax_lastdim_masked(const Var& x, const std::vector<index_t>& valid);
Var pick(const Var& x, const std::vector<index_t>& ids);  // x[m,n] -> [m], x[i,ids[i]]
Var dropout(const Var& x, Scalar rate, Rng& rng);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }

}  // namespace vqat2i::ag
