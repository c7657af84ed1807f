#include "vqat2i/core/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace vqat2i::ag {

namespace {

std::atomic<std::uint64_t> g_next_id{1};
thread_local int g_no_grad_depth = 0;

using NodePtr = std::shared_ptr<Node>;

NodePtr make_node(Tensor value, std::vector<NodePtr> inputs,
                  std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->id = g_next_id.fetch_add(1);
  if (g_no_grad_depth == 0) {
    for (const auto& in : inputs)
      if (in->requires_grad) {
        n->requires_grad = true;
        break;
      }
    if (n->requires_grad) {
      n->inputs = std::move(inputs);
      n->backward_fn = std::move(backward_fn);
    }
  }
  return n;
}

}  // namespace

Var make_op(Tensor value, std::vector<std::shared_ptr<Node>> inputs,
            std::function<void(Node&)> backward_fn) {
  return Var::wrap(make_node(std::move(value), std::move(inputs), std::move(backward_fn)));
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                shape_str(a.value().shape()) + " vs " +
                                shape_str(b.value().shape()));
}

}  // namespace

Var::Var(Tensor value, bool requires_grad) {
  node_ = std::make_shared<Node>();
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->id = g_next_id.fetch_add(1);
}

Scalar Var::item() const {
  if (value().size() != 1) throw std::logic_error("item(): tensor is not scalar");
  return value()[0];
}

NoGrad::NoGrad() { ++g_no_grad_depth; }
NoGrad::~NoGrad() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

void backward(const Var& loss) {
  if (loss.value().size() != 1) throw std::logic_error("backward: loss must be scalar");
  if (!loss.requires_grad()) return;
  // Collect reachable nodes; creation ids give a topological order.
  std::vector<NodePtr> order;
  std::unordered_set<Node*> seen;
  std::vector<NodePtr> stack{loss.node()};
  while (!stack.empty()) {
    NodePtr n = stack.back();
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    order.push_back(n);
    for (const auto& in : n->inputs)
      if (in->requires_grad) stack.push_back(in);
  }
  std::sort(order.begin(), order.end(),
            [](const NodePtr& a, const NodePtr& b) { return a->id > b->id; });
  loss.node()->ensure_grad()[0] += 1.0;
  for (const auto& n : order) {
    if (n->backward_fn && n->grad.defined()) n->backward_fn(*n);
  }
}

Var detach(const Var& v) {
  auto n = std::make_shared<Node>();
  n->value = v.value();
  n->id = g_next_id.fetch_add(1);
  return Var::wrap(n);
}

Var constant(Tensor t) { return Var(std::move(t), false); }

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = a.value().vec() + b.value().vec();
  auto an = a.node(), bn = b.node();
  return Var::wrap(make_node(out, {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) an->ensure_grad().vec() += self.grad.vec();
    if (bn->requires_grad) bn->ensure_grad().vec() += self.grad.vec();
  }));
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = a.value().vec() - b.value().vec();
  auto an = a.node(), bn = b.node();
  return Var::wrap(make_node(out, {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad) an->ensure_grad().vec() += self.grad.vec();
    if (bn->requires_grad) bn->ensure_grad().vec() -= self.grad.vec();
  }));
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = a.value().vec().cwiseProduct(b.value().vec());
  auto an = a.node(), bn = b.node();
  return Var::wrap(make_node(out, {an, bn}, [an, bn](Node& self) {
    if (an->requires_grad)
      an->ensure_grad().vec() += self.grad.vec().cwiseProduct(bn->value.vec());
    if (bn->requires_grad)
      bn->ensure_grad().vec() += self.grad.vec().cwiseProduct(an->value.vec());
  }));
}

Var div(const Var& a, const Var& b) {
  check_same_shape(a, b, "div");
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = a.value().vec().cwiseQuotient(b.value().vec());
  auto an = a.node(), bn = b.node();
  return Var::wrap(make_node(out, {an, bn}, [an, bn](Node& self) {
    for (index_t i = 0; i < self.grad.size(); ++i) {
      Scalar bv = bn->value[i];
      if (an->requires_grad) an->ensure_grad()[i] += self.grad[i] / bv;
      if (bn->requires_grad)
        bn->ensure_grad()[i] -= self.grad[i] * an->value[i] / (bv * bv);
    }
  }));
}

Var neg(const Var& a) {
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = -a.value().vec();
  auto an = a.node();
  return Var::wrap(make_node(out, {an}, [an](Node& self) {
    if (an->requires_grad) an->ensure_grad().vec() -= self.grad.vec();
  }));
}

Var exp(const Var& a) {
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = a.value().vec().array().exp();
  auto an = a.node();
  Tensor saved = out;
  return Var::wrap(make_node(out, {an}, [an, saved](Node& self) {
    if (an->requires_grad)
      an->ensure_grad().vec().array() += self.grad.vec().array() * saved.vec().array();
  }));
}

Var log(const Var& a) {
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = a.value().vec().array().log();
  auto an = a.node();
  return Var::wrap(make_node(out, {an}, [an](Node& self) {
    if (an->requires_grad)
      an->ensure_grad().vec().array() += self.grad.vec().array() / an->value.vec().array();
  }));
}

Var sqrt(const Var& a) {
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = a.value().vec().array().sqrt();
  auto an = a.node();
  Tensor saved = out;
  return Var::wrap(make_node(out, {an}, [an, saved](Node& self) {
    if (an->requires_grad)
      an->ensure_grad().vec().array() += self.grad.vec().array() * 0.5 / saved.vec().array();
  }));
}

Var square(const Var& a) {
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = a.value().vec().array().square();
  auto an = a.node();
  return Var::wrap(make_node(out, {an}, [an](Node& self) {
    if (an->requires_grad)
      an->ensure_grad().vec().array() += self.grad.vec().array() * 2.0 * an->value.vec().array();
  }));
}

Var tanh(const Var& a) {
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = a.value().vec().array().tanh();
  auto an = a.node();
  Tensor saved = out;
  return Var::wrap(make_node(out, {an}, [an, saved](Node& self) {
    if (an->requires_grad)
      an->ensure_grad().vec().array() +=
          self.grad.vec().array() * (1.0 - saved.vec().array().square());
  }));
}

Var sigmoid(const Var& a) {
  Tensor out = Tensor::uninit(a.value().shape());
  // 0.5*(tanh(x/2)+1) is the overflow-safe vectorized form
  out.vec() = ((a.value().vec().array() * 0.5).tanh() + 1.0) * 0.5;
  auto an = a.node();
  Tensor saved = out;
  return Var::wrap(make_node(out, {an}, [an, saved](Node& self) {
    if (an->requires_grad)
      an->ensure_grad().vec().array() +=
          self.grad.vec().array() * saved.vec().array() * (1.0 - saved.vec().array());
  }));
}

Var relu(const Var& a) {
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = a.value().vec().cwiseMax(0.0);
  auto an = a.node();
  return Var::wrap(make_node(out, {an}, [an](Node& self) {
    if (an->requires_grad)
      an->ensure_grad().vec().array() +=
          self.grad.vec().array() * (an->value.vec().array() > 0.0).cast<Scalar>();
  }));
}

Var leaky_relu(const Var& a, Scalar slope) {
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = a.value().vec().cwiseMax(a.value().vec() * slope);
  auto an = a.node();
  return Var::wrap(make_node(out, {an}, [an, slope](Node& self) {
    if (!an->requires_grad) return;
    auto x = an->value.vec().array();
    an->ensure_grad().vec().array() +=
        self.grad.vec().array() * ((x > 0.0).cast<Scalar>() * (1.0 - slope) + slope);
  }));
}

Var softplus(const Var& a) {
  // log(1+e^x) = max(x,0) + log1p(e^{-|x|})
  Tensor out = Tensor::uninit(a.value().shape());
  auto x = a.value().vec().array();
  out.vec() = x.cwiseMax(0.0) + (1.0 + (-x.abs()).exp()).log();
  auto an = a.node();
  return Var::wrap(make_node(out, {an}, [an](Node& self) {
    if (an->requires_grad) {
      auto xv = an->value.vec().array();
      an->ensure_grad().vec().array() +=
          self.grad.vec().array() * (((xv * 0.5).tanh() + 1.0) * 0.5);
    }
  }));
}

Var add_scalar(const Var& a, Scalar c) {
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = a.value().vec().array() + c;
  auto an = a.node();
  return Var::wrap(make_node(out, {an}, [an](Node& self) {
    if (an->requires_grad) an->ensure_grad().vec() += self.grad.vec();
  }));
}

Var mul_scalar(const Var& a, Scalar c) {
  Tensor out = Tensor::uninit(a.value().shape());
  out.vec() = a.value().vec() * c;
  auto an = a.node();
  return Var::wrap(make_node(out, {an}, [an, c](Node& self) {
    if (an->requires_grad) an->ensure_grad().vec() += self.grad.vec() * c;
  }));
}

// ------------------------------------------------------------------ broadcast

Var add_rowvec(const Var& x, const Var& b) {
  index_t m = x.value().dim(0), n = x.value().dim(1);
  if (b.value().size() != n) throw std::invalid_argument("add_rowvec: size mismatch");
  Tensor out = x.value().clone();
  auto om = out.mat(m, n);
  om.rowwise() += b.value().vec().transpose();
  auto xn = x.node(), bn = b.node();
  return Var::wrap(make_node(out, {xn, bn}, [xn, bn, m, n](Node& self) {
    if (xn->requires_grad) xn->ensure_grad().vec() += self.grad.vec();
    if (bn->requires_grad)
      bn->ensure_grad().vec() += self.grad.mat(m, n).colwise().sum().transpose();
  }));
}

Var mul_colvec(const Var& x, const Var& c) {
  index_t m = x.value().dim(0), n = x.value().size() / m;
  if (c.value().size() != m) throw std::invalid_argument("mul_colvec: size mismatch");
  Tensor out = Tensor::uninit(x.value().shape());
  out.mat(m, n) = x.value().mat(m, n).array().colwise() * c.value().vec().array();
  auto xn = x.node(), cn = c.node();
  return Var::wrap(make_node(out, {xn, cn}, [xn, cn, m, n](Node& self) {
    auto gm = self.grad.mat(m, n);
    if (xn->requires_grad)
      xn->ensure_grad().mat(m, n).array() += gm.array().colwise() * cn->value.vec().array();
    if (cn->requires_grad)
      cn->ensure_grad().vec() += gm.cwiseProduct(xn->value.mat(m, n)).rowwise().sum();
  }));
}

Var add_channel(const Var& x, const Var& b) {
  const auto& s = x.value().shape();
  if (s.size() != 4 || b.value().size() != s[1])
    throw std::invalid_argument("add_channel: bad shapes");
  index_t N = s[0], C = s[1], L = s[2] * s[3];
  Tensor out = x.value().clone();
  for (index_t n = 0; n < N; ++n)
    for (index_t c = 0; c < C; ++c)
      VecMap(out.data() + (n * C + c) * L, L).array() += b.value()[c];
  auto xn = x.node(), bn = b.node();
  return Var::wrap(make_node(out, {xn, bn}, [xn, bn, N, C, L](Node& self) {
    if (xn->requires_grad) xn->ensure_grad().vec() += self.grad.vec();
    if (bn->requires_grad) {
      Tensor& g = bn->ensure_grad();
      for (index_t n = 0; n < N; ++n)
        for (index_t c = 0; c < C; ++c)
          g[c] += ConstVecMap(self.grad.data() + (n * C + c) * L, L).sum();
    }
  }));
}

Var add_cols3(const Var& x, const Var& y) {
  const auto& s = x.value().shape();
  if (s.size() != 3 || y.value().dim(0) != s[0] || y.value().dim(1) != s[1])
    throw std::invalid_argument("add_cols3: bad shapes");
  index_t N = s[0], A = s[1], L = s[2];
  Tensor out = x.value().clone();
  for (index_t n = 0; n < N; ++n)
    for (index_t a = 0; a < A; ++a)
      VecMap(out.data() + (n * A + a) * L, L).array() += y.value().at(n, a);
  auto xn = x.node(), yn = y.node();
  return Var::wrap(make_node(out, {xn, yn}, [xn, yn, N, A, L](Node& self) {
    if (xn->requires_grad) xn->ensure_grad().vec() += self.grad.vec();
    if (yn->requires_grad) {
      Tensor& g = yn->ensure_grad();
      for (index_t n = 0; n < N; ++n)
        for (index_t a = 0; a < A; ++a)
          g.at(n, a) += ConstVecMap(self.grad.data() + (n * A + a) * L, L).sum();
    }
  }));
}

// ----------------------------------------------------------------- reductions

Var sum_all(const Var& a) {
  Tensor out = Tensor::scalar(a.value().vec().sum());
  auto an = a.node();
  return Var::wrap(make_node(out, {an}, [an](Node& self) {
    if (an->requires_grad) an->ensure_grad().vec().array() += self.grad[0];
  }));
}

Var mean_all(const Var& a) {
  index_t n = a.value().size();
  Tensor out = Tensor::scalar(a.value().vec().sum() / static_cast<Scalar>(n));
  auto an = a.node();
  return Var::wrap(make_node(out, {an}, [an, n](Node& self) {
    if (an->requires_grad)
      an->ensure_grad().vec().array() += self.grad[0] / static_cast<Scalar>(n);
  }));
}

Var row_sums(const Var& x) {
  index_t m = x.value().dim(0), n = x.value().size() / m;
  Tensor out = Tensor::uninit({m});
  out.vec() = x.value().mat(m, n).rowwise().sum();
  auto xn = x.node();
  return Var::wrap(make_node(out, {xn}, [xn, m, n](Node& self) {
    if (xn->requires_grad)
      xn->ensure_grad().mat(m, n).array().colwise() += self.grad.vec().array();
  }));
}

Var col_sums(const Var& x) {
  index_t m = x.value().dim(0), n = x.value().size() / m;
  Tensor out = Tensor::uninit({n});
  out.vec() = x.value().mat(m, n).colwise().sum().transpose();
  auto xn = x.node();
  return Var::wrap(make_node(out, {xn}, [xn, m, n](Node& self) {
    if (xn->requires_grad)
      xn->ensure_grad().mat(m, n).array().rowwise() +=
          self.grad.vec().transpose().array();
  }));
}

// ---------------------------------------------------------------------- shape

Var reshape(const Var& a, std::vector<index_t> shape) {
  Tensor out = a.value().reshaped(shape);  // shares buffer
  auto an = a.node();
  return Var::wrap(make_node(out, {an}, [an](Node& self) {
    if (an->requires_grad)
      an->ensure_grad().vec() += self.grad.reshaped(an->value.shape()).vec();
  }));
}

Var transpose(const Var& x) {
  index_t m = x.value().dim(0), n = x.value().dim(1);
  Tensor out = Tensor::uninit({n, m});
  out.mat(n, m) = x.value().mat(m, n).transpose();
  auto xn = x.node();
  return Var::wrap(make_node(out, {xn}, [xn, m, n](Node& self) {
    if (xn->requires_grad)
      xn->ensure_grad().mat(m, n) += self.grad.mat(n, m).transpose();
  }));
}

Var slice_cols(const Var& x, index_t c0, index_t c1) {
  index_t m = x.value().dim(0), n = x.value().dim(1), w = c1 - c0;
  if (c0 < 0 || c1 > n || w <= 0) throw std::invalid_argument("slice_cols: bad range");
  Tensor out = Tensor::uninit({m, w});
  out.mat(m, w) = x.value().mat(m, n).middleCols(c0, w);
  auto xn = x.node();
  return Var::wrap(make_node(out, {xn}, [xn, m, n, c0, w](Node& self) {
    if (xn->requires_grad)
      xn->ensure_grad().mat(m, n).middleCols(c0, w) += self.grad.mat(m, w);
  }));
}

Var slice_rows(const Var& x, index_t r0, index_t r1) {
  index_t m = x.value().dim(0), n = x.value().dim(1), h = r1 - r0;
  if (r0 < 0 || r1 > m || h <= 0) throw std::invalid_argument("slice_rows: bad range");
  Tensor out = Tensor::uninit({h, n});
  out.mat(h, n) = x.value().mat(m, n).middleRows(r0, h);
  auto xn = x.node();
  return Var::wrap(make_node(out, {xn}, [xn, m, n, r0, h](Node& self) {
    if (xn->requires_grad)
      xn->ensure_grad().mat(m, n).middleRows(r0, h) += self.grad.mat(h, n);
  }));
}

Var concat_cols(const Var& a, const Var& b) {
  index_t m = a.value().dim(0), n1 = a.value().dim(1), n2 = b.value().dim(1);
  if (b.value().dim(0) != m) throw std::invalid_argument("concat_cols: row mismatch");
  Tensor out = Tensor::uninit({m, n1 + n2});
  out.mat(m, n1 + n2).leftCols(n1) = a.value().mat(m, n1);
  out.mat(m, n1 + n2).rightCols(n2) = b.value().mat(m, n2);
  auto an = a.node(), bn = b.node();
  return Var::wrap(make_node(out, {an, bn}, [an, bn, m, n1, n2](Node& self) {
    auto gm = self.grad.mat(m, n1 + n2);
    if (an->requires_grad) an->ensure_grad().mat(m, n1) += gm.leftCols(n1);
    if (bn->requires_grad) bn->ensure_grad().mat(m, n2) += gm.rightCols(n2);
  }));
}

Var concat_rows(const Var& a, const Var& b) {
  index_t n = a.value().dim(1), m1 = a.value().dim(0), m2 = b.value().dim(0);
  if (b.value().dim(1) != n) throw std::invalid_argument("concat_rows: col mismatch");
  Tensor out = Tensor::uninit({m1 + m2, n});
  std::memcpy(out.data(), a.value().data(), sizeof(Scalar) * m1 * n);
  std::memcpy(out.data() + m1 * n, b.value().data(), sizeof(Scalar) * m2 * n);
  auto an = a.node(), bn = b.node();
  return Var::wrap(make_node(out, {an, bn}, [an, bn, m1, m2, n](Node& self) {
    if (an->requires_grad)
      an->ensure_grad().vec() += ConstVecMap(self.grad.data(), m1 * n);
    if (bn->requires_grad)
      bn->ensure_grad().vec() += ConstVecMap(self.grad.data() + m1 * n, m2 * n);
  }));
}

Var concat_channels(const Var& a, const Var& b) {
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  if (sa.size() != 4 || sb.size() != 4 || sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3])
    throw std::invalid_argument("concat_channels: bad shapes");
  index_t N = sa[0], C1 = sa[1], C2 = sb[1], L = sa[2] * sa[3];
  Tensor out = Tensor::uninit({N, C1 + C2, sa[2], sa[3]});
  for (index_t n = 0; n < N; ++n) {
    std::memcpy(out.data() + n * (C1 + C2) * L, a.value().data() + n * C1 * L,
                sizeof(Scalar) * C1 * L);
    std::memcpy(out.data() + n * (C1 + C2) * L + C1 * L, b.value().data() + n * C2 * L,
                sizeof(Scalar) * C2 * L);
  }
  auto an = a.node(), bn = b.node();
  return Var::wrap(make_node(out, {an, bn}, [an, bn, N, C1, C2, L](Node& self) {
    for (index_t n = 0; n < N; ++n) {
      const Scalar* g = self.grad.data() + n * (C1 + C2) * L;
      if (an->requires_grad)
        VecMap(an->ensure_grad().data() + n * C1 * L, C1 * L) += ConstVecMap(g, C1 * L);
      if (bn->requires_grad)
        VecMap(bn->ensure_grad().data() + n * C2 * L, C2 * L) +=
            ConstVecMap(g + C1 * L, C2 * L);
    }
  }));
}

Var select0(const Var& x, index_t n) {
  const auto& s = x.value().shape();
  if (s.empty() || n < 0 || n >= s[0]) throw std::invalid_argument("select0: bad index");
  std::vector<index_t> oshape(s.begin() + 1, s.end());
  if (oshape.empty()) oshape = {1};
  index_t stride = Tensor::count(oshape);
  Tensor out = Tensor::uninit(oshape);
  std::memcpy(out.data(), x.value().data() + n * stride, sizeof(Scalar) * stride);
  auto xn = x.node();
  return Var::wrap(make_node(out, {xn}, [xn, n, stride](Node& self) {
    if (xn->requires_grad)
      VecMap(xn->ensure_grad().data() + n * stride, stride) += self.grad.vec();
  }));
}

Var stack_lastdim(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("stack_lastdim: empty");
  index_t m = xs[0].value().dim(0), d = xs[0].value().dim(1);
  index_t T = static_cast<index_t>(xs.size());
  Tensor out({m, d, T});
  std::vector<NodePtr> ins;
  ins.reserve(xs.size());
  for (index_t t = 0; t < T; ++t) {
    if (xs[t].value().dim(0) != m || xs[t].value().dim(1) != d)
      throw std::invalid_argument("stack_lastdim: shape mismatch");
    for (index_t i = 0; i < m; ++i)
      for (index_t j = 0; j < d; ++j) out[(i * d + j) * T + t] = xs[t].value().at(i, j);
    ins.push_back(xs[t].node());
  }
  return Var::wrap(make_node(out, ins, [m, d, T](Node& self) {
    for (index_t t = 0; t < T; ++t) {
      const auto& in = self.inputs[t];
      if (!in->requires_grad) continue;
      Tensor& g = in->ensure_grad();
      for (index_t i = 0; i < m; ++i)
        for (index_t j = 0; j < d; ++j) g.at(i, j) += self.grad[(i * d + j) * T + t];
    }
  }));
}

Var transpose12(const Var& x) {
  const auto& s = x.value().shape();
  if (s.size() != 3) throw std::invalid_argument("transpose12: need [N,A,B]");
  index_t N = s[0], A = s[1], B = s[2];
  Tensor out = Tensor::uninit({N, B, A});
  for (index_t n = 0; n < N; ++n)
    MatMap(out.data() + n * A * B, B, A) =
        ConstMatMap(x.value().data() + n * A * B, A, B).transpose();
  auto xn = x.node();
  return Var::wrap(make_node(out, {xn}, [xn, N, A, B](Node& self) {
    if (!xn->requires_grad) return;
    Tensor& g = xn->ensure_grad();
    for (index_t n = 0; n < N; ++n)
      MatMap(g.data() + n * A * B, A, B) +=
          ConstMatMap(self.grad.data() + n * A * B, B, A).transpose();
  }));
}

Var expand0(const Var& x, index_t n) {
  if (n < 1) throw std::invalid_argument("expand0: need n >= 1");
  std::vector<index_t> oshape{n};
  for (index_t d : x.value().shape()) oshape.push_back(d);
  index_t stride = x.value().size();
  Tensor out = Tensor::uninit(oshape);
  for (index_t i = 0; i < n; ++i)
    std::memcpy(out.data() + i * stride, x.value().data(),
                sizeof(Scalar) * static_cast<size_t>(stride));
  auto xn = x.node();
  return Var::wrap(make_node(out, {xn}, [xn, n, stride](Node& self) {
    if (!xn->requires_grad) return;
    auto g = xn->ensure_grad().vec();
    for (index_t i = 0; i < n; ++i) g += ConstVecMap(self.grad.data() + i * stride, stride);
  }));
}

Var scale_lastdim(const Var& x, const Var& s) {
  const auto& xs = x.value().shape();
  if (xs.size() != 3 || s.value().dim(0) != xs[0] || s.value().dim(1) != xs[2])
    throw std::invalid_argument("scale_lastdim: bad shapes");
  index_t N = xs[0], D = xs[1], R = xs[2];
  Tensor out = Tensor::uninit(xs);
  for (index_t n = 0; n < N; ++n)
    MatMap(out.data() + n * D * R, D, R).array() =
        ConstMatMap(x.value().data() + n * D * R, D, R).array().rowwise() *
        ConstVecMap(s.value().data() + n * R, R).transpose().array();
  auto xn = x.node(), sn = s.node();
  return Var::wrap(make_node(out, {xn, sn}, [xn, sn, N, D, R](Node& self) {
    for (index_t n = 0; n < N; ++n) {
      ConstMatMap g(self.grad.data() + n * D * R, D, R);
      if (xn->requires_grad)
        MatMap(xn->ensure_grad().data() + n * D * R, D, R).array() +=
            g.array().rowwise() *
            ConstVecMap(sn->value.data() + n * R, R).transpose().array();
      if (sn->requires_grad)
        VecMap(sn->ensure_grad().data() + n * R, R).transpose() +=
            (g.array() * ConstMatMap(xn->value.data() + n * D * R, D, R).array())
                .colwise()
                .sum()
                .matrix();
    }
  }));
}

// ------------------------------------------------------------- linear algebra

Var matmul(const Var& a, const Var& b) {
  index_t m = a.value().dim(0), k = a.value().dim(1), n = b.value().dim(1);
  if (b.value().dim(0) != k) throw std::invalid_argument("matmul: inner dim mismatch");
  Tensor out = Tensor::uninit({m, n});
  out.mat(m, n).noalias() = a.value().mat(m, k) * b.value().mat(k, n);
  auto an = a.node(), bn = b.node();
  return Var::wrap(make_node(out, {an, bn}, [an, bn, m, k, n](Node& self) {
    auto g = self.grad.mat(m, n);
    if (an->requires_grad)
      an->ensure_grad().mat(m, k).noalias() += g * bn->value.mat(k, n).transpose();
    if (bn->requires_grad)
      bn->ensure_grad().mat(k, n).noalias() += an->value.mat(m, k).transpose() * g;
  }));
}

Var bmm(const Var& a, const Var& b, bool ta, bool tb) {
  const auto& sa = a.value().shape();
  const auto& sb = b.value().shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0])
    throw std::invalid_argument("bmm: need [N,p,q] inputs");
  index_t N = sa[0];
  index_t p = ta ? sa[2] : sa[1], q = ta ? sa[1] : sa[2];
  index_t q2 = tb ? sb[2] : sb[1], r = tb ? sb[1] : sb[2];
  if (q != q2) throw std::invalid_argument("bmm: inner dim mismatch");
  Tensor out = Tensor::uninit({N, p, r});
  index_t as = sa[1] * sa[2], bs = sb[1] * sb[2];
  for (index_t i = 0; i < N; ++i) {
    ConstMatMap am(a.value().data() + i * as, sa[1], sa[2]);
    ConstMatMap bm(b.value().data() + i * bs, sb[1], sb[2]);
    MatMap om(out.data() + i * p * r, p, r);
    if (!ta && !tb)
      om.noalias() = am * bm;
    else if (ta && !tb)
      om.noalias() = am.transpose() * bm;
    else if (!ta && tb)
      om.noalias() = am * bm.transpose();
    else
      om.noalias() = am.transpose() * bm.transpose();
  }
  auto an = a.node(), bn = b.node();
  return Var::wrap(make_node(out, {an, bn}, [an, bn, N, p, r, ta, tb](Node& self) {
    const auto& sa2 = an->value.shape();
    const auto& sb2 = bn->value.shape();
    index_t as2 = sa2[1] * sa2[2], bs2 = sb2[1] * sb2[2];
    for (index_t i = 0; i < N; ++i) {
      ConstMatMap g(self.grad.data() + i * p * r, p, r);
      ConstMatMap am(an->value.data() + i * as2, sa2[1], sa2[2]);
      ConstMatMap bm(bn->value.data() + i * bs2, sb2[1], sb2[2]);
      if (an->requires_grad) {
        MatMap ga(an->ensure_grad().data() + i * as2, sa2[1], sa2[2]);
        // dA = dC * op(B)^T, transposed if A was transposed
        if (!ta)
          ga.noalias() += tb ? (g * bm).eval() : (g * bm.transpose()).eval();
        else
          ga.noalias() += tb ? (bm.transpose() * g.transpose()).eval()
                             : (bm * g.transpose()).eval();
      }
      if (bn->requires_grad) {
        MatMap gb(bn->ensure_grad().data() + i * bs2, sb2[1], sb2[2]);
        if (!tb)
          gb.noalias() += ta ? (am * g).eval() : (am.transpose() * g).eval();
        else
          gb.noalias() += ta ? (g.transpose() * am.transpose()).eval()
                             : (g.transpose() * am).eval();
      }
    }
  }));
}

Var proj3(const Var& w, const Var& x) {
  const auto& sx = x.value().shape();
  index_t p = w.value().dim(0), q = w.value().dim(1);
  if (sx.size() != 3 || sx[1] != q) throw std::invalid_argument("proj3: bad shapes");
  index_t N = sx[0], L = sx[2];
  Tensor out = Tensor::uninit({N, p, L});
  for (index_t i = 0; i < N; ++i) {
    ConstMatMap xm(x.value().data() + i * q * L, q, L);
    MatMap om(out.data() + i * p * L, p, L);
    om.noalias() = w.value().mat(p, q) * xm;
  }
  auto wn = w.node(), xn = x.node();
  return Var::wrap(make_node(out, {wn, xn}, [wn, xn, N, p, q, L](Node& self) {
    for (index_t i = 0; i < N; ++i) {
      ConstMatMap g(self.grad.data() + i * p * L, p, L);
      ConstMatMap xm(xn->value.data() + i * q * L, q, L);
      if (wn->requires_grad)
        wn->ensure_grad().mat(p, q).noalias() += g * xm.transpose();
      if (xn->requires_grad) {
        MatMap gx(xn->ensure_grad().data() + i * q * L, q, L);
        gx.noalias() += wn->value.mat(p, q).transpose() * g;
      }
    }
  }));
}

Var linear_nobias(const Var& x, const Var& w) {
  index_t n = x.value().dim(0), in = x.value().dim(1), out_dim = w.value().dim(0);
  if (w.value().dim(1) != in)
    throw std::invalid_argument("linear: weight shape mismatch, x cols " + std::to_string(in));
  Tensor out = Tensor::uninit({n, out_dim});
  out.mat(n, out_dim).noalias() = x.value().mat(n, in) * w.value().mat(out_dim, in).transpose();
  auto xn = x.node(), wn = w.node();
  return Var::wrap(make_node(out, {xn, wn}, [xn, wn, n, in, out_dim](Node& self) {
    auto g = self.grad.mat(n, out_dim);
    if (xn->requires_grad)
      xn->ensure_grad().mat(n, in).noalias() += g * wn->value.mat(out_dim, in);
    if (wn->requires_grad)
      wn->ensure_grad().mat(out_dim, in).noalias() += g.transpose() * xn->value.mat(n, in);
  }));
}

Var linear(const Var& x, const Var& w, const Var& b) {
  return add_rowvec(linear_nobias(x, w), b);
}

// ------------------------------------------------------------------------- nn

Var embedding(const Var& table, const std::vector<index_t>& ids) {
  index_t V = table.value().dim(0), E = table.value().dim(1);
  index_t n = static_cast<index_t>(ids.size());
  Tensor out = Tensor::uninit({n, E});
  for (index_t i = 0; i < n; ++i) {
    index_t id = ids[static_cast<size_t>(i)];
    if (id < 0 || id >= V)
      throw std::out_of_range("embedding: token id " + std::to_string(id) +
                              " out of range [0," + std::to_string(V) + ")");
    std::memcpy(out.data() + i * E, table.value().data() + id * E, sizeof(Scalar) * E);
  }
  auto tn = table.node();
  return Var::wrap(make_node(out, {tn}, [tn, ids, E](Node& self) {
    if (!tn->requires_grad) return;
    Tensor& g = tn->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i)
      VecMap(g.data() + ids[i] * E, E) +=
          ConstVecMap(self.grad.data() + static_cast<index_t>(i) * E, E);
  }));
}

Var upsample_nearest2(const Var& x) {
  const auto& s = x.value().shape();
  if (s.size() != 4) throw std::invalid_argument("upsample_nearest2: need NCHW");
  index_t N = s[0], C = s[1], H = s[2], W = s[3];
  Tensor out = Tensor::uninit({N, C, H * 2, W * 2});
  for (index_t nc = 0; nc < N * C; ++nc) {
    const Scalar* src = x.value().data() + nc * H * W;
    Scalar* dst = out.data() + nc * 4 * H * W;
    for (index_t h = 0; h < H; ++h)
      for (index_t w = 0; w < W; ++w) {
        Scalar v = src[h * W + w];
        index_t o = (2 * h) * (2 * W) + 2 * w;
        dst[o] = v;
        dst[o + 1] = v;
        dst[o + 2 * W] = v;
        dst[o + 2 * W + 1] = v;
      }
  }
  auto xn = x.node();
  return Var::wrap(make_node(out, {xn}, [xn, N, C, H, W](Node& self) {
    if (!xn->requires_grad) return;
    Tensor& g = xn->ensure_grad();
    for (index_t nc = 0; nc < N * C; ++nc) {
      Scalar* dst = g.data() + nc * H * W;
      const Scalar* src = self.grad.data() + nc * 4 * H * W;
      for (index_t h = 0; h < H; ++h)
        for (index_t w = 0; w < W; ++w) {
          index_t o = (2 * h) * (2 * W) + 2 * w;
          dst[h * W + w] += src[o] + src[o + 1] + src[o + 2 * W] + src[o + 2 * W + 1];
        }
    }
  }));
}

Var global_avg_pool(const Var& x) {
  const auto& s = x.value().shape();
  if (s.size() != 4) throw std::invalid_argument("global_avg_pool: need NCHW");
  index_t N = s[0], C = s[1], L = s[2] * s[3];
  Tensor out = Tensor::uninit({N, C});
  for (index_t nc = 0; nc < N * C; ++nc)
    out[nc] = ConstVecMap(x.value().data() + nc * L, L).mean();
  auto xn = x.node();
  return Var::wrap(make_node(out, {xn}, [xn, N, C, L](Node& self) {
    if (!xn->requires_grad) return;
    Tensor& g = xn->ensure_grad();
    for (index_t nc = 0; nc < N * C; ++nc)
      VecMap(g.data() + nc * L, L).array() += self.grad[nc] / static_cast<Scalar>(L);
  }));
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, Scalar eps) {
  const auto& s = x.value().shape();
  if (s.size() != 4) throw std::invalid_argument("instance_norm: need NCHW");
  index_t N = s[0], C = s[1], L = s[2] * s[3];
  if (gamma.value().size() != C || beta.value().size() != C)
    throw std::invalid_argument("instance_norm: affine shape mismatch");
  Tensor out = Tensor::uninit(s);
  Tensor xhat = Tensor::uninit(s);  // saved for backward
  Tensor inv_std = Tensor::uninit({N * C});
  for (index_t nc = 0; nc < N * C; ++nc) {
    ConstVecMap xv(x.value().data() + nc * L, L);
    Scalar mean = xv.mean();
    Scalar var = (xv.array() - mean).square().mean();
    Scalar is = 1.0 / std::sqrt(var + eps);
    inv_std[nc] = is;
    index_t c = nc % C;
    VecMap xh(xhat.data() + nc * L, L);
    xh = (xv.array() - mean) * is;
    VecMap(out.data() + nc * L, L) = xh.array() * gamma.value()[c] + beta.value()[c];
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return Var::wrap(
      make_node(out, {xn, gn, bn}, [xn, gn, bn, N, C, L, xhat, inv_std](Node& self) {
        for (index_t nc = 0; nc < N * C; ++nc) {
          index_t c = nc % C;
          ConstVecMap g(self.grad.data() + nc * L, L);
          ConstVecMap xh(xhat.data() + nc * L, L);
          if (gn->requires_grad) gn->ensure_grad()[c] += g.cwiseProduct(xh).sum();
          if (bn->requires_grad) bn->ensure_grad()[c] += g.sum();
          if (xn->requires_grad) {
            // d xhat = g * gamma; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
            Eigen::ArrayXd dxh = g.array() * gn->value[c];
            Scalar m1 = dxh.mean();
            Scalar m2 = (dxh * xh.array()).mean();
            VecMap gx(xn->ensure_grad().data() + nc * L, L);
            gx.array() += (dxh - m1 - xh.array() * m2) * inv_std[nc];
          }
        }
      }));
}

Var softmax_rows(const Var& x) {
  index_t m = x.value().dim(0), n = x.value().size() / m;
  Tensor out = Tensor::uninit(x.value().shape());
  for (index_t i = 0; i < m; ++i) {
    ConstVecMap xi(x.value().data() + i * n, n);
    VecMap oi(out.data() + i * n, n);
    Scalar mx = xi.maxCoeff();
    oi = (xi.array() - mx).exp();
    oi /= oi.sum();
  }
  auto xn = x.node();
  Tensor saved = out;
  return Var::wrap(make_node(out, {xn}, [xn, m, n, saved](Node& self) {
    if (!xn->requires_grad) return;
    Tensor& g = xn->ensure_grad();
    for (index_t i = 0; i < m; ++i) {
      ConstVecMap go(self.grad.data() + i * n, n);
      ConstVecMap y(saved.data() + i * n, n);
      Scalar dot = go.dot(y);
      VecMap(g.data() + i * n, n).array() += y.array() * (go.array() - dot);
    }
  }));
}

Var log_softmax_rows(const Var& x) {
  index_t m = x.value().dim(0), n = x.value().size() / m;
  Tensor out = Tensor::uninit(x.value().shape());
  for (index_t i = 0; i < m; ++i) {
    ConstVecMap xi(x.value().data() + i * n, n);
    VecMap oi(out.data() + i * n, n);
    Scalar mx = xi.maxCoeff();
    Scalar lse = std::log((xi.array() - mx).exp().sum()) + mx;
    oi = xi.array() - lse;
  }
  auto xn = x.node();
  Tensor saved = out;
  return Var::wrap(make_node(out, {xn}, [xn, m, n, saved](Node& self) {
    if (!xn->requires_grad) return;
    Tensor& g = xn->ensure_grad();
    for (index_t i = 0; i < m; ++i) {
      ConstVecMap go(self.grad.data() + i * n, n);
      ConstVecMap ls(saved.data() + i * n, n);
      Scalar gsum = go.sum();
      VecMap(g.data() + i * n, n).array() += go.array() - ls.array().exp() * gsum;
    }
  }));
}

Var softmax_lastdim_masked(const Var& x, const std::vector<index_t>& valid) {
  const auto& s = x.value().shape();
  if (s.size() != 3) throw std::invalid_argument("softmax_lastdim_masked: need [N,L,T]");
  index_t N = s[0], L = s[1], T = s[2];
  if (static_cast<index_t>(valid.size()) != N)
    throw std::invalid_argument("softmax_lastdim_masked: valid size mismatch");
  Tensor out = Tensor::uninit(s);
  for (index_t i = 0; i < N; ++i) {
    index_t v = valid[static_cast<size_t>(i)];
    if (v < 1 || v > T) throw std::invalid_argument("softmax_lastdim_masked: all-masked row");
    for (index_t l = 0; l < L; ++l) {
      ConstVecMap xi(x.value().data() + (i * L + l) * T, T);
      VecMap oi(out.data() + (i * L + l) * T, T);
      Scalar mx = xi.head(v).maxCoeff();
      oi.head(v) = (xi.head(v).array() - mx).exp();
      oi.head(v) /= oi.head(v).sum();
      oi.tail(T - v).setZero();
    }
  }
  auto xn = x.node();
  Tensor saved = out;
  return Var::wrap(make_node(out, {xn}, [xn, N, L, T, valid, saved](Node& self) {
    if (!xn->requires_grad) return;
    Tensor& g = xn->ensure_grad();
    for (index_t i = 0; i < N; ++i) {
      index_t v = valid[static_cast<size_t>(i)];
      for (index_t l = 0; l < L; ++l) {
        ConstVecMap go(self.grad.data() + (i * L + l) * T, T);
        ConstVecMap y(saved.data() + (i * L + l) * T, T);
        Scalar dot = go.head(v).dot(y.head(v));
        VecMap(g.data() + (i * L + l) * T, T).head(v).array() +=
            y.head(v).array() * (go.head(v).array() - dot);
      }
    }
  }));
}

Var pick(const Var& x, const std::vector<index_t>& ids) {
  index_t m = x.value().dim(0), n = x.value().dim(1);
  if (static_cast<index_t>(ids.size()) != m) throw std::invalid_argument("pick: size mismatch");
  Tensor out = Tensor::uninit({m});
  for (index_t i = 0; i < m; ++i) {
    index_t j = ids[static_cast<size_t>(i)];
    if (j < 0 || j >= n) throw std::out_of_range("pick: index out of range");
    out[i] = x.value().at(i, j);
  }
  auto xn = x.node();
  return Var::wrap(make_node(out, {xn}, [xn, ids, n](Node& self) {
    if (!xn->requires_grad) return;
    Tensor& g = xn->ensure_grad();
    for (size_t i = 0; i < ids.size(); ++i)
      g[static_cast<index_t>(i) * n + ids[i]] += self.grad[static_cast<index_t>(i)];
  }));
}

Var dropout(const Var& x, Scalar rate, Rng& rng) {
  if (rate <= 0) return x;
  if (rate >= 1) throw std::invalid_argument("dropout: rate must be < 1");
  Tensor mask(x.value().shape());
  Scalar keep = 1.0 - rate;
  for (index_t i = 0; i < mask.size(); ++i)
    mask[i] = rng.uniform() < rate ? 0.0 : 1.0 / keep;
  Tensor out = Tensor::uninit(x.value().shape());
  out.vec() = x.value().vec().cwiseProduct(mask.vec());
  auto xn = x.node();
  return Var::wrap(make_node(out, {xn}, [xn, mask](Node& self) {
    if (xn->requires_grad)
      xn->ensure_grad().vec() += self.grad.vec().cwiseProduct(mask.vec());
  }));
}

}  // namespace vqat2i::ag
