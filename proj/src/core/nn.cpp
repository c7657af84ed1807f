#include "vqat2i/core/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace vqat2i::nn {

Var ParamStore::param(const std::string& name, Tensor init) {
  for (const auto& [n, v] : entries_)
    if (n == name) throw std::logic_error("duplicate parameter name: " + name);
  Var v(std::move(init), true);
  entries_.emplace_back(name, v);
  return v;
}

std::vector<Var> ParamStore::params() const {
  std::vector<Var> out;
  out.reserve(entries_.size());
  for (const auto& [n, v] : entries_) out.push_back(v);
  return out;
}

void ParamStore::zero_grad() {
  for (auto& [n, v] : entries_)
    if (v.node()->grad.defined()) v.node()->grad.fill(0);
}

void ParamStore::set_trainable(bool trainable) {
  for (auto& [n, v] : entries_) v.set_requires_grad(trainable);
}

index_t ParamStore::total_size() const {
  index_t n = 0;
  for (const auto& [name, v] : entries_) n += v.value().size();
  return n;
}

std::uint64_t ParamStore::digest() const {
  std::uint64_t h = kFnvBasis;
  for (const auto& [name, v] : entries_) {
    h = fnv1a64(name, h);
    h = fnv1a64(v.value().data(), sizeof(Scalar) * static_cast<size_t>(v.value().size()), h);
  }
  return h;
}

Adam::Adam(std::vector<Var> params, Scalar lr, Scalar beta1, Scalar beta2, Scalar eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.value().shape());
    v_.emplace_back(p.value().shape());
  }
}

void Adam::step() {
  ++t_;
  Scalar bc1 = 1.0 - std::pow(beta1_, static_cast<Scalar>(t_));
  Scalar bc2 = 1.0 - std::pow(beta2_, static_cast<Scalar>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.node()->grad.defined()) continue;
    const Tensor& g = p.grad();
    Tensor& m = m_[i];
    Tensor& v = v_[i];
    Tensor& w = p.value();
    for (index_t j = 0; j < w.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      w[j] -= lr_ * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + eps_);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_)
    if (p.node()->grad.defined()) p.node()->grad.fill(0);
}

std::vector<Scalar> Adam::state() const {
  std::vector<Scalar> blob;
  blob.push_back(static_cast<Scalar>(t_));
  for (const auto& t : m_) blob.insert(blob.end(), t.data(), t.data() + t.size());
  for (const auto& t : v_) blob.insert(blob.end(), t.data(), t.data() + t.size());
  return blob;
}

void Adam::load_state(const std::vector<Scalar>& blob) {
  size_t need = 1;
  for (const auto& t : m_) need += 2 * static_cast<size_t>(t.size());
  if (blob.size() != need) throw std::runtime_error("Adam state size mismatch");
  t_ = static_cast<std::int64_t>(blob[0]);
  size_t off = 1;
  for (auto& t : m_) {
    std::copy(blob.begin() + off, blob.begin() + off + t.size(), t.data());
    off += static_cast<size_t>(t.size());
  }
  for (auto& t : v_) {
    std::copy(blob.begin() + off, blob.begin() + off + t.size(), t.data());
    off += static_cast<size_t>(t.size());
  }
}

Tensor normal_init(std::vector<index_t> shape, Rng& rng, Scalar stddev) {
  Tensor t(std::move(shape));
  rng.fill_normal(t, 0, stddev);
  return t;
}

Tensor uniform_init(std::vector<index_t> shape, Rng& rng, Scalar bound) {
  Tensor t(std::move(shape));
  rng.fill_uniform(t, -bound, bound);
  return t;
}

Linear Linear::make(ParamStore& ps, const std::string& name, index_t in, index_t out,
                    Rng& rng) {
  Linear l;
  l.w = ps.param(name + ".w", normal_init({out, in}, rng));
  l.b = ps.param(name + ".b", Tensor({out}));
  return l;
}

Conv Conv::make(ParamStore& ps, const std::string& name, index_t in, index_t out,
                index_t ksize, index_t stride, index_t pad, Rng& rng) {
  Conv c;
  c.w = ps.param(name + ".w", normal_init({out, in, ksize, ksize}, rng));
  c.b = ps.param(name + ".b", Tensor({out}));
  c.stride = stride;
  c.pad = pad;
  return c;
}

InstanceNorm InstanceNorm::make(ParamStore& ps, const std::string& name, index_t channels) {
  InstanceNorm n;
  n.gamma = ps.param(name + ".gamma", Tensor::full({channels}, 1.0));
  n.beta = ps.param(name + ".beta", Tensor({channels}));
  return n;
}

RecurrentCell recurrent_cell_from_string(const std::string& s) {
  if (s == "lstm") return RecurrentCell::lstm;
  if (s == "gru") return RecurrentCell::gru;
  throw std::invalid_argument("unknown recurrent cell: " + s);
}

std::string to_string(RecurrentCell c) {
  return c == RecurrentCell::lstm ? "lstm" : "gru";
}

RnnCell RnnCell::make(ParamStore& ps, const std::string& name, RecurrentCell kind,
                      index_t input, index_t hidden, Rng& rng) {
  RnnCell cell;
  cell.kind = kind;
  cell.hidden = hidden;
  index_t gates = kind == RecurrentCell::lstm ? 4 : 3;
  Scalar k = 1.0 / std::sqrt(static_cast<Scalar>(hidden));
  cell.wx = ps.param(name + ".wx", uniform_init({gates * hidden, input}, rng, k));
  cell.wh = ps.param(name + ".wh", uniform_init({gates * hidden, hidden}, rng, k));
  cell.b = ps.param(name + ".b", Tensor({gates * hidden}));
  return cell;
}

std::pair<Var, Var> RnnCell::step(const Var& x, const Var& h, const Var& c) const {
  using namespace ag;
  index_t H = hidden;
  if (kind == RecurrentCell::lstm) {
    Var z = add_rowvec(add(linear_nobias(x, wx), linear_nobias(h, wh)), b);
    Var i = sigmoid(slice_cols(z, 0, H));
    Var f = sigmoid(slice_cols(z, H, 2 * H));
    Var g = tanh(slice_cols(z, 2 * H, 3 * H));
    Var o = sigmoid(slice_cols(z, 3 * H, 4 * H));
    Var c_next = add(mul(f, c), mul(i, g));
    Var h_next = mul(o, tanh(c_next));
    return {h_next, c_next};
  }
  // GRU: gates from x and h, candidate uses reset-scaled h.
  Var zx = add_rowvec(linear_nobias(x, wx), b);
  Var zh = linear_nobias(h, wh);
  Var r = sigmoid(add(slice_cols(zx, 0, H), slice_cols(zh, 0, H)));
  Var u = sigmoid(add(slice_cols(zx, H, 2 * H), slice_cols(zh, H, 2 * H)));
  Var cand = tanh(add(slice_cols(zx, 2 * H, 3 * H), mul(r, slice_cols(zh, 2 * H, 3 * H))));
  Var one_minus_u = add_scalar(neg(u), 1.0);
  Var h_next = add(mul(u, h), mul(one_minus_u, cand));
  return {h_next, h_next};
}

}  // namespace vqat2i::nn
