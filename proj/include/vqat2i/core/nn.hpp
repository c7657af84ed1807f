#pragma once

#include "vqat2i/core/autograd.hpp"

#include <string>
#include <utility>
#include <vector>

namespace vqat2i::nn {

using ag::Var;

/// Ordered, named trainable parameters of one model.
class ParamStore {
 public:
  Var param(const std::string& name, Tensor init);

  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  std::vector<Var> params() const;
  void zero_grad();
  void set_trainable(bool trainable);
  index_t total_size() const;
  /// FNV-1a over parameter bytes in registration order.
  std::uint64_t digest() const;

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

class Adam {
 public:
  Adam(std::vector<Var> params, Scalar lr, Scalar beta1 = 0.9, Scalar beta2 = 0.999,
       Scalar eps = 1e-8);
  void step();
  void zero_grad();

  Scalar lr() const { return lr_; }
  void set_lr(Scalar lr) { lr_ = lr; }
  std::int64_t step_count() const { return t_; }

  // Flat state blob (step count + moment tensors) for checkpoint resume.
  std::vector<Scalar> state() const;
  void load_state(const std::vector<Scalar>& blob);

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_, v_;
  Scalar lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

// ---- initialization ----
Tensor normal_init(std::vector<index_t> shape, Rng& rng, Scalar stddev = 0.02);
Tensor uniform_init(std::vector<index_t> shape, Rng& rng, Scalar bound);

struct Linear {
  Var w, b;
  Var operator()(const Var& x) const { return ag::linear(x, w, b); }
  static Linear make(ParamStore& ps, const std::string& name, index_t in, index_t out,
                     Rng& rng);
};

struct Conv {
  Var w, b;
  index_t stride = 1, pad = 1;
  Var operator()(const Var& x) const { return ag::conv2d(x, w, b, stride, pad); }
  static Conv make(ParamStore& ps, const std::string& name, index_t in, index_t out,
                   index_t ksize, index_t stride, index_t pad, Rng& rng);
};

struct InstanceNorm {
  Var gamma, beta;
  Var operator()(const Var& x) const { return ag::instance_norm(x, gamma, beta); }
  static InstanceNorm make(ParamStore& ps, const std::string& name, index_t channels);
};

enum class RecurrentCell { lstm, gru };

RecurrentCell recurrent_cell_from_string(const std::string& s);
std::string to_string(RecurrentCell c);

/// One recurrent cell over a batch; LSTM carries (h, c), GRU carries (h, h).
struct RnnCell {
  RecurrentCell kind = RecurrentCell::lstm;
  Var wx, wh, b;  // [G*H, E], [G*H, H], [G*H] with G = 4 (lstm) or 3 (gru)
  index_t hidden = 0;
  std::pair<Var, Var> step(const Var& x, const Var& h, const Var& c) const;
  static RnnCell make(ParamStore& ps, const std::string& name, RecurrentCell kind,
                      index_t input, index_t hidden, Rng& rng);
};

}  // namespace vqat2i::nn
