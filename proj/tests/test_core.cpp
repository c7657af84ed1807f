#include "vqat2i/core/autograd.hpp"
#include "vqat2i/core/nn.hpp"

#include "gradcheck.hpp"

#include <doctest.h>

using namespace vqat2i;
using namespace vqat2i::ag;
using vqat2i::testing::gradcheck;

namespace {

Var randn(std::vector<index_t> shape, Rng& rng, bool rg = true) {
  Tensor t(std::move(shape));
  rng.fill_normal(t);
  return Var(t, rg);
}

}  // namespace

TEST_CASE("rng determinism and permutation") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(7);
  auto p = c.permutation(50);
  std::vector<bool> seen(50, false);
  for (auto i : p) {
    CHECK(!seen[static_cast<size_t>(i)]);
    seen[static_cast<size_t>(i)] = true;
  }
  CHECK(Rng::derive(1, "a") != Rng::derive(1, "b"));
  CHECK(Rng::derive(1, "a", 2) != Rng::derive(1, "a", 3));
}

TEST_CASE("elementwise ops gradcheck") {
  Rng rng(1);
  Var a = randn({3, 4}, rng);
  Var b = randn({3, 4}, rng);
  // keep b away from zero for div
  for (index_t i = 0; i < b.value().size(); ++i)
    b.value()[i] = b.value()[i] > 0 ? b.value()[i] + 0.5 : b.value()[i] - 0.5;

  CHECK(gradcheck([&] { return sum_all(mul(add(a, b), sub(a, b))); }, {a, b}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(div(a, b)); }, {a, b}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(exp(mul_scalar(a, 0.3))); }, {a}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(log(add_scalar(square(a), 1.0))); }, {a}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(sqrt(add_scalar(square(a), 0.5))); }, {a}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(tanh(a)); }, {a}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(sigmoid(a)); }, {a}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(softplus(mul_scalar(a, 3.0))); }, {a}) < 1e-7);
  CHECK(gradcheck([&] { return mean_all(neg(a)); }, {a}) < 1e-7);
}

TEST_CASE("relu family gradcheck away from kink") {
  Rng rng(2);
  Var a = randn({4, 5}, rng);
  for (index_t i = 0; i < a.value().size(); ++i)
    if (std::abs(a.value()[i]) < 0.1) a.value()[i] = 0.2;
  CHECK(gradcheck([&] { return sum_all(relu(a)); }, {a}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(leaky_relu(a, 0.2)); }, {a}) < 1e-7);
}

TEST_CASE("broadcast ops gradcheck") {
  Rng rng(3);
  Var x = randn({4, 6}, rng);
  Var b = randn({6}, rng);
  Var c = randn({4}, rng);
  CHECK(gradcheck([&] { return sum_all(square(add_rowvec(x, b))); }, {x, b}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(square(mul_colvec(x, c))); }, {x, c}) < 1e-7);

  Var img = randn({2, 3, 4, 4}, rng);
  Var cb = randn({3}, rng);
  CHECK(gradcheck([&] { return sum_all(square(add_channel(img, cb))); }, {img, cb}) < 1e-7);

  Var t3 = randn({2, 3, 5}, rng);
  Var y = randn({2, 3}, rng);
  CHECK(gradcheck([&] { return sum_all(square(add_cols3(t3, y))); }, {t3, y}) < 1e-7);
}

TEST_CASE("reductions and shape ops gradcheck") {
  Rng rng(4);
  Var x = randn({3, 5}, rng);
  CHECK(gradcheck([&] { return sum_all(square(row_sums(x))); }, {x}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(square(col_sums(x))); }, {x}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(square(transpose(x))); }, {x}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(square(reshape(x, {5, 3}))); }, {x}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(square(slice_cols(x, 1, 4))); }, {x}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(square(slice_rows(x, 0, 2))); }, {x}) < 1e-7);

  Var y = randn({3, 2}, rng);
  CHECK(gradcheck([&] { return sum_all(square(concat_cols(x, y))); }, {x, y}) < 1e-7);
  Var z = randn({2, 5}, rng);
  CHECK(gradcheck([&] { return sum_all(square(concat_rows(x, z))); }, {x, z}) < 1e-7);

  Var a4 = randn({2, 2, 3, 3}, rng);
  Var b4 = randn({2, 4, 3, 3}, rng);
  CHECK(gradcheck([&] { return sum_all(square(concat_channels(a4, b4))); }, {a4, b4}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(square(select0(a4, 1))); }, {a4}) < 1e-7);

  Var s1 = randn({2, 3}, rng), s2 = randn({2, 3}, rng), s3 = randn({2, 3}, rng);
  CHECK(gradcheck([&] { return sum_all(square(stack_lastdim({s1, s2, s3}))); }, {s1, s2, s3}) <
        1e-7);
}

TEST_CASE("matmul family gradcheck") {
  Rng rng(5);
  Var a = randn({3, 4}, rng);
  Var b = randn({4, 5}, rng);
  CHECK(gradcheck([&] { return sum_all(square(matmul(a, b))); }, {a, b}) < 1e-7);

  Var w = randn({5, 4}, rng);
  Var bias = randn({5}, rng);
  CHECK(gradcheck([&] { return sum_all(square(linear(a, w, bias))); }, {a, w, bias}) < 1e-7);

  Var ba = randn({2, 3, 4}, rng);
  Var bb = randn({2, 4, 5}, rng);
  CHECK(gradcheck([&] { return sum_all(square(bmm(ba, bb))); }, {ba, bb}) < 1e-7);
  Var bat = randn({2, 4, 3}, rng);
  CHECK(gradcheck([&] { return sum_all(square(bmm(bat, bb, true, false))); }, {bat, bb}) < 1e-7);
  Var bbt = randn({2, 5, 4}, rng);
  CHECK(gradcheck([&] { return sum_all(square(bmm(ba, bbt, false, true))); }, {ba, bbt}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(square(bmm(bat, bbt, true, true))); }, {bat, bbt}) < 1e-7);

  Var pw = randn({6, 3}, rng);
  Var px = randn({2, 3, 7}, rng);
  CHECK(gradcheck([&] { return sum_all(square(proj3(pw, px))); }, {pw, px}) < 1e-7);
}

TEST_CASE("conv2d matches direct computation and gradchecks") {
  Rng rng(6);
  Var x = randn({2, 3, 5, 5}, rng);
  Var w = randn({4, 3, 3, 3}, rng);
  Var b = randn({4}, rng);
  Var y = conv2d(x, w, b, 1, 1);
  CHECK(y.value().shape() == std::vector<index_t>{2, 4, 5, 5});

  // direct loop oracle at one output position
  index_t n = 1, co = 2, ho = 2, wo = 3;
  Scalar acc = b.value()[co];
  for (index_t ci = 0; ci < 3; ++ci)
    for (index_t ki = 0; ki < 3; ++ki)
      for (index_t kj = 0; kj < 3; ++kj) {
        index_t h = ho - 1 + ki, ww = wo - 1 + kj;
        if (h < 0 || h >= 5 || ww < 0 || ww >= 5) continue;
        acc += x.value().at4(n, ci, h, ww) * w.value().at4(co, ci, ki, kj);
      }
  CHECK(y.value().at4(n, co, ho, wo) == doctest::Approx(acc).epsilon(1e-12));

  CHECK(gradcheck([&] { return sum_all(square(conv2d(x, w, b, 1, 1))); }, {x, w, b}) < 1e-7);
  // strided, no-pad variant
  CHECK(gradcheck([&] { return sum_all(square(conv2d(x, w, b, 2, 1))); }, {x, w, b}) < 1e-7);
}

TEST_CASE("nn ops gradcheck") {
  Rng rng(7);
  Var x = randn({2, 3, 4, 4}, rng);
  CHECK(gradcheck([&] { return sum_all(square(upsample_nearest2(x))); }, {x}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(square(global_avg_pool(x))); }, {x}) < 1e-7);

  Var gamma = Var(Tensor::full({3}, 1.3), true);
  Var beta = Var(Tensor::full({3}, -0.2), true);
  CHECK(gradcheck([&] { return sum_all(square(instance_norm(x, gamma, beta))); },
                  {x, gamma, beta}, 1e-6) < 1e-6);

  Var logits = randn({3, 6}, rng);
  CHECK(gradcheck([&] { return sum_all(square(softmax_rows(logits))); }, {logits}) < 1e-7);
  CHECK(gradcheck([&] { return sum_all(square(log_softmax_rows(logits))); }, {logits}) < 1e-7);

  Var att = randn({2, 3, 5}, rng);
  std::vector<index_t> valid{3, 5};
  CHECK(gradcheck([&] { return sum_all(square(softmax_lastdim_masked(att, valid))); }, {att}) <
        1e-7);

  Var table = randn({10, 4}, rng);
  std::vector<index_t> ids{1, 7, 3, 1};
  CHECK(gradcheck([&] { return sum_all(square(embedding(table, ids))); }, {table}) < 1e-7);

  Var m = randn({3, 4}, rng);
  std::vector<index_t> picks{2, 0, 3};
  CHECK(gradcheck([&] { return sum_all(square(pick(m, picks))); }, {m}) < 1e-7);
}

TEST_CASE("softmax rows sum to one and mask zeroes the tail") {
  Rng rng(8);
  Var att = randn({2, 4, 6}, rng);
  std::vector<index_t> valid{2, 6};
  Var sm = softmax_lastdim_masked(att, valid);
  for (index_t n = 0; n < 2; ++n)
    for (index_t l = 0; l < 4; ++l) {
      Scalar s = 0;
      for (index_t t = 0; t < 6; ++t) s += sm.value()[(n * 4 + l) * 6 + t];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    }
  for (index_t l = 0; l < 4; ++l)
    for (index_t t = 2; t < 6; ++t) CHECK(sm.value()[(l) * 6 + t] == 0.0);
}

TEST_CASE("rnn cells gradcheck") {
  Rng rng(9);
  for (auto kind : {nn::RecurrentCell::lstm, nn::RecurrentCell::gru}) {
    nn::ParamStore ps;
    auto cell = nn::RnnCell::make(ps, "cell", kind, 3, 4, rng);
    Var x = randn({2, 3}, rng);
    Var h0 = randn({2, 4}, rng);
    Var c0 = randn({2, 4}, rng);
    auto fn = [&] {
      auto [h1, c1] = cell.step(x, h0, c0);
      auto [h2, c2] = cell.step(x, h1, c1);
      return sum_all(square(h2));
    };
    std::vector<Var> inputs{x, h0, cell.wx, cell.wh, cell.b};
    if (kind == nn::RecurrentCell::lstm) inputs.push_back(c0);
    CHECK(gradcheck(fn, inputs) < 1e-7);
  }
}

TEST_CASE("backward accumulates through shared subexpressions") {
  Var a(Tensor::scalar(3.0), true);
  Var b = mul(a, a);        // a^2
  Var c = add(b, b);        // 2 a^2
  backward(sum_all(c));
  CHECK(a.grad()[0] == doctest::Approx(12.0));  // d(2a^2)/da = 4a
}

TEST_CASE("no_grad suppresses tape") {
  Var a(Tensor::scalar(2.0), true);
  {
    NoGrad ng;
    Var y = mul(a, a);
    CHECK(!y.requires_grad());
  }
  Var y = mul(a, a);
  CHECK(y.requires_grad());
}

TEST_CASE("detach blocks gradient flow") {
  Var a(Tensor::scalar(2.0), true);
  Var d = detach(mul(a, a));
  Var y = mul(d, d);
  backward(y);
  CHECK(!a.grad().defined());
}

TEST_CASE("adam decreases a quadratic") {
  Rng rng(10);
  nn::ParamStore ps;
  Var w = ps.param("w", nn::normal_init({8}, rng, 1.0));
  nn::Adam opt(ps.params(), 0.05);
  auto loss_value = [&] {
    return sum_all(square(w)).item();
  };
  Scalar initial = loss_value();
  for (int i = 0; i < 200; ++i) {
    ps.zero_grad();
    Var loss = sum_all(square(w));
    backward(loss);
    opt.step();
  }
  CHECK(loss_value() < initial * 1e-3);
}

TEST_CASE("adam state round-trips") {
  Rng rng(11);
  nn::ParamStore ps;
  Var w = ps.param("w", nn::normal_init({4}, rng, 1.0));
  nn::Adam opt(ps.params(), 0.01);
  for (int i = 0; i < 3; ++i) {
    ps.zero_grad();
    backward(sum_all(square(w)));
    opt.step();
  }
  auto blob = opt.state();
  nn::Adam opt2(ps.params(), 0.01);
  opt2.load_state(blob);
  CHECK(opt2.state() == blob);
  CHECK(opt2.step_count() == 3);
}

TEST_CASE("param store digest changes with values") {
  Rng rng(12);
  nn::ParamStore ps;
  Var w = ps.param("w", nn::normal_init({4}, rng, 1.0));
  auto d1 = ps.digest();
  w.value()[0] += 1.0;
  CHECK(ps.digest() != d1);
}

TEST_CASE("downscale2x_area averages blocks") {
  Tensor x({1, 1, 4, 4});
  for (index_t i = 0; i < 16; ++i) x[i] = static_cast<Scalar>(i);
  Tensor y = downscale2x_area(x);
  CHECK(y.dim(2) == 2);
  CHECK(y[0] == doctest::Approx((0 + 1 + 4 + 5) / 4.0));
  CHECK(y[3] == doctest::Approx((10 + 11 + 14 + 15) / 4.0));
  Tensor z = downscale_to(x, 1);
  CHECK(z.size() == 1);
  CHECK(z[0] == doctest::Approx(7.5));
}

TEST_CASE("batched shape ops gradcheck") {
  Rng rng(20);
  Var x = randn({2, 3, 4}, rng);
  CHECK(gradcheck([&] { return sum_all(square(transpose12(x))); }, {x}) < 1e-7);
  Var y = randn({3, 4}, rng);
  CHECK(gradcheck([&] { return sum_all(square(expand0(y, 3))); }, {y}) < 1e-7);
  Var s = randn({2, 4}, rng);
  CHECK(gradcheck([&] { return sum_all(square(scale_lastdim(x, s))); }, {x, s}) < 1e-7);
  // values
  Var t = transpose12(x);
  CHECK(t.value().at(0 * 12 + 0, 0) == x.value()[0]);
  CHECK(t.value()[0 * 12 + 1 * 3 + 2] == x.value()[0 * 12 + 2 * 4 + 1]);
}
