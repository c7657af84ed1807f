#include "vqat2i/core/autograd.hpp"

#include <stdexcept>

namespace vqat2i::ag {

namespace {

struct ConvDims {
  index_t N, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, K, Lo;
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, index_t stride, index_t pad) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4) throw std::invalid_argument("conv2d: need NCHW/OIHW");
  if (sx[1] != sw[1])
    throw std::invalid_argument("conv2d: channel mismatch, input " + std::to_string(sx[1]) +
                                " vs weight " + std::to_string(sw[1]));
  ConvDims d;
  d.N = sx[0];
  d.Cin = sx[1];
  d.H = sx[2];
  d.W = sx[3];
  d.Cout = sw[0];
  d.kh = sw[2];
  d.kw = sw[3];
  d.stride = stride;
  d.pad = pad;
  d.Ho = (d.H + 2 * pad - d.kh) / stride + 1;
  d.Wo = (d.W + 2 * pad - d.kw) / stride + 1;
  if (d.Ho < 1 || d.Wo < 1) throw std::invalid_argument("conv2d: empty output");
  d.K = d.Cin * d.kh * d.kw;
  d.Lo = d.Ho * d.Wo;
  return d;
}

// col[K, Lo] for one sample
void im2col(const Scalar* x, const ConvDims& d, Scalar* col, index_t col_stride) {
  for (index_t c = 0; c < d.Cin; ++c) {
    const Scalar* xc = x + c * d.H * d.W;
    for (index_t ki = 0; ki < d.kh; ++ki)
      for (index_t kj = 0; kj < d.kw; ++kj) {
        Scalar* row = col + ((c * d.kh + ki) * d.kw + kj) * col_stride;
        for (index_t ho = 0; ho < d.Ho; ++ho) {
          index_t h = ho * d.stride - d.pad + ki;
          Scalar* out = row + ho * d.Wo;
          if (h < 0 || h >= d.H) {
            for (index_t wo = 0; wo < d.Wo; ++wo) out[wo] = 0;
            continue;
          }
          const Scalar* xr = xc + h * d.W;
          for (index_t wo = 0; wo < d.Wo; ++wo) {
            index_t wi = wo * d.stride - d.pad + kj;
            out[wo] = (wi >= 0 && wi < d.W) ? xr[wi] : 0;
          }
        }
      }
  }
}

void col2im_add(const Scalar* col, const ConvDims& d, Scalar* x) {
  for (index_t c = 0; c < d.Cin; ++c) {
    Scalar* xc = x + c * d.H * d.W;
    for (index_t ki = 0; ki < d.kh; ++ki)
      for (index_t kj = 0; kj < d.kw; ++kj) {
        const Scalar* row = col + ((c * d.kh + ki) * d.kw + kj) * d.Lo;
        for (index_t ho = 0; ho < d.Ho; ++ho) {
          index_t h = ho * d.stride - d.pad + ki;
          if (h < 0 || h >= d.H) continue;
          Scalar* xr = xc + h * d.W;
          const Scalar* in = row + ho * d.Wo;
          for (index_t wo = 0; wo < d.Wo; ++wo) {
            index_t wi = wo * d.stride - d.pad + kj;
            if (wi >= 0 && wi < d.W) xr[wi] += in[wo];
          }
        }
      }
  }
}

// ---- 3x3 stride-1 pad-1 path: per-tap GEMMs over a zero-padded copy.
// Interior cells of the padded accumulator receive exactly the convolution;
// pad cells collect wrap-around garbage and are never read back.

struct PadDims {
  index_t Hp, Wp, Lp;
};

PadDims pad_dims(const ConvDims& d) { return {d.H + 2, d.W + 2, (d.H + 2) * (d.W + 2)}; }

void copy_into_padded(const Scalar* x, const ConvDims& d, Scalar* xp) {
  PadDims p = pad_dims(d);
  std::fill(xp, xp + d.Cin * p.Lp, 0.0);
  for (index_t c = 0; c < d.Cin; ++c)
    for (index_t h = 0; h < d.H; ++h)
      std::memcpy(xp + c * p.Lp + (h + 1) * p.Wp + 1, x + (c * d.H + h) * d.W,
                  sizeof(Scalar) * static_cast<size_t>(d.W));
}

void copy_from_padded(const Scalar* yp, const ConvDims& d, Scalar* y) {
  PadDims p = pad_dims(d);
  for (index_t c = 0; c < d.Cout; ++c)
    for (index_t h = 0; h < d.H; ++h)
      std::memcpy(y + (c * d.H + h) * d.W, yp + c * p.Lp + (h + 1) * p.Wp + 1,
                  sizeof(Scalar) * static_cast<size_t>(d.W));
}

// yp[:, base_out .. ] += Wk (rows x cols) * xp[:, base_in .. ] over `len` cells
void tap_gemm(ConstMatMap wk, const Scalar* xp, index_t xp_cols, Scalar* yp, index_t yp_cols,
              index_t off_in, index_t off_out, index_t len) {
  Eigen::Map<const MatrixRM, 0, Eigen::OuterStride<>> xs(xp + off_in, wk.cols(), len,
                                                         Eigen::OuterStride<>(xp_cols));
  Eigen::Map<MatrixRM, 0, Eigen::OuterStride<>> ys(yp + off_out, wk.rows(), len,
                                                   Eigen::OuterStride<>(yp_cols));
  ys.noalias() += wk * xs;
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, index_t stride, index_t pad) {
  ConvDims d = conv_dims(x.value(), w.value(), stride, pad);
  if (b.value().size() != d.Cout) throw std::invalid_argument("conv2d: bias size mismatch");
  Tensor out = Tensor::uninit({d.N, d.Cout, d.Ho, d.Wo});
  const bool tap_path = d.kh == 3 && d.kw == 3 && stride == 1 && pad == 1;
  const bool gemm_path = d.kh == 1 && d.kw == 1 && stride == 1 && pad == 0;

  if (gemm_path) {
    // pure channel mix: per sample [Cout, L] = W[Cout, Cin] * X[Cin, L]
#pragma omp parallel for schedule(static)
    for (index_t n = 0; n < d.N; ++n) {
      ConstMatMap xs(x.value().data() + n * d.Cin * d.Lo, d.Cin, d.Lo);
      MatMap ys(out.data() + n * d.Cout * d.Lo, d.Cout, d.Lo);
      ys.noalias() = w.value().mat(d.Cout, d.Cin) * xs;
      ys.colwise() += b.value().vec();
    }
  } else if (tap_path) {
    PadDims p = pad_dims(d);
    std::vector<MatrixRM> taps(9, MatrixRM(d.Cout, d.Cin));
    for (index_t ki = 0; ki < 3; ++ki)
      for (index_t kj = 0; kj < 3; ++kj)
        for (index_t co = 0; co < d.Cout; ++co)
          for (index_t ci = 0; ci < d.Cin; ++ci)
            taps[static_cast<size_t>(ki * 3 + kj)](co, ci) =
                w.value().data()[((co * d.Cin + ci) * 3 + ki) * 3 + kj];
#pragma omp parallel
    {
      Tensor xp = Tensor::uninit({d.Cin, p.Lp});
      Tensor yp = Tensor::uninit({d.Cout, p.Lp});
#pragma omp for schedule(static)
      for (index_t n = 0; n < d.N; ++n) {
        copy_into_padded(x.value().data() + n * d.Cin * d.H * d.W, d, xp.data());
        yp.fill(0);
        for (index_t ki = 0; ki < 3; ++ki)
          for (index_t kj = 0; kj < 3; ++kj) {
            index_t shift = (ki - 1) * p.Wp + (kj - 1);
            index_t start_out = std::max<index_t>(0, -shift);
            index_t start_in = start_out + shift;
            index_t len = p.Lp - std::abs(shift);
            const MatrixRM& wk = taps[static_cast<size_t>(ki * 3 + kj)];
            tap_gemm(ConstMatMap(wk.data(), d.Cout, d.Cin), xp.data(), p.Lp, yp.data(), p.Lp,
                     start_in, start_out, len);
          }
        Scalar* y = out.data() + n * d.Cout * d.Lo;
        copy_from_padded(yp.data(), d, y);
        MatMap ym(y, d.Cout, d.Lo);
        ym.colwise() += b.value().vec();
      }
    }
  } else {
#pragma omp parallel
    {
      Tensor col = Tensor::uninit({d.K, d.Lo});
#pragma omp for schedule(static)
      for (index_t n = 0; n < d.N; ++n) {
        im2col(x.value().data() + n * d.Cin * d.H * d.W, d, col.data(), d.Lo);
        MatMap om(out.data() + n * d.Cout * d.Lo, d.Cout, d.Lo);
        om.noalias() = w.value().mat(d.Cout, d.K) * col.mat(d.K, d.Lo);
        om.colwise() += b.value().vec();
      }
    }
  }

  auto xn = x.node(), wn = w.node(), bn = b.node();
  return make_op(out, {xn, wn, bn}, [xn, wn, bn, d, tap_path, gemm_path](Node& self) {
    const index_t xs = d.Cin * d.H * d.W;
    const index_t ys = d.Cout * d.Lo;
    // weight gradients accumulate into a fixed number of slots (samples are
    // partitioned by index, not by thread), then reduce in slot order; the
    // result is identical for any thread count up to the slot count
    const index_t slots = std::min<index_t>(4, d.N);
    const index_t per_slot = (d.N + slots - 1) / slots;
    Tensor dw_slots;
    if (wn->requires_grad) dw_slots = Tensor({slots, d.Cout, d.K});
    Scalar* xgrad = xn->requires_grad ? xn->ensure_grad().data() : nullptr;

    if (tap_path) {
      PadDims p = pad_dims(d);
#pragma omp parallel
      {
        Tensor xp = Tensor::uninit({d.Cin, p.Lp});
        Tensor gyp = Tensor::uninit({d.Cout, p.Lp});
        Tensor gxp = Tensor::uninit({d.Cin, p.Lp});
        MatrixRM wk(d.Cout, d.Cin), gwk(d.Cout, d.Cin);
#pragma omp for schedule(static)
        for (index_t slot = 0; slot < slots; ++slot)
        for (index_t n = slot * per_slot; n < std::min(d.N, (slot + 1) * per_slot); ++n) {
          // pad both x and dy once per sample
          copy_into_padded(xn->value.data() + n * xs, d, xp.data());
          {
            ConvDims dy_dims = d;
            dy_dims.Cin = d.Cout;
            copy_into_padded(self.grad.data() + n * ys, dy_dims, gyp.data());
          }
          if (xgrad) gxp.fill(0);
          for (index_t ki = 0; ki < 3; ++ki)
            for (index_t kj = 0; kj < 3; ++kj) {
              index_t shift = (ki - 1) * p.Wp + (kj - 1);
              index_t start_out = std::max<index_t>(0, -shift);
              index_t start_in = start_out + shift;
              index_t len = p.Lp - std::abs(shift);
              if (wn->requires_grad) {
                // dWk = dy (padded, zeros at the border) x shifted input^T
                Eigen::Map<const MatrixRM, 0, Eigen::OuterStride<>> xv(
                    xp.data() + start_in, d.Cin, len, Eigen::OuterStride<>(p.Lp));
                Eigen::Map<const MatrixRM, 0, Eigen::OuterStride<>> gyv(
                    gyp.data() + start_out, d.Cout, len, Eigen::OuterStride<>(p.Lp));
                gwk.noalias() = gyv * xv.transpose();
                Scalar* dst = dw_slots.data() + slot * d.Cout * d.K;
                for (index_t co = 0; co < d.Cout; ++co)
                  for (index_t ci = 0; ci < d.Cin; ++ci)
                    dst[(co * d.Cin + ci) * 9 + ki * 3 + kj] += gwk(co, ci);
              }
              if (xgrad) {
                // dx[p] += Wk^T dy[p - shift]  (correlation with flipped offset)
                for (index_t co = 0; co < d.Cout; ++co)
                  for (index_t ci = 0; ci < d.Cin; ++ci)
                    wk(co, ci) = wn->value.data()[((co * d.Cin + ci) * 3 + ki) * 3 + kj];
                Eigen::Map<const MatrixRM, 0, Eigen::OuterStride<>> gyv(
                    gyp.data() + start_out, d.Cout, len, Eigen::OuterStride<>(p.Lp));
                Eigen::Map<MatrixRM, 0, Eigen::OuterStride<>> gx(
                    gxp.data() + start_in, d.Cin, len, Eigen::OuterStride<>(p.Lp));
                gx.noalias() += wk.transpose() * gyv;
              }
            }
          if (xgrad) {
            // add interior back into dx
            for (index_t c = 0; c < d.Cin; ++c)
              for (index_t h = 0; h < d.H; ++h) {
                Scalar* dst = xgrad + n * xs + (c * d.H + h) * d.W;
                const Scalar* src = gxp.data() + c * p.Lp + (h + 1) * p.Wp + 1;
                VecMap(dst, d.W) += ConstVecMap(src, d.W);
              }
          }
        }
      }
    } else {
      // when spatial maps are small the per-sample weight GEMMs are
      // memory-bound; one wide GEMM over the whole batch writes dW once
      const bool batched_dw = wn->requires_grad && d.N * d.Lo <= 4096;
      if (batched_dw) {
        Tensor colall = Tensor::uninit({d.K, d.N * d.Lo});
        Tensor gyall = Tensor::uninit({d.Cout, d.N * d.Lo});
        const index_t cols = d.N * d.Lo;
#pragma omp parallel for schedule(static)
        for (index_t n = 0; n < d.N; ++n) {
          if (gemm_path) {
            for (index_t ci = 0; ci < d.Cin; ++ci)
              std::memcpy(colall.data() + ci * cols + n * d.Lo,
                          xn->value.data() + n * xs + ci * d.Lo,
                          sizeof(Scalar) * static_cast<size_t>(d.Lo));
          } else {
            im2col(xn->value.data() + n * xs, d, colall.data() + n * d.Lo, cols);
          }
          for (index_t co = 0; co < d.Cout; ++co)
            std::memcpy(gyall.data() + co * cols + n * d.Lo,
                        self.grad.data() + n * ys + co * d.Lo,
                        sizeof(Scalar) * static_cast<size_t>(d.Lo));
        }
        MatMap(dw_slots.data(), d.Cout, d.K).noalias() +=
            gyall.mat(d.Cout, cols) * colall.mat(d.K, cols).transpose();
      }
#pragma omp parallel
      {
        Tensor col = Tensor::uninit({d.K, d.Lo});
        Tensor colgrad = Tensor::uninit({d.K, d.Lo});
#pragma omp for schedule(static)
        for (index_t slot = 0; slot < slots; ++slot)
        for (index_t n = slot * per_slot; n < std::min(d.N, (slot + 1) * per_slot); ++n) {
          ConstMatMap gy(self.grad.data() + n * ys, d.Cout, d.Lo);
          if (wn->requires_grad && !batched_dw) {
            MatMap dwn(dw_slots.data() + slot * d.Cout * d.K, d.Cout, d.K);
            if (gemm_path) {
              ConstMatMap xv(xn->value.data() + n * xs, d.Cin, d.Lo);
              dwn.noalias() += gy * xv.transpose();
            } else {
              im2col(xn->value.data() + n * xs, d, col.data(), d.Lo);
              dwn.noalias() += gy * col.mat(d.K, d.Lo).transpose();
            }
          }
          if (xgrad) {
            if (gemm_path) {
              MatMap gx(xgrad + n * xs, d.Cin, d.Lo);
              gx.noalias() += wn->value.mat(d.Cout, d.Cin).transpose() * gy;
            } else {
              colgrad.mat(d.K, d.Lo).noalias() =
                  wn->value.mat(d.Cout, d.K).transpose() * gy;
              col2im_add(colgrad.data(), d, xgrad + n * xs);
            }
          }
        }
      }
    }

    if (wn->requires_grad) {
      auto gw = wn->ensure_grad().mat(d.Cout, d.K);
      for (index_t s = 0; s < slots; ++s)
        gw += ConstMatMap(dw_slots.data() + s * d.Cout * d.K, d.Cout, d.K);
    }
    if (bn->requires_grad) {
      auto gb = bn->ensure_grad().vec();
      for (index_t n = 0; n < d.N; ++n)
        gb += ConstMatMap(self.grad.data() + n * ys, d.Cout, d.Lo).rowwise().sum();
    }
  });
}

}  // namespace vqat2i::ag
