#include "vqat2i/core/tensor.hpp"

#include <stdexcept>

namespace vqat2i {

Tensor downscale2x_area(const Tensor& x) {
  const auto& s = x.shape();
  if (s.size() != 4 || s[2] % 2 || s[3] % 2)
    throw std::invalid_argument("downscale2x_area: need NCHW with even spatial dims");
  index_t N = s[0], C = s[1], H = s[2], W = s[3];
  Tensor out({N, C, H / 2, W / 2});
  for (index_t nc = 0; nc < N * C; ++nc) {
    const Scalar* src = x.data() + nc * H * W;
    Scalar* dst = out.data() + nc * (H / 2) * (W / 2);
    for (index_t h = 0; h < H / 2; ++h)
      for (index_t w = 0; w < W / 2; ++w) {
        const Scalar* p = src + 2 * h * W + 2 * w;
        dst[h * (W / 2) + w] = 0.25 * (p[0] + p[1] + p[W] + p[W + 1]);
      }
  }
  return out;
}

Tensor downscale_to(const Tensor& x, index_t target) {
  Tensor cur = x;
  while (cur.dim(2) > target) cur = downscale2x_area(cur);
  if (cur.dim(2) != target)
    throw std::invalid_argument("downscale_to: target not reachable by halving");
  return cur;
}

}  // namespace vqat2i
