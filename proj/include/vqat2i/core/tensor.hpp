#pragma once

#include <Eigen/Core>
#include <Eigen/StdVector>

#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace vqat2i {

using Scalar = double;
using index_t = std::int64_t;

// Tensor buffers are 64-byte aligned so Eigen's vectorized kernels always see
// the same alignment phase; reductions then sum in the same order every run.
// Element construction is a no-op: Tensor's constructors decide whether to
// zero-fill, and op kernels that overwrite every element skip it.
template <typename T>
struct AlignedUninitAllocator {
  using value_type = T;
  AlignedUninitAllocator() = default;
  template <typename U>
  AlignedUninitAllocator(const AlignedUninitAllocator<U>&) {}
  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(64)));
  }
  void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(64)); }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    if constexpr (sizeof...(Args) > 0) ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
  template <typename U>
  void destroy(U*) {}
  bool operator==(const AlignedUninitAllocator&) const { return true; }
  bool operator!=(const AlignedUninitAllocator&) const { return false; }
};
using AlignedVec = std::vector<Scalar, AlignedUninitAllocator<Scalar>>;

using MatrixRM = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<MatrixRM>;
using ConstMatMap = Eigen::Map<const MatrixRM>;
using VecMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;
using ConstVecMap = Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>;

/// Dense row-major tensor of doubles. Copies are shallow (shared buffer);
/// use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<index_t> shape)
      : shape_(std::move(shape)), data_(std::make_shared<AlignedVec>(count(shape_))) {
    fill(0);
  }
  /// Allocation without zero-fill, for kernels that write every element.
  static Tensor uninit(std::vector<index_t> shape) {
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<AlignedVec>(count(t.shape_));
    return t;
  }
  Tensor(std::initializer_list<index_t> shape) : Tensor(std::vector<index_t>(shape)) {}

  static Tensor zeros(std::vector<index_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<index_t> shape, Scalar v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }
  static Tensor scalar(Scalar v) { return full({1}, v); }
  static Tensor from(std::vector<index_t> shape, const std::vector<Scalar>& values) {
    if (count(shape) != static_cast<index_t>(values.size()))
      throw std::invalid_argument("Tensor::from: size mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = std::make_shared<AlignedVec>(values.begin(), values.end());
    return t;
  }

  bool defined() const { return data_ != nullptr; }
  const std::vector<index_t>& shape() const { return shape_; }
  index_t rank() const { return static_cast<index_t>(shape_.size()); }
  index_t dim(index_t i) const { return shape_.at(static_cast<size_t>(i)); }
  index_t size() const { return data_ ? static_cast<index_t>(data_->size()) : 0; }

  Scalar* data() { return data_->data(); }
  const Scalar* data() const { return data_->data(); }

  Scalar& operator[](index_t i) { return (*data_)[static_cast<size_t>(i)]; }
  Scalar operator[](index_t i) const { return (*data_)[static_cast<size_t>(i)]; }

  Scalar& at(index_t i, index_t j) { return (*data_)[static_cast<size_t>(i * dim(1) + j)]; }
  Scalar at(index_t i, index_t j) const { return (*data_)[static_cast<size_t>(i * dim(1) + j)]; }
  Scalar& at4(index_t n, index_t c, index_t h, index_t w) {
    return (*data_)[static_cast<size_t>(((n * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }
  Scalar at4(index_t n, index_t c, index_t h, index_t w) const {
    return (*data_)[static_cast<size_t>(((n * dim(1) + c) * dim(2) + h) * dim(3) + w)];
  }

  void fill(Scalar v) { std::fill(data_->begin(), data_->end(), v); }
  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.data_ = std::make_shared<AlignedVec>(*data_);
    return t;
  }
  /// Shares the buffer under a new shape of equal element count.
  Tensor reshaped(std::vector<index_t> shape) const {
    if (count(shape) != size()) throw std::invalid_argument("reshape: size mismatch");
    Tensor t;
    t.shape_ = std::move(shape);
    t.data_ = data_;
    return t;
  }

  MatMap mat(index_t rows, index_t cols) {
    if (rows * cols != size()) throw std::invalid_argument("mat view: size mismatch");
    return MatMap(data(), rows, cols);
  }
  ConstMatMap mat(index_t rows, index_t cols) const {
    if (rows * cols != size()) throw std::invalid_argument("mat view: size mismatch");
    return ConstMatMap(data(), rows, cols);
  }
  VecMap vec() { return VecMap(data(), size()); }
  ConstVecMap vec() const { return ConstVecMap(data(), size()); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
  bool all_finite() const {
    for (Scalar v : *data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  static index_t count(const std::vector<index_t>& shape) {
    index_t n = 1;
    for (index_t d : shape) {
      if (d < 0) throw std::invalid_argument("negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<index_t> shape_;
  std::shared_ptr<AlignedVec> data_;
};

/// 2x area downscale of an NCHW tensor (plain data op, no tape).
Tensor downscale2x_area(const Tensor& x);
/// Repeated 2x downscale until the spatial size reaches `target`.
Tensor downscale_to(const Tensor& x, index_t target);

inline std::string shape_str(const std::vector<index_t>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

constexpr std::uint64_t kFnvBasis = 0xcbf29ce484222325ULL;

inline std::uint64_t fnv1a64(const void* bytes, size_t n, std::uint64_t h = kFnvBasis) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = kFnvBasis) {
  return fnv1a64(s.data(), s.size(), h);
}

/// Deterministic random stream. Avoids std distributions so that sampled
/// values depend only on the seed, not the standard library version.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

  /// Labeled sub-seed so one master seed drives independent streams.
  static std::uint64_t derive(std::uint64_t seed, std::string_view label, std::uint64_t a = 0,
                              std::uint64_t b = 0) {
    std::uint64_t h = fnv1a64(label);
    h = fnv1a64(&seed, sizeof(seed), h);
    h = fnv1a64(&a, sizeof(a), h);
    h = fnv1a64(&b, sizeof(b), h);
    return h ? h : 1;
  }

  std::uint64_t next_u64() {  // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  Scalar uniform() { return static_cast<Scalar>(next_u64() >> 11) * 0x1.0p-53; }
  Scalar uniform(Scalar lo, Scalar hi) { return lo + (hi - lo) * uniform(); }

  Scalar normal(Scalar mean = 0, Scalar stddev = 1) {
    // Box-Muller without caching, for stateless reproducibility.
    Scalar u1 = uniform(), u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    Scalar r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * M_PI * u2);
  }

  index_t uniform_int(index_t n) {  // in [0, n)
    return static_cast<index_t>(next_u64() % static_cast<std::uint64_t>(n));
  }

  void fill_normal(Tensor& t, Scalar mean = 0, Scalar stddev = 1) {
    for (index_t i = 0; i < t.size(); ++i) t[i] = normal(mean, stddev);
  }
  void fill_uniform(Tensor& t, Scalar lo, Scalar hi) {
    for (index_t i = 0; i < t.size(); ++i) t[i] = uniform(lo, hi);
  }

  std::vector<index_t> permutation(index_t n) {  // Fisher-Yates
    std::vector<index_t> p(static_cast<size_t>(n));
    for (index_t i = 0; i < n; ++i) p[static_cast<size_t>(i)] = i;
    for (index_t i = n - 1; i > 0; --i) {
      index_t j = uniform_int(i + 1);
      std::swap(p[static_cast<size_t>(i)], p[static_cast<size_t>(j)]);
    }
    return p;
  }

 private:
  std::uint64_t state_;
};

}  // namespace vqat2i
