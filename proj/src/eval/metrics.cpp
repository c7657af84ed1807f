#include "vqat2i/eval/metrics.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <stdexcept>

namespace vqat2i::eval {

std::pair<Scalar, Scalar> inception_score(const Tensor& class_probs, index_t splits) {
  if (class_probs.rank() != 2) throw std::invalid_argument("inception_score: need [n, C]");
  index_t n = class_probs.dim(0), C = class_probs.dim(1);
  if (n < 1 || splits < 1 || splits > n)
    throw std::invalid_argument("inception_score: bad split count");
  for (index_t i = 0; i < n; ++i) {
    Scalar sum = 0;
    for (index_t c = 0; c < C; ++c) {
      Scalar p = class_probs.at(i, c);
      if (p < -1e-12 || !std::isfinite(p))
        throw std::invalid_argument("inception_score: invalid distribution row");
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6)
      throw std::invalid_argument("inception_score: row does not sum to 1");
  }

  // contiguous near-equal splits; the first n % splits get one extra row
  std::vector<Scalar> scores;
  index_t base = n / splits, extra = n % splits, row = 0;
  for (index_t s = 0; s < splits; ++s) {
    index_t count = base + (s < extra ? 1 : 0);
    std::vector<Scalar> marginal(static_cast<size_t>(C), 0.0);
    for (index_t i = row; i < row + count; ++i)
      for (index_t c = 0; c < C; ++c) marginal[static_cast<size_t>(c)] += class_probs.at(i, c);
    for (auto& m : marginal) m /= static_cast<Scalar>(count);

    Scalar mean_kl = 0;
    for (index_t i = row; i < row + count; ++i) {
      Scalar kl = 0;
      for (index_t c = 0; c < C; ++c) {
        Scalar p = class_probs.at(i, c);
        if (p > 0) kl += p * (std::log(p) - std::log(marginal[static_cast<size_t>(c)]));
      }
      mean_kl += kl;
    }
    scores.push_back(std::exp(mean_kl / static_cast<Scalar>(count)));
    row += count;
  }

  Scalar mean = 0;
  for (Scalar s : scores) mean += s;
  mean /= static_cast<Scalar>(splits);
  Scalar var = 0;
  for (Scalar s : scores) var += (s - mean) * (s - mean);
  var /= static_cast<Scalar>(splits);  // population std across splits
  return {mean, std::sqrt(var)};
}

ActivationSet ActivationSet::from(const Tensor& activations) {
  if (activations.rank() != 2) throw std::invalid_argument("ActivationSet: need [n, d]");
  index_t n = activations.dim(0), d = activations.dim(1);
  if (n < 2) throw std::invalid_argument("ActivationSet: need at least 2 samples");
  ActivationSet out;
  out.activations = activations;
  out.mean = Tensor({d});
  auto acts = activations.mat(n, d);
  out.mean.vec() = acts.colwise().mean().transpose();
  out.cov = Tensor({d, d});
  MatrixRM centered = acts.rowwise() - out.mean.vec().transpose();
  out.cov.mat(d, d) = centered.transpose() * centered / static_cast<Scalar>(n - 1);
  return out;
}

namespace {

// symmetric PSD square root; eigenvalues below zero are clamped (tolerated
// down to -1e-8, anything lower still clamps)
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (m + m.transpose()));
  Eigen::VectorXd vals = eig.eigenvalues();
  for (Eigen::Index i = 0; i < vals.size(); ++i) vals[i] = vals[i] > 0 ? std::sqrt(vals[i]) : 0.0;
  return eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
}

}  // namespace

Scalar fid(const ActivationSet& real, const ActivationSet& fake) {
  index_t d = real.mean.size();
  if (fake.mean.size() != d) throw std::invalid_argument("fid: feature dim mismatch");

  Eigen::VectorXd mu_diff = real.mean.vec() - fake.mean.vec();
  Eigen::MatrixXd cr = real.cov.mat(d, d);
  Eigen::MatrixXd cf = fake.cov.mat(d, d);

  // tr((Cr Cf)^{1/2}) through the symmetric form sqrt(Cr)^T Cf sqrt(Cr)
  Eigen::MatrixXd sr = psd_sqrt(cr);
  Eigen::MatrixXd inner = sr * cf * sr;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(0.5 * (inner + inner.transpose()));
  Scalar tr_sqrt = 0;
  for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i) {
    Scalar v = eig.eigenvalues()[i];
    tr_sqrt += v > 0 ? std::sqrt(v) : 0.0;  // clamp, tolerance -1e-8
  }
  return mu_diff.squaredNorm() + cr.trace() + cf.trace() - 2.0 * tr_sqrt;
}

Scalar r_precision(const Tensor& image_features, const Tensor& caption_embeddings,
                   const std::vector<index_t>& true_caption,
                   const std::vector<index_t>& caption_group, index_t distractor_count,
                   std::uint64_t seed) {
  index_t n = image_features.dim(0), d = image_features.dim(1);
  index_t m = caption_embeddings.dim(0);
  if (caption_embeddings.dim(1) != d) throw std::invalid_argument("r_precision: dim mismatch");
  if (static_cast<index_t>(true_caption.size()) != n ||
      static_cast<index_t>(caption_group.size()) != m)
    throw std::invalid_argument("r_precision: index sizes mismatch");

  auto cosine = [&](index_t img, index_t cap) {
    Scalar dot = 0, ni = 0, nc = 0;
    for (index_t k = 0; k < d; ++k) {
      Scalar a = image_features.at(img, k), b = caption_embeddings.at(cap, k);
      dot += a * b;
      ni += a * a;
      nc += b * b;
    }
    return dot / (std::sqrt(ni + 1e-12) * std::sqrt(nc + 1e-12));
  };

  Scalar hits = 0;
  for (index_t i = 0; i < n; ++i) {
    index_t truth = true_caption[static_cast<size_t>(i)];
    index_t truth_group = caption_group[static_cast<size_t>(truth)];
    // candidate distractors: different text group
    std::vector<index_t> pool;
    for (index_t c = 0; c < m; ++c)
      if (caption_group[static_cast<size_t>(c)] != truth_group) pool.push_back(c);
    if (static_cast<index_t>(pool.size()) < distractor_count)
      throw std::invalid_argument("r_precision: caption pool too small for " +
                                  std::to_string(distractor_count) + " distractors");
    Rng rng(Rng::derive(seed, "rprec", static_cast<std::uint64_t>(i)));
    // partial Fisher-Yates: first `distractor_count` entries
    for (index_t k = 0; k < distractor_count; ++k) {
      index_t j = k + rng.uniform_int(static_cast<index_t>(pool.size()) - k);
      std::swap(pool[static_cast<size_t>(k)], pool[static_cast<size_t>(j)]);
    }
    Scalar true_sim = cosine(i, truth);
    bool top = true;
    for (index_t k = 0; k < distractor_count && top; ++k)
      top = true_sim > cosine(i, pool[static_cast<size_t>(k)]);
    if (top) hits += 1;
  }
  return hits / static_cast<Scalar>(n);
}

}  // namespace vqat2i::eval
