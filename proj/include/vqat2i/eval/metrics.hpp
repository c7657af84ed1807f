#pragma once

#include "vqat2i/core/tensor.hpp"

#include <utility>
#include <vector>

namespace vqat2i::eval {

/// Inception-style score over per-sample class posteriors [n, C]:
/// per split exp(mean KL(row || split marginal)); returns (mean, std) across
/// splits. Rows must be valid distributions.
std::pair<Scalar, Scalar> inception_score(const Tensor& class_probs, index_t splits);

struct ActivationSet {
  Tensor activations;  // [n, d]
  Tensor mean;         // [d]
  Tensor cov;          // [d, d], symmetric PSD (eigenvalue tolerance -1e-8)
  static ActivationSet from(const Tensor& activations);
};

/// Fréchet distance between Gaussian fits:
/// |mu_r - mu_f|^2 + tr(C_r + C_f - 2 (C_r C_f)^{1/2}), matrix square roots by
/// symmetric eigendecomposition with negatives clamped to zero at -1e-8.
Scalar fid(const ActivationSet& real, const ActivationSet& fake);

/// Fraction of images whose true caption outranks `distractor_count` sampled
/// mismatched captions by cosine similarity. `caption_group` marks captions
/// with identical text (never sampled as distractors for their own group);
/// pass 0..m-1 when all captions are distinct.
Scalar r_precision(const Tensor& image_features, const Tensor& caption_embeddings,
                   const std::vector<index_t>& true_caption,
                   const std::vector<index_t>& caption_group, index_t distractor_count,
                   std::uint64_t seed);

}  // namespace vqat2i::eval
