#pragma once

// Loss terms of the training objective. All reductions are per-element
// means, which keeps the relative weights resolution-independent; every
// log is floored at kProbFloor. Discriminator objectives are written as
// minimizations (the negated adversarial value); the generator side defaults
// to the non-saturating form with the literal saturating form available for
// fidelity runs.

#include "dalace/ops.hpp"

namespace dalace::objectives {

inline constexpr double kProbFloor = 1e-7;

struct LossWeights {
  double alpha = 2.5;
  double beta = 0.01;
  // Negative means "derive from the epoch budget" (the trainer keeps the
  // 600/2600 warmup ratio).
  int pair_warmup_epochs = -1;

  void validate() const {
    require(alpha > 0.0, ErrorCode::InvalidConfig, "alpha must be > 0");
    require(beta >= 0.0, ErrorCode::InvalidConfig, "beta must be >= 0");
  }
};

struct LossBreakdown {
  double l_img = 0.0;
  double l_latent = 0.0;
  double l_recon = 0.0;
  double l_adv_cross = 0.0;  // discriminator-side value of the DAM objective
  double l_ce = 0.0;
  double l_adv_pair = 0.0;  // discriminator-side value of the APM objective
  // Generator-side companions, logged alongside the canonical six.
  double l_adv_cross_gen = 0.0;
  double l_adv_pair_gen = 0.0;
};

// Sum over the two domains of the per-element-mean L1 self-reconstruction
// errors.
template <typename T>
VarPtr<T> image_recon_loss(const VarPtr<T>& x_src, const VarPtr<T>& x_tgt,
                           const VarPtr<T>& recon_src, const VarPtr<T>& recon_tgt) {
  check_same_shape(x_src->val, recon_src->val, "image_recon_loss src");
  check_same_shape(x_tgt->val, recon_tgt->val, "image_recon_loss tgt");
  return weighted_sum<T>({{T(1), l1_mean(recon_src, x_src)}, {T(1), l1_mean(recon_tgt, x_tgt)}});
}

// The four cross-reconstruction code consistency terms: re-encoded codes of
// the transferred images against the codes that generated them.
template <typename T>
VarPtr<T> latent_recon_loss(const VarPtr<T>& a_src, const VarPtr<T>& m_src,
                            const VarPtr<T>& a_tgt, const VarPtr<T>& m_tgt,
                            const VarPtr<T>& re_a_src, const VarPtr<T>& re_m_src,
                            const VarPtr<T>& re_a_tgt, const VarPtr<T>& re_m_tgt) {
  return weighted_sum<T>({{T(1), l1_mean(re_a_src, a_src)},
                          {T(1), l1_mean(re_m_src, m_src)},
                          {T(1), l1_mean(re_a_tgt, a_tgt)},
                          {T(1), l1_mean(re_m_tgt, m_tgt)}});
}

template <typename T>
VarPtr<T> recon_loss(const LossWeights& w, const VarPtr<T>& l_img, const VarPtr<T>& l_latent) {
  w.validate();
  return weighted_sum<T>({{T(w.alpha), l_img}, {T(w.beta), l_latent}});
}

template <typename T>
struct AdvPair {
  VarPtr<T> disc;
  VarPtr<T> gen;
};

// Cross-domain adversarial objective, both transfer directions. The
// discriminator minimizes -[log D(real) + log(1-D(fake))]; the generator
// fools it with -log D(fake) (or the literal log(1-D(fake)) when asked).
template <typename T>
AdvPair<T> domain_adv_loss(const VarPtr<T>& d_real_tgt, const VarPtr<T>& d_fake_tgt,
                           const VarPtr<T>& d_real_src, const VarPtr<T>& d_fake_src,
                           bool saturating = false) {
  const T eps = T(kProbFloor);
  AdvPair<T> out;
  out.disc = weighted_sum<T>({{T(1), neg_log_mean(d_real_tgt, eps)},
                              {T(1), neg_log1m_mean(d_fake_tgt, eps)},
                              {T(1), neg_log_mean(d_real_src, eps)},
                              {T(1), neg_log1m_mean(d_fake_src, eps)}});
  if (saturating) {
    out.gen = weighted_sum<T>(
        {{T(1), log1m_mean(d_fake_tgt, eps)}, {T(1), log1m_mean(d_fake_src, eps)}});
  } else {
    out.gen = weighted_sum<T>(
        {{T(1), neg_log_mean(d_fake_tgt, eps)}, {T(1), neg_log_mean(d_fake_src, eps)}});
  }
  return out;
}

// Pixel-wise cross entropy between predicted probabilities and the ground
// truth mask.
template <typename T>
VarPtr<T> ce_loss(const VarPtr<T>& mask_probs, const Tensor<uint8_t>& truth_mask) {
  return ce_mean(mask_probs, truth_mask, T(kProbFloor));
}

// Conditional pair objective: source-side (image, mask) pairs are "real",
// target-side pairs "fake". The generator side is non-saturating on the
// target-side pair only; the trainer routes those gradients to the
// target-side anatomy encoder and generator.
template <typename T>
AdvPair<T> pair_adv_loss(const VarPtr<T>& d_pair_src_side, const VarPtr<T>& d_pair_tgt_side,
                         bool saturating = false) {
  const T eps = T(kProbFloor);
  AdvPair<T> out;
  out.disc = weighted_sum<T>({{T(1), neg_log_mean(d_pair_src_side, eps)},
                              {T(1), neg_log1m_mean(d_pair_tgt_side, eps)}});
  out.gen = saturating ? log1m_mean(d_pair_tgt_side, eps)
                       : neg_log_mean(d_pair_tgt_side, eps);
  return out;
}

}  // namespace dalace::objectives
