#ifndef UNICL_LOSS_HPP_
#define UNICL_LOSS_HPP_

#include <vector>

#include "unicl/matrix.hpp"
#include "unicl/targets.hpp"

namespace unicl {

/// Hard ceiling on the similarity multiplier exp(tau). Beyond it the
/// scale is held flat (zero gradient region).
inline constexpr double kMaxLogitScale = 100.0;

/// exp(tau) clamped to kMaxLogitScale.
double logit_scale(double tau);

/// Bidirectional contrastive loss value. The similarity matrix has
/// image rows and text columns; `t2i` anchors each image and softmaxes
/// over texts, `i2t` anchors each text and softmaxes over images.
struct LossOutput {
  double total = 0.0;  // (i2t + t2i) / 2
  double i2t = 0.0;
  double t2i = 0.0;
  Matrix logits;  // |B|×|B| scaled similarities, retained for backprop
};

/// Soft-target cross entropy: row-wise stabilized softmax, per-row loss
/// normalized by the target row sum, mean over rows. Throws if a target
/// row is all zeros.
double soft_ce(const Matrix& logits, const Matrix& targets);

/// Scaled similarity matrix: logits[i][j] = logit_scale(tau)·U_i·V_j,
/// plus column_bias[j] when provided (linear-embedding text mode).
Matrix scaled_similarity(const Matrix& u, const Matrix& v, double tau,
                         const std::vector<double>& column_bias = {});

/// The unified objective: label-derived targets via target_modify, both
/// soft cross-entropy directions over the scaled similarities.
LossOutput unicl_loss(const Matrix& u, const Matrix& v, const std::vector<int>& labels,
                      double tau, const std::vector<double>& column_bias = {});

/// Special case with all-distinct labels (identity targets). Shares the
/// unicl_loss floating-point path exactly.
LossOutput clip_loss(const Matrix& u, const Matrix& v, double tau);

/// Ground-truth double-loop transcription of the two contrastive sums
/// with explicit positive sets. Deliberately naive; no shared code with
/// the vectorized path.
double unicl_oracle(const Matrix& u, const Matrix& v, const std::vector<int>& labels,
                    double tau, const std::vector<double>& column_bias = {});

/// Standard softmax cross-entropy over class logits (|B|×K, bias already
/// applied), labels in 1..K, mean over the batch.
double ce_loss(const Matrix& class_logits, const std::vector<int>& labels);

/// Supervised contrastive loss over two views per item (L_out variant:
/// per-anchor mean of -log softmax terms, normalization outside the log).
/// Labels must be >= 1.
double supcon_loss(const Matrix& u, const Matrix& u_prime, const std::vector<int>& labels,
                   double tau);

/// Baseline that isolates the two sources: cross entropy on the labelled
/// sub-batch, CLIP on the captioned sub-batch, weighted by sub-batch
/// fractions. Empty sub-batches contribute zero.
double multitask_loss(const Matrix& u, const Matrix& v, const std::vector<int>& labels,
                      const Matrix& class_logits, double tau);

}  // namespace unicl

#endif  // UNICL_LOSS_HPP_
