#ifndef UNICL_GRADIENTS_HPP_
#define UNICL_GRADIENTS_HPP_

#include <string>
#include <vector>

#include "unicl/datamodel.hpp"
#include "unicl/encoders.hpp"
#include "unicl/loss.hpp"
#include "unicl/matrix.hpp"

namespace unicl {

enum class LossMode { Unicl, Clip, Ce, Supcon, Multitask };

std::string loss_mode_name(LossMode mode);
LossMode parse_loss_mode(const std::string& name);

/// One training batch in matrix form.
struct Batch {
  Matrix features;                       // |B|×F
  std::vector<std::vector<int>> tokens;  // per-item token sequences
  std::vector<int> labels;               // raw labels (0 = caption)
  std::vector<Source> sources;

  int size() const { return features.rows(); }
};

Batch make_batch(const Dataset& dataset, const std::vector<int>& indices);

/// Gradient blocks mirroring ModelParams shapes. Blocks absent from the
/// model stay empty.
struct GradientSet {
  Matrix visual_w1, visual_b1, visual_w2, visual_b2;
  Matrix text_embed, text_proj;
  Matrix linear_w, linear_b;
  double tau = 0.0;

  static GradientSet zeros_like(const ModelParams& params);
  bool all_finite() const;
};

/// Named view over the matrix blocks of a parameter set and (optionally)
/// a matching gradient set; shared by the finite-difference checker and
/// the optimizers.
struct BlockRef {
  std::string name;
  Matrix* param = nullptr;
  Matrix* grad = nullptr;
};
std::vector<BlockRef> trainable_blocks(ModelParams& params, GradientSet* grads = nullptr);

struct BackwardResult {
  double loss = 0.0;
  double i2t = 0.0;  // only set for unicl/clip
  double t2i = 0.0;
  double scale = 0.0;  // exp(tau) after clamping, as used in the forward
  GradientSet grads;
};

/// Loss value of the Algorithm-1 style forward pass for the given mode.
double forward_loss(const ModelParams& params, const Batch& batch, LossMode mode);

/// Forward plus exact analytic gradients of forward_loss with respect to
/// every trainable block and tau.
BackwardResult backward(const ModelParams& params, const Batch& batch, LossMode mode);

struct FiniteDiffReport {
  struct BlockError {
    std::string name;
    double max_rel_err = 0.0;
  };
  std::vector<BlockError> blocks;
  double max_rel_err = 0.0;
};

/// Central differences over a deterministic subsample of at least 200
/// coordinates per block (all of them for small blocks), plus tau.
/// Relative error: |analytic - numeric| / max(1, |analytic|, |numeric|).
FiniteDiffReport finite_diff_check(const ModelParams& params, const Batch& batch, LossMode mode,
                                   double eps = 1e-4);

}  // namespace unicl

#endif  // UNICL_GRADIENTS_HPP_
