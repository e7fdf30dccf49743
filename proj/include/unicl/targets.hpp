#ifndef UNICL_TARGETS_HPP_
#define UNICL_TARGETS_HPP_

#include <vector>

#include "unicl/matrix.hpp"

namespace unicl {

/// Per-batch positive/negative indicator matrix derived from labels.
/// Entries are stored as {0.0, 1.0} reals so the soft cross-entropy can
/// consume them directly.
struct TargetMatrix {
  int size = 0;
  Matrix entries;                   // |B|×|B|, symmetric, unit diagonal
  std::vector<int> row_pos_counts;  // |P(i)| per row
  std::vector<int> col_pos_counts;  // |P(j)| per column

  bool is_positive(int i, int j) const { return entries(i, j) != 0.0; }
};

/// Reassigns caption entries (label 0) to fresh unique labels
/// cls_m+1, cls_m+2, ... in batch order, where cls_m is the largest
/// positive label in the batch (0 if there is none). The input is not
/// mutated.
std::vector<int> reassign_caption_labels(const std::vector<int>& labels);

/// Builds the pairwise label-equality matrix of the reassigned labels.
/// Throws std::invalid_argument on an empty batch or a negative label.
TargetMatrix target_modify(const std::vector<int>& labels);

/// Explicit positive index sets P(i) = { k | labels[k] == labels[i] }.
/// Labels are taken literally; feed reassigned labels when the batch
/// contains captions.
std::vector<std::vector<int>> positive_sets(const std::vector<int>& labels);

}  // namespace unicl

#endif  // UNICL_TARGETS_HPP_
