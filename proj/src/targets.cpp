#include "unicl/targets.hpp"

#include <algorithm>
#include <stdexcept>

namespace unicl {

std::vector<int> reassign_caption_labels(const std::vector<int>& labels) {
  if (labels.empty()) throw std::invalid_argument("target_modify: empty batch");
  int cls_m = 0;
  for (int y : labels) {
    if (y < 0) throw std::invalid_argument("target_modify: negative label");
    cls_m = std::max(cls_m, y);
  }
  std::vector<int> out = labels;
  int next = cls_m + 1;
  for (int& y : out)
    if (y == 0) y = next++;
  return out;
}

TargetMatrix target_modify(const std::vector<int>& labels) {
  const std::vector<int> y = reassign_caption_labels(labels);
  const int n = static_cast<int>(y.size());
  TargetMatrix t;
  t.size = n;
  t.entries = Matrix(n, n);
  t.row_pos_counts.assign(n, 0);
  t.col_pos_counts.assign(n, 0);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (y[i] == y[j]) {
        t.entries(i, j) = 1.0;
        ++t.row_pos_counts[i];
        ++t.col_pos_counts[j];
      }
    }
  }
  return t;
}

std::vector<std::vector<int>> positive_sets(const std::vector<int>& labels) {
  const int n = static_cast<int>(labels.size());
  std::vector<std::vector<int>> sets(n);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n; ++k)
      if (labels[k] == labels[i]) sets[i].push_back(k);
  return sets;
}

}  // namespace unicl
