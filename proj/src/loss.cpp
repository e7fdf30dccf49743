#include "unicl/loss.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace unicl {

double logit_scale(double tau) { return std::min(std::exp(tau), kMaxLogitScale); }

double soft_ce(const Matrix& logits, const Matrix& targets) {
  if (!logits.same_shape(targets)) throw std::invalid_argument("soft_ce: shape mismatch");
  if (logits.rows() == 0) throw std::invalid_argument("soft_ce: empty batch");
  const int n = logits.cols();
  double total = 0.0;
  for (int i = 0; i < logits.rows(); ++i) {
    const double* l = logits.row(i);
    const double* t = targets.row(i);
    double m = l[0];
    for (int j = 1; j < n; ++j) m = std::max(m, l[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(l[j] - m);
    const double log_z = std::log(z);
    double row_loss = 0.0;
    double t_sum = 0.0;
    for (int j = 0; j < n; ++j) {
      if (t[j] != 0.0) {
        row_loss -= t[j] * (l[j] - m - log_z);
        t_sum += t[j];
      }
    }
    if (t_sum <= 0.0) throw std::invalid_argument("soft_ce: target row sums to zero");
    total += row_loss / t_sum;
  }
  return total / logits.rows();
}

Matrix scaled_similarity(const Matrix& u, const Matrix& v, double tau,
                         const std::vector<double>& column_bias) {
  if (u.cols() != v.cols()) throw std::invalid_argument("similarity: embedding widths differ");
  if (!column_bias.empty() && static_cast<int>(column_bias.size()) != v.rows())
    throw std::invalid_argument("similarity: column bias length mismatch");
  const double scale = logit_scale(tau);
  Matrix logits(u.rows(), v.rows());
  for (int i = 0; i < u.rows(); ++i)
    for (int j = 0; j < v.rows(); ++j) {
      double s = scale * dot(u.row(i), v.row(j), u.cols());
      if (!column_bias.empty()) s += column_bias[j];
      logits(i, j) = s;
    }
  return logits;
}

LossOutput unicl_loss(const Matrix& u, const Matrix& v, const std::vector<int>& labels,
                      double tau, const std::vector<double>& column_bias) {
  if (u.rows() == 0) throw std::invalid_argument("unicl_loss: empty batch");
  if (u.rows() != v.rows() || u.rows() != static_cast<int>(labels.size()))
    throw std::invalid_argument("unicl_loss: batch size mismatch");
  const TargetMatrix target = target_modify(labels);
  LossOutput out;
  out.logits = scaled_similarity(u, v, tau, column_bias);
  out.t2i = soft_ce(out.logits, target.entries);
  out.i2t = soft_ce(transpose(out.logits), transpose(target.entries));
  out.total = (out.i2t + out.t2i) / 2.0;
  return out;
}

LossOutput clip_loss(const Matrix& u, const Matrix& v, double tau) {
  std::vector<int> labels(u.rows());
  std::iota(labels.begin(), labels.end(), 1);
  return unicl_loss(u, v, labels, tau);
}

double unicl_oracle(const Matrix& u, const Matrix& v, const std::vector<int>& labels,
                    double tau, const std::vector<double>& column_bias) {
  if (u.rows() == 0) throw std::invalid_argument("unicl_oracle: empty batch");
  const int n = u.rows();
  const double scale = logit_scale(tau);
  const std::vector<int> y = reassign_caption_labels(labels);
  const std::vector<std::vector<int>> pos = positive_sets(y);
  auto s = [&](int i, int j) {
    double val = scale * dot(u.row(i), v.row(j), u.cols());
    if (!column_bias.empty()) val += column_bias[j];
    return val;
  };
  // Image anchors: for image i, softmax over the batch texts.
  double t2i = 0.0;
  for (int i = 0; i < n; ++i) {
    double denom = 0.0;
    for (int j = 0; j < n; ++j) denom += std::exp(s(i, j));
    double acc = 0.0;
    for (int k : pos[i]) acc += std::log(std::exp(s(i, k)) / denom);
    t2i += -acc / static_cast<double>(pos[i].size());
  }
  t2i /= n;
  // Text anchors: for text j, softmax over the batch images.
  double i2t = 0.0;
  for (int j = 0; j < n; ++j) {
    double denom = 0.0;
    for (int i = 0; i < n; ++i) denom += std::exp(s(i, j));
    double acc = 0.0;
    for (int k : pos[j]) acc += std::log(std::exp(s(k, j)) / denom);
    i2t += -acc / static_cast<double>(pos[j].size());
  }
  i2t /= n;
  return (i2t + t2i) / 2.0;
}

double ce_loss(const Matrix& class_logits, const std::vector<int>& labels) {
  const int b = class_logits.rows();
  const int k = class_logits.cols();
  if (b == 0) throw std::invalid_argument("ce_loss: empty batch");
  if (b != static_cast<int>(labels.size()))
    throw std::invalid_argument("ce_loss: label count mismatch");
  double total = 0.0;
  for (int i = 0; i < b; ++i) {
    const int y = labels[i];
    if (y < 1 || y > k) throw std::invalid_argument("ce_loss: label out of range");
    const double* l = class_logits.row(i);
    double m = l[0];
    for (int j = 1; j < k; ++j) m = std::max(m, l[j]);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(l[j] - m);
    total += -(l[y - 1] - m - std::log(z));
  }
  return total / b;
}

double supcon_loss(const Matrix& u, const Matrix& u_prime, const std::vector<int>& labels,
                   double tau) {
  const int b = u.rows();
  if (b == 0) throw std::invalid_argument("supcon_loss: empty batch");
  if (!u.same_shape(u_prime) || b != static_cast<int>(labels.size()))
    throw std::invalid_argument("supcon_loss: shape mismatch");
  for (int y : labels)
    if (y < 1) throw std::invalid_argument("supcon_loss: labels must be >= 1");

  const int n = 2 * b;  // stacked views [u; u_prime]
  const double scale = logit_scale(tau);
  auto view = [&](int a) { return a < b ? u.row(a) : u_prime.row(a - b); };
  auto label_of = [&](int a) { return labels[a < b ? a : a - b]; };

  double total = 0.0;
  for (int a = 0; a < n; ++a) {
    // Stabilized log-sum-exp over all non-self candidates.
    double m = -std::numeric_limits<double>::infinity();
    std::vector<double> logits(n, 0.0);
    for (int c = 0; c < n; ++c) {
      if (c == a) continue;
      logits[c] = scale * dot(view(a), view(c), u.cols());
      m = std::max(m, logits[c]);
    }
    double z = 0.0;
    for (int c = 0; c < n; ++c)
      if (c != a) z += std::exp(logits[c] - m);
    const double lse = m + std::log(z);

    double acc = 0.0;
    int n_pos = 0;
    for (int p = 0; p < n; ++p) {
      if (p == a || label_of(p) != label_of(a)) continue;
      acc += logits[p] - lse;
      ++n_pos;
    }
    if (n_pos == 0)
      throw std::invalid_argument("supcon_loss: anchor without any positive view");
    total += -acc / n_pos;
  }
  return total / n;
}

double multitask_loss(const Matrix& u, const Matrix& v, const std::vector<int>& labels,
                      const Matrix& class_logits, double tau) {
  const int b = u.rows();
  if (b == 0) throw std::invalid_argument("multitask_loss: empty batch");
  if (b != static_cast<int>(labels.size()))
    throw std::invalid_argument("multitask_loss: label count mismatch");
  std::vector<int> lab_idx, cap_idx;
  for (int i = 0; i < b; ++i) (labels[i] > 0 ? lab_idx : cap_idx).push_back(i);

  double loss = 0.0;
  if (!lab_idx.empty()) {
    Matrix sub_logits(static_cast<int>(lab_idx.size()), class_logits.cols());
    std::vector<int> sub_labels;
    for (int r = 0; r < sub_logits.rows(); ++r) {
      const double* src = class_logits.row(lab_idx[r]);
      std::copy(src, src + class_logits.cols(), sub_logits.row(r));
      sub_labels.push_back(labels[lab_idx[r]]);
    }
    loss += (static_cast<double>(lab_idx.size()) / b) * ce_loss(sub_logits, sub_labels);
  }
  if (!cap_idx.empty()) {
    Matrix u_cap(static_cast<int>(cap_idx.size()), u.cols());
    Matrix v_cap(static_cast<int>(cap_idx.size()), v.cols());
    for (int r = 0; r < u_cap.rows(); ++r) {
      std::copy(u.row(cap_idx[r]), u.row(cap_idx[r]) + u.cols(), u_cap.row(r));
      std::copy(v.row(cap_idx[r]), v.row(cap_idx[r]) + v.cols(), v_cap.row(r));
    }
    loss += (static_cast<double>(cap_idx.size()) / b) * clip_loss(u_cap, v_cap, tau).total;
  }
  return loss;
}

}  // namespace unicl
