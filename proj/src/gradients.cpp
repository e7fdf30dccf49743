#include "unicl/gradients.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace unicl {

std::string loss_mode_name(LossMode mode) {
  switch (mode) {
    case LossMode::Unicl: return "unicl";
    case LossMode::Clip: return "clip";
    case LossMode::Ce: return "ce";
    case LossMode::Supcon: return "supcon";
    case LossMode::Multitask: return "multitask";
  }
  throw std::logic_error("loss_mode_name: bad enum");
}

LossMode parse_loss_mode(const std::string& name) {
  if (name == "unicl") return LossMode::Unicl;
  if (name == "clip") return LossMode::Clip;
  if (name == "ce") return LossMode::Ce;
  if (name == "supcon") return LossMode::Supcon;
  if (name == "multitask") return LossMode::Multitask;
  throw std::invalid_argument("unknown loss mode: " + name);
}

Batch make_batch(const Dataset& dataset, const std::vector<int>& indices) {
  Batch b;
  b.features = Matrix(static_cast<int>(indices.size()), dataset.feature_dim);
  for (int r = 0; r < b.features.rows(); ++r) {
    const Triplet& it = dataset.items.at(indices[r]);
    std::copy(it.features.begin(), it.features.end(), b.features.row(r));
    b.tokens.push_back(it.tokens);
    b.labels.push_back(it.label);
    b.sources.push_back(it.source);
  }
  return b;
}

GradientSet GradientSet::zeros_like(const ModelParams& p) {
  GradientSet g;
  g.visual_w1 = Matrix(p.visual_w1.rows(), p.visual_w1.cols());
  g.visual_b1 = Matrix(p.visual_b1.rows(), p.visual_b1.cols());
  g.visual_w2 = Matrix(p.visual_w2.rows(), p.visual_w2.cols());
  g.visual_b2 = Matrix(p.visual_b2.rows(), p.visual_b2.cols());
  if (p.text_embed.rows() > 0) {
    g.text_embed = Matrix(p.text_embed.rows(), p.text_embed.cols());
    g.text_proj = Matrix(p.text_proj.rows(), p.text_proj.cols());
  }
  if (p.linear_w.rows() > 0) {
    g.linear_w = Matrix(p.linear_w.rows(), p.linear_w.cols());
    g.linear_b = Matrix(p.linear_b.rows(), p.linear_b.cols());
  }
  return g;
}

bool GradientSet::all_finite() const {
  return visual_w1.all_finite() && visual_b1.all_finite() && visual_w2.all_finite() &&
         visual_b2.all_finite() && text_embed.all_finite() && text_proj.all_finite() &&
         linear_w.all_finite() && linear_b.all_finite() && std::isfinite(tau);
}

std::vector<BlockRef> trainable_blocks(ModelParams& p, GradientSet* g) {
  std::vector<BlockRef> blocks;
  auto add = [&](const char* name, Matrix& param, Matrix* grad) {
    if (param.rows() > 0) blocks.push_back({name, &param, grad});
  };
  add("visual_w1", p.visual_w1, g ? &g->visual_w1 : nullptr);
  add("visual_b1", p.visual_b1, g ? &g->visual_b1 : nullptr);
  add("visual_w2", p.visual_w2, g ? &g->visual_w2 : nullptr);
  add("visual_b2", p.visual_b2, g ? &g->visual_b2 : nullptr);
  if (p.text_mode != TextMode::TransformerStub) {
    add("text_embed", p.text_embed, g ? &g->text_embed : nullptr);
    add("text_proj", p.text_proj, g ? &g->text_proj : nullptr);
  }
  add("linear_w", p.linear_w, g ? &g->linear_w : nullptr);
  add("linear_b", p.linear_b, g ? &g->linear_b : nullptr);
  return blocks;
}

namespace {

// ---------------------------------------------------------------------
// Cached forward passes
// ---------------------------------------------------------------------

struct VisualCache {
  Matrix pre_act;   // B×H, before max(0,.)
  Matrix hidden;    // B×H
  Matrix pre_norm;  // B×d
  Matrix out;       // B×d
  std::vector<double> norms;  // 0 marks a fallback row
};

VisualCache visual_forward(const ModelParams& p, const Matrix& x) {
  if (x.cols() != p.feature_dim())
    throw std::invalid_argument("backward: feature width does not match the model");
  const int b = x.rows(), h = p.hidden_dim(), d = p.embed_dim();
  VisualCache c;
  c.pre_act = Matrix(b, h);
  c.hidden = Matrix(b, h);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < h; ++j) {
      const double a = dot(x.row(i), p.visual_w1.row(j), x.cols()) + p.visual_b1(0, j);
      c.pre_act(i, j) = a;
      c.hidden(i, j) = a > 0.0 ? a : 0.0;
    }
  c.pre_norm = Matrix(b, d);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < d; ++j)
      c.pre_norm(i, j) = dot(c.hidden.row(i), p.visual_w2.row(j), h) + p.visual_b2(0, j);
  if (!c.pre_norm.all_finite()) throw std::runtime_error("backward: non-finite visual activations");
  c.out = c.pre_norm;
  c.norms.assign(b, 0.0);
  if (p.normalize) {
    for (int i = 0; i < b; ++i) {
      const double n = std::sqrt(dot(c.out.row(i), c.out.row(i), d));
      if (n < kNormEpsilon) {
        for (int j = 0; j < d; ++j) c.out(i, j) = 0.0;
        c.out(i, 0) = 1.0;
        c.norms[i] = 0.0;  // fallback branch: defined zero gradient
      } else {
        for (int j = 0; j < d; ++j) c.out(i, j) /= n;
        c.norms[i] = n;
      }
    }
  }
  return c;
}

/// dL/d(pre_norm row) from dL/d(out row) through the normalization.
void normalization_backward(const Matrix& out, const std::vector<double>& norms, bool normalize,
                            Matrix& d_out) {
  if (!normalize) return;
  const int d = out.cols();
  for (int i = 0; i < out.rows(); ++i) {
    double* g = d_out.row(i);
    if (norms[i] == 0.0) {
      std::fill(g, g + d, 0.0);
      continue;
    }
    const double* u = out.row(i);
    const double proj = dot(u, g, d);
    for (int j = 0; j < d; ++j) g[j] = (g[j] - u[j] * proj) / norms[i];
  }
}

void visual_backward(const ModelParams& p, const Matrix& x, const VisualCache& c, Matrix d_out,
                     GradientSet& g) {
  normalization_backward(c.out, c.norms, p.normalize, d_out);
  // d_out is now the gradient at pre_norm.
  const Matrix d_w2 = matmul_tn(d_out, c.hidden);  // d×H via (B×d)ᵀ(B×H)
  for (int r = 0; r < d_w2.rows(); ++r)
    for (int cc = 0; cc < d_w2.cols(); ++cc) g.visual_w2(r, cc) += d_w2(r, cc);
  for (int i = 0; i < d_out.rows(); ++i)
    for (int j = 0; j < d_out.cols(); ++j) g.visual_b2(0, j) += d_out(i, j);
  Matrix d_hidden = matmul(d_out, p.visual_w2);  // B×H
  for (int i = 0; i < d_hidden.rows(); ++i)
    for (int j = 0; j < d_hidden.cols(); ++j)
      if (c.pre_act(i, j) <= 0.0) d_hidden(i, j) = 0.0;
  const Matrix d_w1 = matmul_tn(d_hidden, x);  // H×F
  for (int r = 0; r < d_w1.rows(); ++r)
    for (int cc = 0; cc < d_w1.cols(); ++cc) g.visual_w1(r, cc) += d_w1(r, cc);
  for (int i = 0; i < d_hidden.rows(); ++i)
    for (int j = 0; j < d_hidden.cols(); ++j) g.visual_b1(0, j) += d_hidden(i, j);
}

struct TextCache {
  Matrix pooled;    // B×d token means (embedding_pool)
  Matrix pre_norm;  // B×d
  Matrix out;       // B×d
  std::vector<double> norms;
  std::vector<int> class_idx;  // linear_embedding: 0-based class per row
};

TextCache text_forward(const ModelParams& p, const std::vector<std::vector<int>>& tokens) {
  TextCache c;
  const int b = static_cast<int>(tokens.size());
  const int d = p.embed_dim();
  if (p.text_mode == TextMode::EmbeddingPool) {
    c.pooled = Matrix(b, d);
    for (int i = 0; i < b; ++i) {
      const auto& seq = tokens[i];
      if (seq.empty()) throw std::invalid_argument("backward: empty token sequence");
      for (int t : seq) {
        if (t < 0 || t >= p.vocab_size())
          throw std::invalid_argument("backward: token id out of range");
        for (int cc = 0; cc < d; ++cc) c.pooled(i, cc) += p.text_embed(t, cc);
      }
      for (int cc = 0; cc < d; ++cc) c.pooled(i, cc) /= static_cast<double>(seq.size());
    }
    c.pre_norm = Matrix(b, d);
    for (int i = 0; i < b; ++i)
      for (int j = 0; j < d; ++j) c.pre_norm(i, j) = dot(p.text_proj.row(j), c.pooled.row(i), d);
  } else if (p.text_mode == TextMode::LinearEmbedding) {
    c.pre_norm = Matrix(b, d);
    for (int i = 0; i < b; ++i) {
      if (tokens[i].size() != 1)
        throw std::invalid_argument("backward: linear_embedding expects a single class index");
      const int y = tokens[i][0];
      if (y < 1 || y > p.num_classes())
        throw std::invalid_argument("backward: class index out of range");
      c.class_idx.push_back(y - 1);
      std::copy(p.linear_w.row(y - 1), p.linear_w.row(y - 1) + d, c.pre_norm.row(i));
    }
  } else {
    throw std::invalid_argument("backward: transformer_stub is evaluation-only, not trainable");
  }
  if (!c.pre_norm.all_finite()) throw std::runtime_error("backward: non-finite text activations");
  c.out = c.pre_norm;
  c.norms.assign(b, 0.0);
  if (p.normalize) {
    for (int i = 0; i < b; ++i) {
      const double n = std::sqrt(dot(c.out.row(i), c.out.row(i), d));
      if (n < kNormEpsilon) {
        for (int j = 0; j < d; ++j) c.out(i, j) = 0.0;
        c.out(i, 0) = 1.0;
        c.norms[i] = 0.0;
      } else {
        for (int j = 0; j < d; ++j) c.out(i, j) /= n;
        c.norms[i] = n;
      }
    }
  }
  return c;
}

void text_backward(const ModelParams& p, const std::vector<std::vector<int>>& tokens,
                   const TextCache& c, Matrix d_out, GradientSet& g) {
  normalization_backward(c.out, c.norms, p.normalize, d_out);
  const int d = p.embed_dim();
  if (p.text_mode == TextMode::EmbeddingPool) {
    // pre_norm = pooled * projᵀ
    const Matrix d_proj = matmul_tn(d_out, c.pooled);  // d×d
    for (int r = 0; r < d; ++r)
      for (int cc = 0; cc < d; ++cc) g.text_proj(r, cc) += d_proj(r, cc);
    const Matrix d_pooled = matmul(d_out, p.text_proj);  // B×d
    for (int i = 0; i < d_pooled.rows(); ++i) {
      const auto& seq = tokens[i];
      const double inv_len = 1.0 / static_cast<double>(seq.size());
      for (int t : seq)
        for (int cc = 0; cc < d; ++cc) g.text_embed(t, cc) += d_pooled(i, cc) * inv_len;
    }
  } else {  // LinearEmbedding
    for (int i = 0; i < d_out.rows(); ++i)
      for (int cc = 0; cc < d; ++cc) g.linear_w(c.class_idx[i], cc) += d_out(i, cc);
  }
}

// ---------------------------------------------------------------------
// Per-mode losses with gradients
// ---------------------------------------------------------------------

struct ScaleInfo {
  double raw = 0.0;      // exp(tau)
  double clamped = 0.0;  // min(raw, kMaxLogitScale)
  bool flat = false;     // in the clamp region: d(scale)/d(tau) = 0
};

ScaleInfo make_scale(double tau) {
  ScaleInfo s;
  s.raw = std::exp(tau);
  s.clamped = std::min(s.raw, kMaxLogitScale);
  s.flat = s.raw >= kMaxLogitScale;
  return s;
}

/// Bidirectional soft-CE gradient over the scaled logits L:
/// G = ((p_row - T/rowsum) + (p_col - T/colsum)) / (2B).
Matrix bidirectional_logit_grad(const Matrix& logits, const TargetMatrix& target) {
  const int n = logits.rows();
  Matrix grad(n, n);
  // Image-anchored rows.
  for (int i = 0; i < n; ++i) {
    const double* l = logits.row(i);
    double m = l[0];
    for (int j = 1; j < n; ++j) m = std::max(m, l[j]);
    double z = 0.0;
    for (int j = 0; j < n; ++j) z += std::exp(l[j] - m);
    const double inv_pos = 1.0 / target.row_pos_counts[i];
    for (int j = 0; j < n; ++j) {
      const double p = std::exp(l[j] - m) / z;
      grad(i, j) += p - target.entries(i, j) * inv_pos;
    }
  }
  // Text-anchored columns.
  for (int j = 0; j < n; ++j) {
    double m = logits(0, j);
    for (int i = 1; i < n; ++i) m = std::max(m, logits(i, j));
    double z = 0.0;
    for (int i = 0; i < n; ++i) z += std::exp(logits(i, j) - m);
    const double inv_pos = 1.0 / target.col_pos_counts[j];
    for (int i = 0; i < n; ++i) {
      const double q = std::exp(logits(i, j) - m) / z;
      grad(i, j) += q - target.entries(i, j) * inv_pos;
    }
  }
  const double inv = 1.0 / (2.0 * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) grad(i, j) *= inv;
  return grad;
}

struct ContrastivePiece {
  LossOutput loss;
  Matrix d_u;  // B×d
  Matrix d_v;  // B×d
  double d_tau = 0.0;
  std::vector<double> d_col_bias;  // per text column, when bias is used
};

/// unicl/clip loss with gradients w.r.t. the (already encoded) U, V rows,
/// tau, and the per-column bias.
ContrastivePiece contrastive_with_grads(const Matrix& u, const Matrix& v,
                                        const std::vector<int>& labels, double tau,
                                        const std::vector<double>& col_bias) {
  ContrastivePiece out;
  out.loss = unicl_loss(u, v, labels, tau, col_bias);
  const TargetMatrix target = target_modify(labels);
  const Matrix g_logits = bidirectional_logit_grad(out.loss.logits, target);
  const ScaleInfo scale = make_scale(tau);

  const Matrix s = matmul_nt(u, v);  // unscaled similarities
  double d_scale = 0.0;
  for (int i = 0; i < s.rows(); ++i)
    for (int j = 0; j < s.cols(); ++j) d_scale += g_logits(i, j) * s(i, j);
  out.d_tau = scale.flat ? 0.0 : d_scale * scale.raw;

  Matrix g_s = g_logits;
  for (int i = 0; i < g_s.rows(); ++i)
    for (int j = 0; j < g_s.cols(); ++j) g_s(i, j) *= scale.clamped;
  out.d_u = matmul(g_s, v);
  out.d_v = matmul_tn(g_s, u);  // Gᵀ U
  if (!col_bias.empty()) {
    out.d_col_bias.assign(col_bias.size(), 0.0);
    for (int j = 0; j < g_logits.cols(); ++j)
      for (int i = 0; i < g_logits.rows(); ++i) out.d_col_bias[j] += g_logits(i, j);
  }
  return out;
}

std::vector<int> clip_labels(int n) {
  std::vector<int> labels(n);
  for (int i = 0; i < n; ++i) labels[i] = i + 1;
  return labels;
}

}  // namespace

double forward_loss(const ModelParams& params, const Batch& batch, LossMode mode) {
  if (batch.size() == 0) throw std::invalid_argument("forward_loss: empty batch");
  const VisualCache vis = visual_forward(params, batch.features);
  switch (mode) {
    case LossMode::Unicl:
    case LossMode::Clip: {
      std::vector<std::vector<int>> text_inputs = batch.tokens;
      std::vector<double> col_bias;
      if (params.text_mode == TextMode::LinearEmbedding) {
        text_inputs.clear();
        col_bias.reserve(batch.size());
        for (int y : batch.labels) {
          text_inputs.push_back({y});
          if (y < 1 || y > params.num_classes())
            throw std::invalid_argument("forward_loss: linear_embedding needs labels in 1..K");
          col_bias.push_back(params.linear_b(0, y - 1));
        }
      }
      const TextCache txt = text_forward(params, text_inputs);
      const std::vector<int> labels =
          mode == LossMode::Clip ? clip_labels(batch.size()) : batch.labels;
      return unicl_loss(vis.out, txt.out, labels, params.tau, col_bias).total;
    }
    case LossMode::Ce: {
      if (!params.has_linear_head())
        throw std::invalid_argument("forward_loss: ce mode needs the linear class head");
      Matrix z = matmul_nt(vis.out, params.linear_w);
      for (int i = 0; i < z.rows(); ++i)
        for (int j = 0; j < z.cols(); ++j) z(i, j) += params.linear_b(0, j);
      return ce_loss(z, batch.labels);
    }
    case LossMode::Supcon:
      return supcon_loss(vis.out, vis.out, batch.labels, params.tau);
    case LossMode::Multitask: {
      if (!params.has_linear_head() || params.text_mode != TextMode::EmbeddingPool)
        throw std::invalid_argument(
            "forward_loss: multitask needs the embedding_pool text tower plus the linear head");
      std::vector<int> lab_idx, cap_idx;
      for (int i = 0; i < batch.size(); ++i)
        (batch.labels[i] > 0 ? lab_idx : cap_idx).push_back(i);
      const double b = batch.size();
      double loss = 0.0;
      if (!lab_idx.empty()) {
        Matrix z(static_cast<int>(lab_idx.size()), params.num_classes());
        std::vector<int> sub_labels;
        for (int r = 0; r < z.rows(); ++r) {
          for (int j = 0; j < z.cols(); ++j)
            z(r, j) = dot(vis.out.row(lab_idx[r]), params.linear_w.row(j), params.embed_dim()) +
                      params.linear_b(0, j);
          sub_labels.push_back(batch.labels[lab_idx[r]]);
        }
        loss += (lab_idx.size() / b) * ce_loss(z, sub_labels);
      }
      if (!cap_idx.empty()) {
        std::vector<std::vector<int>> cap_tokens;
        Matrix u_cap(static_cast<int>(cap_idx.size()), params.embed_dim());
        for (int r = 0; r < u_cap.rows(); ++r) {
          std::copy(vis.out.row(cap_idx[r]), vis.out.row(cap_idx[r]) + params.embed_dim(),
                    u_cap.row(r));
          cap_tokens.push_back(batch.tokens[cap_idx[r]]);
        }
        const TextCache txt = text_forward(params, cap_tokens);
        loss += (cap_idx.size() / b) * clip_loss(u_cap, txt.out, params.tau).total;
      }
      return loss;
    }
  }
  throw std::logic_error("forward_loss: bad mode");
}

BackwardResult backward(const ModelParams& params, const Batch& batch, LossMode mode) {
  if (batch.size() == 0) throw std::invalid_argument("backward: empty batch");
  BackwardResult result;
  result.grads = GradientSet::zeros_like(params);
  const ScaleInfo scale = make_scale(params.tau);
  result.scale = scale.clamped;

  const VisualCache vis = visual_forward(params, batch.features);

  switch (mode) {
    case LossMode::Unicl:
    case LossMode::Clip: {
      std::vector<std::vector<int>> text_inputs = batch.tokens;
      std::vector<double> col_bias;
      if (params.text_mode == TextMode::LinearEmbedding) {
        text_inputs.clear();
        for (int y : batch.labels) {
          if (y < 1 || y > params.num_classes())
            throw std::invalid_argument("backward: linear_embedding needs labels in 1..K");
          text_inputs.push_back({y});
          col_bias.push_back(params.linear_b(0, y - 1));
        }
      }
      const TextCache txt = text_forward(params, text_inputs);
      const std::vector<int> labels =
          mode == LossMode::Clip ? clip_labels(batch.size()) : batch.labels;
      ContrastivePiece piece =
          contrastive_with_grads(vis.out, txt.out, labels, params.tau, col_bias);
      result.loss = piece.loss.total;
      result.i2t = piece.loss.i2t;
      result.t2i = piece.loss.t2i;
      result.grads.tau = piece.d_tau;
      visual_backward(params, batch.features, vis, piece.d_u, result.grads);
      text_backward(params, text_inputs, txt, piece.d_v, result.grads);
      if (!piece.d_col_bias.empty())
        for (int j = 0; j < batch.size(); ++j)
          result.grads.linear_b(0, batch.labels[j] - 1) += piece.d_col_bias[j];
      break;
    }
    case LossMode::Ce: {
      if (!params.has_linear_head())
        throw std::invalid_argument("backward: ce mode needs the linear class head");
      const int b = batch.size();
      const int k = params.num_classes();
      Matrix z = matmul_nt(vis.out, params.linear_w);
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < k; ++j) z(i, j) += params.linear_b(0, j);
      result.loss = ce_loss(z, batch.labels);
      // d loss / d z = (softmax - one_hot) / B
      Matrix g_z(b, k);
      for (int i = 0; i < b; ++i) {
        const double* l = z.row(i);
        double m = l[0];
        for (int j = 1; j < k; ++j) m = std::max(m, l[j]);
        double sum = 0.0;
        for (int j = 0; j < k; ++j) sum += std::exp(l[j] - m);
        for (int j = 0; j < k; ++j) g_z(i, j) = std::exp(l[j] - m) / sum / b;
        g_z(i, batch.labels[i] - 1) -= 1.0 / b;
      }
      const Matrix d_w = matmul_tn(g_z, vis.out);  // K×d
      for (int r = 0; r < k; ++r)
        for (int c = 0; c < params.embed_dim(); ++c) result.grads.linear_w(r, c) += d_w(r, c);
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < k; ++j) result.grads.linear_b(0, j) += g_z(i, j);
      visual_backward(params, batch.features, vis, matmul(g_z, params.linear_w), result.grads);
      break;
    }
    case LossMode::Supcon: {
      result.loss = supcon_loss(vis.out, vis.out, batch.labels, params.tau);
      const int b = batch.size();
      const int n = 2 * b;
      const int d = params.embed_dim();
      auto view = [&](int a) { return vis.out.row(a % b); };
      auto label_of = [&](int a) { return batch.labels[a % b]; };
      Matrix d_views(n, d);
      double d_scale = 0.0;
      for (int a = 0; a < n; ++a) {
        std::vector<double> logits(n, 0.0);
        double m = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < n; ++c) {
          if (c == a) continue;
          logits[c] = scale.clamped * dot(view(a), view(c), d);
          m = std::max(m, logits[c]);
        }
        double zsum = 0.0;
        for (int c = 0; c < n; ++c)
          if (c != a) zsum += std::exp(logits[c] - m);
        int n_pos = 0;
        for (int c = 0; c < n; ++c)
          if (c != a && label_of(c) == label_of(a)) ++n_pos;
        for (int c = 0; c < n; ++c) {
          if (c == a) continue;
          const double q = std::exp(logits[c] - m) / zsum;
          const bool pos = label_of(c) == label_of(a);
          const double g = (q - (pos ? 1.0 / n_pos : 0.0)) / n;
          // logit = scale * view(a).view(c)
          const double sim = dot(view(a), view(c), d);
          d_scale += g * sim;
          for (int j = 0; j < d; ++j) {
            d_views(a, j) += g * scale.clamped * view(c)[j];
            d_views(c, j) += g * scale.clamped * view(a)[j];
          }
        }
      }
      result.grads.tau = scale.flat ? 0.0 : d_scale * scale.raw;
      Matrix d_u(b, d);
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < d; ++j) d_u(i, j) = d_views(i, j) + d_views(i + b, j);
      visual_backward(params, batch.features, vis, d_u, result.grads);
      break;
    }
    case LossMode::Multitask: {
      if (!params.has_linear_head() || params.text_mode != TextMode::EmbeddingPool)
        throw std::invalid_argument(
            "backward: multitask needs the embedding_pool text tower plus the linear head");
      const int b = batch.size();
      const int d = params.embed_dim();
      std::vector<int> lab_idx, cap_idx;
      for (int i = 0; i < b; ++i) (batch.labels[i] > 0 ? lab_idx : cap_idx).push_back(i);
      Matrix d_u(b, d);
      double loss = 0.0;
      if (!lab_idx.empty()) {
        const int nl = static_cast<int>(lab_idx.size());
        const int k = params.num_classes();
        Matrix z(nl, k);
        std::vector<int> sub_labels;
        for (int r = 0; r < nl; ++r) {
          for (int j = 0; j < k; ++j)
            z(r, j) =
                dot(vis.out.row(lab_idx[r]), params.linear_w.row(j), d) + params.linear_b(0, j);
          sub_labels.push_back(batch.labels[lab_idx[r]]);
        }
        loss += (static_cast<double>(nl) / b) * ce_loss(z, sub_labels);
        // Combined weight: (nl/B) * (1/nl) = 1/B per labelled row.
        for (int r = 0; r < nl; ++r) {
          const double* l = z.row(r);
          double m = l[0];
          for (int j = 1; j < k; ++j) m = std::max(m, l[j]);
          double sum = 0.0;
          for (int j = 0; j < k; ++j) sum += std::exp(l[j] - m);
          for (int j = 0; j < k; ++j) {
            double g = std::exp(l[j] - m) / sum;
            if (j == sub_labels[r] - 1) g -= 1.0;
            g /= b;
            result.grads.linear_b(0, j) += g;
            for (int c = 0; c < d; ++c) {
              result.grads.linear_w(j, c) += g * vis.out(lab_idx[r], c);
              d_u(lab_idx[r], c) += g * params.linear_w(j, c);
            }
          }
        }
      }
      if (!cap_idx.empty()) {
        const int nc = static_cast<int>(cap_idx.size());
        std::vector<std::vector<int>> cap_tokens;
        Matrix u_cap(nc, d);
        for (int r = 0; r < nc; ++r) {
          std::copy(vis.out.row(cap_idx[r]), vis.out.row(cap_idx[r]) + d, u_cap.row(r));
          cap_tokens.push_back(batch.tokens[cap_idx[r]]);
        }
        const TextCache txt = text_forward(params, cap_tokens);
        ContrastivePiece piece =
            contrastive_with_grads(u_cap, txt.out, clip_labels(nc), params.tau, {});
        const double w = static_cast<double>(nc) / b;
        loss += w * piece.loss.total;
        result.grads.tau += w * piece.d_tau;
        Matrix d_v = piece.d_v;
        for (int r = 0; r < nc; ++r)
          for (int c = 0; c < d; ++c) {
            d_u(cap_idx[r], c) += w * piece.d_u(r, c);
            d_v(r, c) *= w;
          }
        text_backward(params, cap_tokens, txt, d_v, result.grads);
      }
      result.loss = loss;
      visual_backward(params, batch.features, vis, d_u, result.grads);
      break;
    }
  }

  if (!std::isfinite(result.loss) || !result.grads.all_finite())
    throw std::runtime_error("backward: non-finite loss or gradient");
  return result;
}

FiniteDiffReport finite_diff_check(const ModelParams& params, const Batch& batch, LossMode mode,
                                   double eps) {
  const BackwardResult analytic = backward(params, batch, mode);
  ModelParams probe = params;
  GradientSet grads = analytic.grads;  // copy for the block view
  auto blocks = trainable_blocks(probe, &grads);

  FiniteDiffReport report;
  auto rel_err = [](double a, double n) {
    return std::fabs(a - n) / std::max({1.0, std::fabs(a), std::fabs(n)});
  };

  constexpr int kCoordsPerBlock = 200;
  Rng rng(0x66646368656b6bULL);
  for (auto& block : blocks) {
    const int total = static_cast<int>(block.param->size());
    std::vector<int> coords;
    if (total <= kCoordsPerBlock) {
      coords.resize(total);
      for (int i = 0; i < total; ++i) coords[i] = i;
    } else {
      for (int i = 0; i < kCoordsPerBlock; ++i) coords.push_back(rng.uniform_int(total));
    }
    double worst = 0.0;
    for (int idx : coords) {
      double* slot = block.param->data() + idx;
      const double saved = *slot;
      *slot = saved + eps;
      const double up = forward_loss(probe, batch, mode);
      *slot = saved - eps;
      const double down = forward_loss(probe, batch, mode);
      *slot = saved;
      const double numeric = (up - down) / (2.0 * eps);
      worst = std::max(worst, rel_err(block.grad->data()[idx], numeric));
    }
    report.blocks.push_back({block.name, worst});
    report.max_rel_err = std::max(report.max_rel_err, worst);
  }

  {
    const double saved = probe.tau;
    probe.tau = saved + eps;
    const double up = forward_loss(probe, batch, mode);
    probe.tau = saved - eps;
    const double down = forward_loss(probe, batch, mode);
    probe.tau = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = rel_err(analytic.grads.tau, numeric);
    report.blocks.push_back({"tau", err});
    report.max_rel_err = std::max(report.max_rel_err, err);
  }
  return report;
}

}  // namespace unicl
