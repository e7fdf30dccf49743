#include "unicl/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "unicl/text_io.hpp"

namespace unicl {

std::string text_mode_name(TextMode mode) {
  switch (mode) {
    case TextMode::TransformerStub: return "transformer_stub";
    case TextMode::EmbeddingPool: return "embedding_pool";
    case TextMode::LinearEmbedding: return "linear_embedding";
  }
  throw std::logic_error("text_mode_name: bad enum");
}

TextMode parse_text_mode(const std::string& name) {
  if (name == "transformer_stub") return TextMode::TransformerStub;
  if (name == "embedding_pool") return TextMode::EmbeddingPool;
  if (name == "linear_embedding") return TextMode::LinearEmbedding;
  throw std::invalid_argument("unknown text mode: " + name);
}

void ModelParams::check_finite() const {
  const Matrix* blocks[] = {&visual_w1, &visual_b1, &visual_w2, &visual_b2,
                            &text_embed, &text_proj, &linear_w, &linear_b,
                            &text_pos, &attn_wq, &attn_wk, &attn_wv};
  for (const Matrix* b : blocks)
    if (!b->all_finite()) throw std::runtime_error("model parameters contain non-finite values");
  if (!std::isfinite(tau)) throw std::runtime_error("tau is non-finite");
}

namespace {

Matrix uniform_init(int rows, int cols, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.uniform(-bound, bound);
  return m;
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  if (cfg.feature_dim < 1 || cfg.hidden_dim < 1 || cfg.embed_dim < 1)
    throw std::invalid_argument("init_params: dimensions must be positive");
  Rng rng(mix_seed(seed, 0x6d6f64656cULL));
  ModelParams p;
  p.text_mode = cfg.text_mode;
  p.normalize = cfg.normalize;
  p.visual_w1 = uniform_init(cfg.hidden_dim, cfg.feature_dim, cfg.feature_dim, rng);
  p.visual_b1 = Matrix(1, cfg.hidden_dim);
  p.visual_w2 = uniform_init(cfg.embed_dim, cfg.hidden_dim, cfg.hidden_dim, rng);
  p.visual_b2 = Matrix(1, cfg.embed_dim);
  if (cfg.text_mode == TextMode::EmbeddingPool || cfg.text_mode == TextMode::TransformerStub) {
    if (cfg.vocab_size < 1) throw std::invalid_argument("init_params: vocab_size must be positive");
    p.text_embed = uniform_init(cfg.vocab_size, cfg.embed_dim, cfg.embed_dim, rng);
    p.text_proj = uniform_init(cfg.embed_dim, cfg.embed_dim, cfg.embed_dim, rng);
  }
  if (cfg.text_mode == TextMode::LinearEmbedding || cfg.linear_head) {
    if (cfg.num_classes < 1) throw std::invalid_argument("init_params: num_classes must be positive");
    p.linear_w = uniform_init(cfg.num_classes, cfg.embed_dim, cfg.embed_dim, rng);
    p.linear_b = Matrix(1, cfg.num_classes);
  }
  if (cfg.text_mode == TextMode::TransformerStub) {
    p.text_pos = uniform_init(cfg.stub_seq_len, cfg.embed_dim, cfg.embed_dim, rng);
    p.attn_wq = uniform_init(cfg.embed_dim, cfg.embed_dim, cfg.embed_dim, rng);
    p.attn_wk = uniform_init(cfg.embed_dim, cfg.embed_dim, cfg.embed_dim, rng);
    p.attn_wv = uniform_init(cfg.embed_dim, cfg.embed_dim, cfg.embed_dim, rng);
  }
  p.tau = 1.0;
  return p;
}

void normalize_rows(Matrix& m) {
  for (int r = 0; r < m.rows(); ++r) {
    double* row = m.row(r);
    double norm_sq = 0.0;
    for (int c = 0; c < m.cols(); ++c) norm_sq += row[c] * row[c];
    const double norm = std::sqrt(norm_sq);
    if (norm < kNormEpsilon) {
      for (int c = 0; c < m.cols(); ++c) row[c] = 0.0;
      row[0] = 1.0;
    } else {
      for (int c = 0; c < m.cols(); ++c) row[c] /= norm;
    }
  }
}

Matrix encode_images(const ModelParams& params, const Matrix& features) {
  if (features.cols() != params.feature_dim())
    throw std::invalid_argument("encode_images: feature width does not match the model");
  const int b = features.rows();
  const int h = params.hidden_dim();
  const int d = params.embed_dim();
  Matrix hidden(b, h);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < h; ++j) {
      const double a = dot(features.row(i), params.visual_w1.row(j), features.cols()) +
                       params.visual_b1(0, j);
      hidden(i, j) = a > 0.0 ? a : 0.0;
    }
  Matrix out(b, d);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < d; ++j)
      out(i, j) = dot(hidden.row(i), params.visual_w2.row(j), h) + params.visual_b2(0, j);
  if (!out.all_finite()) throw std::runtime_error("encode_images: non-finite activations");
  if (params.normalize) normalize_rows(out);
  return out;
}

namespace {

Matrix encode_texts_pool(const ModelParams& p, const std::vector<std::vector<int>>& tokens) {
  const int d = p.embed_dim();
  Matrix pooled(static_cast<int>(tokens.size()), d);
  for (int i = 0; i < pooled.rows(); ++i) {
    const auto& seq = tokens[i];
    if (seq.empty()) throw std::invalid_argument("encode_texts: empty token sequence");
    for (int t : seq) {
      if (t < 0 || t >= p.vocab_size())
        throw std::invalid_argument("encode_texts: token id out of range");
      for (int c = 0; c < d; ++c) pooled(i, c) += p.text_embed(t, c);
    }
    for (int c = 0; c < d; ++c) pooled(i, c) /= static_cast<double>(seq.size());
  }
  Matrix out(pooled.rows(), d);
  for (int i = 0; i < pooled.rows(); ++i)
    for (int j = 0; j < d; ++j) out(i, j) = dot(p.text_proj.row(j), pooled.row(i), d);
  return out;
}

Matrix encode_texts_linear(const ModelParams& p, const std::vector<std::vector<int>>& tokens) {
  Matrix out(static_cast<int>(tokens.size()), p.embed_dim());
  for (int i = 0; i < out.rows(); ++i) {
    const auto& seq = tokens[i];
    if (seq.size() != 1)
      throw std::invalid_argument("encode_texts: linear_embedding expects a single class index");
    const int y = seq[0];
    if (y < 1 || y > p.num_classes())
      throw std::invalid_argument("encode_texts: class index out of range");
    const double* row = p.linear_w.row(y - 1);
    std::copy(row, row + p.embed_dim(), out.row(i));
  }
  return out;
}

Matrix encode_texts_stub(const ModelParams& p, const std::vector<std::vector<int>>& tokens) {
  const int d = p.embed_dim();
  const int max_len = p.text_pos.rows();
  Matrix pooled(static_cast<int>(tokens.size()), d);
  for (int i = 0; i < pooled.rows(); ++i) {
    const auto& seq = tokens[i];
    if (seq.empty()) throw std::invalid_argument("encode_texts: empty token sequence");
    if (static_cast<int>(seq.size()) > max_len)
      throw std::invalid_argument("encode_texts: sequence longer than the attention stub window");
    const int len = static_cast<int>(seq.size());
    Matrix x(len, d);
    for (int t = 0; t < len; ++t) {
      if (seq[t] < 0 || seq[t] >= p.vocab_size())
        throw std::invalid_argument("encode_texts: token id out of range");
      for (int c = 0; c < d; ++c) x(t, c) = p.text_embed(seq[t], c) + p.text_pos(t, c);
    }
    const Matrix q = matmul_nt(x, p.attn_wq);
    const Matrix k = matmul_nt(x, p.attn_wk);
    const Matrix v = matmul_nt(x, p.attn_wv);
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
    for (int t = 0; t < len; ++t) {
      std::vector<double> att(len);
      double m = -1e300;
      for (int s = 0; s < len; ++s) {
        att[s] = inv_sqrt_d * dot(q.row(t), k.row(s), d);
        m = std::max(m, att[s]);
      }
      double z = 0.0;
      for (int s = 0; s < len; ++s) {
        att[s] = std::exp(att[s] - m);
        z += att[s];
      }
      for (int s = 0; s < len; ++s)
        for (int c = 0; c < d; ++c) pooled(i, c) += (att[s] / z) * v(s, c) / len;
    }
  }
  Matrix out(pooled.rows(), d);
  for (int i = 0; i < pooled.rows(); ++i)
    for (int j = 0; j < d; ++j) out(i, j) = dot(p.text_proj.row(j), pooled.row(i), d);
  return out;
}

}  // namespace

Matrix encode_texts(const ModelParams& params, const std::vector<std::vector<int>>& tokens) {
  Matrix out;
  switch (params.text_mode) {
    case TextMode::EmbeddingPool: out = encode_texts_pool(params, tokens); break;
    case TextMode::LinearEmbedding: out = encode_texts_linear(params, tokens); break;
    case TextMode::TransformerStub: out = encode_texts_stub(params, tokens); break;
  }
  if (!out.all_finite()) throw std::runtime_error("encode_texts: non-finite activations");
  if (params.normalize) normalize_rows(out);
  return out;
}

Matrix similarity(const Matrix& u, const Matrix& v) {
  if (u.cols() != v.cols()) throw std::invalid_argument("similarity: embedding widths differ");
  return matmul_nt(u, v);
}

namespace {

void write_block(std::ostream& os, const std::string& name, const Matrix& m) {
  if (m.rows() == 0) return;
  os << "block " << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  for (int r = 0; r < m.rows(); ++r) {
    for (int c = 0; c < m.cols(); ++c) {
      if (c) os << ' ';
      os << format_double(m(r, c));
    }
    os << '\n';
  }
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ostringstream os;
  os << "UNICL-CKPT v1\n";
  os << "mode " << text_mode_name(params.text_mode) << " normalize " << (params.normalize ? 1 : 0)
     << '\n';
  Matrix tau_block(1, 1);
  tau_block(0, 0) = params.tau;
  write_block(os, "tau", tau_block);
  write_block(os, "visual_w1", params.visual_w1);
  write_block(os, "visual_b1", params.visual_b1);
  write_block(os, "visual_w2", params.visual_w2);
  write_block(os, "visual_b2", params.visual_b2);
  write_block(os, "text_embed", params.text_embed);
  write_block(os, "text_proj", params.text_proj);
  write_block(os, "linear_w", params.linear_w);
  write_block(os, "linear_b", params.linear_b);
  write_block(os, "text_pos", params.text_pos);
  write_block(os, "attn_wq", params.attn_wq);
  write_block(os, "attn_wk", params.attn_wk);
  write_block(os, "attn_wv", params.attn_wv);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  f << os.str();
  if (!f) throw std::runtime_error("failed writing checkpoint: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw std::invalid_argument(path + ": " + msg + " at line " + std::to_string(line_no));
  };
  auto next_line = [&]() -> bool {
    if (!std::getline(f, line)) return false;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    ++line_no;
    return true;
  };
  if (!next_line() || line != "UNICL-CKPT v1") fail("malformed header");
  if (!next_line()) fail("missing mode line");
  auto mode_fields = split_fields(line);
  if (mode_fields.size() != 4 || mode_fields[0] != "mode" || mode_fields[2] != "normalize")
    fail("malformed mode line");
  ModelParams p;
  p.text_mode = parse_text_mode(std::string(mode_fields[1]));
  p.normalize = mode_fields[3] == "1";

  ModelParams out = p;
  bool saw_tau = false;
  while (next_line()) {
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (fields.size() != 4 || fields[0] != "block") fail("expected a block header");
    long long rows = 0, cols = 0;
    if (!try_parse_int(fields[2], rows) || !try_parse_int(fields[3], cols) || rows < 1 || cols < 1)
      fail("bad block dimensions");
    Matrix m(static_cast<int>(rows), static_cast<int>(cols));
    for (int r = 0; r < m.rows(); ++r) {
      if (!next_line()) fail("truncated block");
      auto vals = split_fields(line);
      if (static_cast<int>(vals.size()) != m.cols()) fail("wrong value count in block row");
      for (int c = 0; c < m.cols(); ++c) {
        double v = 0.0;
        if (!try_parse_double(vals[c], v)) fail("bad float");
        m(r, c) = v;
      }
    }
    const std::string name(fields[1]);
    if (name == "tau") {
      out.tau = m(0, 0);
      saw_tau = true;
    } else if (name == "visual_w1") out.visual_w1 = m;
    else if (name == "visual_b1") out.visual_b1 = m;
    else if (name == "visual_w2") out.visual_w2 = m;
    else if (name == "visual_b2") out.visual_b2 = m;
    else if (name == "text_embed") out.text_embed = m;
    else if (name == "text_proj") out.text_proj = m;
    else if (name == "linear_w") out.linear_w = m;
    else if (name == "linear_b") out.linear_b = m;
    else if (name == "text_pos") out.text_pos = m;
    else if (name == "attn_wq") out.attn_wq = m;
    else if (name == "attn_wk") out.attn_wk = m;
    else if (name == "attn_wv") out.attn_wv = m;
    else fail("unknown block name '" + name + "'");
  }
  if (!saw_tau || out.visual_w1.rows() == 0)
    throw std::invalid_argument(path + ": checkpoint is missing required blocks");
  out.check_finite();
  return out;
}

}  // namespace unicl
