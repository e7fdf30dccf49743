#ifndef UNICL_ENCODERS_HPP_
#define UNICL_ENCODERS_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "unicl/matrix.hpp"

namespace unicl {

enum class TextMode { TransformerStub, EmbeddingPool, LinearEmbedding };

std::string text_mode_name(TextMode mode);
TextMode parse_text_mode(const std::string& name);

/// Rows with Euclidean norm below this map to the fixed fallback unit
/// vector e_1 instead of dividing by ~0.
inline constexpr double kNormEpsilon = 1e-12;

struct ModelConfig {
  int feature_dim = 8;
  int hidden_dim = 16;
  int embed_dim = 8;
  int vocab_size = 16;
  int num_classes = 4;
  TextMode text_mode = TextMode::EmbeddingPool;
  bool normalize = true;
  bool linear_head = false;  // class-logit head, used by ce and multitask modes
  int stub_seq_len = 16;     // max sequence length of the attention stub
};

/// All trainable state. The visual encoder is a one-hidden-layer MLP
/// (F -> H -> d, max(0,.) nonlinearity); the text side depends on the
/// mode. tau is the trainable temperature, initialized to 1.
struct ModelParams {
  TextMode text_mode = TextMode::EmbeddingPool;
  bool normalize = true;

  Matrix visual_w1;  // H×F
  Matrix visual_b1;  // 1×H
  Matrix visual_w2;  // d×H
  Matrix visual_b2;  // 1×d

  Matrix text_embed;  // V×d (embedding_pool and transformer_stub)
  Matrix text_proj;   // d×d pooled-output projection

  Matrix linear_w;  // K×d class embeddings (linear_embedding / linear head)
  Matrix linear_b;  // 1×K class bias

  Matrix text_pos;  // T×d positional table (transformer_stub only)
  Matrix attn_wq, attn_wk, attn_wv;  // d×d (transformer_stub only)

  double tau = 1.0;

  int feature_dim() const { return visual_w1.cols(); }
  int hidden_dim() const { return visual_w1.rows(); }
  int embed_dim() const { return visual_w2.rows(); }
  int vocab_size() const { return text_embed.rows(); }
  int num_classes() const { return linear_w.rows(); }
  bool has_text_tower() const { return text_embed.rows() > 0; }
  bool has_linear_head() const { return linear_w.rows() > 0; }

  void check_finite() const;
};

/// Seeded init: matrix weights uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)],
/// biases zero, tau = 1.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

/// L2-normalizes every row in place; rows with norm < kNormEpsilon become e_1.
void normalize_rows(Matrix& m);

/// MLP forward over a |B|×F feature batch; rows normalized when the
/// params say so. Throws on non-finite activations.
Matrix encode_images(const ModelParams& params, const Matrix& features);

/// Text forward. embedding_pool: mean of token embeddings, then the d×d
/// projection. linear_embedding: each "sequence" is a single class index
/// into linear_w (bias is applied later, in the loss). transformer_stub:
/// one block of single-head attention with positional embeddings, then
/// mean pool and projection (evaluation only, not trainable).
Matrix encode_texts(const ModelParams& params, const std::vector<std::vector<int>>& tokens);

/// Plain similarity S = U Vᵀ. Temperature scaling happens in the loss.
Matrix similarity(const Matrix& u, const Matrix& v);

void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);

}  // namespace unicl

#endif  // UNICL_ENCODERS_HPP_
