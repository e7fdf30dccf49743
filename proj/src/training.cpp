#include "unicl/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "unicl/text_io.hpp"

namespace unicl {

std::string optimizer_name(OptimizerKind kind) {
  return kind == OptimizerKind::Sgd ? "sgd" : "adam";
}

OptimizerKind parse_optimizer(const std::string& name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer: " + name);
}

void TrainConfig::validate() const {
  if (batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (epochs < 0) throw std::invalid_argument("train: epochs must be >= 0");
  if (warmup_steps < 0) throw std::invalid_argument("train: warmup_steps must be >= 0");
  if (opt.base_lr <= 0.0) throw std::invalid_argument("train: base_lr must be > 0");
  if (hidden_dim < 1 || embed_dim < 1)
    throw std::invalid_argument("train: model dimensions must be >= 1");
}

namespace {

std::vector<std::vector<int>> cut_batches(std::vector<int> pool, int batch_size, Rng& rng) {
  rng.shuffle(pool);
  std::vector<std::vector<int>> batches;
  const int full = static_cast<int>(pool.size()) / batch_size;
  for (int b = 0; b < full; ++b)
    batches.emplace_back(pool.begin() + static_cast<std::ptrdiff_t>(b) * batch_size,
                         pool.begin() + static_cast<std::ptrdiff_t>(b + 1) * batch_size);
  return batches;
}

Rng epoch_rng(std::uint64_t seed, int epoch) {
  return Rng(mix_seed(mix_seed(seed, 0x73616d706cULL), static_cast<std::uint64_t>(epoch)));
}

}  // namespace

std::vector<std::vector<int>> balanced_batches(const Dataset& dataset, int batch_size, int epoch,
                                               std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("balanced_batches: batch_size must be >= 1");
  std::vector<int> labelled, captioned;
  for (std::size_t i = 0; i < dataset.items.size(); ++i)
    (dataset.items[i].source == Source::Labelled ? labelled : captioned)
        .push_back(static_cast<int>(i));
  if (labelled.empty() || captioned.empty())
    throw std::invalid_argument("balanced_batches: balanced sampling needs both sources");

  Rng rng = epoch_rng(seed, epoch);
  // Fresh caption subset per epoch, clamped to the caption count when
  // captions are scarcer than labels (no oversampling).
  const int subset = static_cast<int>(std::min(labelled.size(), captioned.size()));
  rng.shuffle(captioned);
  std::vector<int> pool = labelled;
  pool.insert(pool.end(), captioned.begin(), captioned.begin() + subset);
  return cut_batches(std::move(pool), batch_size, rng);
}

std::vector<std::vector<int>> shuffled_batches(const Dataset& dataset, int batch_size, int epoch,
                                               std::uint64_t seed) {
  if (batch_size < 1) throw std::invalid_argument("shuffled_batches: batch_size must be >= 1");
  std::vector<int> pool(dataset.items.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i);
  Rng rng = epoch_rng(seed, epoch);
  return cut_batches(std::move(pool), batch_size, rng);
}

double cosine_lr(int step, int total_steps, int warmup_steps, double base_lr) {
  if (step < 0 || step > total_steps)
    throw std::invalid_argument("cosine_lr: step outside [0, total_steps]");
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step) / warmup_steps;
  const int span = total_steps - warmup_steps;
  if (span <= 0) return 0.0;
  const double progress = static_cast<double>(step - warmup_steps) / span;
  const double lr = base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
  return std::max(lr, 0.0);
}

OptimizerState OptimizerState::zeros_like(const ModelParams& params) {
  OptimizerState s;
  s.first_moment = GradientSet::zeros_like(params);
  s.second_moment = GradientSet::zeros_like(params);
  return s;
}

namespace {

struct OptBlock {
  Matrix* param;
  const Matrix* grad;
  Matrix* m1;
  Matrix* m2;
};

std::vector<OptBlock> optimizer_blocks(ModelParams& p, const GradientSet& g, OptimizerState& s) {
  std::vector<OptBlock> blocks;
  auto add = [&](Matrix& pm, const Matrix& gm, Matrix& m1, Matrix& m2) {
    if (pm.rows() > 0 && gm.rows() > 0) blocks.push_back({&pm, &gm, &m1, &m2});
  };
  add(p.visual_w1, g.visual_w1, s.first_moment.visual_w1, s.second_moment.visual_w1);
  add(p.visual_b1, g.visual_b1, s.first_moment.visual_b1, s.second_moment.visual_b1);
  add(p.visual_w2, g.visual_w2, s.first_moment.visual_w2, s.second_moment.visual_w2);
  add(p.visual_b2, g.visual_b2, s.first_moment.visual_b2, s.second_moment.visual_b2);
  add(p.text_embed, g.text_embed, s.first_moment.text_embed, s.second_moment.text_embed);
  add(p.text_proj, g.text_proj, s.first_moment.text_proj, s.second_moment.text_proj);
  add(p.linear_w, g.linear_w, s.first_moment.linear_w, s.second_moment.linear_w);
  add(p.linear_b, g.linear_b, s.first_moment.linear_b, s.second_moment.linear_b);
  return blocks;
}

}  // namespace

void adam_step(OptimizerState& state, ModelParams& params, const GradientSet& grads, double lr,
               const OptimizerConfig& cfg) {
  if (!grads.all_finite()) throw std::invalid_argument("adam_step: non-finite gradients");
  ++state.step_count;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step_count));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step_count));
  for (auto& b : optimizer_blocks(params, grads, state)) {
    double* p = b.param->data();
    const double* g = b.grad->data();
    double* m = b.m1->data();
    double* v = b.m2->data();
    for (std::size_t i = 0; i < b.param->size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      p[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps) + lr * cfg.weight_decay * p[i];
    }
  }
  state.tau_m = cfg.beta1 * state.tau_m + (1.0 - cfg.beta1) * grads.tau;
  state.tau_v = cfg.beta2 * state.tau_v + (1.0 - cfg.beta2) * grads.tau * grads.tau;
  params.tau -= lr * (state.tau_m / bc1) / (std::sqrt(state.tau_v / bc2) + cfg.eps);
}

void sgd_step(OptimizerState& state, ModelParams& params, const GradientSet& grads, double lr,
              const OptimizerConfig& cfg) {
  if (!grads.all_finite()) throw std::invalid_argument("sgd_step: non-finite gradients");
  ++state.step_count;
  for (auto& b : optimizer_blocks(params, grads, state)) {
    double* p = b.param->data();
    const double* g = b.grad->data();
    double* buf = b.m1->data();
    for (std::size_t i = 0; i < b.param->size(); ++i) {
      buf[i] = cfg.momentum * buf[i] + g[i];
      p[i] -= lr * buf[i] + lr * cfg.weight_decay * p[i];
    }
  }
  state.tau_m = cfg.momentum * state.tau_m + grads.tau;
  params.tau -= lr * state.tau_m;
}

ModelConfig model_config_for(const TrainConfig& cfg, const Dataset& dataset) {
  ModelConfig mc;
  mc.feature_dim = dataset.feature_dim;
  mc.hidden_dim = cfg.hidden_dim;
  mc.embed_dim = cfg.embed_dim;
  mc.vocab_size = dataset.vocab_size;
  mc.num_classes = dataset.num_classes;
  mc.normalize = cfg.normalize;
  switch (cfg.mode) {
    case LossMode::Ce:
      mc.text_mode = TextMode::LinearEmbedding;
      break;
    case LossMode::Multitask:
      mc.text_mode = TextMode::EmbeddingPool;
      mc.linear_head = true;
      break;
    default:
      mc.text_mode = cfg.text_mode;
      break;
  }
  return mc;
}

TrainResult train(const TrainConfig& cfg, const Dataset& dataset) {
  cfg.validate();
  dataset.validate();
  const bool labelled_only = cfg.mode == LossMode::Ce || cfg.mode == LossMode::Supcon;

  std::vector<int> labelled_pool;
  if (labelled_only) {
    for (std::size_t i = 0; i < dataset.items.size(); ++i)
      if (dataset.items[i].source == Source::Labelled)
        labelled_pool.push_back(static_cast<int>(i));
    if (labelled_pool.empty())
      throw std::invalid_argument("train: " + loss_mode_name(cfg.mode) +
                                  " mode needs labelled items");
  }

  auto epoch_batches = [&](int epoch) {
    if (labelled_only) {
      Rng rng = epoch_rng(cfg.seed, epoch);
      return cut_batches(labelled_pool, cfg.batch_size, rng);
    }
    return cfg.balanced ? balanced_batches(dataset, cfg.batch_size, epoch, cfg.seed)
                        : shuffled_batches(dataset, cfg.batch_size, epoch, cfg.seed);
  };

  TrainResult result;
  result.params = init_params(model_config_for(cfg, dataset), cfg.seed);

  int total_steps = 0;
  if (cfg.epochs > 0) {
    total_steps = cfg.epochs * static_cast<int>(epoch_batches(0).size());
    if (total_steps == 0)
      throw std::invalid_argument("train: batch_size exceeds the per-epoch item count");
    if (cfg.warmup_steps >= total_steps)
      throw std::invalid_argument("train: warmup_steps must be below the total step count");
  }

  OptimizerState opt_state = OptimizerState::zeros_like(result.params);
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (const std::vector<int>& indices : epoch_batches(epoch)) {
      const Batch batch = make_batch(dataset, indices);
      BackwardResult back;
      try {
        back = backward(result.params, batch, cfg.mode);
      } catch (const std::runtime_error& e) {
        throw std::runtime_error("training diverged at step " + std::to_string(step + 1) + ": " +
                                 e.what());
      }
      const double lr = cosine_lr(step, total_steps, cfg.warmup_steps, cfg.opt.base_lr);
      if (cfg.opt.kind == OptimizerKind::Adam)
        adam_step(opt_state, result.params, back.grads, lr, cfg.opt);
      else
        sgd_step(opt_state, result.params, back.grads, lr, cfg.opt);
      ++step;
      std::ostringstream line;
      line << "step=" << step << " epoch=" << epoch << " loss=" << format_double(back.loss)
           << " i2t=" << format_double(back.i2t) << " t2i=" << format_double(back.t2i)
           << " lr=" << format_double(lr) << " scale=" << format_double(back.scale);
      result.metrics_lines.push_back(line.str());
      result.step_losses.push_back(back.loss);
    }
  }
  return result;
}

TrainResult train_from_files(const TrainConfig& cfg) {
  if (cfg.data_path.empty()) throw std::invalid_argument("train: no dataset path configured");
  const Dataset dataset = load_dataset(cfg.data_path);
  TrainResult result = train(cfg, dataset);
  if (!cfg.checkpoint_out.empty()) save_checkpoint(result.params, cfg.checkpoint_out);
  if (!cfg.metrics_out.empty()) {
    std::ofstream f(cfg.metrics_out, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open metrics log for writing: " + cfg.metrics_out);
    for (const std::string& line : result.metrics_lines) f << line << '\n';
    if (!f) throw std::runtime_error("failed writing metrics log: " + cfg.metrics_out);
  }
  return result;
}

}  // namespace unicl
