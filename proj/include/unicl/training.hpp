#ifndef UNICL_TRAINING_HPP_
#define UNICL_TRAINING_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "unicl/datamodel.hpp"
#include "unicl/encoders.hpp"
#include "unicl/gradients.hpp"

namespace unicl {

enum class OptimizerKind { Sgd, Adam };

std::string optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double base_lr = 1e-3;
  double momentum = 0.9;      // sgd
  double beta1 = 0.9;         // adam
  double beta2 = 0.999;       // adam
  double eps = 1e-8;          // adam
  double weight_decay = 0.05; // decoupled
};

struct TrainConfig {
  int batch_size = 64;
  int epochs = 100;
  int warmup_steps = 50;
  LossMode mode = LossMode::Unicl;
  OptimizerConfig opt;
  std::uint64_t seed = 1;
  bool balanced = true;

  int hidden_dim = 16;
  int embed_dim = 8;
  TextMode text_mode = TextMode::EmbeddingPool;
  bool normalize = true;

  std::string data_path;
  std::string checkpoint_out;
  std::string metrics_out;

  void validate() const;
};

/// Per-epoch index batches. Balanced mode draws a fresh caption subset
/// of (at most) the labelled-set size, unions it with every labelled
/// item, shuffles, and cuts full batches; the trailing partial batch is
/// dropped. Unbalanced mode shuffles everything.
std::vector<std::vector<int>> balanced_batches(const Dataset& dataset, int batch_size, int epoch,
                                               std::uint64_t seed);
std::vector<std::vector<int>> shuffled_batches(const Dataset& dataset, int batch_size, int epoch,
                                               std::uint64_t seed);

/// Linear warmup to base_lr over warmup_steps, then a half cosine down
/// to zero at total_steps.
double cosine_lr(int step, int total_steps, int warmup_steps, double base_lr);

struct OptimizerState {
  GradientSet first_moment;   // adam m / sgd momentum buffer
  GradientSet second_moment;  // adam v
  double tau_m = 0.0, tau_v = 0.0;
  long step_count = 0;

  static OptimizerState zeros_like(const ModelParams& params);
};

/// Bias-corrected Adam with decoupled weight decay. tau never decays.
void adam_step(OptimizerState& state, ModelParams& params, const GradientSet& grads, double lr,
               const OptimizerConfig& cfg);
/// SGD with momentum and decoupled weight decay.
void sgd_step(OptimizerState& state, ModelParams& params, const GradientSet& grads, double lr,
              const OptimizerConfig& cfg);

struct TrainResult {
  ModelParams params;
  std::vector<std::string> metrics_lines;  // one line per step
  std::vector<double> step_losses;
};

/// Builds the ModelConfig a training run needs for the given dataset
/// and mode (ce uses the linear text mode; multitask adds the class
/// head next to the text tower).
ModelConfig model_config_for(const TrainConfig& cfg, const Dataset& dataset);

/// The epoch loop: forward/backward/step over seeded batches,
/// deterministic given (config, dataset). Throws std::runtime_error on
/// divergence, reporting the offending step.
TrainResult train(const TrainConfig& cfg, const Dataset& dataset);

/// Convenience wrapper: loads the dataset, trains, writes the
/// checkpoint and metrics files when paths are configured.
TrainResult train_from_files(const TrainConfig& cfg);

}  // namespace unicl

#endif  // UNICL_TRAINING_HPP_
