#ifndef UNICL_DATAMODEL_HPP_
#define UNICL_DATAMODEL_HPP_

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace unicl {

enum class Source { Labelled, Captioned };

/// One example in the image-text-label space. Label 0 marks a captioned
/// (per-instance) example; labels 1..K index the named concepts.
struct Triplet {
  std::vector<double> features;
  std::vector<int> tokens;
  int label = 0;
  Source source = Source::Captioned;
};

struct Dataset {
  std::vector<Triplet> items;
  std::map<std::string, int> vocab;            // token string -> id; empty for loaded files
  std::map<int, std::vector<int>> label_names; // class id (1..K) -> name token sequence
  int feature_dim = 0;
  int num_classes = 0;
  int vocab_size = 0;

  /// Checks every type invariant; throws std::invalid_argument on the
  /// first violation.
  void validate() const;
};

/// Equality over the persistable content (everything except the
/// in-memory string vocabulary, which the file format does not carry).
bool datasets_equal(const Dataset& a, const Dataset& b);

Dataset load_dataset(const std::string& path);
void save_dataset(const Dataset& dataset, const std::string& path);

/// Concatenates the two sources into one dataset: vocabularies are
/// unioned (token ids remapped), label names come from the labelled
/// side, source tags are preserved.
Dataset merge_sources(const Dataset& labelled, const Dataset& captioned);

/// Synthetic compositional benchmark: A attribute tokens × S shape
/// tokens form K = A·S concepts; each concept is a Gaussian cluster
/// whose mean concatenates a per-attribute half and a per-shape half,
/// so held-out (attribute, shape) combinations stay expressible.
struct SynthConfig {
  int feature_dim = 8;  // must be even: one half per factor
  int attributes = 4;
  int shapes = 5;
  int samples_per_concept = 20;       // labelled items per labelled concept
  int eval_samples_per_concept = 10;  // per concept in each eval split
  int captioned_items = 2000;
  int templates = 4;                  // caption template pool size
  double labelled_concept_fraction = 0.6;  // fraction of seen concepts with labels
  double sigma = 0.1;                 // cluster noise
  double long_tail_exponent = 0.0;    // caption concept frequency ~ 1/rank^e
  std::vector<int> held_out;          // concept indices (0..A*S-1) excluded from training
  int max_tokens = 16;

  void validate() const;
};

struct SynthPackage {
  Dataset train;         // merged labelled + captioned training items
  Dataset eval_seen;     // fresh items for every seen concept, true labels
  Dataset eval_holdout;  // fresh items for held-out concepts, local labels 1..H
  Dataset probe_train;   // fresh labelled items for every seen concept
  std::vector<std::vector<int>> template_pool;  // token prefixes used in captions
};

/// Deterministic function of (cfg, seed).
SynthPackage generate_synthetic_package(const SynthConfig& cfg, std::uint64_t seed);

/// The training dataset of the package; same determinism contract.
Dataset generate_synthetic(const SynthConfig& cfg, std::uint64_t seed);

/// Rebuilds the caption template token prefixes from the config alone
/// (template token ids are a pure function of A, S and the pool size).
std::vector<std::vector<int>> make_template_pool(const SynthConfig& cfg);

/// Randomly permutes the labels of the labelled items (control knob for
/// the label-blindness experiments). Label names are left untouched.
void shuffle_labels(Dataset& dataset, std::uint64_t seed);

}  // namespace unicl

#endif  // UNICL_DATAMODEL_HPP_
