#include "unicl/datamodel.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "unicl/matrix.hpp"
#include "unicl/text_io.hpp"

namespace unicl {

void Dataset::validate() const {
  if (feature_dim < 1) throw std::invalid_argument("dataset: feature_dim must be >= 1");
  if (num_classes < 0 || vocab_size < 0)
    throw std::invalid_argument("dataset: negative num_classes or vocab_size");
  for (int k = 1; k <= num_classes; ++k)
    if (!label_names.count(k))
      throw std::invalid_argument("dataset: missing name for label " + std::to_string(k));
  if (static_cast<int>(label_names.size()) != num_classes)
    throw std::invalid_argument("dataset: label_names keys must be exactly 1..K");
  for (const auto& [label, name] : label_names)
    for (int t : name)
      if (t < 0 || t >= vocab_size)
        throw std::invalid_argument("dataset: class name token id out of range");
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Triplet& it = items[i];
    const std::string where = " (item " + std::to_string(i) + ")";
    if (it.label < 0 || it.label > num_classes)
      throw std::invalid_argument("dataset: label out of range" + where);
    if ((it.source == Source::Labelled) != (it.label >= 1))
      throw std::invalid_argument("dataset: source tag inconsistent with label" + where);
    if (static_cast<int>(it.features.size()) != feature_dim)
      throw std::invalid_argument("dataset: feature length mismatch" + where);
    for (double f : it.features)
      if (!std::isfinite(f)) throw std::invalid_argument("dataset: non-finite feature" + where);
    for (int t : it.tokens)
      if (t < 0 || t >= vocab_size)
        throw std::invalid_argument("dataset: token id out of range" + where);
  }
}

bool datasets_equal(const Dataset& a, const Dataset& b) {
  if (a.feature_dim != b.feature_dim || a.num_classes != b.num_classes ||
      a.vocab_size != b.vocab_size || a.label_names != b.label_names ||
      a.items.size() != b.items.size())
    return false;
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    const Triplet& x = a.items[i];
    const Triplet& y = b.items[i];
    if (x.label != y.label || x.source != y.source || x.tokens != y.tokens ||
        x.features != y.features)
      return false;
  }
  return true;
}

void save_dataset(const Dataset& dataset, const std::string& path) {
  dataset.validate();
  std::ostringstream os;
  os << "UNICL-DS v1 F=" << dataset.feature_dim << " K=" << dataset.num_classes
     << " V=" << dataset.vocab_size << '\n';
  for (const auto& [label, name] : dataset.label_names) {
    os << "class " << label;
    for (int t : name) os << ' ' << t;
    os << '\n';
  }
  for (const Triplet& it : dataset.items) {
    os << "item " << it.label << ' ' << it.tokens.size();
    for (int t : it.tokens) os << ' ' << t;
    for (double f : it.features) os << ' ' << format_double(f);
    os << '\n';
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open dataset for writing: " + path);
  f << os.str();
  if (!f) throw std::runtime_error("failed writing dataset: " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::invalid_argument("cannot open dataset: " + path);
  Dataset ds;
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

  if (!next_line()) throw std::invalid_argument(path + ": empty file");
  {
    auto fields = split_fields(line);
    long long fdim = -1, k = -1, v = -1;
    bool ok = fields.size() == 5 && fields[0] == "UNICL-DS" && fields[1] == "v1" &&
              fields[2].substr(0, 2) == "F=" && fields[3].substr(0, 2) == "K=" &&
              fields[4].substr(0, 2) == "V=" && try_parse_int(fields[2].substr(2), fdim) &&
              try_parse_int(fields[3].substr(2), k) && try_parse_int(fields[4].substr(2), v);
    if (!ok || fdim < 1 || k < 0 || v < 0) fail("malformed header");
    ds.feature_dim = static_cast<int>(fdim);
    ds.num_classes = static_cast<int>(k);
    ds.vocab_size = static_cast<int>(v);
  }

  for (int c = 0; c < ds.num_classes; ++c) {
    if (!next_line()) fail("missing class line");
    auto fields = split_fields(line);
    if (fields.size() < 2 || fields[0] != "class") fail("expected a class line");
    long long label = -1;
    if (!try_parse_int(fields[1], label) || label < 1 || label > ds.num_classes)
      fail("class label out of range");
    if (ds.label_names.count(static_cast<int>(label))) fail("duplicate class label");
    std::vector<int> name;
    for (std::size_t i = 2; i < fields.size(); ++i) {
      long long t = -1;
      if (!try_parse_int(fields[i], t)) fail("bad class token id");
      if (t < 0 || t >= ds.vocab_size) fail("class token id out of range");
      name.push_back(static_cast<int>(t));
    }
    ds.label_names[static_cast<int>(label)] = std::move(name);
  }

  while (next_line()) {
    if (line.empty()) continue;
    auto fields = split_fields(line);
    if (fields.empty() || fields[0] != "item") fail("expected an item line");
    long long label = -1, n_tokens = -1;
    if (fields.size() < 3 || !try_parse_int(fields[1], label) ||
        !try_parse_int(fields[2], n_tokens) || n_tokens < 0)
      fail("malformed item line");
    if (label < 0 || label > ds.num_classes) fail("label out of range");
    const std::size_t expected = 3 + static_cast<std::size_t>(n_tokens) + ds.feature_dim;
    if (fields.size() != expected) fail("dimension mismatch");
    Triplet it;
    it.label = static_cast<int>(label);
    it.source = it.label >= 1 ? Source::Labelled : Source::Captioned;
    for (long long i = 0; i < n_tokens; ++i) {
      long long t = -1;
      if (!try_parse_int(fields[3 + i], t)) fail("bad token id");
      if (t < 0 || t >= ds.vocab_size) fail("token id out of range");
      it.tokens.push_back(static_cast<int>(t));
    }
    for (int i = 0; i < ds.feature_dim; ++i) {
      double v = 0.0;
      if (!try_parse_double(fields[3 + n_tokens + i], v) || !std::isfinite(v))
        fail("bad feature value");
      it.features.push_back(v);
    }
    ds.items.push_back(std::move(it));
  }
  ds.validate();
  return ds;
}

Dataset merge_sources(const Dataset& labelled, const Dataset& captioned) {
  if (labelled.feature_dim != captioned.feature_dim)
    throw std::invalid_argument("merge_sources: feature_dim mismatch");
  Dataset merged;
  merged.feature_dim = labelled.feature_dim;
  merged.num_classes = labelled.num_classes;
  merged.label_names = labelled.label_names;

  std::vector<int> remap;  // captioned token id -> merged token id
  if (labelled.vocab.empty() && captioned.vocab.empty()) {
    // Loaded datasets carry only a vocabulary size; ids must already agree.
    if (labelled.vocab_size != captioned.vocab_size)
      throw std::invalid_argument(
          "merge_sources: datasets without string vocabularies must share a vocab size");
    merged.vocab_size = labelled.vocab_size;
    remap.resize(captioned.vocab_size);
    for (int i = 0; i < captioned.vocab_size; ++i) remap[i] = i;
  } else {
    if (labelled.vocab.empty() != captioned.vocab.empty())
      throw std::invalid_argument("merge_sources: one dataset lacks a string vocabulary");
    merged.vocab = labelled.vocab;
    merged.vocab_size = labelled.vocab_size;
    std::vector<const std::string*> by_id(captioned.vocab_size, nullptr);
    for (const auto& [word, id] : captioned.vocab) {
      if (id < 0 || id >= captioned.vocab_size)
        throw std::invalid_argument("merge_sources: captioned vocab id out of range");
      by_id[id] = &word;
    }
    remap.resize(captioned.vocab_size, -1);
    for (int id = 0; id < captioned.vocab_size; ++id) {
      if (!by_id[id]) continue;  // unused id slot
      auto found = merged.vocab.find(*by_id[id]);
      if (found != merged.vocab.end()) {
        remap[id] = found->second;
      } else {
        remap[id] = merged.vocab_size;
        merged.vocab.emplace(*by_id[id], merged.vocab_size++);
      }
    }
  }

  merged.items = labelled.items;
  for (const Triplet& it : captioned.items) {
    Triplet copy = it;
    for (int& t : copy.tokens) {
      if (t < 0 || t >= static_cast<int>(remap.size()) || remap[t] < 0)
        throw std::invalid_argument("merge_sources: captioned token id has no vocab entry");
      t = remap[t];
    }
    merged.items.push_back(std::move(copy));
  }
  merged.validate();
  return merged;
}

void SynthConfig::validate() const {
  const int k = attributes * shapes;
  if (attributes < 1 || shapes < 1 || k < 2)
    throw std::invalid_argument("synth: need at least 2 concepts (attributes*shapes >= 2)");
  if (feature_dim < 2 || feature_dim % 2 != 0)
    throw std::invalid_argument("synth: feature_dim must be even and >= 2");
  if (sigma <= 0.0) throw std::invalid_argument("synth: sigma must be > 0");
  if (samples_per_concept < 0 || eval_samples_per_concept < 0 || captioned_items < 0)
    throw std::invalid_argument("synth: negative sample count");
  if (templates < 0) throw std::invalid_argument("synth: negative template count");
  if (long_tail_exponent < 0.0) throw std::invalid_argument("synth: negative long-tail exponent");
  if (labelled_concept_fraction < 0.0 || labelled_concept_fraction > 1.0)
    throw std::invalid_argument("synth: labelled_concept_fraction must be in [0,1]");
  std::vector<bool> seen(k, false);
  for (int c : held_out) {
    if (c < 0 || c >= k) throw std::invalid_argument("synth: held-out concept index out of range");
    if (seen[c]) throw std::invalid_argument("synth: duplicate held-out concept");
    seen[c] = true;
  }
  if (static_cast<int>(held_out.size()) >= k)
    throw std::invalid_argument("synth: held-out list covers all concepts");
}

std::vector<std::vector<int>> make_template_pool(const SynthConfig& cfg) {
  // Token ids: 0 oov, 1..A attributes, A+1..A+S shapes, then two fresh
  // tokens per template.
  std::vector<std::vector<int>> pool;
  const int base = 1 + cfg.attributes + cfg.shapes;
  for (int t = 0; t < cfg.templates; ++t)
    pool.push_back({base + 2 * t, base + 2 * t + 1});
  if (pool.empty()) pool.push_back({});  // bare class name
  return pool;
}

namespace {

std::vector<double> concept_features(const Matrix& attr_means, const Matrix& shape_means,
                                     int attr, int shape, double sigma, Rng& rng) {
  const int half = attr_means.cols();
  std::vector<double> f(2 * static_cast<std::size_t>(half));
  for (int i = 0; i < half; ++i) f[i] = attr_means(attr, i) + sigma * rng.gaussian();
  for (int i = 0; i < half; ++i)
    f[half + i] = shape_means(shape, i) + sigma * rng.gaussian();
  return f;
}

Matrix unit_cluster_means(int count, int dim, Rng& rng) {
  Matrix m(count, dim);
  for (int r = 0; r < count; ++r) {
    double norm_sq = 0.0;
    for (int c = 0; c < dim; ++c) {
      m(r, c) = rng.gaussian();
      norm_sq += m(r, c) * m(r, c);
    }
    const double norm = std::sqrt(norm_sq);
    for (int c = 0; c < dim; ++c) m(r, c) = norm > 0.0 ? m(r, c) / norm : (c == 0 ? 1.0 : 0.0);
  }
  return m;
}

}  // namespace

SynthPackage generate_synthetic_package(const SynthConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const int total_concepts = cfg.attributes * cfg.shapes;
  std::vector<bool> held(total_concepts, false);
  for (int c : cfg.held_out) held[c] = true;
  std::vector<int> seen_concepts, holdout_concepts;
  for (int c = 0; c < total_concepts; ++c) (held[c] ? holdout_concepts : seen_concepts).push_back(c);
  const int n_seen = static_cast<int>(seen_concepts.size());
  const int n_labelled_concepts = std::min(
      n_seen, static_cast<int>(std::lround(cfg.labelled_concept_fraction * n_seen)));

  // Vocabulary shared by every split.
  std::map<std::string, int> vocab;
  vocab["<oov>"] = 0;
  for (int a = 0; a < cfg.attributes; ++a) vocab["attr" + std::to_string(a)] = 1 + a;
  for (int s = 0; s < cfg.shapes; ++s)
    vocab["shape" + std::to_string(s)] = 1 + cfg.attributes + s;
  const int tmpl_base = 1 + cfg.attributes + cfg.shapes;
  for (int t = 0; t < 2 * cfg.templates; ++t)
    vocab["tw" + std::to_string(t)] = tmpl_base + t;
  const int vocab_size = tmpl_base + 2 * cfg.templates;

  auto concept_name = [&](int concept) {
    const int a = concept / cfg.shapes;
    const int s = concept % cfg.shapes;
    return std::vector<int>{1 + a, 1 + cfg.attributes + s};
  };

  const std::vector<std::vector<int>> pool = make_template_pool(cfg);

  Rng rng(mix_seed(seed, 0x73796e7468ULL));
  const int half = cfg.feature_dim / 2;
  const Matrix attr_means = unit_cluster_means(cfg.attributes, half, rng);
  const Matrix shape_means = unit_cluster_means(cfg.shapes, half, rng);

  auto base_dataset = [&](int num_classes) {
    Dataset ds;
    ds.feature_dim = cfg.feature_dim;
    ds.vocab_size = vocab_size;
    ds.vocab = vocab;
    ds.num_classes = num_classes;
    return ds;
  };

  auto draw_item = [&](int concept, int label, Source source, std::vector<int> tokens) {
    Triplet it;
    it.features = concept_features(attr_means, shape_means, concept / cfg.shapes,
                                   concept % cfg.shapes, cfg.sigma, rng);
    it.tokens = std::move(tokens);
    it.label = label;
    it.source = source;
    return it;
  };

  // Labelled split: the first n_labelled_concepts of the seen list.
  Dataset labelled = base_dataset(n_seen);
  for (int r = 0; r < n_seen; ++r) labelled.label_names[r + 1] = concept_name(seen_concepts[r]);
  for (int r = 0; r < n_labelled_concepts; ++r)
    for (int i = 0; i < cfg.samples_per_concept; ++i)
      labelled.items.push_back(
          draw_item(seen_concepts[r], r + 1, Source::Labelled, concept_name(seen_concepts[r])));

  // Captioned split: concepts drawn with frequency ~ 1/rank^exponent
  // over the seen list, captions = template prefix + concept name.
  Dataset captioned = base_dataset(0);
  std::vector<double> cumulative(n_seen, 0.0);
  {
    double acc = 0.0;
    for (int r = 0; r < n_seen; ++r) {
      acc += 1.0 / std::pow(static_cast<double>(r + 1), cfg.long_tail_exponent);
      cumulative[r] = acc;
    }
    for (int r = 0; r < n_seen; ++r) cumulative[r] /= acc;
  }
  for (int i = 0; i < cfg.captioned_items; ++i) {
    const double x = rng.uniform();
    int r = static_cast<int>(std::lower_bound(cumulative.begin(), cumulative.end(), x) -
                             cumulative.begin());
    if (r >= n_seen) r = n_seen - 1;
    const int concept = seen_concepts[r];
    std::vector<int> tokens = pool[rng.uniform_int(static_cast<int>(pool.size()))];
    const std::vector<int> name = concept_name(concept);
    tokens.insert(tokens.end(), name.begin(), name.end());
    if (static_cast<int>(tokens.size()) > cfg.max_tokens)
      throw std::invalid_argument("synth: caption exceeds max_tokens");
    captioned.items.push_back(draw_item(concept, 0, Source::Captioned, std::move(tokens)));
  }

  SynthPackage pkg;
  pkg.template_pool = pool;
  pkg.train = merge_sources(labelled, captioned);

  pkg.eval_seen = base_dataset(n_seen);
  pkg.eval_seen.label_names = labelled.label_names;
  for (int r = 0; r < n_seen; ++r)
    for (int i = 0; i < cfg.eval_samples_per_concept; ++i)
      pkg.eval_seen.items.push_back(
          draw_item(seen_concepts[r], r + 1, Source::Labelled, concept_name(seen_concepts[r])));

  pkg.eval_holdout = base_dataset(static_cast<int>(holdout_concepts.size()));
  for (std::size_t h = 0; h < holdout_concepts.size(); ++h)
    pkg.eval_holdout.label_names[static_cast<int>(h) + 1] = concept_name(holdout_concepts[h]);
  for (std::size_t h = 0; h < holdout_concepts.size(); ++h)
    for (int i = 0; i < cfg.eval_samples_per_concept; ++i)
      pkg.eval_holdout.items.push_back(draw_item(holdout_concepts[h], static_cast<int>(h) + 1,
                                                 Source::Labelled,
                                                 concept_name(holdout_concepts[h])));

  pkg.probe_train = base_dataset(n_seen);
  pkg.probe_train.label_names = labelled.label_names;
  for (int r = 0; r < n_seen; ++r)
    for (int i = 0; i < cfg.eval_samples_per_concept; ++i)
      pkg.probe_train.items.push_back(
          draw_item(seen_concepts[r], r + 1, Source::Labelled, concept_name(seen_concepts[r])));

  pkg.train.validate();
  pkg.eval_seen.validate();
  pkg.eval_holdout.validate();
  pkg.probe_train.validate();
  return pkg;
}

Dataset generate_synthetic(const SynthConfig& cfg, std::uint64_t seed) {
  return generate_synthetic_package(cfg, seed).train;
}

void shuffle_labels(Dataset& dataset, std::uint64_t seed) {
  std::vector<std::size_t> labelled_idx;
  for (std::size_t i = 0; i < dataset.items.size(); ++i)
    if (dataset.items[i].source == Source::Labelled) labelled_idx.push_back(i);
  std::vector<int> labels;
  labels.reserve(labelled_idx.size());
  for (std::size_t i : labelled_idx) labels.push_back(dataset.items[i].label);
  Rng rng(mix_seed(seed, 0x7368756646ULL));
  rng.shuffle(labels);
  for (std::size_t j = 0; j < labelled_idx.size(); ++j)
    dataset.items[labelled_idx[j]].label = labels[j];
}

}  // namespace unicl
