#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ebmlab/model.hpp"
#include "ebmlab/rng.hpp"
#include "ebmlab/tensor.hpp"

namespace ebmlab::data {

struct LabeledTable {
  Tensor features;                       // N x D
  std::vector<int> labels;               // empty when unlabeled
  std::vector<std::string> class_names;  // labels index into this
  std::vector<std::string> feature_names;
  std::string source;
  std::vector<std::size_t> row_ids;  // identity of each row in its origin table

  std::size_t rows() const { return features.rows(); }
  std::size_t dim() const { return features.cols(); }
  bool labeled() const { return !labels.empty(); }
  std::size_t class_count() const { return class_names.size(); }
  void validate() const;
  LabeledTable take_rows(std::span<const std::size_t> idx) const;
};

// Wraps unlabeled features with sequential row ids.
LabeledTable unlabeled(Tensor features, std::string source);

struct CsvSchema {
  // Column holding class labels; nullopt for purely numeric files.
  std::optional<std::string> label_column = "class";
  char delimiter = ',';
};

// Header row required; lines starting with '#' are comments. Class labels
// may be arbitrary strings; they are mapped to indices of the sorted distinct
// names (numerically when every name is a number).
LabeledTable parse_csv(const std::string& text, const CsvSchema& schema, const std::string& source);
LabeledTable load_csv(const std::string& path, const CsvSchema& schema = {});
// One "# ..." provenance line, the header, then the rows.
std::string to_csv(const LabeledTable& table, const std::string& provenance);
void write_csv(const std::string& path, const LabeledTable& table, const std::string& provenance);

// ---- class-removal protocol ------------------------------------------------

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static constexpr double kFloor = 1e-8;
  static Standardizer fit(const Tensor& x);
  Tensor apply(const Tensor& x) const;
  Tensor inverse(const Tensor& z) const;
};

struct SplitOptions {
  double ood_val_frac = 0.1;
  double id_train_frac = 0.7;
  double id_val_frac = 0.1;  // the ID test part takes the rest
  std::uint64_t seed = 0;
};

struct SplitBundle {
  LabeledTable id_train, id_val, id_test;
  // Removed-class parts; absent when nothing was removed.
  std::optional<LabeledTable> ood_val, ood_test;
  std::optional<Standardizer> stats;
};

// ID parts are relabeled to contiguous indices over the retained classes;
// OOD parts carry labels indexing the removed class names.
SplitBundle class_removal_split(const LabeledTable& table,
                                const std::vector<std::string>& removed_classes,
                                const SplitOptions& options = {});
// Same split with nothing removed: ID parts only.
SplitBundle id_only_split(const LabeledTable& table, const SplitOptions& options = {});

// z-scores every part with statistics of id_train.
SplitBundle standardize(SplitBundle bundle);

// Every part mapped through the penultimate layer of a logits-head model.
SplitBundle embed_dataset(const models::ModelSpec& spec, const models::ParameterSet& params,
                          const SplitBundle& bundle);

// ---- synthetic generators ----------------------------------------------------

// ceil(n/2) rows N(0, 1), the rest U(-1, 1), rows shuffled. `gaussian_rows`
// receives the origin of each output row when given.
Tensor make_noise(std::size_t n, std::size_t d, Rng& rng,
                  std::vector<bool>* gaussian_rows = nullptr);
// Each row filled with one scalar drawn from U(-1, 1).
Tensor make_constant(std::size_t n, std::size_t d, Rng& rng);
// Standardized features scaled by 255.
Tensor make_oodomain(const Tensor& standardized);
// Image mode: [0, 1] pixels to rounded [0, 255] values.
Tensor make_oodomain_image(const Tensor& pixels);

// Average-pools an S x S row-major image with non-overlapping pool x pool
// windows and upsamples back by nearest neighbour. pool must divide S.
std::vector<double> pool_upsample(std::span<const double> image, std::size_t side,
                                  std::size_t pool);
// n images of U(0, 1) noise passed through pool_upsample, flattened.
Tensor make_smoothness(std::size_t n, std::size_t side, std::size_t pool, Rng& rng);

// Two interleaved half circles: label 0 on the unit upper half circle about
// the origin, label 1 on the lower one about (1, 0.5). The first half gets
// floor(n/2) points, rows are shuffled.
LabeledTable make_two_moons(std::size_t n, double noise_std, Rng& rng);

// Isotropic Gaussian classes around centers drawn from N(0, spread^2 I).
LabeledTable make_blobs(std::size_t n, std::size_t d, std::size_t classes, double spread,
                        Rng& rng);

// side x side sinusoidal gratings in [0, 1], one orientation per class
// (k * pi / classes, jittered), random frequency and phase, plus pixel noise.
LabeledTable make_gratings(std::size_t n, std::size_t side, std::size_t classes, double noise_std,
                           Rng& rng);

}  // namespace ebmlab::data
