#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ebmlab/data.hpp"
#include "ebmlab/eval.hpp"
#include "ebmlab/model.hpp"
#include "ebmlab/objectives.hpp"
#include "ebmlab/samplers.hpp"
#include "json.hpp"

namespace ebmlab::lab {

// ---- configuration ------------------------------------------------------------

struct DataConfig {
  std::string source = "two-moons";  // csv | two-moons | blobs | gratings
  std::string path;                  // csv
  std::optional<std::string> label_column = "class";
  std::size_t n = 2000;              // synthetic sources
  double noise = 0.1;                // two-moons / gratings pixel noise
  std::size_t dim = 8;               // blobs
  std::size_t classes = 5;           // blobs / gratings
  double spread = 3.0;               // blobs
  std::size_t side = 12;             // gratings
  std::vector<std::string> remove_classes;
  bool standardize = true;
  data::SplitOptions split;          // split.seed is overwritten by the run seed
};

struct OodConfig {
  // Known kinds: removed, noise, constant, oodomain, uniform-box. Empty lists
  // are filled by defaults: the removed classes (when any) for validation,
  // the removed classes plus noise/constant/oodomain for testing, and
  // uniform-box for both when nothing is removed.
  std::vector<std::string> val;
  std::vector<std::string> test;
  std::optional<std::size_t> n;  // synthetic set size; defaults to the ID part size
  double box_scale = 3.0;        // uniform-box: ID-train bounding box scaled about its center
};

struct TrainConfig {
  std::size_t steps = 10000;
  std::size_t batch_size = 64;
  std::optional<double> lr;            // objective default when unset
  std::optional<double> weight_decay;  // 5e-4 for ce, 0 otherwise
  std::size_t warmup = 2500;
  std::size_t eval_every = 500;
  std::size_t patience = 10;  // evaluations without improvement (nf, ce)
  samplers::SgldConfig sgld;
  bool clamp_to_box = false;  // clamp SGLD states to the ID-train bounding box
  std::size_t buffer_capacity = 10000;
  double reinit_prob = 0.05;
  double data_noise_var = 0.1;  // cd: Gaussian perturbation of data batches
  objectives::VeraConfig vera;
};

struct RunConfig {
  static constexpr int kVersion = 1;
  std::string name = "run";
  std::string objective = "cd";  // ssm | cd | vera | nf | ce
  double gamma = 0.0;
  std::uint64_t seed = 0;
  // Unset: resolved from the data (see default_model).
  std::optional<models::ModelSpec> model;
  DataConfig data;
  OodConfig ood;
  TrainConfig train;
  std::string out;  // output directory; empty writes nothing

  void validate() const;
};

// Strict parsing: unknown keys anywhere raise ConfigError.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& c);
RunConfig load_config(const std::string& path);

double default_lr(const std::string& objective);

// ---- prepared data ----------------------------------------------------------------

struct Prepared {
  data::SplitBundle bundle;
  std::vector<eval::OodSet> val_sets;
  std::vector<eval::OodSet> test_sets;
  samplers::Box box;  // bounding box of id_train
};

Prepared prepare_data(const RunConfig& config);
// Every part and OOD set mapped through the penultimate layer of a classifier.
Prepared embed_prepared(const models::Model& classifier, const Prepared& p);

// ---- training ---------------------------------------------------------------------

// Five hidden layers of width 100. nf: 20 radial layers. A labeled source
// with two or more classes gets a logits head (so gamma only changes the
// loss, never the architecture), otherwise a scalar energy head. ssm uses
// swish so the input Hessian is not zero almost everywhere.
models::ModelSpec default_model(const RunConfig& config, const data::SplitBundle& bundle);

struct HistoryPoint {
  std::size_t step = 0;
  double loss = 0.0;
  std::optional<double> selection;
};

struct TrainResult {
  models::Checkpoint checkpoint;  // selected parameters
  eval::EvalReport report;
  std::vector<HistoryPoint> history;  // one point per evaluation
  std::vector<double> losses;         // training loss per completed step
  std::size_t steps_run = 0;
  bool diverged = false;
  std::string diagnostic;
};

// Trains on already prepared data. Never throws on divergence: the result
// carries the last good parameters and diverged = true.
TrainResult train_prepared(const RunConfig& config, const Prepared& data,
                           const std::string& tag = {});
TrainResult train(const RunConfig& config);

// Writes config.json, checkpoint.json, report.json, history.csv and a data/
// directory (id.csv plus one csv per OOD test set) under `dir`.
void write_run(const std::string& dir, const RunConfig& config, const Prepared& data,
               const TrainResult& result);

// Scores `dir`/id.csv against every other csv in `dir` (one OOD set per file,
// named by its stem, grouped by group_for). Files hold model-space features.
eval::EvalReport evaluate_directory(const models::Checkpoint& checkpoint, const std::string& dir);

// Table label: CD, SSM, VERA, NF, CE; "-S" for gamma = 1, "-g<gamma>" for
// other positive gammas; "-E" appended for embedding runs.
std::string run_tag(const std::string& objective, double gamma, bool embedded = false);

// ---- sweeps and pipelines ------------------------------------------------------------

inline const std::vector<double> kDefaultGammaGrid = {0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0};

struct SweepRow {
  double gamma = 0.0;
  std::uint64_t seed = 0;
  eval::EvalReport report;
};

// One run per (gamma, seed); seeds are base.seed, base.seed + 1, ...
std::vector<SweepRow> gamma_sweep(const RunConfig& base, const std::vector<double>& grid,
                                  std::size_t seeds);

// Classifier (objective ce) on the raw data, then the configured EBM on the
// embeddings. `classifier` overrides the ce training settings when given.
struct EmbeddingResult {
  TrainResult classifier;
  TrainResult ebm;
};
EmbeddingResult embedding_pipeline(const RunConfig& config,
                                   const std::optional<TrainConfig>& classifier = {});

// ---- diagnostics -------------------------------------------------------------------------

struct AscentRun {
  std::string curve_csv;  // x = step, value = mean log p~
  Tensor final_points;
  bool diverged = false;
  std::string provenance;
};

// Gradient ascent on log p~ from `points` noise rows ("noise") or the first
// ID-test rows ("id-test").
AscentRun likelihood_ascent_run(const models::Model& model, const Prepared& data, const std::string& start,
                                std::size_t points, std::size_t steps, double lr, std::uint64_t seed);

// Norm sweep about the ID-train mean. mode: held-out (directions through the
// ID-test rows), random (n_random unit vectors) or both.
std::string norm_diagnostic_csv(const models::Model& model, const Prepared& data,
                                const std::vector<double>& radii, const std::string& mode,
                                std::size_t n_random, std::uint64_t seed);

// ---- suite -------------------------------------------------------------------------------

struct SuiteSummary {
  std::vector<std::string> succeeded;
  std::vector<std::string> failed;  // "name: reason"
};

// Executes every run of the manifest into <out>/<run name>/, isolating
// failures, then writes aggregate.csv and improvement.csv.
SuiteSummary run_experiment_suite(const nlohmann::json& manifest, const std::string& out);

struct AggregateRow {
  std::string run, tag, ood_set, group;
  double auc_pr = 0.0;
};

// 100 * (AP_variant - AP_base) / AP_base per OOD set present in both.
struct Improvement {
  std::string variant, base, ood_set;
  double percent = 0.0;
};
std::vector<Improvement> relative_improvement(const std::vector<AggregateRow>& rows,
                                              const std::string& variant, const std::string& base);
std::string aggregate_csv(const std::vector<AggregateRow>& rows);
std::string improvement_csv(const std::vector<Improvement>& rows);

}  // namespace ebmlab::lab
