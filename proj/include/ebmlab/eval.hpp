#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ebmlab/model.hpp"
#include "ebmlab/rng.hpp"
#include "ebmlab/tensor.hpp"
#include "json.hpp"

namespace ebmlab::eval {

// Area under the precision-recall curve with label 1 = ID (positive).
// Scores are sorted descending and tied scores form one block:
//   AP = sum_k (R_k - R_{k-1}) P_k over the block boundaries.
double average_precision(std::span<const int> labels, std::span<const double> scores);
// Convenience: ID scores are positives, OOD scores negatives.
double average_precision(std::span<const double> id_scores, std::span<const double> ood_scores);

struct ScoreSet {
  std::vector<double> scores;  // log p~ per row, higher = more in-distribution
  std::string source;
};

// -E per row; logsumexp of the logits for logits heads, log density for flows.
ScoreSet score_dataset(const models::Model& model, const Tensor& features,
                       const std::string& source = {});

inline constexpr const char* kNatural = "natural";
inline constexpr const char* kNonNatural = "non-natural";

struct OodSet {
  std::string name;
  std::string group;  // kNatural or kNonNatural
  Tensor features;
};

// "noise", "constant", "oodomain" and "uniform-box" are non-natural; anything
// else natural.
std::string group_for(const std::string& kind);

struct RunInfo {
  std::string objective;
  double gamma = 0.0;
  std::optional<double> bottleneck;
  std::uint64_t seed = 0;
  std::string tag;  // table label, e.g. "CD-S"
  bool operator==(const RunInfo&) const = default;
};

struct OodResult {
  std::string ood_set;
  double auc_pr = 0.0;
  std::string group;
  bool operator==(const OodResult&) const = default;
};

struct Selection {
  double score = 0.0;  // mean AP over the validation OOD sets
  std::vector<OodResult> per_set;
  std::int64_t step = -1;
  bool operator==(const Selection&) const = default;
};

struct EvalReport {
  static constexpr int kVersion = 1;
  RunInfo run;
  std::vector<OodResult> results;
  Selection selection;
  nlohmann::json metadata = nlohmann::json::object();
  bool operator==(const EvalReport&) const = default;

  const OodResult* find(const std::string& ood_set) const;
  // Mean AP over results of one group; nullopt when the group is absent.
  std::optional<double> group_mean(const std::string& group) const;
};

nlohmann::json to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);

// Mean AP of id_val against each validation OOD set.
Selection selection_score(const models::Model& model, const Tensor& id_val,
                          std::span<const OodSet> val_sets);

// One AP per test OOD set against id_test, plus the selection entry.
EvalReport ood_report(const models::Model& model, const Tensor& id_test,
                      std::span<const OodSet> test_sets, const Tensor& id_val,
                      std::span<const OodSet> val_sets, const RunInfo& run = {});

// ---- norm diagnostic ------------------------------------------------------------

// Unit vectors from the anchor through each point; points at the anchor are
// skipped.
Tensor directions_through(const Tensor& points, std::span<const double> anchor);
Tensor random_directions(std::size_t n, std::size_t d, Rng& rng);

struct NormCurve {
  std::vector<double> radii;
  std::vector<double> mean_logp;
  std::string direction_mode;
};

// Mean log p~ over probes anchor + r * direction for each radius r.
NormCurve norm_sweep(const models::Model& model, std::span<const double> anchor,
                     const Tensor& directions, std::span<const double> radii);

// ---- histograms ------------------------------------------------------------------

struct Histogram {
  std::vector<double> edges;  // bins + 1 shared edges
  std::vector<std::string> series;
  std::vector<std::vector<std::size_t>> counts;  // per series, per bin
};

Histogram density_histogram(std::span<const ScoreSet> sets, std::size_t bins);

// CSV with columns x,value,series.
std::string curve_csv(std::span<const NormCurve> curves, std::span<const std::string> names);
std::string histogram_csv(const Histogram& h);

}  // namespace ebmlab::eval
