#include "ebmlab/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ebmlab/error.hpp"
#include "ebmlab/io.hpp"

namespace ebmlab::eval {

double average_precision(std::span<const int> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) throw ContractError("average_precision: length mismatch");
  std::size_t positives = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ContractError("average_precision: labels must be 0/1");
    if (std::isnan(scores[i])) throw NumericError("average_precision: NaN score", static_cast<std::ptrdiff_t>(i));
    positives += static_cast<std::size_t>(labels[i]);
  }
  if (positives == 0 || positives == labels.size()) {
    throw ContractError("average_precision needs at least one positive and one negative");
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

  const double p = static_cast<double>(positives);
  double ap = 0.0, prev_recall = 0.0;
  std::size_t tp = 0, seen = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      tp += static_cast<std::size_t>(labels[order[j]]);
      ++j;
    }
    seen = j;
    const double recall = static_cast<double>(tp) / p;
    ap += (recall - prev_recall) * static_cast<double>(tp) / static_cast<double>(seen);
    prev_recall = recall;
    i = j;
  }
  return ap;
}

double average_precision(std::span<const double> id_scores, std::span<const double> ood_scores) {
  std::vector<int> labels(id_scores.size(), 1);
  labels.resize(id_scores.size() + ood_scores.size(), 0);
  std::vector<double> scores(id_scores.begin(), id_scores.end());
  scores.insert(scores.end(), ood_scores.begin(), ood_scores.end());
  return average_precision(labels, scores);
}

ScoreSet score_dataset(const models::Model& model, const Tensor& features, const std::string& source) {
  ScoreSet s;
  s.source = source;
  if (model.spec.head == models::HeadKind::kFlow) {
    s.scores = models::flow_logdensity(model.spec, model.params, features).values();
  } else if (model.spec.head == models::HeadKind::kLogits) {
    const Tensor l = models::logits(model.spec, model.params, features);
    s.scores.reserve(l.rows());
    for (std::size_t i = 0; i < l.rows(); ++i) s.scores.push_back(models::jem_logdensity(l.row_span(i)));
  } else {
    s.scores = models::model_energy(model, features).values();
    for (auto& v : s.scores) v = -v;
  }
  return s;
}

std::string group_for(const std::string& kind) {
  if (kind == "noise" || kind == "constant" || kind == "oodomain" || kind == "uniform-box") {
    return kNonNatural;
  }
  return kNatural;
}

const OodResult* EvalReport::find(const std::string& ood_set) const {
  for (const auto& r : results) {
    if (r.ood_set == ood_set) return &r;
  }
  return nullptr;
}

std::optional<double> EvalReport::group_mean(const std::string& group) const {
  double s = 0.0;
  std::size_t n = 0;
  for (const auto& r : results) {
    if (r.group != group) continue;
    s += r.auc_pr;
    ++n;
  }
  if (n == 0) return std::nullopt;
  return s / static_cast<double>(n);
}

namespace {

nlohmann::json results_json(const std::vector<OodResult>& rs) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& r : rs) a.push_back({{"ood_set", r.ood_set}, {"auc_pr", r.auc_pr}, {"group", r.group}});
  return a;
}

std::vector<OodResult> results_from(const nlohmann::json& a) {
  std::vector<OodResult> out;
  for (const auto& r : a) {
    out.push_back({r.at("ood_set").get<std::string>(), r.at("auc_pr").get<double>(),
                   r.at("group").get<std::string>()});
  }
  return out;
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json run = {{"objective", r.run.objective},
                        {"gamma", r.run.gamma},
                        {"bottleneck", r.run.bottleneck ? nlohmann::json(*r.run.bottleneck) : nlohmann::json()},
                        {"seed", r.run.seed},
                        {"tag", r.run.tag}};
  return {{"format", "ebmlab-report"},
          {"version", EvalReport::kVersion},
          {"run", run},
          {"results", results_json(r.results)},
          {"selection",
           {{"score", r.selection.score}, {"step", r.selection.step}, {"per_set", results_json(r.selection.per_set)}}},
          {"metadata", r.metadata}};
}

EvalReport report_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "ebmlab-report") throw DataError("not an ebmlab report");
    const int version = j.at("version").get<int>();
    if (version != EvalReport::kVersion) {
      throw DataError("report version " + std::to_string(version) + " is not supported (expected " +
                      std::to_string(EvalReport::kVersion) + ")");
    }
    EvalReport r;
    const auto& run = j.at("run");
    r.run.objective = run.at("objective").get<std::string>();
    r.run.gamma = run.at("gamma").get<double>();
    if (!run.at("bottleneck").is_null()) r.run.bottleneck = run.at("bottleneck").get<double>();
    r.run.seed = run.at("seed").get<std::uint64_t>();
    r.run.tag = run.value("tag", std::string{});
    r.results = results_from(j.at("results"));
    const auto& sel = j.at("selection");
    r.selection.score = sel.at("score").get<double>();
    r.selection.step = sel.at("step").get<std::int64_t>();
    r.selection.per_set = results_from(sel.at("per_set"));
    r.metadata = j.value("metadata", nlohmann::json::object());
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
}

Selection selection_score(const models::Model& model, const Tensor& id_val,
                          std::span<const OodSet> val_sets) {
  Selection s;
  if (val_sets.empty()) return s;
  const auto id = score_dataset(model, id_val).scores;
  double total = 0.0;
  for (const auto& set : val_sets) {
    const auto ood = score_dataset(model, set.features).scores;
    const double ap = average_precision(id, ood);
    s.per_set.push_back({set.name, ap, set.group});
    total += ap;
  }
  s.score = total / static_cast<double>(val_sets.size());
  return s;
}

EvalReport ood_report(const models::Model& model, const Tensor& id_test,
                      std::span<const OodSet> test_sets, const Tensor& id_val,
                      std::span<const OodSet> val_sets, const RunInfo& run) {
  EvalReport r;
  r.run = run;
  const auto id = score_dataset(model, id_test).scores;
  for (const auto& set : test_sets) {
    const auto ood = score_dataset(model, set.features).scores;
    r.results.push_back({set.name, average_precision(id, ood), set.group});
  }
  r.selection = selection_score(model, id_val, val_sets);
  return r;
}

// ---- norm diagnostic ------------------------------------------------------------

Tensor directions_through(const Tensor& points, std::span<const double> anchor) {
  if (points.cols() != anchor.size()) throw ContractError("directions_through: dimension mismatch");
  std::vector<double> out;
  std::size_t n = 0;
  for (std::size_t i = 0; i < points.rows(); ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < anchor.size(); ++j) norm += std::pow(points(i, j) - anchor[j], 2);
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) continue;
    for (std::size_t j = 0; j < anchor.size(); ++j) out.push_back((points(i, j) - anchor[j]) / norm);
    ++n;
  }
  if (n == 0) throw ContractError("directions_through: every point coincides with the anchor");
  return Tensor({n, anchor.size()}, std::move(out));
}

Tensor random_directions(std::size_t n, std::size_t d, Rng& rng) {
  Tensor x({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    while (!(norm > 0.0)) {
      norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        x(i, j) = normal(rng);
        norm += x(i, j) * x(i, j);
      }
    }
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < d; ++j) x(i, j) /= norm;
  }
  return x;
}

NormCurve norm_sweep(const models::Model& model, std::span<const double> anchor,
                     const Tensor& directions, std::span<const double> radii) {
  if (directions.cols() != anchor.size()) throw ContractError("norm_sweep: dimension mismatch");
  for (std::size_t k = 0; k < radii.size(); ++k) {
    if (!(radii[k] >= 0.0) || (k > 0 && radii[k] < radii[k - 1])) {
      throw ContractError("norm_sweep: radii must be non-negative and ascending");
    }
  }
  NormCurve c;
  c.radii.assign(radii.begin(), radii.end());
  const std::size_t n = directions.rows(), d = anchor.size();
  for (double r : radii) {
    Tensor probes({n, d});
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < d; ++j) probes(i, j) = r == 0.0 ? anchor[j] : anchor[j] + r * directions(i, j);
    }
    const auto s = score_dataset(model, probes).scores;
    c.mean_logp.push_back(std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(n));
  }
  return c;
}

// ---- histograms ------------------------------------------------------------------

Histogram density_histogram(std::span<const ScoreSet> sets, std::size_t bins) {
  if (bins < 1) throw ContractError("density_histogram: bins must be >= 1");
  double lo = INFINITY, hi = -INFINITY;
  for (const auto& s : sets) {
    for (double v : s.scores) {
      if (!std::isfinite(v)) throw NumericError("density_histogram: non-finite score");
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  Histogram h;
  if (lo > hi) {
    lo = 0.0;
    hi = 1.0;
  } else if (lo == hi) {
    lo -= 0.5;
    hi += 0.5;
  }
  h.edges.resize(bins + 1);
  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t b = 0; b <= bins; ++b) h.edges[b] = lo + width * static_cast<double>(b);
  h.edges.back() = hi;
  for (const auto& s : sets) {
    h.series.push_back(s.source);
    std::vector<std::size_t> counts(bins, 0);
    for (double v : s.scores) {
      auto b = static_cast<std::size_t>((v - lo) / width);
      counts[std::min(b, bins - 1)]++;
    }
    h.counts.push_back(std::move(counts));
  }
  return h;
}

std::string curve_csv(std::span<const NormCurve> curves, std::span<const std::string> names) {
  if (curves.size() != names.size()) throw ContractError("curve_csv: one name per curve");
  std::string out = "x,value,series\n";
  for (std::size_t c = 0; c < curves.size(); ++c) {
    for (std::size_t k = 0; k < curves[c].radii.size(); ++k) {
      out += io::format_double(curves[c].radii[k]) + "," + io::format_double(curves[c].mean_logp[k]) +
             "," + names[c] + "\n";
    }
  }
  return out;
}

std::string histogram_csv(const Histogram& h) {
  std::string out = "x,value,series\n";
  for (std::size_t s = 0; s < h.series.size(); ++s) {
    for (std::size_t b = 0; b + 1 < h.edges.size(); ++b) {
      const double center = 0.5 * (h.edges[b] + h.edges[b + 1]);
      out += io::format_double(center) + "," + std::to_string(h.counts[s][b]) + "," + h.series[s] + "\n";
    }
  }
  return out;
}

}  // namespace ebmlab::eval
