// Command-line front end. Exit codes: 0 success, 1 configuration error,
// 2 runtime failure (bad data, divergence, numeric trouble).

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "ebmlab/data.hpp"
#include "ebmlab/error.hpp"
#include "ebmlab/eval.hpp"
#include "ebmlab/io.hpp"
#include "ebmlab/lab.hpp"
#include "ebmlab/model.hpp"
#include "ebmlab/rng.hpp"

using namespace ebmlab;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

std::vector<double> parse_list(const std::string& text, const std::string& what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError(what + ": '" + item + "' is not a number");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError(what + " is empty");
  return out;
}

std::string in_dir(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

void write_report(const std::string& out, const eval::EvalReport& r) {
  io::ensure_directory(out);
  io::write_text_atomic(in_dir(out, "report.json"), eval::to_json(r).dump(1) + "\n");
}

// Data of the run a checkpoint came from, rebuilt from its stored config.
lab::Prepared checkpoint_data(const models::Checkpoint& ckpt) {
  if (!ckpt.metadata.contains("config")) throw ConfigError("checkpoint carries no run config");
  const lab::RunConfig cfg = lab::config_from_json(ckpt.metadata.at("config"));
  lab::Prepared p = lab::prepare_data(cfg);
  if (p.bundle.id_train.dim() != ckpt.spec.input_dim) {
    throw ConfigError("checkpoint input dimension differs from its config's data (trained on derived features?)");
  }
  return p;
}

std::uint64_t checkpoint_seed(const models::Checkpoint& ckpt) {
  return ckpt.metadata.contains("config") ? ckpt.metadata.at("config").value("seed", std::uint64_t{0}) : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Energy-based models for out-of-distribution detection on tabular and toy data"};
  app.require_subcommand(1);
  std::string out = "out";

  auto* train = app.add_subcommand("train", "train one model from a JSON config");
  std::string config_path;
  train->add_option("--config", config_path, "run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "output directory (overrides the config)");

  auto* evaluate = app.add_subcommand("evaluate", "score a checkpoint against a data directory");
  std::string ckpt_path, data_dir;
  evaluate->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  evaluate->add_option("--data", data_dir, "directory with id.csv and one csv per OOD set")->required();
  evaluate->add_option("--out", out);

  auto* sweep = app.add_subcommand("sweep-gamma", "train one model per (gamma, seed)");
  std::string grid = "0,0.1,0.5,1,2,5,10";
  std::size_t seeds = 3;
  sweep->add_option("--config", config_path)->required()->check(CLI::ExistingFile);
  sweep->add_option("--grid", grid, "comma-separated gamma values");
  sweep->add_option("--seeds", seeds)->check(CLI::PositiveNumber);
  sweep->add_option("--out", out);

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset as CSV");
  std::string kind, input;
  std::size_t n = 1000, dim = 2, side = 16, pool = 2;
  std::uint64_t seed = 0;
  double noise = 0.1;
  gen->add_option("--kind", kind)
      ->required()
      ->check(CLI::IsMember({"noise", "constant", "oodomain", "smoothness", "two-moons"}));
  gen->add_option("--n", n, "rows")->check(CLI::PositiveNumber);
  gen->add_option("--dim", dim, "columns (noise, constant)")->check(CLI::PositiveNumber);
  gen->add_option("--side", side, "image side (smoothness)")->check(CLI::PositiveNumber);
  gen->add_option("--pool", pool, "pool size (smoothness)")->check(CLI::PositiveNumber);
  gen->add_option("--noise", noise, "Gaussian noise (two-moons)");
  gen->add_option("--input", input, "standardized csv to scale (oodomain)");
  gen->add_option("--seed", seed);
  gen->add_option("--out", out);

  auto* norm = app.add_subcommand("diagnose-norm", "mean log density along rays from the ID-train mean");
  std::string radii = "0,1,2,5,10,20,50", directions = "both";
  std::size_t n_directions = 100;
  norm->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  norm->add_option("--radii", radii, "comma-separated ascending radii");
  norm->add_option("--directions", directions)->check(CLI::IsMember({"held-out", "random", "both"}));
  norm->add_option("--n-directions", n_directions)->check(CLI::PositiveNumber);
  norm->add_option("--out", out);

  auto* ascend = app.add_subcommand("ascend", "gradient ascent on log density from noise or ID points");
  std::size_t steps = 100, points = 100;
  double lr = 0.01;
  std::string start = "noise";
  ascend->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  ascend->add_option("--steps", steps);
  ascend->add_option("--lr", lr)->check(CLI::PositiveNumber);
  ascend->add_option("--from", start)->check(CLI::IsMember({"noise", "id-test"}));
  ascend->add_option("--points", points)->check(CLI::PositiveNumber);
  ascend->add_option("--out", out);

  auto* suite = app.add_subcommand("suite", "run every experiment of a manifest");
  std::string manifest_path;
  suite->add_option("--manifest", manifest_path)->required()->check(CLI::ExistingFile);
  suite->add_option("--out", out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*train) {
      lab::RunConfig cfg = lab::load_config(config_path);
      if (train->count("--out") || cfg.out.empty()) cfg.out = out;
      const auto r = lab::train(cfg);
      std::cout << "selection " << r.report.selection.score << " at step " << r.report.selection.step << "\n";
      for (const auto& res : r.report.results) std::cout << res.ood_set << " " << res.auc_pr << "\n";
      if (r.diverged) {
        std::cerr << "training diverged: " << r.diagnostic << " (last good checkpoint kept)\n";
        return kRuntimeError;
      }
    } else if (*evaluate) {
      const auto report = lab::evaluate_directory(models::load_checkpoint(ckpt_path), data_dir);
      write_report(out, report);
      for (const auto& res : report.results) std::cout << res.ood_set << " " << res.auc_pr << "\n";
    } else if (*sweep) {
      lab::RunConfig cfg = lab::load_config(config_path);
      cfg.out = out;
      const auto rows = lab::gamma_sweep(cfg, parse_list(grid, "--grid"), seeds);
      std::cout << rows.size() << " runs written to " << out << "\n";
    } else if (*gen) {
      io::ensure_directory(out);
      Rng rng = make_stream(seed, Stream::kData);
      const std::string prov = "ebmlab gen-data " + kind + " seed " + std::to_string(seed);
      data::LabeledTable t;
      if (kind == "noise") {
        t = data::unlabeled(data::make_noise(n, dim, rng), kind);
      } else if (kind == "constant") {
        t = data::unlabeled(data::make_constant(n, dim, rng), kind);
      } else if (kind == "smoothness") {
        t = data::unlabeled(data::make_smoothness(n, side, pool, rng), kind);
      } else if (kind == "two-moons") {
        t = data::make_two_moons(n, noise, rng);
      } else {
        if (input.empty()) throw ConfigError("oodomain needs --input");
        t = data::unlabeled(data::make_oodomain(data::load_csv(input, {std::nullopt, ','}).features), kind);
      }
      data::write_csv(in_dir(out, kind + ".csv"), t, prov);
    } else if (*norm) {
      const auto ckpt = models::load_checkpoint(ckpt_path);
      const auto csv = lab::norm_diagnostic_csv(ckpt.model(), checkpoint_data(ckpt), parse_list(radii, "--radii"),
                                                directions, n_directions, checkpoint_seed(ckpt));
      io::ensure_directory(out);
      io::write_text_atomic(in_dir(out, "norm.csv"), csv);
    } else if (*ascend) {
      const auto ckpt = models::load_checkpoint(ckpt_path);
      const auto r = lab::likelihood_ascent_run(ckpt.model(), checkpoint_data(ckpt), start, points, steps, lr,
                                                checkpoint_seed(ckpt));
      io::ensure_directory(out);
      io::write_text_atomic(in_dir(out, "ascent.csv"), r.curve_csv);
      data::write_csv(in_dir(out, "ascent-final.csv"), data::unlabeled(r.final_points, "ascent"), r.provenance);
      if (r.diverged) {
        std::cerr << "ascent diverged; trajectory truncated\n";
        return kRuntimeError;
      }
    } else if (*suite) {
      nlohmann::json manifest;
      try {
        manifest = nlohmann::json::parse(io::read_text(manifest_path));
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(manifest_path + ": " + e.what());
      }
      const auto summary = lab::run_experiment_suite(manifest, out);
      std::cout << summary.succeeded.size() << " runs succeeded, " << summary.failed.size() << " failed\n";
      for (const auto& f : summary.failed) std::cerr << "failed: " << f << "\n";
      if (!summary.failed.empty()) return kRuntimeError;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return kOk;
}
