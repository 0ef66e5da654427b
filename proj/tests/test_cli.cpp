#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include <sys/wait.h>

#include "doctest.h"
#include "ebmlab/io.hpp"
#include "json.hpp"
#include "test_support.hpp"

using ebmlab::testing::TempDir;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Exit status of `ebmlab <args>`, output discarded.
int cli(const std::string& args) {
  const std::string cmd = std::string(EBMLAB_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(); }

json tiny_config() {
  return {{"version", 1},
          {"objective", "cd"},
          {"seed", 2},
          {"data", {{"source", "two-moons"}, {"n", 200}}},
          {"model", {{"input_dim", 2}, {"hidden", {8}}, {"head", "energy"}}},
          {"train", {{"steps", 20}, {"warmup", 5}, {"eval_every", 10}, {"batch_size", 16}, {"sgld", {{"steps", 3}}}}}};
}

}  // namespace

TEST_CASE("usage errors exit with 1, help with 0") {
  CHECK(cli("") == 1);
  CHECK(cli("--help") == 0);
  CHECK(cli("no-such-command") == 1);
  CHECK(cli("train") == 1);
  CHECK(cli("train --config /does/not/exist.json") == 1);
}

TEST_CASE("bad configs exit with 1") {
  TempDir dir;
  json c = tiny_config();
  c["surprise"] = true;
  write_json(dir.path / "bad.json", c);
  CHECK(cli("train --config " + (dir.path / "bad.json").string() + " --out " + dir.str()) == 1);
  std::ofstream(dir.path / "garbled.json") << "{ not json";
  CHECK(cli("train --config " + (dir.path / "garbled.json").string()) == 1);
}

TEST_CASE("train, evaluate and diagnostics through the command line") {
  TempDir dir;
  write_json(dir.path / "run.json", tiny_config());
  const fs::path run = dir.path / "run";
  REQUIRE(cli("train --config " + (dir.path / "run.json").string() + " --out " + run.string()) == 0);
  CHECK(fs::exists(run / "report.json"));
  CHECK(fs::exists(run / "checkpoint.json"));
  CHECK(fs::exists(run / "history.csv"));

  const fs::path eval = dir.path / "eval";
  REQUIRE(cli("evaluate --checkpoint " + (run / "checkpoint.json").string() + " --data " + (run / "data").string() +
              " --out " + eval.string()) == 0);
  const auto original = json::parse(ebmlab::io::read_text((run / "report.json").string()));
  const auto again = json::parse(ebmlab::io::read_text((eval / "report.json").string()));
  CHECK(again.at("results") == original.at("results"));

  const fs::path norm = dir.path / "norm";
  CHECK(cli("diagnose-norm --checkpoint " + (run / "checkpoint.json").string() + " --radii 0,5,50 --out " +
            norm.string()) == 0);
  CHECK(fs::exists(norm / "norm.csv"));
  CHECK(cli("diagnose-norm --checkpoint " + (run / "checkpoint.json").string() + " --radii 0,x --out " +
            norm.string()) == 1);

  const fs::path climb = dir.path / "climb";
  CHECK(cli("ascend --checkpoint " + (run / "checkpoint.json").string() + " --steps 5 --points 10 --out " +
            climb.string()) == 0);
  CHECK(fs::exists(climb / "ascent.csv"));
}

TEST_CASE("divergence exits with 2") {
  TempDir dir;
  json c = tiny_config();
  c["train"]["sgld"]["noise_std"] = 1e308;
  write_json(dir.path / "hot.json", c);
  CHECK(cli("train --config " + (dir.path / "hot.json").string() + " --out " + (dir.path / "hot").string()) == 2);
}

TEST_CASE("gen-data writes its csv") {
  TempDir dir;
  CHECK(cli("gen-data --kind noise --n 10 --dim 3 --out " + dir.str()) == 0);
  CHECK(fs::exists(dir.path / "noise.csv"));
  CHECK(cli("gen-data --kind smoothness --n 4 --side 12 --pool 3 --out " + dir.str()) == 0);
  CHECK(cli("gen-data --kind smoothness --n 4 --side 12 --pool 5 --out " + dir.str()) == 1);
  CHECK(cli("gen-data --kind oodomain --out " + dir.str()) == 1);
  CHECK(cli("gen-data --kind oodomain --input " + (dir.path / "noise.csv").string() + " --out " + dir.str()) == 0);
  CHECK(fs::exists(dir.path / "oodomain.csv"));
}

TEST_CASE("suite exit status reflects failed runs") {
  TempDir dir;
  json bad = tiny_config();
  bad["train"]["sgld"]["step_size"] = -1.0;
  write_json(dir.path / "ok.json", {{"version", 1}, {"runs", {{{"name", "a"}, {"kind", "train"}, {"config", tiny_config()}}}}});
  write_json(dir.path / "bad.json", {{"version", 1},
                                     {"runs",
                                      {{{"name", "a"}, {"kind", "train"}, {"config", tiny_config()}},
                                       {{"name", "b"}, {"kind", "train"}, {"config", bad}}}}});
  CHECK(cli("suite --manifest " + (dir.path / "ok.json").string() + " --out " + (dir.path / "ok").string()) == 0);
  CHECK(fs::exists(dir.path / "ok/aggregate.csv"));
  CHECK(cli("suite --manifest " + (dir.path / "bad.json").string() + " --out " + (dir.path / "bad").string()) == 2);
  CHECK(fs::exists(dir.path / "bad/a/report.json"));
}
