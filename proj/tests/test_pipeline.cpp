#include <doctest.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "hsi/hsio.hpp"
#include "hsi/metrics.hpp"
#include "hsi/pipeline.hpp"

using namespace hsi;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json small_config() {
  return json::parse(R"({
    "synth": {"n_scenes": 3, "rows": 96, "cols": 96, "channels": 16, "blob_scale": 8.0,
              "noisy_channel_indices": [3, 11], "seed": 5},
    "preprocess": {"tile_size": 32, "max_components": 8},
    "rf": {"n_trees": 8, "max_depth": 12},
    "cnn": {"arch": {"enc_channels": [4], "bottleneck_channels": 8, "tile": 32},
            "epochs": 3, "batch_size": 4},
    "evaluate": {"render": true}
  })");
}

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("hsi_pipeline_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

fs::path write_config(const fs::path& dir, const json& j) {
  const fs::path path = dir / "config.json";
  std::ofstream(path) << j.dump(2);
  return path;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json read_json(const fs::path& path) { return json::parse(slurp(path)); }

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(path));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(HSI_PIPELINE_EXE) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// One shared end-to-end run; later cases read its outputs.
const fs::path& shared_run() {
  static const fs::path root = [] {
    const fs::path dir = scratch("shared");
    const auto cfg = PipelineConfig::from_json(small_config());
    run_all(cfg, RunLayout{dir / "run"});
    return dir / "run";
  }();
  return root;
}

}  // namespace

TEST_CASE("every stage writes a run manifest whose outputs exist") {
  const RunLayout out{shared_run()};
  for (const fs::path& dir : {out.scenes(), out.archive(), out.rf(), out.maps(), out.cnn(), out.eval()}) {
    INFO(dir);
    const json m = read_json(dir / "run_manifest.json");
    CHECK(m.at("tool_version") == kToolVersion);
    CHECK(m.at("config") == small_config());
    CHECK(!m.at("outputs").empty());
    CHECK(m.at("timings_s").is_object());
    for (const auto& o : m.at("outputs")) CHECK(fs::exists(dir / o.get<std::string>()));
  }
  const json synth = read_json(out.scenes() / "run_manifest.json");
  CHECK(synth.at("seeds").contains("scene00"));
  const json rf = read_json(out.rf() / "run_manifest.json");
  CHECK(rf.at("inputs").size() == 1);
}

TEST_CASE("metrics table has forest and hybrid rows") {
  const auto rows = read_csv(RunLayout{shared_run()}.eval() / "metrics.csv");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0][0] == "model");
  CHECK(rows[1][0] == "rf");
  CHECK(rows[2][0] == "rf+cnn");
}

TEST_CASE("reported f1 equals the pooled confusion of the per-tile counts") {
  const RunLayout out{shared_run()};
  const json report = read_json(out.eval() / "report.json");
  for (const auto& [model, file] : {std::pair{"rf", "tile_f1_rf.csv"}, std::pair{"rf+cnn", "tile_f1_rf_cnn.csv"}}) {
    const auto rows = read_csv(out.eval() / file);
    REQUIRE(rows.size() == report.at("test_tiles").get<std::size_t>() + 1);
    ConfusionCounts pooled;
    for (std::size_t i = 1; i < rows.size(); ++i) {
      pooled.tp += std::stoll(rows[i][3]);
      pooled.fp += std::stoll(rows[i][4]);
      pooled.tn += std::stoll(rows[i][5]);
      pooled.fn += std::stoll(rows[i][6]);
    }
    const json& r = report.at(model);
    CHECK(pooled.tp == r.at("tp").get<std::int64_t>());
    CHECK(pooled.fn == r.at("fn").get<std::int64_t>());
    const double f1 = 2.0 * static_cast<double>(pooled.tp) /
                      static_cast<double>(2 * pooled.tp + pooled.fp + pooled.fn);
    CHECK(r.at("f1").get<double>() == doctest::Approx(f1).epsilon(1e-12));
  }
}

TEST_CASE("forest maps agree with per-pixel predictions") {
  const RunLayout out{shared_run()};
  const auto tiles = read_tile_archive(out.archive());
  const auto forest = load_forest(out.forest_file());
  const json maps = read_json(out.maps() / "maps.manifest.json");
  CHECK(maps.at("format") == "hsi-maps/1");
  std::size_t checked = 0;
  for (const auto& e : maps.at("tiles")) {
    const auto id = e.at("tile_id").get<std::int64_t>();
    const auto& tile = *std::find_if(tiles.begin(), tiles.end(), [&](const TileRecord& t) { return t.tile_id == id; });
    CHECK(tile.split != Split::Train);
    const auto map = read_probmap(out.maps() / e.at("map").get<std::string>());
    for (Index p : {Index{0}, Index{517}, tile.labels.size() - 1}) {
      std::vector<float> x(static_cast<std::size_t>(tile.channels()));
      for (Index c = 0; c < tile.channels(); ++c) x[static_cast<std::size_t>(c)] = tile.features(p, c);
      CHECK(map.data()[p] == static_cast<float>(predict_proba(forest, x)));
      ++checked;
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("two runs with one config are bit-identical") {
  const fs::path dir = scratch("determinism");
  const auto cfg = PipelineConfig::from_json(small_config());
  run_all(cfg, RunLayout{dir / "again"});
  const RunLayout a{shared_run()}, b{dir / "again"};
  std::size_t compared = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a.root)) {
    if (!entry.is_regular_file() || entry.path().filename() == "run_manifest.json") continue;
    const fs::path rel = fs::relative(entry.path(), a.root);
    INFO(rel);
    REQUIRE(fs::exists(b.root / rel));
    CHECK(slurp(entry.path()) == slurp(b.root / rel));
    ++compared;
  }
  CHECK(compared > 20);
}

TEST_CASE("later stages refuse inputs from a different archive") {
  const fs::path dir = scratch("stale");
  json j = small_config();
  const RunLayout out{dir / "run"};
  run_all(PipelineConfig::from_json(j), out);

  // A new split changes the archive hash; old maps and forest are now stale.
  j["preprocess"]["split"] = {{"seed", 13}};
  const auto changed = PipelineConfig::from_json(j);
  stage_preprocess(changed, out);
  CHECK_THROWS_AS(stage_predict_rf(changed, out), DataError);
  CHECK_THROWS_AS(stage_train_cnn(changed, out), DataError);
  CHECK_THROWS_AS(stage_evaluate(changed, out), DataError);

  stage_train_rf(changed, out);
  stage_predict_rf(changed, out);
  CHECK_THROWS_AS(stage_evaluate(changed, out), DataError);  // CNN still stale
  stage_train_cnn(changed, out);
  CHECK_NOTHROW(stage_evaluate(changed, out));
}

TEST_CASE("cnn training refuses maps of forest-training tiles") {
  const fs::path dir = scratch("leak");
  const auto cfg = PipelineConfig::from_json(small_config());
  const RunLayout out{dir / "run"};
  stage_synth(cfg, out);
  stage_preprocess(cfg, out);
  stage_train_rf(cfg, out);
  stage_predict_rf(cfg, out, {Split::Train, Split::Val, Split::Test});
  CHECK_THROWS_AS(stage_train_cnn(cfg, out), DataError);
}

TEST_CASE("evaluate needs maps for every test tile") {
  const fs::path dir = scratch("partial");
  const auto cfg = PipelineConfig::from_json(small_config());
  const RunLayout out{dir / "run"};
  stage_synth(cfg, out);
  stage_preprocess(cfg, out);
  stage_train_rf(cfg, out);
  stage_predict_rf(cfg, out, {Split::Val});
  CHECK_THROWS_AS(stage_evaluate(cfg, out), DataError);
}

TEST_CASE("config validation") {
  CHECK_THROWS_AS(PipelineConfig::from_json(json::array()), ConfigError);
  json j = small_config();
  j["cnn"]["arch"]["tile"] = 64;
  CHECK_THROWS_AS(PipelineConfig::from_json(j), ConfigError);
  j = small_config();
  j["rf"]["n_trees"] = "many";
  CHECK_THROWS_AS(PipelineConfig::from_json(j), ConfigError);
  j = small_config();
  j["evaluate"]["threshold"] = 1.5;
  CHECK_THROWS_AS(PipelineConfig::from_json(j), ConfigError);
  j = small_config();
  j["preprocess"]["inputs"] = {{{"cube", "a.hsc.json"}, {"mask", "a.mask.pgm"}}};
  const auto cfg = PipelineConfig::from_json(j, "/data");
  REQUIRE(cfg.inputs.size() == 1);
  CHECK(cfg.inputs[0].cube == fs::path("/data/a.hsc.json"));
}

TEST_CASE("command line exit codes") {
  const fs::path dir = scratch("cli");
  const fs::path cfg = write_config(dir, small_config());
  const std::string out = " --out " + (dir / "run").string();

  CHECK(run_cli("") == 2);
  CHECK(run_cli("bogus --config " + cfg.string()) == 2);
  CHECK(run_cli("synth --config " + (dir / "missing.json").string() + out) == 2);
  std::ofstream(dir / "broken.json") << "{ not json";
  CHECK(run_cli("synth --config " + (dir / "broken.json").string() + out) == 2);

  CHECK(run_cli("preprocess --config " + cfg.string() + out) == 3);  // no scenes yet
  CHECK(run_cli("synth --config " + cfg.string() + out) == 0);
  CHECK(run_cli("preprocess --config " + cfg.string() + out) == 0);
  CHECK(run_cli("train-rf --config " + cfg.string() + out) == 0);
  CHECK(run_cli("predict-rf --splits val test nonsense --config " + cfg.string() + out) == 2);
  CHECK(run_cli("predict-rf --config " + cfg.string() + out) == 0);
  CHECK(fs::exists(dir / "run" / "rf_maps" / "run_manifest.json"));

  json diverge = small_config();
  diverge["cnn"]["learning_rate"] = 1e30;
  const fs::path bad = dir / "diverge";
  fs::create_directories(bad);
  CHECK(run_cli("train-cnn --config " + write_config(bad, diverge).string() + out) == 4);

  CHECK(run_cli("train-cnn --config " + cfg.string() + out) == 0);
  CHECK(run_cli("evaluate --config " + cfg.string() + out) == 0);
  CHECK(fs::exists(dir / "run" / "eval" / "report.txt"));
}
