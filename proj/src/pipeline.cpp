#include "hsi/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <unordered_map>

#include "hsi/hsio.hpp"
#include "hsi/metrics.hpp"
#include "hsi/rng.hpp"

namespace hsi {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw DataError("write failed: " + path.string());
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError("malformed " + path.string() + ": " + e.what());
  }
}

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

void fresh_dir(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
}

std::string scene_name(Index i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene%02lld", static_cast<long long>(i));
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

PipelineConfig PipelineConfig::from_json(const json& j, const fs::path& base_dir) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  PipelineConfig cfg;
  cfg.source = j;
  try {
    const json empty = json::object();
    const json& synth = j.contains("synth") ? j.at("synth") : empty;
    cfg.synth.n_scenes = synth.value("n_scenes", cfg.synth.n_scenes);
    cfg.synth.profile_seed = synth.value("profile_seed", cfg.synth.profile_seed);
    cfg.synth.scene = SceneConfig::from_json(synth);
    if (cfg.synth.n_scenes < 1) throw ConfigError("synth.n_scenes must be >= 1");

    const json& pre = j.contains("preprocess") ? j.at("preprocess") : empty;
    cfg.preprocess = PreprocessConfig::from_json(pre);
    cfg.allow_nonfinite = pre.value("allow_nonfinite", false);
    if (pre.contains("inputs")) {
      for (const json& item : pre.at("inputs")) {
        const fs::path cube = item.at("cube").get<std::string>();
        const fs::path mask = item.at("mask").get<std::string>();
        cfg.inputs.push_back({cube.is_absolute() ? cube : base_dir / cube, mask.is_absolute() ? mask : base_dir / mask});
      }
    }

    cfg.rf = ForestParams::from_json(j.contains("rf") ? j.at("rf") : empty);

    const json& cnn = j.contains("cnn") ? j.at("cnn") : empty;
    cfg.cnn_arch = CnnArch::from_json(cnn.contains("arch") ? cnn.at("arch") : empty);
    cfg.cnn_train = TrainConfig::from_json(cnn);

    const json& ev = j.contains("evaluate") ? j.at("evaluate") : empty;
    cfg.evaluate.threshold = ev.value("threshold", cfg.evaluate.threshold);
    cfg.evaluate.use_cnn = ev.value("use_cnn", cfg.evaluate.use_cnn);
    cfg.evaluate.render = ev.value("render", cfg.evaluate.render);
    if (!(cfg.evaluate.threshold >= 0.0 && cfg.evaluate.threshold <= 1.0)) {
      throw ConfigError("evaluate.threshold must lie in [0,1]");
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (cfg.cnn_arch.tile != cfg.preprocess.tile_size) {
    throw ConfigError("cnn.arch.tile must equal preprocess.tile_size");
  }
  return cfg;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError("malformed config " + path.string() + ": " + e.what());
  }
  return from_json(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Run manifest

RunManifest::RunManifest(std::string stage, const PipelineConfig& cfg)
    : stage_(std::move(stage)), config_(cfg.source) {}

void RunManifest::input(const fs::path& path) { inputs_[path.string()] = file_hash(path); }

void RunManifest::output(const fs::path& path) { outputs_.push_back(path.string()); }

void RunManifest::seed(const std::string& name, std::uint64_t value) { seeds_[name] = value; }

void RunManifest::timing(const std::string& step, double seconds) { timings_[step] = seconds; }

void RunManifest::write(const fs::path& dir) const {
  json outputs = json::array();
  for (const auto& o : outputs_) {
    if (!fs::exists(o)) throw DataError("run manifest: declared output " + o + " does not exist");
    outputs.push_back(fs::path(o).lexically_relative(dir).string());
  }
  write_json(dir / "run_manifest.json", {{"stage", stage_},
                                         {"tool_version", kToolVersion},
                                         {"config", config_},
                                         {"inputs", inputs_},
                                         {"outputs", outputs},
                                         {"seeds", seeds_},
                                         {"timings_s", timings_},
                                         {"summary", summary_}});
}

std::string archive_hash(const fs::path& archive_dir) {
  std::string combined;
  for (const char* name : {"tiles.manifest.json", "scaler.json", "pca.json"}) combined += file_hash(archive_dir / name);
  // Fold the three digests into one, FNV-1a style.
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (char ch : combined) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001B3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// synth

json stage_synth(const PipelineConfig& cfg, const RunLayout& out) {
  Stopwatch clock;
  RunManifest manifest("synth", cfg);
  const fs::path dir = out.scenes();
  fresh_dir(dir);

  const auto profile = default_profile(cfg.synth.scene.channels, cfg.synth.profile_seed);
  manifest.seed("profile_seed", cfg.synth.profile_seed);
  json scenes = json::array();
  for (Index i = 0; i < cfg.synth.n_scenes; ++i) {
    SceneConfig sc = cfg.synth.scene;
    sc.seed = derive_seed(cfg.synth.scene.seed, static_cast<std::uint64_t>(i));
    auto scene = generate_scene(sc, profile);
    const std::string name = scene_name(i);
    scene.cube.name = name;
    write_cube(scene.cube, dir / name);
    write_mask(scene.mask, dir / (name + ".mask.pgm"));
    manifest.output(dir / (name + ".hsc.json"));
    manifest.output(dir / (name + ".hsc.raw"));
    manifest.output(dir / (name + ".mask.pgm"));
    manifest.seed(name, sc.seed);

    const LabelMask recount = read_mask(dir / (name + ".mask.pgm"));
    const double oil = static_cast<double>((recount.array() != 0).count()) / static_cast<double>(recount.size());
    scenes.push_back({{"name", name},
                      {"cube", name + ".hsc.json"},
                      {"mask", name + ".mask.pgm"},
                      {"seed", sc.seed},
                      {"rows", sc.rows},
                      {"cols", sc.cols},
                      {"channels", sc.channels},
                      {"oil_fraction", oil}});
  }
  const json summary = {{"profile_seed", cfg.synth.profile_seed},
                        {"noisy_channel_indices", cfg.synth.scene.noisy_channel_indices},
                        {"scenes", scenes}};
  write_json(dir / "scenes.json", summary);
  manifest.output(dir / "scenes.json");
  manifest.summary() = summary;
  manifest.timing("total", clock.lap());
  manifest.write(dir);
  return summary;
}

// ---------------------------------------------------------------------------
// preprocess

json stage_preprocess(const PipelineConfig& cfg, const RunLayout& out) {
  Stopwatch clock;
  RunManifest manifest("preprocess", cfg);
  std::vector<InputPair> inputs = cfg.inputs;
  if (inputs.empty()) {
    const json scenes = read_json_file(out.scenes() / "scenes.json");
    try {
      for (const json& s : scenes.at("scenes")) {
        inputs.push_back({out.scenes() / s.at("cube").get<std::string>(), out.scenes() / s.at("mask").get<std::string>()});
      }
    } catch (const json::exception& e) {
      throw DataError(std::string("malformed scenes.json: ") + e.what());
    }
  }
  if (inputs.empty()) throw DataError("preprocess: no input scenes");

  std::vector<HsiCube> cubes;
  std::vector<LabelMask> masks;
  for (const auto& in : inputs) {
    cubes.push_back(read_cube(in.cube, {.allow_nonfinite = cfg.allow_nonfinite}));
    masks.push_back(read_mask(in.mask));
    check_pairing(cubes.back(), masks.back());
    const fs::path stem = strip_suffix(in.cube);
    manifest.input(fs::path(stem.string() + ".hsc.json"));
    manifest.input(fs::path(stem.string() + ".hsc.raw"));
    manifest.input(in.mask);
  }
  manifest.timing("read", clock.lap());

  const auto result = run_preprocess(cubes, masks, cfg.preprocess);
  cubes.clear();
  manifest.timing("transform", clock.lap());

  const fs::path dir = out.archive();
  fresh_dir(dir);
  write_json(dir / "scaler.json", scaler_to_json(result.scaler));
  write_json(dir / "pca.json", pca_to_json(result.pca));
  write_tile_archive(dir, result.tiles, {{"stage_counts", result.stage_counts}});
  for (const char* f : {"tiles.manifest.json", "scaler.json", "pca.json"}) manifest.output(dir / f);
  manifest.seed("split_seed", cfg.preprocess.split.seed);
  manifest.seed("augment_seed", cfg.preprocess.augment.seed);
  manifest.timing("write", clock.lap());

  json summary = result.stage_counts;
  summary["archive_hash"] = archive_hash(dir);
  manifest.summary() = summary;
  manifest.write(dir);
  return summary;
}

// ---------------------------------------------------------------------------
// train-rf / predict-rf

json stage_train_rf(const PipelineConfig& cfg, const RunLayout& out) {
  Stopwatch clock;
  RunManifest manifest("train-rf", cfg);
  json archive_manifest;
  const auto tiles = read_tile_archive(out.archive(), &archive_manifest);
  const std::string hash = archive_hash(out.archive());
  manifest.input(out.archive() / "tiles.manifest.json");

  std::vector<TileRecord> train;
  json train_ids = json::array();
  for (const auto& t : tiles) {
    if (t.split != Split::Train) continue;
    train.push_back(t);
    train_ids.push_back(t.tile_id);
  }
  std::int64_t pixels = 0, oil = 0;
  for (const auto& t : train) {
    for (Index p = 0; p < t.labels.size(); ++p) {
      if (cfg.rf.exclude_padded && t.pad_mask.data()[p]) continue;
      ++pixels;
      oil += t.labels.data()[p] != 0;
    }
  }
  manifest.timing("read", clock.lap());

  const auto model = train_forest(train, cfg.rf);
  manifest.timing("train", clock.lap());

  fs::create_directories(out.rf());
  save_forest(model, out.forest_file());
  double depth_sum = 0.0, node_sum = 0.0;
  for (const auto& tree : model.trees) {
    depth_sum += static_cast<double>(tree.depth());
    node_sum += static_cast<double>(tree.nodes.size());
  }
  const double n_trees = static_cast<double>(model.trees.size());
  const double balance = pixels ? static_cast<double>(oil) / static_cast<double>(pixels) : 0.0;
  json summary = {{"archive_hash", hash},
                  {"train_tiles", train.size()},
                  {"training_pixels", pixels},
                  {"oil_pixels", oil},
                  {"oil_fraction", balance},
                  {"archive_train_oil_fraction",
                   archive_manifest.at("stage_counts").at("oil_pixel_fraction").at("train")},
                  {"mean_tree_depth", depth_sum / n_trees},
                  {"mean_tree_nodes", node_sum / n_trees},
                  {"train_tile_ids", train_ids}};
  write_json(out.rf() / "train.json", summary);
  std::clog << "train-rf: " << pixels << " training pixels, oil fraction " << balance << "\n";

  manifest.output(out.forest_file());
  manifest.output(out.rf() / "train.json");
  manifest.seed("forest_seed", cfg.rf.seed);
  manifest.timing("write", clock.lap());
  summary.erase("train_tile_ids");
  manifest.summary() = summary;
  manifest.write(out.rf());
  return summary;
}

json stage_predict_rf(const PipelineConfig& cfg, const RunLayout& out, const std::vector<Split>& splits) {
  Stopwatch clock;
  RunManifest manifest("predict-rf", cfg);
  const auto tiles = read_tile_archive(out.archive());
  const std::string hash = archive_hash(out.archive());
  const json rf_meta = read_json_file(out.rf() / "train.json");
  if (rf_meta.value("archive_hash", "") != hash) {
    throw DataError("predict-rf: forest was trained on a different archive; rerun train-rf");
  }
  const auto model = load_forest(out.forest_file());
  manifest.input(out.forest_file());
  manifest.input(out.archive() / "tiles.manifest.json");

  const fs::path dir = out.maps();
  fresh_dir(dir);
  json entries = json::array();
  json counts = json::object();
  json split_names = json::array();
  for (Split s : splits) {
    split_names.push_back(to_string(s));
    counts[to_string(s)] = 0;
  }
  for (const auto& t : tiles) {
    if (std::find(splits.begin(), splits.end(), t.split) == splits.end()) continue;
    const std::string stem = tile_stem(t.tile_id);
    write_probmap(predict_map(model, t), dir / stem);
    manifest.output(dir / (stem + ".pmap.json"));
    manifest.output(dir / (stem + ".pmap.raw"));
    entries.push_back({{"tile_id", t.tile_id}, {"split", to_string(t.split)}, {"map", stem}});
    counts[to_string(t.split)] = counts[to_string(t.split)].get<int>() + 1;
  }
  write_json(dir / "maps.manifest.json", {{"format", "hsi-maps/1"},
                                          {"archive_hash", hash},
                                          {"forest_hash", file_hash(out.forest_file())},
                                          {"splits", split_names},
                                          {"tiles", entries}});
  manifest.output(dir / "maps.manifest.json");
  manifest.timing("predict", clock.lap());
  const json summary = {{"archive_hash", hash}, {"maps_per_split", counts}};
  manifest.summary() = summary;
  manifest.write(dir);
  return summary;
}

// ---------------------------------------------------------------------------
// train-cnn / evaluate

namespace {

struct MapSet {
  json manifest;
  std::vector<CnnExample> examples;
  std::vector<Split> splits;
};

// Loads every map listed in the maps manifest, paired with archive labels.
MapSet load_maps(const RunLayout& out, const std::vector<TileRecord>& tiles, const std::string& hash) {
  MapSet set;
  set.manifest = read_json_file(out.maps() / "maps.manifest.json");
  if (set.manifest.value("archive_hash", "") != hash) {
    throw DataError("probability maps do not match the current tile archive; rerun predict-rf");
  }
  std::unordered_map<std::int64_t, const TileRecord*> by_id;
  for (const auto& t : tiles) by_id[t.tile_id] = &t;
  try {
    for (const json& e : set.manifest.at("tiles")) {
      const auto id = e.at("tile_id").get<std::int64_t>();
      const auto it = by_id.find(id);
      if (it == by_id.end()) throw DataError("maps manifest lists unknown tile " + std::to_string(id));
      const TileRecord& t = *it->second;
      CnnExample ex{id, read_probmap(out.maps() / e.at("map").get<std::string>()), t.labels, t.pad_mask};
      if (ex.input.rows() != t.side() || ex.input.cols() != t.side()) {
        throw DataError("map for tile " + std::to_string(id) + " has the wrong shape");
      }
      set.examples.push_back(std::move(ex));
      set.splits.push_back(t.split);
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed maps manifest: ") + e.what());
  }
  return set;
}

std::vector<std::int64_t> train_ids(const std::vector<TileRecord>& tiles) {
  std::vector<std::int64_t> ids;
  for (const auto& t : tiles) {
    if (t.split == Split::Train) ids.push_back(t.tile_id);
  }
  return ids;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

json report_json(const MetricsReport& r) {
  return {{"accuracy", r.accuracy}, {"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1},
          {"auc", r.auc},           {"threshold", r.threshold}, {"pixels", r.pixel_count},
          {"tp", r.counts.tp},      {"fp", r.counts.fp},        {"tn", r.counts.tn},   {"fn", r.counts.fn}};
}

}  // namespace

json stage_train_cnn(const PipelineConfig& cfg, const RunLayout& out) {
  Stopwatch clock;
  RunManifest manifest("train-cnn", cfg);
  const auto tiles = read_tile_archive(out.archive());
  const std::string hash = archive_hash(out.archive());
  auto maps = load_maps(out, tiles, hash);
  manifest.input(out.maps() / "maps.manifest.json");
  manifest.input(out.archive() / "tiles.manifest.json");

  std::vector<CnnExample> pool, test;
  for (std::size_t i = 0; i < maps.examples.size(); ++i) {
    (maps.splits[i] == Split::Test ? test : pool).push_back(std::move(maps.examples[i]));
  }
  const auto rf_ids = train_ids(tiles);
  const auto data = make_cnn_dataset(std::move(pool), std::move(test), cfg.cnn_train.split_seed, rf_ids);
  if (data.train.empty()) throw DataError("train-cnn: too few validation maps for a CNN training set");
  manifest.timing("read", clock.lap());

  const auto result = train_cnn(init_model<float>(cfg.cnn_arch, cfg.cnn_train.init_seed), data.train, data.val,
                                cfg.cnn_train);
  manifest.timing("train", clock.lap());

  fs::create_directories(out.cnn());
  save_cnn(result.best, out.cnn_model());
  {
    std::ofstream log(out.cnn() / "epoch_log.csv", std::ios::binary);
    if (!log) throw DataError("cannot write epoch log");
    log << "epoch,train_loss,val_auc,val_loss\n";
    for (const auto& row : result.log) {
      log << row.epoch << ',' << fmt(row.train_loss) << ',' << (std::isnan(row.val_auc) ? "nan" : fmt(row.val_auc))
          << ',' << fmt(row.val_loss) << '\n';
    }
  }
  json cnn_train = json::array(), cnn_val = json::array();
  for (const auto& ex : data.train) cnn_train.push_back(ex.tile_id);
  for (const auto& ex : data.val) cnn_val.push_back(ex.tile_id);
  const auto& best = result.log[static_cast<std::size_t>(result.best_epoch - 1)];
  json summary = {{"archive_hash", hash},
                  {"maps_hash", file_hash(out.maps() / "maps.manifest.json")},
                  {"epochs_run", result.log.size()},
                  {"best_epoch", result.best_epoch},
                  {"best_val_auc", std::isnan(best.val_auc) ? json(nullptr) : json(best.val_auc)},
                  {"best_val_loss", best.val_loss},
                  {"cnn_train_tiles", cnn_train},
                  {"cnn_val_tiles", cnn_val}};
  write_json(out.cnn() / "train.json", summary);
  for (const char* f : {"model.cnn.json", "model.cnn.raw", "epoch_log.csv", "train.json"}) {
    manifest.output(out.cnn() / f);
  }
  manifest.seed("init_seed", cfg.cnn_train.init_seed);
  manifest.seed("shuffle_seed", cfg.cnn_train.seed);
  manifest.seed("split_seed", cfg.cnn_train.split_seed);
  manifest.timing("write", clock.lap());
  manifest.summary() = summary;
  manifest.write(out.cnn());
  return summary;
}

json stage_evaluate(const PipelineConfig& cfg, const RunLayout& out) {
  Stopwatch clock;
  RunManifest manifest("evaluate", cfg);
  const auto tiles = read_tile_archive(out.archive());
  const std::string hash = archive_hash(out.archive());
  auto maps = load_maps(out, tiles, hash);
  manifest.input(out.maps() / "maps.manifest.json");

  std::vector<CnnExample> test;
  for (std::size_t i = 0; i < maps.examples.size(); ++i) {
    if (maps.splits[i] == Split::Test) test.push_back(std::move(maps.examples[i]));
  }
  Index test_tiles = 0;
  for (const auto& t : tiles) test_tiles += t.split == Split::Test;
  if (static_cast<Index>(test.size()) != test_tiles || test.empty()) {
    throw DataError("evaluate: maps cover " + std::to_string(test.size()) + " of " + std::to_string(test_tiles) +
                    " test tiles; run predict-rf for the test split");
  }

  std::vector<ProbabilityMap> rf_maps;
  std::vector<LabelMask> truths, pads;
  std::vector<std::int64_t> ids;
  for (const auto& ex : test) {
    rf_maps.push_back(ex.input);
    truths.push_back(ex.labels);
    pads.push_back(ex.pad_mask);
    ids.push_back(ex.tile_id);
  }

  const bool with_cnn = cfg.evaluate.use_cnn && fs::exists(out.cnn() / "model.cnn.json");
  std::vector<ProbabilityMap> hybrid_maps;
  if (with_cnn) {
    const json meta = read_json_file(out.cnn() / "train.json");
    if (meta.value("archive_hash", "") != hash) {
      throw DataError("evaluate: CNN was trained against a different archive; rerun train-cnn");
    }
    manifest.input(out.cnn() / "model.cnn.raw");
    hybrid_maps = refine(load_cnn(out.cnn_model()), test);
  }
  manifest.timing("inference", clock.lap());

  const double thr = cfg.evaluate.threshold;
  const fs::path dir = out.eval();
  fresh_dir(dir);
  std::vector<NamedReport> rows{{"rf", evaluate_maps(rf_maps, truths, pads, thr)}};
  const auto rf_dist = tile_f1_distribution(rf_maps, truths, pads, ids, thr);
  write_tile_f1_csv(dir / "tile_f1_rf.csv", rf_dist);
  write_tile_f1_hist_csv(dir / "tile_f1_hist_rf.csv", rf_dist);
  manifest.output(dir / "tile_f1_rf.csv");
  manifest.output(dir / "tile_f1_hist_rf.csv");

  const auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  json report = {{"test_tiles", test.size()}, {"threshold", thr}};
  report["rf"] = report_json(rows[0].report);
  report["rf"]["tile_f1_fraction_below_0.7"] = opt(rf_dist.fraction_below);

  if (with_cnn) {
    rows.push_back({"rf+cnn", evaluate_maps(hybrid_maps, truths, pads, thr)});
    const auto hy_dist = tile_f1_distribution(hybrid_maps, truths, pads, ids, thr);
    write_tile_f1_csv(dir / "tile_f1_rf_cnn.csv", hy_dist);
    write_tile_f1_hist_csv(dir / "tile_f1_hist_rf_cnn.csv", hy_dist);
    manifest.output(dir / "tile_f1_rf_cnn.csv");
    manifest.output(dir / "tile_f1_hist_rf_cnn.csv");
    report["rf+cnn"] = report_json(rows[1].report);
    report["rf+cnn"]["tile_f1_fraction_below_0.7"] = opt(hy_dist.fraction_below);
    report["delta"] = {{"f1", rows[1].report.f1 - rows[0].report.f1},
                       {"recall", rows[1].report.recall - rows[0].report.recall},
                       {"precision", rows[1].report.precision - rows[0].report.precision},
                       {"auc", rows[1].report.auc - rows[0].report.auc}};
    if (rf_dist.fraction_below && hy_dist.fraction_below) {
      report["delta"]["tile_f1_fraction_below_0.7"] = *hy_dist.fraction_below - *rf_dist.fraction_below;
    }
  }
  write_metrics_csv(dir / "metrics.csv", rows);
  write_json(dir / "report.json", report);
  manifest.output(dir / "metrics.csv");
  manifest.output(dir / "report.json");

  {
    std::ofstream txt(dir / "report.txt", std::ios::binary);
    txt << "model    precision  recall     f1         auc        tiles_f1<0.7\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const auto& r = rows[i].report;
      const auto& below = report[rows[i].model]["tile_f1_fraction_below_0.7"];
      char line[160];
      std::snprintf(line, sizeof line, "%-8s %-10.4f %-10.4f %-10.4f %-10.4f %s\n", rows[i].model.c_str(), r.precision,
                    r.recall, r.f1, r.auc, below.is_null() ? "n/a" : fmt(below.get<double>()).c_str());
      txt << line;
    }
  }
  manifest.output(dir / "report.txt");

  if (cfg.evaluate.render) {
    const fs::path render = dir / "render";
    fs::create_directories(render);
    for (std::size_t i = 0; i < test.size(); ++i) {
      const std::string stem = tile_stem(ids[i]);
      write_probmap_pgm(rf_maps[i], render / (stem + ".rf.pgm"));
      write_mask(truths[i], render / (stem + ".truth.pgm"));
      manifest.output(render / (stem + ".rf.pgm"));
      manifest.output(render / (stem + ".truth.pgm"));
      if (with_cnn) {
        write_probmap_pgm(hybrid_maps[i], render / (stem + ".rf_cnn.pgm"));
        manifest.output(render / (stem + ".rf_cnn.pgm"));
      }
    }
  }
  manifest.timing("metrics", clock.lap());
  manifest.summary() = report;
  manifest.write(dir);
  return report;
}

json run_all(const PipelineConfig& cfg, const RunLayout& out) {
  json summary = json::object();
  if (cfg.inputs.empty()) summary["synth"] = stage_synth(cfg, out);
  summary["preprocess"] = stage_preprocess(cfg, out);
  summary["train_rf"] = stage_train_rf(cfg, out);
  summary["predict_rf"] = stage_predict_rf(cfg, out);
  summary["train_cnn"] = stage_train_cnn(cfg, out);
  summary["evaluate"] = stage_evaluate(cfg, out);
  return summary;
}

}  // namespace hsi
