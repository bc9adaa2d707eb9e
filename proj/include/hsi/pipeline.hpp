#pragma once

#include <filesystem>
#include <map>

#include <json.hpp>

#include "hsi/cnn.hpp"
#include "hsi/forest.hpp"
#include "hsi/preprocess.hpp"
#include "hsi/synth.hpp"

namespace hsi {

inline constexpr const char* kToolVersion = "0.1.0";

struct SynthSection {
  Index n_scenes = 6;
  std::uint64_t profile_seed = 1;
  SceneConfig scene;  // scene i uses derive_seed(scene.seed, i)
};

struct EvaluateSection {
  double threshold = 0.5;
  bool use_cnn = true;
  bool render = true;
};

struct InputPair {
  std::filesystem::path cube;
  std::filesystem::path mask;
};

/// One JSON file drives every stage; each stage reads its own section.
struct PipelineConfig {
  nlohmann::json source;  // as read, echoed into run manifests
  SynthSection synth;
  PreprocessConfig preprocess;
  std::vector<InputPair> inputs;  // empty: use the synth stage's scenes
  bool allow_nonfinite = false;
  ForestParams rf;
  CnnArch cnn_arch;
  TrainConfig cnn_train;
  EvaluateSection evaluate;

  static PipelineConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
  static PipelineConfig load(const std::filesystem::path& path);
};

/// Output locations under the run directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path scenes() const { return root / "scenes"; }
  std::filesystem::path archive() const { return root / "archive"; }
  std::filesystem::path rf() const { return root / "rf"; }
  std::filesystem::path forest_file() const { return rf() / "forest.rf.json"; }
  std::filesystem::path maps() const { return root / "rf_maps"; }
  std::filesystem::path cnn() const { return root / "cnn"; }
  std::filesystem::path cnn_model() const { return cnn() / "model"; }
  std::filesystem::path eval() const { return root / "eval"; }
};

/// Written as run_manifest.json in a stage's output directory. Every listed
/// output must exist when it is written.
class RunManifest {
 public:
  RunManifest(std::string stage, const PipelineConfig& cfg);

  void input(const std::filesystem::path& path);
  void output(const std::filesystem::path& path);
  void seed(const std::string& name, std::uint64_t value);
  void timing(const std::string& step, double seconds);
  nlohmann::json& summary() { return summary_; }
  void write(const std::filesystem::path& dir) const;

 private:
  std::string stage_;
  nlohmann::json config_;
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> outputs_;
  nlohmann::json seeds_ = nlohmann::json::object();
  nlohmann::json timings_ = nlohmann::json::object();
  nlohmann::json summary_ = nlohmann::json::object();
};

/// Hash of the archive manifest and fitted transforms; stamped on maps and
/// models so later stages can refuse stale inputs.
std::string archive_hash(const std::filesystem::path& archive_dir);

// Stages. Each returns its summary (also stored in the run manifest).
nlohmann::json stage_synth(const PipelineConfig& cfg, const RunLayout& out);
nlohmann::json stage_preprocess(const PipelineConfig& cfg, const RunLayout& out);
nlohmann::json stage_train_rf(const PipelineConfig& cfg, const RunLayout& out);
nlohmann::json stage_predict_rf(const PipelineConfig& cfg, const RunLayout& out,
                                const std::vector<Split>& splits = {Split::Val, Split::Test});
nlohmann::json stage_train_cnn(const PipelineConfig& cfg, const RunLayout& out);
nlohmann::json stage_evaluate(const PipelineConfig& cfg, const RunLayout& out);

/// synth (unless explicit inputs are configured) through evaluate.
nlohmann::json run_all(const PipelineConfig& cfg, const RunLayout& out);

}  // namespace hsi
