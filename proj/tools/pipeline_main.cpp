// pipeline: command-line driver for the oil-spill detection stages.
//
//   pipeline <stage> --config cfg.json [--out dir]
//
// Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric error, 1 other.

#include <CLI11.hpp>

#include <iostream>

#include "hsi/pipeline.hpp"

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kData = 3, kNumeric = 4 };

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hyperspectral oil-spill detection pipeline"};
  app.set_version_flag("--version", hsi::kToolVersion);
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir = "out";
  std::vector<std::string> split_names{"val", "test"};

  const auto add_stage = [&](const std::string& name, const std::string& help) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_path, "pipeline config (JSON)")->required();
    sub->add_option("--out", out_dir, "run directory")->capture_default_str();
    return sub;
  };
  add_stage("synth", "generate synthetic labelled scenes");
  add_stage("preprocess", "clean, standardise, reduce and tile the scenes");
  add_stage("train-rf", "fit the random forest on training tiles");
  add_stage("predict-rf", "write forest probability maps")
      ->add_option("--splits", split_names, "splits to predict")
      ->capture_default_str();
  add_stage("train-cnn", "train the refinement network on forest maps");
  add_stage("evaluate", "score forest and hybrid maps on the test split");
  add_stage("all", "run every stage in order");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    const auto cfg = hsi::PipelineConfig::load(config_path);
    const hsi::RunLayout out{out_dir};
    const std::string stage = app.get_subcommands().front()->get_name();
    nlohmann::json summary;
    if (stage == "synth") {
      summary = hsi::stage_synth(cfg, out);
    } else if (stage == "preprocess") {
      summary = hsi::stage_preprocess(cfg, out);
    } else if (stage == "train-rf") {
      summary = hsi::stage_train_rf(cfg, out);
    } else if (stage == "predict-rf") {
      std::vector<hsi::Split> splits;
      for (const auto& s : split_names) {
        if (s != "train" && s != "val" && s != "test") throw hsi::ConfigError("unknown split '" + s + "'");
        splits.push_back(hsi::split_from_string(s));
      }
      summary = hsi::stage_predict_rf(cfg, out, splits);
    } else if (stage == "train-cnn") {
      summary = hsi::stage_train_cnn(cfg, out);
    } else if (stage == "evaluate") {
      summary = hsi::stage_evaluate(cfg, out);
    } else {
      summary = hsi::run_all(cfg, out);
    }
    std::cout << summary.dump(2) << "\n";
    return kOk;
  } catch (const hsi::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const hsi::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const hsi::NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
}
