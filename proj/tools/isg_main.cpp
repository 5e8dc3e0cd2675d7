#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "isg/config.hpp"
#include "isg/errors.hpp"
#include "isg/pipeline.hpp"

namespace {

struct CliArgs {
  std::string config_path;
  std::string slide_path;
  std::vector<std::string> overrides;
  uint64_t seed = 0;
  bool seed_set = false;
};

// file < ISG_WORKDIR < --override < --seed
isg::PipelineConfig resolve_config(const CliArgs& args) {
  isg::ConfigMap map = isg::load_config_file(args.config_path);
  if (const char* wd = std::getenv("ISG_WORKDIR"); wd && *wd) map.set("paths.work_dir", wd);
  for (const auto& assignment : args.overrides) isg::apply_override(map, assignment);
  isg::PipelineConfig cfg = isg::config_from_map(map);
  if (args.seed_set) cfg.seed = args.seed;
  isg::validate_pipeline_config(cfg);
  return cfg;
}

bool is_usage_error(isg::Err code) {
  return code == isg::Err::InvalidConfig || code == isg::Err::UnknownMethod ||
         code == isg::Err::UnknownKind;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-resolution slide pipeline: tile, select, encode, predict"};
  app.require_subcommand(1);

  CliArgs args;
  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* config_opt = sub->add_option("--config", args.config_path, "key=value settings file");
    if (config_required) config_opt->required();
    sub->add_option("--seed", args.seed, "root seed, takes precedence over the config");
    sub->add_option("--override", args.overrides,
                    "config assignment key=value, repeatable, beats the file");
  };

  add_common(app.add_subcommand("synth", "generate labeled synthetic slides"), true);
  add_common(app.add_subcommand("tile", "cut slides into the coarse patch grid"), true);
  add_common(app.add_subcommand("select", "score patches and write selection manifests"), true);
  add_common(app.add_subcommand("train-extractor", "train the two patch autoencoders"), true);
  add_common(app.add_subcommand("extract", "encode kept patches into feature stores"), true);
  add_common(app.add_subcommand("train-predictor", "train the fusion predictor"), true);
  auto* predict = app.add_subcommand("predict", "predict gene expression for one raster");
  add_common(predict, true);
  predict->add_option("--slide", args.slide_path, "raster to predict (PNG or ISGR)")->required();
  add_common(app.add_subcommand("evaluate", "held-out report plus feature probe"), true);
  add_common(app.add_subcommand("gradcheck", "finite-difference sweep over every op"), false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  CLI::App* sub = app.get_subcommands().at(0);
  const std::string name = sub->get_name();
  args.seed_set = sub->count("--seed") > 0;

  try {
    if (name == "gradcheck") {
      const int failures = isg::run_gradcheck(std::cout);
      return failures == 0 ? 0 : 3;
    }
    const isg::PipelineConfig cfg = resolve_config(args);
    if (name == "synth")
      isg::run_synth(cfg, std::cout);
    else if (name == "tile")
      isg::run_tile(cfg, std::cout);
    else if (name == "select")
      isg::run_select(cfg, std::cout);
    else if (name == "train-extractor")
      isg::run_train_extractor(cfg, std::cout);
    else if (name == "extract")
      isg::run_extract(cfg, std::cout);
    else if (name == "train-predictor")
      isg::run_train_predictor(cfg, std::cout);
    else if (name == "predict")
      isg::run_predict(cfg, args.slide_path, std::cout);
    else if (name == "evaluate")
      isg::run_evaluate(cfg, std::cout);
    return 0;
  } catch (const isg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return is_usage_error(e.code()) ? 1 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
