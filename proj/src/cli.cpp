#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "xaidiag/error.hpp"
#include "xaidiag/pipeline.hpp"

namespace xaidiag {

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> dc_class_policy;
  std::optional<std::string> faithfulness_variant;
  std::optional<std::string> norm_scope;
  std::optional<std::size_t> threads;
};

void add_common_options(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "Run configuration (JSON)")->required();
  cmd->add_option("--out", o.out, "Output directory, overrides the config");
  cmd->add_option("--seed", o.seed, "Master seed, overrides the config");
  cmd->add_option("--dc-class-policy", o.dc_class_policy,
                  "Class row used for dataset consistency")
      ->check(CLI::IsMember({"own-gold", "paper-literal"}));
  cmd->add_option("--faithfulness-variant", o.faithfulness_variant,
                  "Faithfulness summary: area under F1 or under the F1 drop")
      ->check(CLI::IsMember({"table", "equation"}));
  cmd->add_option("--norm-scope", o.norm_scope, "Min-max normalization scope")
      ->check(CLI::IsMember({"per-block", "global"}));
  cmd->add_option("--threads", o.threads, "Worker threads (0 = all cores)");
}

RunConfig resolve(const CommonOptions& o) {
  RunConfig config = load_run_config(o.config);
  nlohmann::json j = to_json(config);
  if (o.out) j["out"] = *o.out;
  if (o.seed) j["seed"] = *o.seed;
  if (o.dc_class_policy) j["dc_class_policy"] = *o.dc_class_policy;
  if (o.faithfulness_variant) j["faithfulness_variant"] = *o.faithfulness_variant;
  if (o.norm_scope) j["norm_scope"] = *o.norm_scope;
  if (o.threads) j["threads"] = *o.threads;
  config = run_config_from_json(j);
  config.validate();
  return config;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Diagnostic properties of saliency explanations for text classifiers", "xaidiag"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "xaidiag 0.1.0");

  CommonOptions options;
  CLI::App* train = app.add_subcommand("train", "Train K models and K random-init baselines");
  CLI::App* explain = app.add_subcommand("explain", "Compute saliency maps on the test split");
  CLI::App* evaluate = app.add_subcommand("evaluate", "Score every explainer on all properties");
  CLI::App* report = app.add_subcommand("report", "Render spider charts and a summary table");
  for (CLI::App* cmd : {train, explain, evaluate, report}) add_common_options(cmd, options);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    const RunConfig config = resolve(options);
    if (train->parsed()) {
      cmd_train(config);
    } else if (explain->parsed()) {
      cmd_explain(config);
    } else if (evaluate->parsed()) {
      cmd_evaluate(config);
    } else {
      cmd_report(config);
    }
  } catch (const std::exception& e) {
    std::cerr << "xaidiag: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace xaidiag
