// SPDX-License-Identifier: Apache-2.0
// mixcomp: generate → profile → allocate → quantize → eval, one stage per
// subcommand. Settings come from defaults, then $MIXCOMP_OUT_DIR, then
// --config, then --key=value overrides.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mixcomp/container.hpp"
#include "mixcomp/error.hpp"
#include "mixcomp/pipeline.hpp"

namespace {

void apply_overrides(mixcomp::PipelineConfig& cfg, const std::vector<std::string>& extras) {
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& arg = extras[i];
    if (arg.rfind("--", 0) != 0) throw mixcomp::ArgumentError("unexpected argument '" + arg + "'");
    const std::string body = arg.substr(2);
    const auto eq = body.find('=');
    if (eq != std::string::npos) {
      mixcomp::set_key_text(cfg, body.substr(0, eq), body.substr(eq + 1));
    } else if (i + 1 < extras.size() && extras[i + 1].rfind("--", 0) != 0) {
      mixcomp::set_key_text(cfg, body, extras[++i]);
    } else {
      throw mixcomp::ArgumentError("option '" + arg + "' needs a value (--key=value)");
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-precision compression toolkit for mixture-of-experts models"};
  app.require_subcommand(1, 1);
  std::string config_path;
  std::size_t threads = 0;
  bool force = false;
  std::string policy;

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"gen-model", "write a seeded synthetic model plus calibration and evaluation corpora"},
      {"profile", "collect expert statistics (stats.json)"},
      {"allocate", "solve the per-layer bit allocation (allocation.json)"},
      {"quantize", "quantize the model to its allocation (model.mcqz)"},
      {"eval", "evaluate the quantized model with online pruning (policy.json, report.json)"},
      {"pipeline", "run every stage in order"}};
  std::vector<CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->allow_extras();
    sub->add_option("--config", config_path, "JSON file of flat config keys");
    sub->add_option("--threads", threads, "worker threads");
    sub->add_flag("--force", force, "accept artifacts whose config digest does not match");
    sub->footer("Any flat config key can be overridden with --key=value.");
    sub->add_option("--policy", policy, "pruning mode: off|weight_only|protected|full_drop");
    subs.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  CLI::App* sub = nullptr;
  for (CLI::App* s : subs)
    if (s->parsed()) sub = s;

  try {
    mixcomp::PipelineConfig cfg;
    if (const char* env = std::getenv("MIXCOMP_OUT_DIR"); env && *env) cfg.out_dir = env;
    if (!config_path.empty()) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(mixcomp::read_text_file(config_path));
      } catch (const nlohmann::json::parse_error& e) {
        throw mixcomp::ArgumentError("config file " + config_path + ": " + e.what());
      }
      mixcomp::apply_json(cfg, j);
    }
    apply_overrides(cfg, sub->remaining());
    if (threads > 0) cfg.threads = threads;
    if (force) cfg.force = true;
    if (!policy.empty()) mixcomp::set_key(cfg, "policy", policy);
    mixcomp::run_command(sub->get_name(), cfg, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return mixcomp::exit_code_for(e);
  }
  return 0;
}
