#include "cardiofib/pipeline.hpp"

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <iostream>
#include <optional>
#include <string>

namespace {

using cardiofib::ConfigError;
using cardiofib::DataError;
using cardiofib::NumericError;
using cardiofib::Pipeline;
using cardiofib::PipelineConfig;

struct GlobalOptions {
  std::string config_path;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  std::string output_dir;
  bool verbose = false;
};

PipelineConfig resolve_config(const GlobalOptions& g) {
  const std::optional<std::string> profile = g.profile.empty() ? std::nullopt : std::optional<std::string>(g.profile);
  PipelineConfig cfg = g.config_path.empty() ? PipelineConfig::for_profile(profile.value_or("desk"))
                                             : PipelineConfig::load(g.config_path, profile);
  if (g.seed) cfg.seed = *g.seed;
  if (g.threads) cfg.threads = *g.threads;
  if (!g.output_dir.empty()) cfg.output_dir = g.output_dir;
  return cfg;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 1;
}

void print_outcome(const cardiofib::StageOutcome& o) {
  std::cout << o.name << (o.executed ? "" : " (up to date)") << ": " << o.status << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  auto log = spdlog::stderr_color_mt("cardiofib");
  log->set_pattern("[%H:%M:%S] [%^%l%$] %v");

  CLI::App app{"Cardiac fiber tractography, sequence embedding and clustering"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--config", g.config_path, "JSON configuration (merged over the profile)")->check(CLI::ExistingFile);
  app.add_option("--profile", g.profile, "Parameter profile")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--seed", g.seed, "Base seed; stage seeds are derived from it");
  app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--output-dir", g.output_dir, "Run directory (overrides output_dir)");
  app.add_flag("-v,--verbose", g.verbose, "Debug logging");

  for (const auto& stage : cardiofib::stage_order()) {
    if (stage == "plot") continue;
    app.add_subcommand(stage, "Run the " + stage + " stage unconditionally");
  }

  auto* plot = app.add_subcommand("plot", "Render the 2-D projection colored by cluster label");
  std::string plot_tsne, plot_labels, plot_out;
  plot->add_option("--tsne", plot_tsne, "Projection CSV (fiber_id,x,y); default: run directory");
  plot->add_option("--labels", plot_labels, "Labels CSV (fiber_id,label); default: run directory");
  plot->add_option("--out", plot_out, "SVG output path; default: run directory");

  auto* pipeline = app.add_subcommand("pipeline", "Run every stage, resuming from the manifest");
  bool force = false;
  pipeline->add_flag("--force", force, "Re-run every stage regardless of the manifest");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  log->set_level(g.verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    const bool explicit_plot = plot->parsed() && (!plot_tsne.empty() || !plot_labels.empty() || !plot_out.empty());
    if (explicit_plot) {
      if (plot_tsne.empty() || plot_labels.empty() || plot_out.empty())
        throw ConfigError("plot: --tsne, --labels and --out must be given together");
      cardiofib::io::write_file(plot_out, cardiofib::scatter_svg(cardiofib::read_tsne_csv(plot_tsne),
                                                                 cardiofib::read_labels_csv(plot_labels)));
      log->info("wrote {}", plot_out);
      return 0;
    }

    PipelineConfig cfg = resolve_config(g);
    Pipeline p(cfg, [&](const std::string& m) { log->info("{}", m); });
    log->debug("config: {}", cfg.to_json().dump());
    if (pipeline->parsed()) {
      for (const auto& o : p.run_all(!force)) print_outcome(o);
      return 0;
    }
    for (auto* sub : app.get_subcommands()) print_outcome(p.run_stage(sub->get_name()));
    return 0;
  } catch (const std::exception& e) {
    log->error("{}", e.what());
    return exit_code_for(e);
  }
}
