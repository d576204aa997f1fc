// Command-line front end: simulate, reconstruct, run, export-image.

#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <string>

#include "spat/experiment.hpp"

namespace {

using spat::ExperimentConfig;
namespace fs = std::filesystem;

struct ConfigArgs {
  std::string config_path;
  std::string preset;
  std::optional<std::uint64_t> seed;
};

void add_config_options(CLI::App* cmd, ConfigArgs& args) {
  cmd->add_option("--config", args.config_path, "JSON experiment configuration")
      ->check(CLI::ExistingFile);
  cmd->add_option("--preset", args.preset, "Base configuration the file overrides")
      ->check(CLI::IsMember({"full-square", "full-circular", "desk-square", "desk-circular"}));
  cmd->add_option("--seed", args.seed, "Base RNG seed (overrides the config)");
}

ExperimentConfig preset_config(const std::string& name) {
  using spat::ArrayKind;
  if (name == "desk-square") return spat::desk_config(ArrayKind::square);
  if (name == "desk-circular") return spat::desk_config(ArrayKind::circular);
  ExperimentConfig c;
  if (name == "full-circular") c.array.kind = ArrayKind::circular;
  return c;
}

ExperimentConfig resolve_config(const ConfigArgs& args,
                                const std::optional<fs::path>& fallback = std::nullopt) {
  try {
    ExperimentConfig base = preset_config(args.preset);
    ExperimentConfig cfg = base;
    if (!args.config_path.empty())
      cfg = spat::load_config(args.config_path, base);
    else if (fallback && fs::exists(*fallback))
      cfg = spat::load_config(*fallback, base);
    if (args.seed) cfg.seed = *args.seed;
    cfg.validate();
    return cfg;
  } catch (const spat::StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw spat::StageError("config", e.what());
  }
}

void print_metrics(const std::vector<spat::MethodResult>& results) {
  for (const auto& r : results)
    std::cout << r.method << "  speckle " << r.ell * 1e6 << " um  correlation "
              << r.metrics.correlation << "  rel_l2 " << r.metrics.rel_l2 << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Speckle-illuminated photoacoustic simulation and reconstruction"};
  app.require_subcommand(1);

  ConfigArgs sim_args, rec_args, run_args;
  std::string sim_out, rec_out, rec_moments, rec_method = "both", rec_cache, run_out, run_cache;
  std::string img_in, img_out;
  bool img_clamp = false;

  auto* sim = app.add_subcommand("simulate", "Simulate recordings and write their moments");
  add_config_options(sim, sim_args);
  sim->add_option("--out", sim_out, "Output directory")->required();

  auto* rec = app.add_subcommand("reconstruct", "Reconstruct from stored moments");
  add_config_options(rec, rec_args);
  rec->add_option("--moments", rec_moments, "Directory written by simulate")
      ->required()
      ->check(CLI::ExistingDirectory);
  rec->add_option("--method", rec_method, "first, second or both")
      ->check(CLI::IsMember({"first", "second", "both"}));
  rec->add_option("--out", rec_out, "Output directory")->required();
  rec->add_option("--cache", rec_cache, "Factorization cache directory");

  auto* run = app.add_subcommand("run", "Simulate and reconstruct");
  add_config_options(run, run_args);
  run->add_option("--out", run_out, "Output directory")->required();
  run->add_option("--cache", run_cache, "Factorization cache directory");

  auto* img = app.add_subcommand("export-image", "Render a binary field file as PGM");
  img->add_option("--in", img_in, "Field in binary matrix format")
      ->required()
      ->check(CLI::ExistingFile);
  img->add_option("--out", img_out, "Output .pgm path")->required();
  img->add_flag("--clamp", img_clamp, "Clamp negative values to 0 before normalizing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Help and version requests exit 0; usage errors exit 2.
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (sim->parsed()) {
      const ExperimentConfig cfg = resolve_config(sim_args);
      spat::StageTimer timer;
      const auto result = spat::simulate(cfg, timer);
      timer.run("write_outputs", [&] {
        spat::write_config(sim_out, cfg);
        spat::write_moments(sim_out, result);
      });
      spat::write_timings(sim_out, timer);
      for (const auto& sm : result.per_size)
        std::cout << "speckle " << sm.ell * 1e6 << " um: " << sm.moments.count
                  << " recordings, noise sigma " << sm.noise_sigma << "\n";
    } else if (rec->parsed()) {
      const ExperimentConfig cfg = resolve_config(rec_args, fs::path(rec_moments) / "config.json");
      spat::StageTimer timer;
      const auto moments = timer.run("read_moments", [&] { return spat::read_moments(rec_moments); });
      const auto truth = timer.run("phantom", [&] { return spat::make_config_phantom(cfg); });
      spat::ReconstructionOptions opts;
      opts.first_order = rec_method != "second";
      opts.second_order = rec_method != "first";
      if (!rec_cache.empty()) opts.cache_dir = fs::path(rec_cache);
      const auto results = spat::reconstruct(cfg, truth, moments, opts, timer);
      timer.run("write_outputs", [&] {
        spat::write_config(rec_out, cfg);
        spat::write_results(rec_out, results, cfg.report_wall_time);
      });
      spat::write_timings(rec_out, timer);
      print_metrics(results);
    } else if (run->parsed()) {
      const ExperimentConfig cfg = resolve_config(run_args);
      spat::ReconstructionOptions opts;
      if (!run_cache.empty()) opts.cache_dir = fs::path(run_cache);
      const auto result = spat::run_experiment(cfg, fs::path(run_out), opts);
      print_metrics(result.results);
    } else if (img->parsed()) {
      try {
        spat::write_pgm(img_out, spat::read_matrix(img_in), img_clamp);
      } catch (const std::exception& e) {
        throw spat::StageError("export-image", e.what());
      }
    }
  } catch (const spat::StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: [unexpected] " << e.what() << "\n";
    return 1;
  }
  return 0;
}
