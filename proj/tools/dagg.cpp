#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "dagg/experiment.hpp"

namespace {

using namespace dagg;

struct Flags {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  bool csv_header = false;
  bool unsafe_alpha = false;
  std::size_t jobs = 1;
  std::string checkpoint;
};

void emit_error(const std::string& code, const std::string& message) {
  std::cerr << Json{{"error", code}, {"message", message}}.dump() << std::endl;
}

std::string read_config_text(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot read config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RunConfig load_config(const Flags& f) {
  auto cfg = parse_config(read_config_text(f.config), {.unsafe_alpha = f.unsafe_alpha});
  if (f.out) cfg.output_dir = *f.out;
  if (f.csv_header) cfg.dataset.header = true;
  for (const auto& w : cfg.warnings) std::cerr << Json{{"warning", w}}.dump() << std::endl;
  return cfg;
}

int cmd_pretrain(const Flags& f) {
  auto cfg = load_config(f);
  if (f.seed) cfg.teacher.seed = *f.seed;
  const auto data = load_datasets(cfg);
  const auto teacher = pretrain_teacher(cfg, data, fs::path(cfg.output_dir) / "teacher");
  std::cout << Json{{"checkpoint", teacher.checkpoint.string()},
                    {"top1_err", teacher.val.top1_err},
                    {"main_loss", teacher.val.main_loss}}
                   .dump()
            << std::endl;
  return 0;
}

int cmd_run(const Flags& f, std::size_t jobs) {
  auto cfg = load_config(f);
  if (f.seed) cfg.seeds = {*f.seed};
  write_text(fs::path(cfg.output_dir) / "config.json", to_json(cfg).dump(2) + "\n");
  const auto ctx = prepare(cfg);
  const auto runs = run_grid(ctx, jobs);
  for (const auto& r : runs) {
    std::cout << Json{{"run", r.run_id}, {"top1_err", r.top1_err}, {"top1_agr", r.top1_agr}}.dump() << std::endl;
  }
  return 0;
}

int cmd_inspect(const Flags& f) {
  for (const auto& p : load_checkpoint(f.checkpoint)) {
    std::cout << p.name << ' ' << shape_str(p.shape) << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-path knowledge distillation with path aggregation strategies"};
  app.require_subcommand(1);
  Flags f;
  auto add_common = [&](CLI::App* sub, bool with_alpha) {
    sub->add_option("--config", f.config, "JSON run config")->required();
    sub->add_option("--out", f.out, "Output directory (overrides output_dir)");
    sub->add_option("--seed", f.seed, "Seed (overrides config)");
    sub->add_flag("--csv-header", f.csv_header, "Skip one header line in CSV datasets");
    if (with_alpha) sub->add_flag("--unsafe-alpha", f.unsafe_alpha, "Allow alpha outside [0, 1]");
  };
  auto* pretrain = app.add_subcommand("pretrain", "Pretrain the teacher and save its checkpoint");
  add_common(pretrain, true);
  auto* run = app.add_subcommand("run", "Run every strategy and seed in the config sequentially");
  add_common(run, true);
  auto* grid = app.add_subcommand("grid", "Run the strategy by seed grid with parallel workers");
  add_common(grid, true);
  grid->add_option("--jobs", f.jobs, "Parallel runs")->check(CLI::PositiveNumber);
  auto* inspect = app.add_subcommand("inspect", "List parameter names and shapes in a checkpoint");
  inspect->add_option("checkpoint", f.checkpoint, "Checkpoint file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    emit_error("UsageError", e.what());
    return 2;
  }

  try {
    if (*pretrain) return cmd_pretrain(f);
    if (*run) return cmd_run(f, 1);
    if (*grid) return cmd_run(f, f.jobs);
    return cmd_inspect(f);
  } catch (const Error& e) {
    emit_error(std::string(to_string(e.code())), e.detail());
  } catch (const std::exception& e) {
    emit_error("InternalError", e.what());
  }
  return 1;
}
