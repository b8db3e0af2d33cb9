// Copyright 2026 The ctxssl Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.


// Command-line front end: one subcommand per pipeline stage.

#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ctxssl/error.hpp"
#include "ctxssl/pipeline.hpp"

namespace fs = std::filesystem;
using namespace ctxssl;

namespace {

struct Common {
  std::string config_file;
  std::string preset;
  std::vector<std::string> overrides;
  bool force = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_file, "JSON configuration file");
  cmd->add_option("--preset", c.preset, "Configuration preset (desk | paper)")->check(CLI::IsMember({"desk", "paper"}));
  cmd->add_option("--set", c.overrides, "Override a config value, e.g. --set trainer.epochs=3")->take_all();
  cmd->add_flag("--force", c.force, "Replace existing outputs");
}

RunConfig config_of(const Common& c) { return resolve_config(c.preset, c.config_file, c.overrides); }

fs::path out_or_default(const std::string& out, const RunConfig& cfg, Stage stage) {
  return out.empty() ? default_output(cfg, stage) : fs::path(out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Anatomy-aware self-supervised graph pretraining for volumetric images"};
  app.require_subcommand(1);

  Common common;
  std::string out, data, graphs, pretrain, probe, labels, subject;
  int jobs = 1;
  bool resume = false;

  auto* c_config = app.add_subcommand("config", "Print the resolved configuration and its hash");
  add_common(c_config, common);

  auto* c_phantom = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
  add_common(c_phantom, common);
  c_phantom->add_option("--out", out, "Dataset directory");

  auto* c_graphs = app.add_subcommand("build-graphs", "Register subjects to the atlas and build patch graphs");
  add_common(c_graphs, common);
  c_graphs->add_option("--data", data, "Dataset directory (volumes/, optional atlas.nii.gz)")->required();
  c_graphs->add_option("--out", out, "Graphs directory");
  c_graphs->add_option("--jobs", jobs, "Parallel workers")->check(CLI::PositiveNumber);

  auto* c_pretrain = app.add_subcommand("pretrain", "Contrastive pretraining of the patch and graph encoders");
  add_common(c_pretrain, common);
  c_pretrain->add_option("--graphs", graphs, "Graphs directory")->required();
  c_pretrain->add_option("--out", out, "Checkpoint directory");
  c_pretrain->add_flag("--resume", resume, "Continue from the latest periodic checkpoint");

  auto* c_probe = app.add_subcommand("probe", "Cross-validated linear probes on frozen subject features");
  add_common(c_probe, common);
  c_probe->add_option("--checkpoint", pretrain, "Pretraining output directory")->required();
  c_probe->add_option("--graphs", graphs, "Graphs directory")->required();
  c_probe->add_option("--labels", labels, "Labels CSV (default: the dataset's labels.csv)");
  c_probe->add_option("--out", out, "Probe output directory");

  auto* c_explain = app.add_subcommand("explain", "Per-region activation maps for one subject");
  add_common(c_explain, common);
  c_explain->add_option("--checkpoint", pretrain, "Pretraining output directory")->required();
  c_explain->add_option("--graphs", graphs, "Graphs directory")->required();
  c_explain->add_option("--probe", probe, "Probe output directory")->required();
  c_explain->add_option("--subject", subject, "Subject id")->required();
  c_explain->add_option("--out", out, "Explain output directory");

  auto* c_embed = app.add_subcommand("export-embeddings", "Write subject features and a PCA-2D projection");
  add_common(c_embed, common);
  c_embed->add_option("--checkpoint", pretrain, "Pretraining output directory")->required();
  c_embed->add_option("--graphs", graphs, "Graphs directory")->required();
  c_embed->add_option("--labels", labels, "Labels CSV (default: the dataset's labels.csv)");
  c_embed->add_option("--out", out, "Output CSV")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  StageOptions opts;
  opts.log = &std::cerr;
  opts.jobs = jobs;
  opts.resume = resume;
  try {
    const RunConfig cfg = config_of(common);
    opts.force = common.force;
    StageResult r;
    if (*c_config) {
      std::cout << cfg.to_json().dump(2) << '\n';
      std::cerr << "config hash " << json_hash(cfg.to_json()) << '\n';
      return kExitOk;
    }
    if (*c_phantom) r = run_phantom(cfg, out_or_default(out, cfg, Stage::Phantom), opts);
    if (*c_graphs) r = run_build_graphs(cfg, data, out_or_default(out, cfg, Stage::Graphs), opts);
    if (*c_pretrain) r = run_pretrain(cfg, graphs, out_or_default(out, cfg, Stage::Pretrain), opts);
    if (*c_probe) r = run_probe(cfg, pretrain, graphs, labels, out_or_default(out, cfg, Stage::Probe), opts);
    if (*c_explain) {
      const fs::path dir = out.empty() ? default_output(cfg, Stage::Explain) / subject : fs::path(out);
      r = run_explain(cfg, pretrain, graphs, probe, subject, dir, opts);
    }
    if (*c_embed) r = run_export_embeddings(cfg, pretrain, graphs, labels, out, opts);
    std::cout << r.out.string() << '\n';
    return r.exit_code;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
