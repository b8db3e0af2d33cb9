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


#include "ctxssl/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iostream>
#include <mutex>
#include <thread>

#include "ctxssl/error.hpp"
#include "ctxssl/explain.hpp"
#include "ctxssl/io.hpp"

namespace ctxssl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kPhantomStream = 0x70686e74ULL;

void say(const StageOptions& o, const std::string& msg) {
  if (o.log != nullptr) *o.log << msg << '\n';
}

std::optional<json> read_stamp(const fs::path& dir) {
  const fs::path p = dir / layout::kStamp;
  if (!fs::exists(p)) return std::nullopt;
  std::ifstream in(p);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw IoError("unreadable stamp '" + p.string() + "'");
  return j;
}

void write_json(const fs::path& p, const json& j) {
  std::ofstream out(p);
  if (!out) throw IoError("cannot write '" + p.string() + "'");
  out << j.dump(2) << '\n';
}

void write_stamp(const fs::path& dir, Stage stage, const RunConfig& config, const json& upstream, const json& extra = {}) {
  write_json(dir / layout::kConfig, config.to_json());
  json s = {{"stage", stage_name(stage)},
            {"hash", stage_hash(config, stage)},
            {"config_hash", json_hash(config.to_json())},
            {"upstream", upstream}};
  if (extra.is_object())
    for (const auto& [k, v] : extra.items()) s[k] = v;
  write_json(dir / layout::kStamp, s);  // written last: marks the directory complete
}

// Returns true when `out` already holds this stage's up-to-date result.
bool prepare_output(const fs::path& out, Stage stage, const RunConfig& config, const StageOptions& o,
                    bool keep_partial = false) {
  const std::string hash = stage_hash(config, stage);
  if (fs::exists(out) && !fs::is_directory(out)) throw ConfigError("output '" + out.string() + "' is not a directory");
  if (fs::exists(out) && !fs::is_empty(out)) {
    const auto stamp = read_stamp(out);
    if (!o.force && stamp && stamp->value("hash", "") == hash && stamp->value("stage", "") == stage_name(stage)) {
      say(o, "[" + stage_name(stage) + "] '" + out.string() + "' is up to date (config hash " + hash + "); skipping");
      return true;
    }
    if (keep_partial && !stamp) return false;
    if (!o.force) throw ConfigError("output directory '" + out.string() + "' is not empty (use --force to replace it)");
    fs::remove_all(out);
  }
  fs::create_directories(out);
  return false;
}

// Checks the upstream stamp; `required` false tolerates an unstamped (external) directory.
json verify_upstream(const fs::path& dir, Stage stage, const RunConfig& config, bool required, const StageOptions& o) {
  if (!fs::is_directory(dir)) throw IoError("missing upstream artifact directory '" + dir.string() + "'");
  const auto stamp = read_stamp(dir);
  if (!stamp) {
    if (required) throw IoError("upstream '" + dir.string() + "' has no " + layout::kStamp + " (incomplete or not a " + stage_name(stage) + " output)");
    say(o, "note: '" + dir.string() + "' carries no stamp; treating it as external input");
    return {{"stage", "external"}, {"dir", fs::absolute(dir).string()}};
  }
  const std::string want = stage_hash(config, stage);
  if (stamp->value("stage", "") != stage_name(stage))
    throw ConfigError("'" + dir.string() + "' is a " + stamp->value("stage", "?") + " output, expected " + stage_name(stage));
  if (stamp->value("hash", "") != want)
    throw ConfigError("upstream '" + dir.string() + "' was produced by a different configuration (hash " +
                      stamp->value("hash", "?") + ", expected " + want + ")");
  return {{"stage", stage_name(stage)}, {"dir", fs::absolute(dir).string()}, {"hash", want}};
}

std::string subject_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sub-%04d", i);
  return buf;
}

std::string strip_nifti_ext(const fs::path& p) {
  std::string n = p.filename().string();
  for (const char* ext : {".nii.gz", ".nii"})
    if (n.size() > std::strlen(ext) && n.compare(n.size() - std::strlen(ext), std::strlen(ext), ext) == 0)
      return n.substr(0, n.size() - std::strlen(ext));
  return {};
}

std::optional<fs::path> find_volume(const fs::path& dir, const std::string& id) {
  for (const char* ext : {".nii.gz", ".nii"})
    if (fs::exists(dir / (id + ext))) return dir / (id + ext);
  return std::nullopt;
}

// Dataset directory recorded upstream of a graphs directory, if any.
std::optional<fs::path> dataset_of(const fs::path& graphs) {
  const auto stamp = read_stamp(graphs);
  if (!stamp || !stamp->contains("upstream")) return std::nullopt;
  const json& up = (*stamp)["upstream"];
  if (up.is_object() && up.contains("dir")) return fs::path(up["dir"].get<std::string>());
  return std::nullopt;
}

json model_to_json(const std::string& task, const LogisticModel& m) {
  auto row = [](const Eigen::RowVectorXd& r) { return std::vector<double>(r.data(), r.data() + r.size()); };
  json w = json::array(), rw = json::array();
  const Eigen::MatrixXd raw = m.raw_weight();
  for (Eigen::Index c = 0; c < m.weight.rows(); ++c) {
    w.push_back(row(m.weight.row(c)));
    rw.push_back(row(raw.row(c)));
  }
  const Eigen::VectorXd rb = m.raw_bias();
  return {{"task", task},
          {"classes", m.classes},
          {"weight", w},
          {"bias", std::vector<double>(m.bias.data(), m.bias.data() + m.bias.size())},
          {"feature_mean", row(m.standardizer.mean)},
          {"feature_scale", row(m.standardizer.scale)},
          {"raw_weight", rw},
          {"raw_bias", std::vector<double>(rb.data(), rb.data() + rb.size())},
          {"iterations", m.iterations},
          {"gradient_norm", m.gradient_norm}};
}

LogisticModel model_from_json(const json& j) {
  LogisticModel m;
  m.classes = j.at("classes").get<std::vector<std::string>>();
  const auto w = j.at("weight").get<std::vector<std::vector<double>>>();
  const auto b = j.at("bias").get<std::vector<double>>();
  const auto mu = j.at("feature_mean").get<std::vector<double>>();
  const auto sc = j.at("feature_scale").get<std::vector<double>>();
  if (w.size() != m.classes.size() || b.size() != m.classes.size() || w.empty() || mu.size() != sc.size())
    throw IoError("malformed probe model for task '" + j.value("task", "?") + "'");
  const auto f = static_cast<Eigen::Index>(mu.size());
  m.weight.resize(static_cast<Eigen::Index>(w.size()), f);
  for (std::size_t c = 0; c < w.size(); ++c) {
    if (static_cast<Eigen::Index>(w[c].size()) != f) throw IoError("malformed probe model weight row");
    m.weight.row(static_cast<Eigen::Index>(c)) = Eigen::Map<const Eigen::RowVectorXd>(w[c].data(), f);
  }
  m.bias = Eigen::Map<const Eigen::VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
  m.standardizer.mean = Eigen::Map<const Eigen::RowVectorXd>(mu.data(), f);
  m.standardizer.scale = Eigen::Map<const Eigen::RowVectorXd>(sc.data(), f);
  m.iterations = j.value("iterations", 0);
  m.gradient_norm = j.value("gradient_norm", 0.0);
  return m;
}

TrainState load_model(const fs::path& pretrain, const RunConfig& config, const StageOptions& o) {
  verify_upstream(pretrain, Stage::Pretrain, config, true, o);
  return load_checkpoint(pretrain / layout::kCheckpoint);
}

std::vector<std::vector<std::string>> label_strings(const LabelTable& t, const std::vector<PatchGraph>& graphs) {
  std::vector<std::vector<std::string>> out;
  for (const auto& g : graphs) {
    auto& row = out.emplace_back();
    const auto it = t.rows.find(g.subject_id);
    for (const auto& c : t.columns) {
      if (it == t.rows.end() || !it->second.count(c)) {
        row.emplace_back();
      } else {
        row.push_back(it->second.at(c).str());
      }
    }
  }
  return out;
}

fs::path resolve_labels(const fs::path& labels, const fs::path& graphs) {
  if (!labels.empty()) return labels;
  if (const auto data = dataset_of(graphs); data && fs::exists(*data / layout::kLabels)) return *data / layout::kLabels;
  throw IoError("no labels table given and none found next to the dataset of '" + graphs.string() + "'");
}

}  // namespace

fs::path default_output(const RunConfig& config, Stage stage) {
  const char* env = std::getenv("CTXSSL_CACHE_DIR");
  const fs::path root = env != nullptr && *env != '\0' ? fs::path(env) : fs::path(".ctxssl-cache");
  return root / (stage_name(stage) + "-" + stage_hash(config, stage));
}

// ---------------------------------------------------------------- phantom

StageResult run_phantom(const RunConfig& config, const fs::path& out, const StageOptions& o) {
  config.validate();
  StageResult r{kExitOk, false, out};
  if (prepare_output(out, Stage::Phantom, config, o)) {
    r.skipped = true;
    return r;
  }
  const PhantomDatasetConfig& pc = config.phantom;
  const int n = pc.count;
  const int n_diseased = static_cast<int>(std::lround(n * pc.diseased_fraction));
  Rng assign(derive_seed(config.seed, {kPhantomStream}));
  std::vector<int> order(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  for (int i = n - 1; i > 0; --i) std::swap(order[static_cast<std::size_t>(i)], order[assign.index(static_cast<std::size_t>(i + 1))]);
  std::vector<int> regions(static_cast<std::size_t>(n), 0);
  for (int k = 0; k < n_diseased; ++k)
    regions[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] =
        pc.regions_min + static_cast<int>(assign.index(static_cast<std::size_t>(pc.regions_max - pc.regions_min + 1)));

  fs::create_directories(out / layout::kVolumes);
  fs::create_directories(out / layout::kMasks);
  fs::create_directories(out / layout::kLesions);
  LabelTable labels;
  std::ofstream cells(out / layout::kLesionCells);
  cells << "subject_id";
  for (int c = 0; c < pc.spec.lattice_cells(); ++c) cells << ",cell" << c;
  cells << '\n';
  for (int i = 0; i < n; ++i) {
    PhantomSpec spec = pc.spec;
    spec.seed = derive_seed(config.seed, {kPhantomStream, static_cast<std::uint64_t>(i) + 1});
    spec.n_regions_affected = regions[static_cast<std::size_t>(i)];
    const std::string id = subject_name(i);
    const Phantom p = generate_phantom(spec, id);
    save_volume(p.record.volume, out / layout::kVolumes / (id + ".nii.gz"));
    save_volume(*p.record.mask, out / layout::kMasks / (id + ".nii.gz"));
    save_volume(p.lesion_mask, out / layout::kLesions / (id + ".nii.gz"));
    labels.rows[id] = p.record.labels;
    cells << id;
    for (float v : p.lesion_indicator) cells << ',' << v;
    cells << '\n';
  }
  for (const auto& [name, _] : labels.rows.begin()->second) labels.columns.push_back(name);
  save_labels(labels, out / layout::kLabels);
  const SubjectRecord atlas = generate_atlas(pc.spec);
  save_volume(atlas.volume, out / layout::kAtlas);
  save_volume(*atlas.mask, out / layout::kAtlasMask);
  write_stamp(out, Stage::Phantom, config, json::object(), {{"subjects", n}, {"diseased", n_diseased}});
  say(o, "[phantom] wrote " + std::to_string(n) + " subjects to '" + out.string() + "'");
  return r;
}

// ---------------------------------------------------------------- graphs

StageResult run_build_graphs(const RunConfig& config, const fs::path& data, const fs::path& out, const StageOptions& o) {
  config.validate();
  const json upstream = verify_upstream(data, Stage::Phantom, config, false, o);
  StageResult r{kExitOk, false, out};
  if (prepare_output(out, Stage::Graphs, config, o)) {
    r.skipped = true;
    return r;
  }

  std::vector<std::pair<std::string, fs::path>> subjects;
  if (!fs::is_directory(data / layout::kVolumes)) throw IoError("dataset '" + data.string() + "' has no volumes/ directory");
  for (const auto& e : fs::directory_iterator(data / layout::kVolumes)) {
    const std::string id = strip_nifti_ext(e.path());
    if (!id.empty()) subjects.emplace_back(id, e.path());
  }
  std::sort(subjects.begin(), subjects.end());
  if (subjects.empty()) throw IoError("dataset '" + data.string() + "' contains no volumes");

  fs::path atlas_path = config.io.atlas, mask_path = config.io.atlas_mask;
  if (atlas_path.empty()) {
    if (fs::exists(data / layout::kAtlas)) {
      atlas_path = data / layout::kAtlas;
      if (mask_path.empty() && fs::exists(data / layout::kAtlasMask)) mask_path = data / layout::kAtlasMask;
    } else {
      atlas_path = subjects.front().second;
    }
  }
  const Volume atlas = load_volume(atlas_path);
  Volume mask;
  if (!mask_path.empty()) {
    mask = load_volume(mask_path);
  } else {
    double mean = 0.0;
    for (float v : atlas.data) mean += v;
    mask = threshold_mask(atlas, mean / static_cast<double>(atlas.data.size()));
  }
  const int p = config.grid.patch_size, s = config.grid.stride;
  const AtlasGrid grid = build_atlas_grid(mask, {p, p, p}, {s, s, s}, config.grid.min_mask_fraction);
  say(o, "[graphs] atlas '" + atlas_path.string() + "': " + std::to_string(grid.n_patches()) + " regions");

  fs::create_directories(out / layout::kGraphs);
  const GraphBuildConfig gc = config.graph_build();
  const std::string hash = stage_hash(config, Stage::Graphs);
  std::vector<std::string> errors(subjects.size());
  std::atomic<std::size_t> next{0};
  std::mutex log_mutex;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < subjects.size();) {
      const auto& [id, path] = subjects[i];
      try {
        SubjectRecord rec;
        rec.subject_id = id;
        rec.volume = load_volume(path);
        PatchGraph g = build_patch_graph(rec, atlas, grid, gc);
        g.config_hash = hash;
        save_patch_graph(g, out / layout::kGraphs / (id + ".graph"));
      } catch (const std::exception& e) {
        errors[i] = e.what();
        std::lock_guard lock(log_mutex);
        say(o, "[graphs] " + id + ": " + e.what());
      }
    }
  };
  const int jobs = std::max(1, std::min<int>(o.jobs, static_cast<int>(subjects.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  int failed = 0;
  json failures = json::array();
  std::ofstream fcsv;
  for (std::size_t i = 0; i < subjects.size(); ++i) {
    if (errors[i].empty()) continue;
    if (failed++ == 0) {
      fcsv.open(out / layout::kFailures);
      fcsv << "subject_id,error\n";
    }
    std::string msg = errors[i];
    std::replace(msg.begin(), msg.end(), ',', ';');
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    fcsv << subjects[i].first << ',' << msg << '\n';
    failures.push_back({{"subject_id", subjects[i].first}, {"error", errors[i]}});
  }
  const int ok = static_cast<int>(subjects.size()) - failed;
  write_stamp(out, Stage::Graphs, config, upstream,
              {{"graphs", ok}, {"failed", failures}, {"regions", grid.n_patches()}, {"atlas", fs::absolute(atlas_path).string()}});
  say(o, "[graphs] built " + std::to_string(ok) + " of " + std::to_string(subjects.size()) + " graphs");
  if (ok == 0) r.exit_code = kExitRuntime;
  else if (failed > 0) r.exit_code = kExitPartial;
  return r;
}

std::vector<PatchGraph> load_graph_dir(const fs::path& graphs) {
  std::vector<fs::path> files;
  const fs::path dir = graphs / layout::kGraphs;
  if (!fs::is_directory(dir)) throw IoError("'" + graphs.string() + "' has no graphs/ directory");
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".graph") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<PatchGraph> out;
  out.reserve(files.size());
  for (const auto& f : files) out.push_back(load_patch_graph(f));
  if (out.empty()) throw IoError("'" + graphs.string() + "' contains no graph archives");
  return out;
}

Eigen::MatrixXd extract_features(TrainState& model, const std::vector<PatchGraph>& graphs) {
  Eigen::MatrixXd x(static_cast<Eigen::Index>(graphs.size()), model.config.encoder.feature_dim());
  for (std::size_t i = 0; i < graphs.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) = extract_subject_features(model, graphs[i]).pooled.transpose();
  return x;
}

// ---------------------------------------------------------------- pretrain

StageResult run_pretrain(const RunConfig& config, const fs::path& graphs_dir, const fs::path& out, const StageOptions& o) {
  config.validate();
  const json upstream = verify_upstream(graphs_dir, Stage::Graphs, config, true, o);
  StageResult r{kExitOk, false, out};
  if (prepare_output(out, Stage::Pretrain, config, o, o.resume)) {
    r.skipped = true;
    return r;
  }
  const std::vector<PatchGraph> graphs = load_graph_dir(graphs_dir);
  const PretrainConfig pc = config.pretrain();

  const fs::path latest = out / layout::kLatestCheckpoint;
  const fs::path log_path = out / layout::kLossLog;
  std::optional<Trainer> trainer;
  std::vector<std::string> kept_rows;
  if (o.resume && fs::exists(latest)) {
    TrainState st = load_checkpoint(latest);
    if (st.config.config_hash != pc.config_hash)
      throw ConfigError("checkpoint '" + latest.string() + "' was written under a different configuration");
    trainer.emplace(graphs, std::move(st));
    std::ifstream in(log_path);
    std::string line;
    std::getline(in, line);
    while (std::getline(in, line))
      if (!line.empty() && std::stol(line.substr(0, line.find(','))) < trainer->state().step) kept_rows.push_back(line);
    say(o, "[pretrain] resuming at step " + std::to_string(trainer->state().step));
  } else {
    trainer.emplace(graphs, pc);
  }
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw IoError("cannot write '" + log_path.string() + "'");
  write_loss_log_header(log);
  for (const auto& row : kept_rows) log << row << '\n';

  const TrainState& st = trainer->state();
  say(o, "[pretrain] " + std::to_string(graphs.size()) + " graphs, " + std::to_string(st.total_steps) + " steps (" +
             std::to_string(st.steps_per_epoch) + " per epoch)");
  const int every = pc.train.checkpoint_every;
  trainer->run(std::nullopt, [&](const StepRecord& rec) {
    write_loss_log_row(log, rec);
    log.flush();
    if (every > 0 && (rec.step + 1) % every == 0) save_checkpoint(trainer->state(), latest);
    if (o.log != nullptr && (rec.step % 10 == 0 || rec.step + 1 == st.total_steps)) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "[pretrain] step %ld/%ld lr %.4g L_l %.4f L_g %.4f", rec.step + 1, st.total_steps,
                    rec.lr, rec.patch_loss, rec.graph_loss);
      say(o, buf);
    }
  });
  save_checkpoint(trainer->state(), out / layout::kCheckpoint);
  if (fs::exists(latest)) fs::remove(latest);
  write_stamp(out, Stage::Pretrain, config, upstream, {{"steps", st.total_steps}, {"graphs", graphs.size()}});
  return r;
}

// ---------------------------------------------------------------- probe

StageResult run_probe(const RunConfig& config, const fs::path& pretrain, const fs::path& graphs_dir,
                      const fs::path& labels_path, const fs::path& out, const StageOptions& o) {
  config.validate();
  verify_upstream(graphs_dir, Stage::Graphs, config, true, o);
  TrainState model = load_model(pretrain, config, o);
  StageResult r{kExitOk, false, out};
  if (prepare_output(out, Stage::Probe, config, o)) {
    r.skipped = true;
    return r;
  }
  const std::vector<PatchGraph> graphs = load_graph_dir(graphs_dir);
  const LabelTable labels = load_labels(resolve_labels(labels_path, graphs_dir));
  const Eigen::MatrixXd x = extract_features(model, graphs);
  const int n = static_cast<int>(graphs.size());
  const Folds folds = kfold_split(n, config.probe.folds, config.seed);

  std::vector<ProbeResult> results;
  fs::create_directories(out / layout::kModels);
  for (const auto& column : labels.columns) {
    std::vector<std::optional<double>> numbers(static_cast<std::size_t>(n));
    std::vector<std::optional<std::string>> classes(static_cast<std::size_t>(n));
    bool numeric = false, categorical = false;
    for (int i = 0; i < n; ++i) {
      const auto row = labels.rows.find(graphs[static_cast<std::size_t>(i)].subject_id);
      if (row == labels.rows.end() || !row->second.count(column)) continue;
      const LabelValue& v = row->second.at(column);
      if (v.kind == LabelValue::Kind::Number) {
        numbers[static_cast<std::size_t>(i)] = v.number;
        numeric = true;
      } else if (v.kind == LabelValue::Kind::Category) {
        classes[static_cast<std::size_t>(i)] = v.category;
        categorical = true;
      }
    }
    try {
      if (numeric && !categorical) {
        results.push_back(linear_probe_regression(column, x, numbers, folds, config.probe.ridge_lambda));
      } else if (categorical && !numeric) {
        results.push_back(linear_probe_classification(column, x, classes, folds, config.probe.logistic_l2));
        std::vector<int> rows;
        std::vector<std::string> ys;
        for (int i = 0; i < n; ++i)
          if (classes[static_cast<std::size_t>(i)]) {
            rows.push_back(i);
            ys.push_back(*classes[static_cast<std::size_t>(i)]);
          }
        Eigen::MatrixXd xs(static_cast<Eigen::Index>(rows.size()), x.cols());
        for (std::size_t k = 0; k < rows.size(); ++k) xs.row(static_cast<Eigen::Index>(k)) = x.row(rows[k]);
        write_json(out / layout::kModels / (column + ".json"),
                   model_to_json(column, LogisticModel::fit(xs, ys, config.probe.logistic_l2)));
      } else {
        continue;
      }
    } catch (const ContractError& e) {
      say(o, "[probe] skipping task '" + column + "': " + e.what());
      continue;
    }
    const ProbeResult& res = results.back();
    char buf[160];
    std::snprintf(buf, sizeof buf, "[probe] %-16s %-8s %.4f +/- %.4f", res.task.c_str(), res.metric.c_str(), res.mean, res.std);
    say(o, buf);
  }
  write_probe_csv(results, out / layout::kResultsCsv);
  write_probe_json(results, out / layout::kResultsJson);
  std::vector<std::string> ids;
  for (const auto& g : graphs) ids.push_back(g.subject_id);
  export_embeddings(out / layout::kFeatures, ids, x, labels.columns, label_strings(labels, graphs));
  write_stamp(out, Stage::Probe, config,
              json::array({{{"stage", "pretrain"}, {"dir", fs::absolute(pretrain).string()}, {"hash", stage_hash(config, Stage::Pretrain)}},
                           {{"stage", "graphs"}, {"dir", fs::absolute(graphs_dir).string()}, {"hash", stage_hash(config, Stage::Graphs)}}}));
  return r;
}

// ---------------------------------------------------------------- explain

StageResult run_explain(const RunConfig& config, const fs::path& pretrain, const fs::path& graphs_dir,
                        const fs::path& probe, const std::string& subject_id, const fs::path& out, const StageOptions& o) {
  config.validate();
  verify_upstream(graphs_dir, Stage::Graphs, config, true, o);
  verify_upstream(probe, Stage::Probe, config, true, o);
  TrainState model = load_model(pretrain, config, o);
  StageResult r{kExitOk, false, out};

  std::string task = config.explain.task;
  if (task.empty()) {
    std::ifstream in(probe / layout::kResultsJson);
    const json results = json::parse(in, nullptr, false);
    if (!results.is_discarded())
      for (const auto& res : results)
        if (res.value("metric", "") == "accuracy") {
          task = res.value("task", "");
          break;
        }
    if (task.empty()) throw IoError("probe output '" + probe.string() + "' has no classification task to explain");
  }
  const fs::path model_path = probe / layout::kModels / (task + ".json");
  if (!fs::exists(model_path)) throw IoError("no probe model for task '" + task + "' in '" + probe.string() + "'");
  const fs::path graph_path = graphs_dir / layout::kGraphs / (subject_id + ".graph");
  if (!fs::exists(graph_path)) throw IoError("no graph for subject '" + subject_id + "' in '" + graphs_dir.string() + "'");

  if (fs::exists(out) && !fs::is_empty(out)) {
    const auto stamp = read_stamp(out);
    const bool same = stamp && stamp->value("hash", "") == stage_hash(config, Stage::Explain) &&
                      stamp->value("subject_id", "") == subject_id && stamp->value("task", "") == task;
    if (same && !o.force) {
      say(o, "[explain] '" + out.string() + "' is up to date; skipping");
      r.skipped = true;
      return r;
    }
    if (!o.force) throw ConfigError("output directory '" + out.string() + "' is not empty (use --force to replace it)");
    fs::remove_all(out);
  }
  fs::create_directories(out);

  std::ifstream min(model_path);
  const LogisticModel probe_model = model_from_json(json::parse(min));
  const PatchGraph graph = load_patch_graph(graph_path);
  const SubjectFeatures feats = extract_subject_features(model, graph);
  const auto maps = class_activations(probe_model, feats.h_updated, graph.region_ids, subject_id,
                                      config.explain.affine_prenormalize, config.explain.target_class);
  const Eigen::VectorXd logits = probe_model.logits(feats.pooled.transpose()).row(0).transpose();

  std::optional<Volume> source;
  if (const auto data = dataset_of(graphs_dir))
    if (const auto v = find_volume(*data / layout::kVolumes, subject_id)) source = load_volume(*v);

  json summary = json::array();
  for (const auto& m : maps) {
    auto class_index = [&](const std::string& name) {
      return static_cast<Eigen::Index>(std::find(probe_model.classes.begin(), probe_model.classes.end(), name) -
                                       probe_model.classes.begin());
    };
    const double probe_logit = logits(class_index(m.target_class)) - logits(class_index(m.reference_class));
    const std::string stem = subject_id + "_" + task + "_" + m.target_class;
    const Volume heat = render_heatmap(m, graph);
    save_volume(heat, out / (stem + "_heatmap.nii.gz"));
    std::ofstream csv(out / (stem + "_regions.csv"));
    csv.precision(10);
    csv << "region_id,center_x,center_y,center_z,score,normalized\n";
    for (int k = 0; k < graph.n_nodes(); ++k) {
      const auto& cs = graph.centers_subject[static_cast<std::size_t>(k)];
      csv << graph.region_ids[static_cast<std::size_t>(k)] << ',' << cs.x() << ',' << cs.y() << ',' << cs.z() << ','
          << m.raw(k) << ',' << m.normalized(k) << '\n';
    }
    if (config.explain.png && source) {
      const int z = config.explain.slice >= 0 ? config.explain.slice : source->shape[2] / 2;
      write_slice_png(*source, z, out / (stem + "_slice.png"), &heat);
    }
    Eigen::Index top;
    m.raw.maxCoeff(&top);
    summary.push_back({{"class", m.target_class},
                       {"bias", m.bias},
                       {"reference", m.reference_class},
                       {"probe_logit", probe_logit},
                       {"decomposed_logit", m.logit()},
                       {"top_region", graph.region_ids[static_cast<std::size_t>(top)]}});
  }
  write_json(out / "summary.json", {{"subject_id", subject_id}, {"task", task}, {"maps", summary},
                                    {"predicted", probe_model.predict(feats.pooled.transpose()).front()}});
  write_stamp(out, Stage::Explain, config,
              json::array({{{"stage", "probe"}, {"dir", fs::absolute(probe).string()}, {"hash", stage_hash(config, Stage::Probe)}}}),
              {{"subject_id", subject_id}, {"task", task}});
  say(o, "[explain] " + subject_id + ": wrote " + std::to_string(maps.size()) + " activation map(s) to '" + out.string() + "'");
  return r;
}

// ---------------------------------------------------------------- embeddings

StageResult run_export_embeddings(const RunConfig& config, const fs::path& pretrain, const fs::path& graphs_dir,
                                  const fs::path& labels_path, const fs::path& out_csv, const StageOptions& o) {
  config.validate();
  verify_upstream(graphs_dir, Stage::Graphs, config, true, o);
  TrainState model = load_model(pretrain, config, o);
  if (fs::exists(out_csv) && !o.force) throw ConfigError("'" + out_csv.string() + "' exists (use --force to replace it)");
  if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
  const std::vector<PatchGraph> graphs = load_graph_dir(graphs_dir);
  LabelTable labels;
  try {
    labels = load_labels(resolve_labels(labels_path, graphs_dir));
  } catch (const IoError& e) {
    if (!labels_path.empty()) throw;
    say(o, std::string("note: ") + e.what() + "; exporting features only");
  }
  const Eigen::MatrixXd x = extract_features(model, graphs);
  std::vector<std::string> ids;
  for (const auto& g : graphs) ids.push_back(g.subject_id);
  export_embeddings(out_csv, ids, x, labels.columns, label_strings(labels, graphs));
  const Eigen::MatrixXd pc = pca_2d(x);
  fs::path pca_path = out_csv;
  pca_path.replace_filename(out_csv.stem().string() + "_pca2d.csv");
  std::ofstream pca(pca_path);
  pca.precision(10);
  pca << "subject_id,pc1,pc2\n";
  for (std::size_t i = 0; i < ids.size(); ++i)
    pca << ids[i] << ',' << pc(static_cast<Eigen::Index>(i), 0) << ',' << pc(static_cast<Eigen::Index>(i), 1) << '\n';
  say(o, "[embeddings] wrote " + std::to_string(ids.size()) + " rows to '" + out_csv.string() + "'");
  return {kExitOk, false, out_csv};
}

}  // namespace ctxssl
