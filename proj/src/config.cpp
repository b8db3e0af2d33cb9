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


#include "ctxssl/config.hpp"

#include <fstream>

#include "ctxssl/archive.hpp"
#include "ctxssl/error.hpp"

namespace ctxssl {

using nlohmann::json;

namespace {

json vec3(const Eigen::Vector3d& v) { return json::array({v.x(), v.y(), v.z()}); }
Eigen::Vector3d vec3(const json& j) { return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()}; }

std::string rule_name(SeverityRule r) { return r == SeverityRule::Binary ? "binary" : "graded"; }
SeverityRule rule_of(const std::string& s) {
  if (s == "binary") return SeverityRule::Binary;
  if (s == "graded") return SeverityRule::Graded;
  throw ConfigError("phantom.severity_rule must be 'binary' or 'graded', got '" + s + "'");
}

std::string kind_name(Transform::Kind k) { return k == Transform::Kind::Affine ? "affine" : "affine+displacement"; }
Transform::Kind kind_of(const std::string& s) {
  if (s == "affine") return Transform::Kind::Affine;
  if (s == "affine+displacement") return Transform::Kind::AffineDisplacement;
  throw ConfigError("registration.kind must be 'affine' or 'affine+displacement', got '" + s + "'");
}

bool compatible(const json& base, const json& user) {
  if (base.is_number() && user.is_number()) return true;
  return base.type() == user.type();
}

void merge_into(json& base, const json& user, const std::string& path) {
  if (!user.is_object()) throw ConfigError("configuration section '" + path + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError("unknown config key '" + full + "'");
    json& slot = base[key];
    if (slot.is_object()) {
      merge_into(slot, value, full);
    } else {
      if (!compatible(slot, value)) throw ConfigError("config key '" + full + "' has the wrong type");
      slot = value;
    }
  }
}

}  // namespace

RunConfig RunConfig::preset_named(const std::string& name) {
  RunConfig c;
  c.preset = name;
  if (name == "desk") {
    c.trainer.epochs = 5;
    // A desk run is ~65 steps; at 0.999 the key encoders would stay at their
    // initialisation for the whole run.
    c.contrastive.momentum = 0.9;
    return c;
  }
  if (name == "paper") {
    c.encoder = PatchEncoderConfig::paper();
    c.grid.patch_size = 32;
    c.grid.stride = 24;
    PhantomSpec& s = c.phantom.spec;
    s.shape = {96, 96, 96};
    s.lattice_step = 24.0;
    s.organ_semi_axis = 40.0;
    s.lesion_radius = 8.0;
    s.texture_scale = 8.0;
    s.translation_mm = 4.0;
    s.warp_amplitude_mm = 2.0;
    c.augment.elastic_grid_spacing = 10.0;
    c.augment.elastic_max_displacement = 4.0;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "' (expected 'desk' or 'paper')");
}

json RunConfig::to_json() const {
  const PhantomSpec& s = phantom.spec;
  json j;
  j["preset"] = preset;
  j["seed"] = seed;
  j["phantom"] = {
      {"count", phantom.count},
      {"diseased_fraction", phantom.diseased_fraction},
      {"regions_min", phantom.regions_min},
      {"regions_max", phantom.regions_max},
      {"shape", s.shape},
      {"spacing", vec3(s.spacing)},
      {"lattice", s.lattice},
      {"lattice_step", s.lattice_step},
      {"lesion_intensity_delta", s.lesion_intensity_delta},
      {"lesion_radius", s.lesion_radius},
      {"severity_rule", rule_name(s.severity_rule)},
      {"organ_semi_axis", s.organ_semi_axis},
      {"organ_exponent", s.organ_exponent},
      {"organ_intensity", s.organ_intensity},
      {"texture_amplitude", s.texture_amplitude},
      {"texture_scale", s.texture_scale},
      {"gain_jitter", s.gain_jitter},
      {"noise_sigma", s.noise_sigma},
      {"rotation_deg", s.rotation_deg},
      {"scale_jitter", s.scale_jitter},
      {"translation_mm", s.translation_mm},
      {"warp_amplitude_mm", s.warp_amplitude_mm},
  };
  j["grid"] = {{"patch_size", grid.patch_size},
               {"stride", grid.stride},
               {"min_mask_fraction", grid.min_mask_fraction},
               {"threshold_mm", grid.threshold_mm},
               {"atlas_space_adjacency", grid.atlas_space_adjacency}};
  j["io"] = {{"zscore", io.zscore}, {"atlas", io.atlas}, {"atlas_mask", io.atlas_mask}};
  j["registration"] = {{"kind", kind_name(registration.kind)},
                       {"lambda", registration.lambda},
                       {"levels", registration.levels},
                       {"iterations", registration.iterations},
                       {"tolerance", registration.tolerance},
                       {"center_of_mass_init", registration.center_of_mass_init},
                       {"displacement_grid", registration.displacement_grid},
                       {"displacement_lambda", registration.displacement_lambda},
                       {"displacement_iterations", registration.displacement_iterations},
                       {"inverse_tolerance_mm", registration.inverse_tolerance_mm}};
  j["encoder"] = {{"channels", encoder.channels}, {"coord_dim", encoder.coord_dim}, {"bn_momentum", encoder.bn_momentum},
                  {"feature_dim", encoder.feature_dim()}};
  j["augment"] = {{"elastic", augment.elastic},
                  {"elastic_grid_spacing", augment.elastic_grid_spacing},
                  {"elastic_max_displacement", augment.elastic_max_displacement},
                  {"noise", augment.noise},
                  {"noise_sigma", augment.noise_sigma},
                  {"contrast", augment.contrast},
                  {"gamma_min", augment.gamma_min},
                  {"gamma_max", augment.gamma_max}};
  j["contrastive"] = {{"temperature", contrastive.temperature},
                      {"queue_capacity", contrastive.queue_capacity},
                      {"momentum", contrastive.momentum},
                      {"patch_batch", contrastive.patch_batch},
                      {"graph_batch", contrastive.graph_batch},
                      {"graph_queue", contrastive.graph_queue},
                      {"graph_queue_capacity", contrastive.graph_queue_capacity}};
  j["trainer"] = {{"epochs", trainer.epochs},
                  {"lr", trainer.lr},
                  {"beta1", trainer.adam.beta1},
                  {"beta2", trainer.adam.beta2},
                  {"eps", trainer.adam.eps},
                  {"weight_decay", trainer.adam.weight_decay},
                  {"graph_weight", trainer.graph_weight},
                  {"stop_graph_gradient", trainer.stop_graph_gradient},
                  {"checkpoint_every", trainer.checkpoint_every}};
  j["probe"] = {{"folds", probe.folds}, {"ridge_lambda", probe.ridge_lambda}, {"logistic_l2", probe.logistic_l2}};
  j["explain"] = {{"task", explain.task},
                  {"target_class", explain.target_class},
                  {"affine_prenormalize", explain.affine_prenormalize},
                  {"png", explain.png},
                  {"slice", explain.slice}};
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  try {
    RunConfig c;
    c.preset = j.at("preset").get<std::string>();
    c.seed = j.at("seed").get<std::uint64_t>();
    const json& p = j.at("phantom");
    c.phantom.count = p.at("count");
    c.phantom.diseased_fraction = p.at("diseased_fraction");
    c.phantom.regions_min = p.at("regions_min");
    c.phantom.regions_max = p.at("regions_max");
    PhantomSpec& s = c.phantom.spec;
    s.shape = p.at("shape").get<Shape3>();
    s.spacing = vec3(p.at("spacing"));
    s.lattice = p.at("lattice").get<std::array<int, 3>>();
    s.lattice_step = p.at("lattice_step");
    s.lesion_intensity_delta = p.at("lesion_intensity_delta");
    s.lesion_radius = p.at("lesion_radius");
    s.severity_rule = rule_of(p.at("severity_rule").get<std::string>());
    s.organ_semi_axis = p.at("organ_semi_axis");
    s.organ_exponent = p.at("organ_exponent");
    s.organ_intensity = p.at("organ_intensity");
    s.texture_amplitude = p.at("texture_amplitude");
    s.texture_scale = p.at("texture_scale");
    s.gain_jitter = p.at("gain_jitter");
    s.noise_sigma = p.at("noise_sigma");
    s.rotation_deg = p.at("rotation_deg");
    s.scale_jitter = p.at("scale_jitter");
    s.translation_mm = p.at("translation_mm");
    s.warp_amplitude_mm = p.at("warp_amplitude_mm");

    const json& g = j.at("grid");
    c.grid.patch_size = g.at("patch_size");
    c.grid.stride = g.at("stride");
    c.grid.min_mask_fraction = g.at("min_mask_fraction");
    c.grid.threshold_mm = g.at("threshold_mm");
    c.grid.atlas_space_adjacency = g.at("atlas_space_adjacency");

    const json& io = j.at("io");
    c.io.zscore = io.at("zscore");
    c.io.atlas = io.at("atlas");
    c.io.atlas_mask = io.at("atlas_mask");

    const json& r = j.at("registration");
    c.registration.kind = kind_of(r.at("kind").get<std::string>());
    c.registration.lambda = r.at("lambda");
    c.registration.levels = r.at("levels");
    c.registration.iterations = r.at("iterations");
    c.registration.tolerance = r.at("tolerance");
    c.registration.center_of_mass_init = r.at("center_of_mass_init");
    c.registration.displacement_grid = r.at("displacement_grid");
    c.registration.displacement_lambda = r.at("displacement_lambda");
    c.registration.displacement_iterations = r.at("displacement_iterations");
    c.registration.inverse_tolerance_mm = r.at("inverse_tolerance_mm");

    const json& e = j.at("encoder");
    c.encoder.channels = e.at("channels").get<std::vector<int>>();
    c.encoder.coord_dim = e.at("coord_dim");
    c.encoder.bn_momentum = e.at("bn_momentum");
    c.encoder.patch_size = c.grid.patch_size;
    if (!c.encoder.channels.empty() && e.at("feature_dim").get<int>() != c.encoder.feature_dim())
      throw ConfigError("encoder.feature_dim is derived from the last entry of encoder.channels and cannot be set on its own");

    const json& a = j.at("augment");
    c.augment.elastic = a.at("elastic");
    c.augment.elastic_grid_spacing = a.at("elastic_grid_spacing");
    c.augment.elastic_max_displacement = a.at("elastic_max_displacement");
    c.augment.noise = a.at("noise");
    c.augment.noise_sigma = a.at("noise_sigma");
    c.augment.contrast = a.at("contrast");
    c.augment.gamma_min = a.at("gamma_min");
    c.augment.gamma_max = a.at("gamma_max");

    const json& k = j.at("contrastive");
    c.contrastive.temperature = k.at("temperature");
    c.contrastive.queue_capacity = k.at("queue_capacity");
    c.contrastive.momentum = k.at("momentum");
    c.contrastive.patch_batch = k.at("patch_batch");
    c.contrastive.graph_batch = k.at("graph_batch");
    c.contrastive.graph_queue = k.at("graph_queue");
    c.contrastive.graph_queue_capacity = k.at("graph_queue_capacity");

    const json& t = j.at("trainer");
    c.trainer.epochs = t.at("epochs");
    c.trainer.lr = t.at("lr");
    c.trainer.adam.beta1 = t.at("beta1");
    c.trainer.adam.beta2 = t.at("beta2");
    c.trainer.adam.eps = t.at("eps");
    c.trainer.adam.weight_decay = t.at("weight_decay");
    c.trainer.graph_weight = t.at("graph_weight");
    c.trainer.stop_graph_gradient = t.at("stop_graph_gradient");
    c.trainer.checkpoint_every = t.at("checkpoint_every");
    c.trainer.seed = c.seed;

    const json& pr = j.at("probe");
    c.probe.folds = pr.at("folds");
    c.probe.ridge_lambda = pr.at("ridge_lambda");
    c.probe.logistic_l2 = pr.at("logistic_l2");

    const json& x = j.at("explain");
    c.explain.task = x.at("task");
    c.explain.target_class = x.at("target_class");
    c.explain.affine_prenormalize = x.at("affine_prenormalize");
    c.explain.png = x.at("png");
    c.explain.slice = x.at("slice");
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed configuration: ") + e.what());
  }
}

void RunConfig::validate() const {
  if (phantom.count < 1) throw ConfigError("phantom.count must be >= 1");
  if (phantom.diseased_fraction < 0.0 || phantom.diseased_fraction > 1.0)
    throw ConfigError("phantom.diseased_fraction must be in [0, 1]");
  if (phantom.regions_min < 1 || phantom.regions_max < phantom.regions_min ||
      phantom.regions_max > phantom.spec.lattice_cells())
    throw ConfigError("phantom.regions_min/regions_max must satisfy 1 <= min <= max <= lattice cells");
  try {
    phantom.spec.validate();
  } catch (const ContractError& e) {
    throw ConfigError(std::string("phantom: ") + e.what());
  }
  if (grid.patch_size < 2) throw ConfigError("grid.patch_size must be >= 2");
  if (grid.stride < 1 || grid.stride > grid.patch_size) throw ConfigError("grid.stride must be in [1, grid.patch_size]");
  if (grid.min_mask_fraction < 0.0 || grid.min_mask_fraction > 1.0) throw ConfigError("grid.min_mask_fraction must be in [0, 1]");
  if (registration.levels < 1 || registration.iterations < 0) throw ConfigError("registration.levels must be >= 1");
  encoder.validate();
  augment.validate(grid.patch_size);
  contrastive.validate();
  trainer.validate();
  if (probe.folds < 2) throw ConfigError("probe.folds must be >= 2");
  if (probe.ridge_lambda < 0.0 || probe.logistic_l2 < 0.0) throw ConfigError("probe regularisation must be >= 0");
}

GraphBuildConfig RunConfig::graph_build() const {
  GraphBuildConfig g;
  g.registration = registration;
  g.threshold_mm = grid.threshold_mm;
  g.atlas_space_adjacency = grid.atlas_space_adjacency;
  g.zscore = io.zscore;
  g.inverse_consistency_mm = registration.inverse_tolerance_mm;
  return g;
}

PretrainConfig RunConfig::pretrain() const {
  PretrainConfig p;
  p.encoder = encoder;
  p.encoder.patch_size = grid.patch_size;
  p.contrastive = contrastive;
  p.augment = augment;
  p.train = trainer;
  p.train.seed = seed;
  p.config_hash = stage_hash(*this, Stage::Pretrain);
  return p;
}

json merge_config(const json& base, const json& user) {
  json out = base;
  merge_into(out, user, "");
  return out;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  json patch = value;
  std::string rest = key;
  std::vector<std::string> parts;
  for (std::size_t pos; (pos = rest.find('.')) != std::string::npos; rest = rest.substr(pos + 1)) parts.push_back(rest.substr(0, pos));
  parts.push_back(rest);
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) patch = json{{*it, patch}};
  doc = merge_config(doc, patch);
}

RunConfig resolve_config(const std::string& preset, const std::filesystem::path& file,
                         const std::vector<std::string>& overrides) {
  json user = json::object();
  if (!file.empty()) {
    std::ifstream in(file);
    if (!in) throw ConfigError("cannot read config file '" + file.string() + "'");
    user = json::parse(in, nullptr, false);
    if (user.is_discarded() || !user.is_object()) throw ConfigError("config file '" + file.string() + "' is not a JSON object");
  }
  std::string name = preset;
  if (name.empty()) name = user.contains("preset") && user["preset"].is_string() ? user["preset"].get<std::string>() : "desk";
  json doc = RunConfig::preset_named(name).to_json();
  user.erase("preset");
  doc = merge_config(doc, user);
  for (const auto& o : overrides) apply_override(doc, o);
  if (doc.at("preset").get<std::string>() != name) throw ConfigError("the preset is selected with --preset, not --set");
  RunConfig c = RunConfig::from_json(doc);
  c.validate();
  return c;
}

std::string json_hash(const json& j) { return fnv1a_hex(j.dump()); }

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::Phantom: return "phantom";
    case Stage::Graphs: return "graphs";
    case Stage::Pretrain: return "pretrain";
    case Stage::Probe: return "probe";
    case Stage::Explain: return "explain";
  }
  return "unknown";
}

std::string stage_hash(const RunConfig& config, Stage stage) {
  const json j = config.to_json();
  json h = {{"stage", stage_name(stage)}};
  switch (stage) {
    case Stage::Explain:
      h["explain"] = j["explain"];
      [[fallthrough]];
    case Stage::Probe:
      h["probe"] = j["probe"];
      [[fallthrough]];
    case Stage::Pretrain:
      for (const char* k : {"encoder", "augment", "contrastive", "trainer"}) h[k] = j[k];
      [[fallthrough]];
    case Stage::Graphs:
      for (const char* k : {"grid", "io", "registration"}) h[k] = j[k];
      [[fallthrough]];
    case Stage::Phantom:
      h["seed"] = j["seed"];
      h["phantom"] = j["phantom"];
  }
  return json_hash(h);
}

}  // namespace ctxssl
