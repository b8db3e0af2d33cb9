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


#include "ctxssl/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>

#include "ctxssl/error.hpp"

namespace ctxssl {

using nn::Mat;

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kPatchStream = 2;
constexpr std::uint64_t kPatchViewStream = 3;
constexpr std::uint64_t kEpochStream = 4;
constexpr std::uint64_t kGraphViewStream = 5;

constexpr const char* kCheckpointFormat = "ctxssl.checkpoint/1";

std::vector<int> node_of_region(const PatchGraph& g) {
  std::vector<int> out(static_cast<std::size_t>(g.n_nodes()), -1);
  for (int k = 0; k < g.n_nodes(); ++k) {
    const int r = g.region_ids[static_cast<std::size_t>(k)];
    if (r < 0 || r >= g.n_nodes() || out[static_cast<std::size_t>(r)] != -1)
      throw ContractError("graph '" + g.subject_id + "': region ids are not a permutation of 0..N-1");
    out[static_cast<std::size_t>(r)] = k;
  }
  return out;
}

void copy_patch(std::span<const float> src, Mat& dst, Eigen::Index offset) {
  for (std::size_t i = 0; i < src.size(); ++i) dst(0, offset + static_cast<Eigen::Index>(i)) = src[i];
}

// Fisher-Yates on 0..n-1, stopping after the first `take` positions are drawn.
std::vector<int> draw_permutation(int n, int take, Rng& rng) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  for (int i = 0; i < take && i < n - 1; ++i) {
    const int j = i + static_cast<int>(rng.index(static_cast<std::size_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(take));
  return idx;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("trainer.epochs must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("trainer.lr must be > 0");
  if (adam.beta1 < 0.0 || adam.beta1 >= 1.0 || adam.beta2 < 0.0 || adam.beta2 >= 1.0)
    throw ConfigError("trainer adam betas must be in [0, 1)");
  if (adam.weight_decay < 0.0) throw ConfigError("trainer.weight_decay must be >= 0");
  if (graph_weight < 0.0) throw ConfigError("trainer.graph_weight must be >= 0");
  if (checkpoint_every < 0) throw ConfigError("trainer.checkpoint_every must be >= 0");
}

// ---------------------------------------------------------------- grid signature

GridSignature GridSignature::of(const PatchGraph& g) {
  GridSignature s;
  s.n_nodes = g.n_nodes();
  s.patch_size = g.patch_size;
  s.coords.resize(3, s.n_nodes);
  const auto nodes = node_of_region(g);
  for (int r = 0; r < s.n_nodes; ++r) s.coords.col(r) = g.centers_normalized[static_cast<std::size_t>(nodes[static_cast<std::size_t>(r)])];
  return s;
}

bool GridSignature::matches(const GridSignature& o) const {
  if (n_nodes != o.n_nodes || patch_size != o.patch_size) return false;
  return (coords - o.coords).cwiseAbs().maxCoeff() <= 1e-9;
}

// ---------------------------------------------------------------- trainer

Trainer::Trainer(std::span<const PatchGraph> graphs, PretrainConfig config) : graphs_(graphs) {
  config.encoder.validate();
  config.contrastive.validate();
  config.augment.validate(config.encoder.patch_size);
  config.train.validate();
  state_.config = std::move(config);
  prepare();
  const PretrainConfig& c = state_.config;
  const int f = c.encoder.feature_dim();
  state_.pair = MomentumPair(c.encoder, c.contrastive.momentum);
  Rng init(derive_seed(c.train.seed, {kInitStream}));
  state_.pair.init(init);
  state_.adam = Adam(c.train.adam);
  state_.patch_queue = NegativeQueue(f, c.contrastive.queue_capacity);
  state_.graph_queue = NegativeQueue(f, c.contrastive.graph_queue ? c.contrastive.graph_queue_capacity : 0);
  state_.step = 0;
}

Trainer::Trainer(std::span<const PatchGraph> graphs, TrainState state) : graphs_(graphs), state_(std::move(state)) {
  const GridSignature saved = state_.grid;
  const long saved_total = state_.total_steps;
  prepare();
  if (!saved.matches(state_.grid)) throw ContractError("dataset grid does not match the checkpoint");
  if (saved_total != state_.total_steps)
    throw ContractError("dataset size changes the step schedule recorded in the checkpoint");
}

void Trainer::prepare() {
  if (graphs_.empty()) throw ContractError("pretraining needs at least one graph");
  const PretrainConfig& c = state_.config;
  const Size3 want{c.encoder.patch_size, c.encoder.patch_size, c.encoder.patch_size};
  state_.grid = GridSignature::of(graphs_[0]);
  if (state_.grid.patch_size != want)
    throw ContractError("graph patch size does not match encoder.patch_size = " + std::to_string(c.encoder.patch_size));
  adj_hat_.clear();
  for (const auto& g : graphs_) {
    g.validate();
    if (!GridSignature::of(g).matches(state_.grid))
      throw ContractError("graph '" + g.subject_id + "' was built on a different atlas grid");
    adj_hat_.push_back(normalized_adjacency(g.adjacency));
  }
  const int n = static_cast<int>(graphs_.size());
  const int gb = std::min(c.contrastive.graph_batch, n);
  state_.steps_per_epoch = (n + gb - 1) / gb;
  state_.total_steps = static_cast<long>(state_.steps_per_epoch) * c.train.epochs;
}

PatchBatch Trainer::patch_batch(long step) const {
  const PretrainConfig& c = state_.config;
  const std::uint64_t seed = c.train.seed;
  const auto s = static_cast<std::uint64_t>(step);
  Rng rng(derive_seed(seed, {kPatchStream, s}));
  const int n = static_cast<int>(graphs_.size());
  PatchBatch b;
  b.region = static_cast<int>(rng.index(static_cast<std::size_t>(state_.grid.n_nodes)));
  b.batch = std::min(c.contrastive.patch_batch, n);
  const auto subjects = draw_permutation(n, b.batch, rng);
  const Size3 size = state_.grid.patch_size;
  const auto vox = static_cast<Eigen::Index>(size[0]) * size[1] * size[2];
  b.view_q.resize(1, b.batch * vox);
  b.view_k.resize(1, b.batch * vox);
  b.coords = state_.grid.coords.col(b.region).replicate(1, b.batch);
  for (int i = 0; i < b.batch; ++i) {
    const PatchGraph& g = graphs_[static_cast<std::size_t>(subjects[static_cast<std::size_t>(i)])];
    const int node = node_of_region(g)[static_cast<std::size_t>(b.region)];
    const auto src = g.patch(node);
    const auto ui = static_cast<std::uint64_t>(i);
    copy_patch(random_view(src, size, c.augment, Rng(derive_seed(seed, {kPatchViewStream, s, ui, 0}))), b.view_q, i * vox);
    copy_patch(random_view(src, size, c.augment, Rng(derive_seed(seed, {kPatchViewStream, s, ui, 1}))), b.view_k, i * vox);
  }
  return b;
}

GraphBatch Trainer::graph_batch(long step) const {
  const PretrainConfig& c = state_.config;
  const std::uint64_t seed = c.train.seed;
  const auto s = static_cast<std::uint64_t>(step);
  const int n = static_cast<int>(graphs_.size());
  const long epoch = step / state_.steps_per_epoch;
  const long pos = step % state_.steps_per_epoch;
  Rng perm_rng(derive_seed(seed, {kEpochStream, static_cast<std::uint64_t>(epoch)}));
  const auto perm = draw_permutation(n, n, perm_rng);

  GraphBatch b;
  b.batch = std::min(c.contrastive.graph_batch, n);
  b.nodes = state_.grid.n_nodes;
  const Size3 size = state_.grid.patch_size;
  const auto vox = static_cast<Eigen::Index>(size[0]) * size[1] * size[2];
  const Eigen::Index cols = static_cast<Eigen::Index>(b.batch) * b.nodes;
  b.view_q.resize(1, cols * vox);
  b.view_k.resize(1, cols * vox);
  b.coords.resize(3, cols);
  for (int i = 0; i < b.batch; ++i) {
    const int subject = perm[static_cast<std::size_t>((pos * b.batch + i) % n)];
    const PatchGraph& g = graphs_[static_cast<std::size_t>(subject)];
    b.adj_hat.push_back(adj_hat_[static_cast<std::size_t>(subject)]);
    for (int k = 0; k < b.nodes; ++k) {
      const Eigen::Index col = static_cast<Eigen::Index>(i) * b.nodes + k;
      b.coords.col(col) = g.centers_normalized[static_cast<std::size_t>(k)];
      const auto src = g.patch(k);
      const auto ui = static_cast<std::uint64_t>(i), uk = static_cast<std::uint64_t>(k);
      copy_patch(random_view(src, size, c.augment, Rng(derive_seed(seed, {kGraphViewStream, s, ui, uk, 0}))), b.view_q, col * vox);
      copy_patch(random_view(src, size, c.augment, Rng(derive_seed(seed, {kGraphViewStream, s, ui, uk, 1}))), b.view_k, col * vox);
    }
  }
  return b;
}

StepRecord Trainer::step() {
  if (finished()) throw ContractError("training already finished");
  const PretrainConfig& c = state_.config;
  auto params = state_.pair.online.params();
  for (auto* p : params) p->zero_grad();

  const PatchBatch pb = patch_batch(state_.step);
  const GraphBatch gb = graph_batch(state_.step);
  const LossStep lp = patch_level_loss(state_.pair, pb, state_.patch_queue, c.contrastive, 1.0);
  const LossStep lg = graph_level_loss(state_.pair, gb, c.contrastive.graph_queue ? &state_.graph_queue : nullptr,
                                       c.contrastive, c.train.graph_weight, c.train.stop_graph_gradient);

  StepRecord r;
  r.step = state_.step;
  r.lr = cosine_lr(state_.step, state_.total_steps, c.train.lr);
  r.patch_loss = lp.loss;
  r.graph_loss = lg.loss;
  r.loss = combined_loss(lp.loss, lg.loss, c.train.graph_weight);
  r.patch_region = pb.region;
  r.patch_negatives = lp.negatives_per_query;
  r.graph_negatives = lg.negatives_per_query;
  if (!std::isfinite(r.loss)) {
    char msg[160];
    std::snprintf(msg, sizeof msg, "non-finite loss at step %ld (L_l = %g, L_g = %g, lr = %g)", r.step, r.patch_loss,
                  r.graph_loss, r.lr);
    throw NumericError(msg);
  }
  for (auto* p : params)
    if (!p->grad.allFinite()) throw NumericError("non-finite gradient in '" + p->name + "' at step " + std::to_string(r.step));

  state_.adam.step(params, r.lr);
  state_.pair.update();
  state_.patch_queue.push(lp.keys, pb.region);
  if (c.contrastive.graph_queue) state_.graph_queue.push(lg.keys, NegativeQueue::kGraphTag);
  ++state_.step;
  return r;
}

void Trainer::run(std::optional<long> until_step, const std::function<void(const StepRecord&)>& on_step) {
  const long stop = std::min(until_step.value_or(state_.total_steps), state_.total_steps);
  while (state_.step < stop) {
    const StepRecord r = step();
    if (on_step) on_step(r);
  }
}

// ---------------------------------------------------------------- checkpoint

namespace {

void put_params(Archive& a, const std::string& prefix, Encoders& e) {
  for (auto* p : e.params()) a.put_matrix(prefix + "/" + p->name, p->value);
  for (const auto& b : e.buffers()) a.put_matrix(prefix + "_buffer/" + b.name, *b.value);
}

void get_params(const Archive& a, const std::string& prefix, Encoders& e) {
  for (auto* p : e.params()) {
    const Mat m = a.get_matrix(prefix + "/" + p->name);
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw IoError("checkpoint parameter '" + p->name + "' has the wrong shape");
    p->value = m;
    p->zero_grad();
  }
  for (const auto& b : e.buffers()) {
    const Mat m = a.get_matrix(prefix + "_buffer/" + b.name);
    if (m.rows() != b.value->size() || m.cols() != 1) throw IoError("checkpoint buffer '" + b.name + "' has the wrong shape");
    *b.value = m.col(0);
  }
}

void put_f(Archive& a, const std::string& k, double v) { a.put_f64(k, {v}); }
double get_f(const Archive& a, const std::string& k) {
  const auto v = a.get_f64(k);
  if (v.size() != 1) throw IoError("checkpoint entry '" + k + "' is not a scalar");
  return v[0];
}

}  // namespace

void save_checkpoint(const TrainState& st, const std::filesystem::path& path) {
  TrainState& s = const_cast<TrainState&>(st);  // parameter collection is non-const; nothing is modified
  const PretrainConfig& c = s.config;
  Archive a;
  a.put_string("meta/format", kCheckpointFormat);
  a.put_string("meta/config_hash", c.config_hash);
  a.put_i64("meta/step", s.step);
  a.put_i64("meta/total_steps", s.total_steps);
  a.put_i64("meta/steps_per_epoch", s.steps_per_epoch);
  a.put_i64("meta/epoch", s.steps_per_epoch > 0 ? s.step / s.steps_per_epoch : 0);
  a.put_i64("meta/seed", static_cast<std::int64_t>(c.train.seed));

  a.put_i64("meta/encoder/patch_size", c.encoder.patch_size);
  a.put_i32("meta/encoder/channels", std::vector<std::int32_t>(c.encoder.channels.begin(), c.encoder.channels.end()));
  a.put_i64("meta/encoder/coord_dim", c.encoder.coord_dim);
  put_f(a, "meta/encoder/bn_momentum", c.encoder.bn_momentum);

  const ContrastiveConfig& cc = c.contrastive;
  put_f(a, "meta/contrastive/temperature", cc.temperature);
  a.put_i64("meta/contrastive/queue_capacity", cc.queue_capacity);
  put_f(a, "meta/contrastive/momentum", cc.momentum);
  a.put_i64("meta/contrastive/patch_batch", cc.patch_batch);
  a.put_i64("meta/contrastive/graph_batch", cc.graph_batch);
  a.put_i64("meta/contrastive/graph_queue", cc.graph_queue ? 1 : 0);
  a.put_i64("meta/contrastive/graph_queue_capacity", cc.graph_queue_capacity);

  const AugmentConfig& ac = c.augment;
  a.put_f64("meta/augment", {ac.elastic ? 1.0 : 0.0, ac.elastic_grid_spacing, ac.elastic_max_displacement,
                             ac.noise ? 1.0 : 0.0, ac.noise_sigma, ac.contrast ? 1.0 : 0.0, ac.gamma_min, ac.gamma_max});

  const TrainConfig& tc = c.train;
  a.put_i64("meta/train/epochs", tc.epochs);
  put_f(a, "meta/train/lr", tc.lr);
  a.put_f64("meta/train/adam", {tc.adam.beta1, tc.adam.beta2, tc.adam.eps, tc.adam.weight_decay});
  put_f(a, "meta/train/graph_weight", tc.graph_weight);
  a.put_i64("meta/train/stop_graph_gradient", tc.stop_graph_gradient ? 1 : 0);
  a.put_i64("meta/train/checkpoint_every", tc.checkpoint_every);

  a.put_i64("meta/grid/n_nodes", s.grid.n_nodes);
  a.put_i32("meta/grid/patch_size", {s.grid.patch_size[0], s.grid.patch_size[1], s.grid.patch_size[2]});
  a.put_matrix("meta/grid/coords", s.grid.coords);

  put_params(a, "online", s.pair.online);
  put_params(a, "key", s.pair.key);
  s.adam.save(a, "adam");
  s.patch_queue.save(a, "queue/patch");
  s.graph_queue.save(a, "queue/graph");
  a.save(path);
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  const Archive a = Archive::load(path);
  if (!a.contains("meta/format") || a.get_string("meta/format") != kCheckpointFormat)
    throw IoError("'" + path.string() + "' is not a checkpoint");
  TrainState s;
  PretrainConfig& c = s.config;
  c.config_hash = a.get_string("meta/config_hash");
  c.train.seed = static_cast<std::uint64_t>(a.get_i64("meta/seed"));

  c.encoder.patch_size = static_cast<int>(a.get_i64("meta/encoder/patch_size"));
  const auto ch = a.get_i32("meta/encoder/channels");
  c.encoder.channels.assign(ch.begin(), ch.end());
  c.encoder.coord_dim = static_cast<int>(a.get_i64("meta/encoder/coord_dim"));
  c.encoder.bn_momentum = get_f(a, "meta/encoder/bn_momentum");

  ContrastiveConfig& cc = c.contrastive;
  cc.temperature = get_f(a, "meta/contrastive/temperature");
  cc.queue_capacity = static_cast<int>(a.get_i64("meta/contrastive/queue_capacity"));
  cc.momentum = get_f(a, "meta/contrastive/momentum");
  cc.patch_batch = static_cast<int>(a.get_i64("meta/contrastive/patch_batch"));
  cc.graph_batch = static_cast<int>(a.get_i64("meta/contrastive/graph_batch"));
  cc.graph_queue = a.get_i64("meta/contrastive/graph_queue") != 0;
  cc.graph_queue_capacity = static_cast<int>(a.get_i64("meta/contrastive/graph_queue_capacity"));

  const auto av = a.get_f64("meta/augment");
  if (av.size() != 8) throw IoError("checkpoint augment block is malformed");
  c.augment = {av[0] != 0.0, av[1], av[2], av[3] != 0.0, av[4], av[5] != 0.0, av[6], av[7]};

  TrainConfig& tc = c.train;
  tc.epochs = static_cast<int>(a.get_i64("meta/train/epochs"));
  tc.lr = get_f(a, "meta/train/lr");
  const auto ad = a.get_f64("meta/train/adam");
  if (ad.size() != 4) throw IoError("checkpoint adam block is malformed");
  tc.adam = {ad[0], ad[1], ad[2], ad[3]};
  tc.graph_weight = get_f(a, "meta/train/graph_weight");
  tc.stop_graph_gradient = a.get_i64("meta/train/stop_graph_gradient") != 0;
  tc.checkpoint_every = static_cast<int>(a.get_i64("meta/train/checkpoint_every"));

  try {
    c.encoder.validate();
    cc.validate();
    tc.validate();
  } catch (const ConfigError& e) {
    throw IoError(std::string("checkpoint carries an invalid configuration: ") + e.what());
  }

  s.grid.n_nodes = static_cast<int>(a.get_i64("meta/grid/n_nodes"));
  const auto ps = a.get_i32("meta/grid/patch_size");
  if (ps.size() != 3) throw IoError("checkpoint grid block is malformed");
  s.grid.patch_size = {ps[0], ps[1], ps[2]};
  s.grid.coords = a.get_matrix("meta/grid/coords");
  if (s.grid.coords.rows() != 3 || s.grid.coords.cols() != s.grid.n_nodes) throw IoError("checkpoint grid coordinates are malformed");

  s.step = a.get_i64("meta/step");
  s.total_steps = a.get_i64("meta/total_steps");
  s.steps_per_epoch = static_cast<int>(a.get_i64("meta/steps_per_epoch"));

  s.pair = MomentumPair(c.encoder, cc.momentum);
  get_params(a, "online", s.pair.online);
  get_params(a, "key", s.pair.key);
  s.adam = Adam(tc.adam);
  s.adam.load(a, "adam");
  s.patch_queue = NegativeQueue::load(a, "queue/patch");
  s.graph_queue = NegativeQueue::load(a, "queue/graph");
  return s;
}

void write_loss_log_header(std::ostream& out) { out << "step,lr,L_l,L_g,L\n"; }

void write_loss_log_row(std::ostream& out, const StepRecord& r) {
  char line[160];
  std::snprintf(line, sizeof line, "%ld,%.17g,%.17g,%.17g,%.17g\n", r.step, r.lr, r.patch_loss, r.graph_loss, r.loss);
  out << line;
}

// ---------------------------------------------------------------- features

SubjectFeatures extract_subject_features(TrainState& model, const PatchGraph& graph) {
  graph.validate();
  if (!GridSignature::of(graph).matches(model.grid))
    throw ContractError("graph '" + graph.subject_id + "' does not match the atlas grid of the checkpoint");
  const int n = graph.n_nodes();
  Mat patches(1, static_cast<Eigen::Index>(graph.patches.size()));
  copy_patch(graph.patches, patches, 0);
  Mat coords(3, n);
  for (int k = 0; k < n; ++k) coords.col(k) = graph.centers_normalized[static_cast<std::size_t>(k)];
  Encoders& enc = model.pair.online;
  const Mat h = enc.patch.encode(patches, coords, n, nn::Mode::Eval);
  const Mat a_hat = normalized_adjacency(graph.adjacency);
  const Mat* adj[] = {&a_hat};
  const Mat hu = enc.graph.propagate(h, adj, nn::Mode::Eval);
  SubjectFeatures out;
  out.pooled = GraphEncoder::pool(hu, 1, n).col(0);
  out.h_updated = hu.transpose();
  return out;
}

}  // namespace ctxssl
