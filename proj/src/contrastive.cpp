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


#include "ctxssl/contrastive.hpp"

#include <algorithm>
#include <cmath>

#include "ctxssl/error.hpp"

namespace ctxssl {

using nn::Mat;
using nn::Mode;
using nn::Vec;

void ContrastiveConfig::validate() const {
  if (!(temperature > 0.0)) throw ConfigError("contrastive.temperature must be > 0");
  if (queue_capacity < 0 || graph_queue_capacity < 0) throw ConfigError("contrastive queue capacity must be >= 0");
  if (momentum < 0.0 || momentum > 1.0) throw ConfigError("contrastive.momentum must be in [0, 1]");
  if (patch_batch < 1 || graph_batch < 1) throw ConfigError("contrastive batch sizes must be >= 1");
}

namespace {

void require_unit(const Vec& v, const char* what) {
  const double n = v.norm();
  if (!(n > 1e-12)) throw NumericError(std::string("info_nce: zero-norm ") + what);
  if (std::abs(n - 1.0) > 1e-6) throw ContractError(std::string("info_nce: ") + what + " is not L2-normalised");
}

// Softmax cross-entropy with the positive at index 0; fills d loss / d logits.
double softmax_xent(const Vec& logits, Vec& grad) {
  const double mx = logits.maxCoeff();
  const Vec e = (logits.array() - mx).exp().matrix();
  const double z = e.sum();
  grad = e / z;
  grad(0) -= 1.0;
  return -(logits(0) - mx - std::log(z));
}

}  // namespace

double info_nce(const Vec& q, const Vec& positive, const Mat& negatives, double tau, Vec* grad_q) {
  if (negatives.cols() == 0) throw ContractError("info_nce: at least one negative is required");
  if (!(tau > 0.0)) throw ContractError("info_nce: temperature must be positive");
  if (positive.size() != q.size() || negatives.rows() != q.size()) throw ContractError("info_nce: width mismatch");
  require_unit(q, "query");
  require_unit(positive, "positive");
  for (Eigen::Index c = 0; c < negatives.cols(); ++c) require_unit(negatives.col(c), "negative");

  Vec logits(negatives.cols() + 1);
  logits(0) = q.dot(positive) / tau;
  logits.tail(negatives.cols()).noalias() = negatives.transpose() * q / tau;
  Vec g;
  const double loss = softmax_xent(logits, g);
  if (grad_q != nullptr) *grad_q = (g(0) * positive + negatives * g.tail(negatives.cols())) / tau;
  return loss;
}

BatchNce batch_info_nce(const Mat& q, const Mat& k, const Mat& extra, double tau) {
  const Eigen::Index b = q.cols();
  if (k.cols() != b || k.rows() != q.rows()) throw ContractError("batch_info_nce: query/key shape mismatch");
  if (extra.cols() > 0 && extra.rows() != q.rows()) throw ContractError("batch_info_nce: negative width mismatch");
  const Eigen::Index m = extra.cols();
  BatchNce out;
  out.negatives_per_query = static_cast<int>(b - 1 + m);
  if (out.negatives_per_query < 1) throw ContractError("batch_info_nce: no negatives available");

  const Mat qk = q.transpose() * k / tau;                               // (B, B)
  const Mat qn = m > 0 ? Mat(q.transpose() * extra / tau) : Mat(b, 0);  // (B, M)
  Mat g_qk = Mat::Zero(b, b);
  Mat g_qn(b, m);
  Vec logits(b + m), g;
  for (Eigen::Index i = 0; i < b; ++i) {
    logits(0) = qk(i, i);
    Eigen::Index t = 1;
    for (Eigen::Index j = 0; j < b; ++j)
      if (j != i) logits(t++) = qk(i, j);
    if (m > 0) logits.tail(m) = qn.row(i).transpose();
    out.loss += softmax_xent(logits, g);
    g_qk(i, i) = g(0);
    t = 1;
    for (Eigen::Index j = 0; j < b; ++j)
      if (j != i) g_qk(i, j) = g(t++);
    if (m > 0) g_qn.row(i) = g.tail(m).transpose();
  }
  const double scale = 1.0 / (static_cast<double>(b) * tau);
  out.loss /= static_cast<double>(b);
  out.grad_q = k * g_qk.transpose() * scale;
  if (m > 0) out.grad_q.noalias() += extra * g_qn.transpose() * scale;
  return out;
}

// ---------------------------------------------------------------- queue

NegativeQueue::NegativeQueue(int dim, int capacity)
    : dim_(dim), capacity_(capacity), data_(Mat::Zero(dim, capacity)), tags_(static_cast<std::size_t>(capacity), 0) {
  if (dim <= 0 || capacity < 0) throw ContractError("negative queue: invalid dimensions");
}

void NegativeQueue::push(const Mat& emb, std::span<const int> tags) {
  if (emb.rows() != dim_) throw ContractError("negative queue: embedding width mismatch");
  if (static_cast<Eigen::Index>(tags.size()) != emb.cols()) throw ContractError("negative queue: one tag per embedding");
  if (capacity_ == 0) return;
  for (Eigen::Index c = 0; c < emb.cols(); ++c) {
    if (std::abs(emb.col(c).norm() - 1.0) > 1e-6) throw ContractError("negative queue: embeddings must be L2-normalised");
    data_.col(cursor_) = emb.col(c);
    tags_[static_cast<std::size_t>(cursor_)] = tags[static_cast<std::size_t>(c)];
    cursor_ = (cursor_ + 1) % capacity_;
    size_ = std::min(size_ + 1, capacity_);
  }
}

void NegativeQueue::push(const Mat& emb, int tag) {
  const std::vector<int> tags(static_cast<std::size_t>(emb.cols()), tag);
  push(emb, tags);
}

Mat NegativeQueue::entries() const {
  Mat out(dim_, size_);
  for (int i = 0; i < size_; ++i) out.col(i) = data_.col(slot(i));
  return out;
}

std::vector<int> NegativeQueue::tags() const {
  std::vector<int> out(static_cast<std::size_t>(size_));
  for (int i = 0; i < size_; ++i) out[static_cast<std::size_t>(i)] = tags_[static_cast<std::size_t>(slot(i))];
  return out;
}

Mat NegativeQueue::entries_with_tag(int tag) const {
  std::vector<int> hits;
  for (int i = 0; i < size_; ++i)
    if (tags_[static_cast<std::size_t>(slot(i))] == tag) hits.push_back(slot(i));
  Mat out(dim_, static_cast<Eigen::Index>(hits.size()));
  for (std::size_t c = 0; c < hits.size(); ++c) out.col(static_cast<Eigen::Index>(c)) = data_.col(hits[c]);
  return out;
}

void NegativeQueue::save(Archive& a, const std::string& prefix) const {
  a.put_i64(prefix + "/dim", dim_);
  a.put_i64(prefix + "/capacity", capacity_);
  a.put_matrix(prefix + "/entries", entries());
  const auto t = tags();
  a.put_i32(prefix + "/tags", std::vector<std::int32_t>(t.begin(), t.end()));
}

NegativeQueue NegativeQueue::load(const Archive& a, const std::string& prefix) {
  NegativeQueue q(static_cast<int>(a.get_i64(prefix + "/dim")), static_cast<int>(a.get_i64(prefix + "/capacity")));
  const Mat e = a.get_matrix(prefix + "/entries");
  const auto t = a.get_i32(prefix + "/tags");
  if (e.cols() > q.capacity_ || (e.cols() > 0 && e.rows() != q.dim_) || static_cast<Eigen::Index>(t.size()) != e.cols())
    throw IoError("negative queue '" + prefix + "' in checkpoint is inconsistent");
  q.push(e, std::vector<int>(t.begin(), t.end()));
  return q;
}

// ---------------------------------------------------------------- momentum

void momentum_update(std::span<nn::Param* const> key, std::span<nn::Param* const> online, double m) {
  if (key.size() != online.size()) throw ContractError("momentum_update: parameter lists differ in length");
  for (std::size_t i = 0; i < key.size(); ++i) {
    nn::Param& k = *key[i];
    const nn::Param& o = *online[i];
    if (k.name != o.name || k.value.rows() != o.value.rows() || k.value.cols() != o.value.cols())
      throw ContractError("momentum_update: mismatched parameter '" + k.name + "' vs '" + o.name + "'");
    k.value = m * k.value + (1.0 - m) * o.value;
  }
}

MomentumPair::MomentumPair(const PatchEncoderConfig& config, double m) : online(config), key(config), momentum(m) {}

void MomentumPair::init(Rng& rng) {
  online.init(rng);
  const auto op = online.params();
  const auto kp = key.params();
  momentum_update(kp, op, 0.0);
  const auto ob = online.buffers();
  const auto kb = key.buffers();
  for (std::size_t i = 0; i < ob.size(); ++i) *kb[i].value = *ob[i].value;
}

void MomentumPair::update() {
  const auto kp = key.params();
  const auto op = online.params();
  momentum_update(kp, op, momentum);
}

// ---------------------------------------------------------------- losses

LossStep patch_level_loss(MomentumPair& pair, const PatchBatch& batch, const NegativeQueue& queue,
                          const ContrastiveConfig& config, double grad_scale) {
  PatchTrace trace;
  const bool grad = grad_scale != 0.0;
  const Mat zq = pair.online.patch.encode(batch.view_q, batch.coords, batch.batch, Mode::Train, grad ? &trace : nullptr);
  const Mat zk = pair.key.patch.encode(batch.view_k, batch.coords, batch.batch, Mode::Train);
  const Mat q = nn::l2_normalize_columns(zq);
  LossStep out;
  out.keys = nn::l2_normalize_columns(zk);
  const Mat negatives = queue.capacity() > 0 ? queue.entries_with_tag(batch.region) : Mat(zq.rows(), 0);
  const BatchNce nce = batch_info_nce(q, out.keys, negatives, config.temperature);
  out.loss = nce.loss;
  out.negatives_per_query = nce.negatives_per_query;
  if (grad) pair.online.patch.backward(nn::l2_normalize_backward(zq, q, nce.grad_q * grad_scale), trace);
  return out;
}

LossStep graph_level_loss(MomentumPair& pair, const GraphBatch& batch, const NegativeQueue* queue,
                          const ContrastiveConfig& config, double grad_scale, bool stop_patch_gradient) {
  if (static_cast<int>(batch.adj_hat.size()) != batch.batch) throw ContractError("graph batch: one adjacency per graph");
  std::vector<const Mat*> adj;
  adj.reserve(batch.adj_hat.size());
  for (const auto& a : batch.adj_hat) adj.push_back(&a);
  const int patches = batch.batch * batch.nodes;
  const bool grad = grad_scale != 0.0;

  PatchTrace ptrace;
  GraphTrace gtrace;
  const bool patch_grad = grad && !stop_patch_gradient;
  const Mat hq = pair.online.patch.encode(batch.view_q, batch.coords, patches, Mode::Train, patch_grad ? &ptrace : nullptr);
  const Mat zq = pair.online.graph.embed(hq, adj, Mode::Train, grad ? &gtrace : nullptr);
  const Mat hk = pair.key.patch.encode(batch.view_k, batch.coords, patches, Mode::Train);
  const Mat zk = pair.key.graph.embed(hk, adj, Mode::Train);

  const Mat q = nn::l2_normalize_columns(zq);
  LossStep out;
  out.keys = nn::l2_normalize_columns(zk);
  const Mat negatives = (queue != nullptr && config.graph_queue) ? queue->entries() : Mat(zq.rows(), 0);
  const BatchNce nce = batch_info_nce(q, out.keys, negatives, config.temperature);
  out.loss = nce.loss;
  out.negatives_per_query = nce.negatives_per_query;
  if (grad) {
    const Mat gh = pair.online.graph.backward(nn::l2_normalize_backward(zq, q, nce.grad_q * grad_scale), gtrace);
    if (patch_grad) pair.online.patch.backward(gh, ptrace);
  }
  return out;
}

}  // namespace ctxssl
