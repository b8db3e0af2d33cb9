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

#include <doctest.h>

#include "ctxssl/contrastive.hpp"
#include "ctxssl/error.hpp"
#include "support.hpp"

using namespace ctxssl;
using nn::Mat;
using nn::Vec;

namespace {

// Direct evaluation of -log softmax_0 over {q.k+, q.k-...} / tau, no shifting.
double nce_oracle(const Vec& q, const Vec& pos, const Mat& neg, double tau) {
  const double p = std::exp(q.dot(pos) / tau);
  double z = p;
  for (Eigen::Index c = 0; c < neg.cols(); ++c) z += std::exp(q.dot(neg.col(c)) / tau);
  return -std::log(p / z);
}

Mat unit_columns(int dim, int n, Rng& rng) {
  Mat m(dim, n);
  for (int c = 0; c < n; ++c) m.col(c) = testing::random_unit(dim, rng);
  return m;
}

PatchEncoderConfig tiny_config() { return {8, {4, 8, 16}, 3, 0.9}; }

PatchBatch random_patch_batch(int batch, int region, Rng& rng) {
  PatchBatch b;
  b.region = region;
  b.batch = batch;
  b.view_q = testing::random_matrix(1, batch * 512, rng);
  b.view_k = b.view_q + 0.1 * testing::random_matrix(1, batch * 512, rng);
  b.coords = Mat::Constant(3, batch, 0.5);
  return b;
}

}  // namespace

TEST_CASE("info_nce: symmetric two-way case is ln 2") {
  Rng rng(1);
  const Vec q = testing::random_unit(8, rng);
  const Vec k = testing::random_unit(8, rng);
  Mat neg(8, 1);
  neg.col(0) = k;
  CHECK(std::abs(info_nce(q, k, neg, 0.2) - std::log(2.0)) < 1e-12);
}

TEST_CASE("info_nce: q = k+, q.k- = -1, tau = 0.2") {
  Vec q = Vec::Zero(4);
  q[0] = 1;
  Mat neg = Mat::Zero(4, 1);
  neg(0, 0) = -1;
  // -log(e^5 / (e^5 + e^-5)) = log(1 + e^-10)
  const double expect = std::log1p(std::exp(-10.0));
  CHECK(std::abs(info_nce(q, q, neg, 0.2) - expect) < 1e-12);
  CHECK(expect == doctest::Approx(4.54e-5).epsilon(1e-3));
}

TEST_CASE("info_nce: uniform-logit limit gives ln(K + 1)") {
  Vec q = Vec::Zero(6);
  q[0] = 1;
  const int k = 5;
  Mat neg = Mat::Zero(6, k);
  for (int c = 0; c < k; ++c) neg(c + 1, c) = 1;  // orthogonal to q
  double prev = 0;
  for (double tau : {1.0, 10.0, 1e3, 1e6}) {
    const double l = info_nce(q, q, neg, tau);
    CHECK(l > prev);
    prev = l;
  }
  CHECK(std::abs(prev - std::log(k + 1.0)) < 1e-5);
}

TEST_CASE("info_nce: errors") {
  Rng rng(2);
  const Vec q = testing::random_unit(4, rng);
  CHECK_THROWS_AS(info_nce(q, q, Mat(4, 0), 0.2), ContractError);
  CHECK_THROWS_AS(info_nce(Vec::Zero(4), q, unit_columns(4, 2, rng), 0.2), NumericError);
  CHECK_THROWS_AS(info_nce(2 * q, q, unit_columns(4, 2, rng), 0.2), ContractError);
}

TEST_CASE("property: matches the direct softmax, invariant to negative order") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int dim = 2 + static_cast<int>(rng.index(30));
    const int k = 1 + static_cast<int>(rng.index(50));
    const double tau = rng.uniform(0.05, 2.0);
    const Vec q = testing::random_unit(dim, rng);
    const Vec pos = testing::random_unit(dim, rng);
    const Mat neg = unit_columns(dim, k, rng);
    const double l = info_nce(q, pos, neg, tau);
    CHECK(std::abs(l - nce_oracle(q, pos, neg, tau)) < 1e-10);
    const auto perm = testing::random_permutation(k, rng);
    Mat shuffled(dim, k);
    for (int c = 0; c < k; ++c) shuffled.col(c) = neg.col(perm[static_cast<std::size_t>(c)]);
    CHECK(std::abs(info_nce(q, pos, shuffled, tau) - l) < 1e-12);
  }
}

TEST_CASE("property: loss strictly decreases as q.k+ increases") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Vec q = testing::random_unit(6, rng);
    const Mat neg = unit_columns(6, 10, rng);
    const Vec r = testing::random_unit(6, rng);
    const Vec perp = (r - r.dot(q) * q).normalized();
    double prev = std::numeric_limits<double>::infinity();
    for (double angle = 3.0; angle >= 0.0; angle -= 0.25) {
      const Vec pos = std::cos(angle) * q + std::sin(angle) * perp;
      const double l = info_nce(q, pos, neg, 0.2);
      CHECK(l < prev);
      prev = l;
    }
  }
}

TEST_CASE("info_nce: query gradient matches central differences") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Vec q = testing::random_unit(8, rng);
    const Vec pos = testing::random_unit(8, rng);
    const Mat neg = unit_columns(8, 6, rng);
    Vec g;
    (void)info_nce(q, pos, neg, 0.2, &g);
    for (int i = 0; i < 8; ++i) {
      // Free-vector derivative; the step stays inside the unit-norm tolerance.
      const double numeric = testing::central_difference(q[i], [&] { return nce_oracle(q, pos, neg, 0.2); }, 1e-7);
      CHECK(testing::rel_error(g[i], numeric) < 1e-5);
    }
  }
}

TEST_CASE("batch_info_nce: mean of per-query losses with in-batch negatives") {
  Rng rng(6);
  const Mat q = unit_columns(5, 4, rng);
  const Mat k = unit_columns(5, 4, rng);
  const Mat extra = unit_columns(5, 3, rng);
  const BatchNce b = batch_info_nce(q, k, extra, 0.3);
  CHECK(b.negatives_per_query == 3 + 3);
  double sum = 0;
  Mat grad(5, 4);
  for (int i = 0; i < 4; ++i) {
    Mat neg(5, 6);
    int c = 0;
    for (int j = 0; j < 4; ++j)
      if (j != i) neg.col(c++) = k.col(j);
    neg.rightCols(3) = extra;
    Vec g;
    sum += info_nce(q.col(i), k.col(i), neg, 0.3, &g);
    grad.col(i) = g / 4;
  }
  CHECK(std::abs(b.loss - sum / 4) < 1e-12);
  CHECK((b.grad_q - grad).cwiseAbs().maxCoeff() < 1e-12);

  CHECK(batch_info_nce(unit_columns(5, 2, rng), unit_columns(5, 2, rng), Mat(5, 0), 0.2).negatives_per_query == 1);
  CHECK_THROWS_AS(batch_info_nce(unit_columns(5, 1, rng), unit_columns(5, 1, rng), Mat(5, 0), 0.2), ContractError);
}

TEST_CASE("queue: FIFO eviction, batch growth, tags") {
  Rng rng(7);
  NegativeQueue q(4, 4096);
  const Mat first = unit_columns(4, 1, rng);
  q.push(first, 9);
  const Mat bulk = unit_columns(4, 4095, rng);
  q.push(bulk, 3);
  CHECK(q.size() == 4096);
  CHECK(q.entries().col(0) == first.col(0));
  const Mat extra = unit_columns(4, 1, rng);
  q.push(extra, 5);
  CHECK(q.size() == 4096);
  CHECK(q.entries().col(0) == bulk.col(0));
  CHECK(q.entries().col(4095) == extra.col(0));
  CHECK(q.entries_with_tag(9).cols() == 0);
  CHECK(q.entries_with_tag(5).cols() == 1);
  CHECK(q.tags().back() == 5);

  NegativeQueue small(4, 1000);
  small.push(unit_columns(4, 128, rng), 1);
  CHECK(small.size() == 128);
  small.push(unit_columns(4, 128, rng), 2);
  CHECK(small.size() == 256);
  CHECK(small.entries_with_tag(2).cols() == 128);

  CHECK_THROWS_AS(small.push(Mat::Ones(4, 1), 0), ContractError);
  CHECK_THROWS_AS(small.push(unit_columns(3, 1, rng), 0), ContractError);
}

TEST_CASE("property: after C + k pushes the survivors are exactly the last C") {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const int cap = 1 + static_cast<int>(rng.index(64));
    const int total = static_cast<int>(rng.index(200));
    NegativeQueue q(3, cap);
    Mat all(3, total);
    std::vector<int> tags;
    int pushed = 0;
    while (pushed < total) {
      const int n = std::min(total - pushed, 1 + static_cast<int>(rng.index(20)));
      const Mat chunk = unit_columns(3, n, rng);
      std::vector<int> t;
      for (int i = 0; i < n; ++i) t.push_back(static_cast<int>(rng.index(5)));
      q.push(chunk, t);
      all.middleCols(pushed, n) = chunk;
      tags.insert(tags.end(), t.begin(), t.end());
      pushed += n;
      REQUIRE(q.size() <= cap);
    }
    const int keep = std::min(cap, total);
    CHECK(q.size() == keep);
    CHECK(q.entries() == all.rightCols(keep));
    CHECK(q.tags() == std::vector<int>(tags.end() - keep, tags.end()));
  }
}

TEST_CASE("queue: archive round trip") {
  Rng rng(9);
  NegativeQueue q(4, 10);
  q.push(unit_columns(4, 13, rng), 2);
  Archive a;
  q.save(a, "queue");
  const NegativeQueue r = NegativeQueue::load(a, "queue");
  CHECK(r.entries() == q.entries());
  CHECK(r.tags() == q.tags());
  CHECK(r.capacity() == 10);
}

TEST_CASE("momentum update examples") {
  nn::Param k("w", 1, 1, true), o("w", 1, 1, true);
  nn::Param* kp[] = {&k};
  nn::Param* op[] = {&o};
  k.value(0, 0) = 0.0;
  o.value(0, 0) = 1.0;
  momentum_update(kp, op, 0.9);
  CHECK(k.value(0, 0) == doctest::Approx(0.1).epsilon(1e-15));
  momentum_update(kp, op, 1.0);
  CHECK(k.value(0, 0) == doctest::Approx(0.1).epsilon(1e-15));
  momentum_update(kp, op, 0.0);
  CHECK(k.value(0, 0) == 1.0);

  nn::Param other("v", 1, 1, true);
  nn::Param* bad[] = {&other};
  CHECK_THROWS_AS(momentum_update(kp, bad, 0.5), ContractError);
}

TEST_CASE("property: EMA contracts the key toward the online weights by m") {
  Rng rng(10);
  MomentumPair pair(tiny_config(), 0.9);
  pair.init(rng);
  for (auto* p : pair.online.params()) p->value += testing::random_matrix(p->value.rows(), p->value.cols(), rng);
  auto dist = [&] {
    double s = 0;
    const auto kp = pair.key.params();
    const auto op = pair.online.params();
    for (std::size_t i = 0; i < kp.size(); ++i) s += (kp[i]->value - op[i]->value).squaredNorm();
    return std::sqrt(s);
  };
  for (int step = 0; step < 5; ++step) {
    const double before = dist();
    pair.update();
    CHECK(std::abs(dist() - 0.9 * before) < 1e-12 * before + 1e-15);
  }
}

TEST_CASE("momentum pair starts with identical online and key copies") {
  Rng rng(11);
  MomentumPair pair(tiny_config(), 0.999);
  pair.init(rng);
  const auto kp = pair.key.params();
  const auto op = pair.online.params();
  for (std::size_t i = 0; i < kp.size(); ++i) CHECK(kp[i]->value == op[i]->value);
}

TEST_CASE("patch level: negatives are the other batch keys plus same-region queue entries") {
  Rng rng(12);
  MomentumPair pair(tiny_config(), 0.999);
  pair.init(rng);
  ContrastiveConfig cfg;
  NegativeQueue queue(16, 64);
  const LossStep empty = patch_level_loss(pair, random_patch_batch(2, 3, rng), queue, cfg, 0.0);
  CHECK(empty.negatives_per_query == 1);

  queue.push(unit_columns(16, 5, rng), 3);
  queue.push(unit_columns(16, 7, rng), 1);
  const LossStep mixed = patch_level_loss(pair, random_patch_batch(4, 3, rng), queue, cfg, 0.0);
  CHECK(mixed.negatives_per_query == 3 + 5);
  CHECK(mixed.keys.cols() == 4);
  for (Eigen::Index c = 0; c < mixed.keys.cols(); ++c) CHECK(mixed.keys.col(c).norm() == doctest::Approx(1.0));
}

TEST_CASE("patch level: gradient wrt single parameters matches central differences") {
  Rng rng(13);
  MomentumPair pair(tiny_config(), 0.999);
  pair.init(rng);
  ContrastiveConfig cfg;
  NegativeQueue queue(16, 64);
  queue.push(unit_columns(16, 6, rng), 0);
  const PatchBatch batch = random_patch_batch(6, 0, rng);
  pair.online.zero_grad();
  (void)patch_level_loss(pair, batch, queue, cfg, 1.0);
  auto loss = [&] { return patch_level_loss(pair, batch, queue, cfg, 0.0).loss; };
  std::vector<nn::Param*> all;
  pair.online.patch.collect(all);
  int checked = 0;
  while (checked < 10) {
    nn::Param* p = all[rng.index(all.size())];
    const auto r = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(p->value.rows())));
    const auto c = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(p->value.cols())));
    const double numeric = testing::central_difference(p->value(r, c), loss, 1e-5);
    if (std::abs(numeric) < 1e-8 && std::abs(p->grad(r, c)) < 1e-8) continue;
    CAPTURE(p->name);
    CHECK(testing::rel_error(p->grad(r, c), numeric) < 1e-3);
    ++checked;
  }
  // The first conv of C specifically.
  nn::Param& w = pair.online.patch.conv(0).weight;
  const double numeric = testing::central_difference(w.value(0, 4), loss, 1e-5);
  CHECK(testing::rel_error(w.grad(0, 4), numeric) < 1e-3);
}

TEST_CASE("patch level: random-init loss is close to ln(negatives + 1)") {
  Rng rng(14);
  MomentumPair pair(PatchEncoderConfig::desk(), 0.999);
  pair.init(rng);
  PatchBatch b;
  b.region = 0;
  b.batch = 32;
  b.view_q = testing::random_matrix(1, 32 * 4096, rng);
  b.view_k = testing::random_matrix(1, 32 * 4096, rng);
  b.coords = Mat::Constant(3, 32, 0.5);
  NegativeQueue queue(32, 4096);
  const LossStep s = patch_level_loss(pair, b, queue, ContrastiveConfig{}, 0.0);
  const double uniform = std::log(s.negatives_per_query + 1.0);
  MESSAGE("loss " << s.loss << " vs uniform " << uniform);
  CHECK(std::abs(s.loss - uniform) < 0.2 * uniform);
}

TEST_CASE("graph level: batch-only negatives and the all-equal degenerate case") {
  Rng rng(15);
  MomentumPair pair(tiny_config(), 0.999);
  pair.init(rng);
  ContrastiveConfig cfg;
  cfg.graph_queue = false;
  const int batch = 16, nodes = 3;
  GraphBatch g;
  g.batch = batch;
  g.nodes = nodes;
  const Mat one_graph = testing::random_matrix(1, nodes * 512, rng);
  g.view_q = one_graph.replicate(1, batch);
  g.view_k = g.view_q;
  g.coords = testing::random_matrix(3, nodes, rng, 0, 1).replicate(1, batch);
  Mat a(3, 3);
  a << 0, 1, 0, 1, 0, 1, 0, 1, 0;
  g.adj_hat.assign(batch, normalized_adjacency(a));
  const LossStep s = graph_level_loss(pair, g, nullptr, cfg, 0.0);
  CHECK(s.negatives_per_query == 15);
  CHECK(std::abs(s.loss - std::log(16.0)) < 1e-9);

  NegativeQueue gq(16, 64);
  gq.push(unit_columns(16, 10, rng), NegativeQueue::kGraphTag);
  cfg.graph_queue = true;
  CHECK(graph_level_loss(pair, g, &gq, cfg, 0.0).negatives_per_query == 15 + 10);
}

TEST_CASE("combined loss") {
  CHECK(combined_loss(0.3, 0.7) == doctest::Approx(1.0));
  CHECK(combined_loss(0.3, 0.7, 0.0) == 0.3);
}

TEST_CASE("combined gradient is the sum of the two parts") {
  Rng rng(16);
  MomentumPair pair(tiny_config(), 0.999);
  pair.init(rng);
  ContrastiveConfig cfg;
  NegativeQueue queue(16, 64);
  const PatchBatch pb = random_patch_batch(4, 0, rng);
  GraphBatch gb;
  gb.batch = 2;
  gb.nodes = 2;
  gb.view_q = testing::random_matrix(1, 4 * 512, rng);
  gb.view_k = gb.view_q;
  gb.coords = testing::random_matrix(3, 4, rng, 0, 1);
  Mat a(2, 2);
  a << 0, 1, 1, 0;
  gb.adj_hat.assign(2, normalized_adjacency(a));

  auto grads = [&](bool patch, bool graph) {
    pair.online.zero_grad();
    if (patch) (void)patch_level_loss(pair, pb, queue, cfg, 1.0);
    if (graph) (void)graph_level_loss(pair, gb, nullptr, cfg, 1.0);
    std::vector<Mat> out;
    for (auto* p : pair.online.params()) out.push_back(p->grad);
    return out;
  };
  const auto gp = grads(true, false);
  const auto gg = grads(false, true);
  const auto both = grads(true, true);
  for (std::size_t i = 0; i < both.size(); ++i) CHECK((both[i] - gp[i] - gg[i]).cwiseAbs().maxCoeff() < 1e-12);
}
