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

#include "ctxssl/encoders.hpp"
#include "ctxssl/error.hpp"
#include "support.hpp"

using namespace ctxssl;
using nn::Mat;
using nn::Mode;
using nn::Vec;

namespace {

double elu(double x) { return x > 0 ? x : std::expm1(x); }

PatchEncoderConfig tiny_config() { return {8, {2, 3, 4}, 3, 0.9}; }

// Spatial side after one 3x3x3 conv with padding 1.
int conv_side(int in, int stride) { return (in + 2 - 3) / stride + 1; }

void randomize_running_stats(GraphEncoder& g, Rng& rng) {
  for (Eigen::Index i = 0; i < g.bn.running_mean.size(); ++i) {
    g.bn.running_mean[i] = rng.uniform(-0.5, 0.5);
    g.bn.running_var[i] = rng.uniform(0.5, 2.0);
    g.bn.gamma.value(i, 0) = rng.uniform(0.5, 1.5);
    g.bn.beta.value(i, 0) = rng.uniform(-0.3, 0.3);
  }
}

}  // namespace

TEST_CASE("desk encoder: 16^3 patch to a 32-vector, spatial dims follow the stride arithmetic") {
  PatchEncoder enc(PatchEncoderConfig::desk());
  const auto rows = enc.cnn_shape_trace();
  // Oracle: blocks {1,2}, {1,1,2}, {1,1,2}, {1,2}.
  const std::vector<std::vector<int>> strides{{1, 2}, {1, 1, 2}, {1, 1, 2}, {1, 2}};
  const std::vector<int> channels{4, 8, 16, 32};
  int side = 16;
  std::size_t r = 1;
  REQUIRE(rows[0].output == std::vector<int>{1, 16, 16, 16});
  for (std::size_t k = 0; k < strides.size(); ++k)
    for (int s : strides[k]) {
      side = conv_side(side, s);
      const std::vector<int> expect{channels[k], side, side, side};
      CHECK(rows[r].layer == "Conv3D");
      CHECK(rows[r].output == expect);
      CHECK(rows[r + 1].layer == "BatchNorm+ELU");
      CHECK(rows[r + 1].output == expect);
      r += 2;
    }
  CHECK(side == 1);
  CHECK(rows[r].output == std::vector<int>{1, 32});
  CHECK(r + 1 == rows.size());

  Rng rng(1);
  enc.init(rng);
  const Mat x = testing::random_matrix(1, 2 * 4096, rng);
  const Mat f = enc.cnn_features(x, 2, Mode::Train);
  CHECK(f.rows() == 32);
  CHECK(f.cols() == 2);
  CHECK(f.allFinite());
}

TEST_CASE("patch size must be reduced to one voxel") {
  CHECK_THROWS_AS(PatchEncoder(PatchEncoderConfig{16, {4, 8, 16}, 3, 0.9}), ConfigError);
  CHECK_THROWS_AS(PatchEncoder(PatchEncoderConfig{16, {4, 8, 16, 32}, 2, 0.9}), ConfigError);
  PatchEncoder enc(PatchEncoderConfig::desk());
  Rng rng(2);
  enc.init(rng);
  CHECK_THROWS_AS(enc.cnn_features(Mat::Zero(1, 100), 1, Mode::Eval), ContractError);
  CHECK_THROWS_AS(enc.encode(Mat::Zero(1, 4096), Mat::Zero(2, 1), 1, Mode::Eval), ContractError);
}

TEST_CASE("zero weights: C(x) is the ELU of the last batchnorm shift, in eval mode deterministic") {
  PatchEncoder enc(tiny_config());
  Rng rng(3);
  enc.init(rng);
  std::vector<nn::Param*> params;
  enc.collect(params);
  for (auto* p : params)
    if (p->name.find(".conv") != std::string::npos) p->value.setZero();
  // The last batchnorm's beta is the 2nd-to-last collected conv-stack param.
  nn::Param* beta_last = nullptr;
  for (auto* p : params)
    if (p->name.find(".bn") != std::string::npos && p->name.find("beta") != std::string::npos) beta_last = p;
  REQUIRE(beta_last != nullptr);
  for (Eigen::Index i = 0; i < beta_last->value.rows(); ++i) beta_last->value(i, 0) = 0.3 * static_cast<double>(i) - 0.4;

  const Mat zero = Mat::Zero(1, 512);
  const Mat noise = testing::random_matrix(1, 512, rng);
  const Mat a = enc.cnn_features(zero, 1, Mode::Eval);
  const Mat b = enc.cnn_features(noise, 1, Mode::Eval);
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    CHECK(a(i, 0) == doctest::Approx(elu(beta_last->value(i, 0))).epsilon(1e-12));
    CHECK(b(i, 0) == doctest::Approx(a(i, 0)).epsilon(1e-12));
  }
  CHECK(a.allFinite());
}

TEST_CASE("encode equals f_l applied to C(x) || p; conditioning is active") {
  PatchEncoder enc(tiny_config());
  Rng rng(4);
  enc.init(rng);
  const Mat x = testing::random_matrix(1, 512, rng);
  Mat p1(3, 1), p2(3, 1);
  p1 << 0.1, 0.5, 0.9;
  p2 << 0.8, 0.2, 0.3;
  const Mat c = enc.cnn_features(x, 1, Mode::Eval);
  Mat cat(c.rows() + 3, 1);
  cat << c, p1;
  // Oracle with explicit loops over the dense weights.
  auto dense = [](nn::Dense& d, const Vec& in, bool relu) {
    Vec out(d.out_features());
    for (int o = 0; o < d.out_features(); ++o) {
      double s = d.bias.value(o, 0);
      for (int i = 0; i < d.in_features(); ++i) s += d.weight.value(o, i) * in[i];
      out[o] = relu ? std::max(0.0, s) : s;
    }
    return out;
  };
  const Vec expect = dense(enc.head(2), dense(enc.head(1), dense(enc.head(0), cat.col(0), true), true), false);
  const Mat e1 = enc.encode(x, p1, 1, Mode::Eval);
  CHECK((e1.col(0) - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(enc.head(0).in_features() == 4 + 3);
  const Mat e2 = enc.encode(x, p2, 1, Mode::Eval);
  CHECK((e1 - e2).norm() > 1e-6);
}

TEST_CASE("toy two-layer dense head matches hand-computed products") {
  nn::Dense l1("a", 5, 2), l2("b", 2, 1);
  l1.weight.value << 1, 0, -1, 2, 0.5, 0, 1, 1, -1, 0;
  l1.bias.value << 0.5, -3;
  l2.weight.value << 2, -1;
  l2.bias.value << 0.25;
  Mat x(5, 1);
  x << 1, 2, 3, 4, 5;
  // Hand: l1 = (1 - 3 + 8 + 2.5 + 0.5, 2 + 3 - 4 - 3) = (9, -2); relu -> (9, 0); l2 = 18 + 0.25.
  const Mat y = l2.forward(nn::relu(l1.forward(x)));
  CHECK(y(0, 0) == doctest::Approx(18.25).epsilon(1e-15));
}

TEST_CASE("gcn: empty adjacency transforms nodes independently") {
  GraphEncoder g(GraphEncoderConfig{4, false, 0.9});
  Rng rng(5);
  g.init(rng);
  const Mat h = testing::random_matrix(3, 4, rng);
  const Mat out = g.gcn_forward(h, Mat::Zero(3, 3), Mode::Eval);
  const Mat expect = (h * g.weight.value).unaryExpr([](double v) { return elu(v); });
  CHECK((out - expect).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(normalized_adjacency(Mat::Zero(3, 3)).isIdentity());
}

TEST_CASE("gcn: K2 with W = I and no batchnorm averages the two nodes") {
  GraphEncoder g(GraphEncoderConfig{3, false, 0.9});
  g.weight.value = Mat::Identity(3, 3);
  Mat a(2, 2);
  a << 0, 1, 1, 0;
  // K2 with self-loops: degrees 2, every A_hat entry 1/2.
  CHECK((normalized_adjacency(a) - Mat::Constant(2, 2, 0.5)).cwiseAbs().maxCoeff() < 1e-15);
  Mat h(2, 3);
  h << 1.0, -2.0, 0.5, 3.0, 0.0, -1.5;
  const Mat out = g.gcn_forward(h, a, Mode::Eval);
  for (int u = 0; u < 2; ++u)
    for (int f = 0; f < 3; ++f) CHECK(out(u, f) == doctest::Approx(elu((h(0, f) + h(1, f)) / 2)).epsilon(1e-14));
}

TEST_CASE("gcn: adjacency contract") {
  Mat bad(2, 2);
  bad << 0, 1, 0, 0;
  CHECK_THROWS_AS(normalized_adjacency(bad), ContractError);
  bad << 1, 0, 0, 0;
  CHECK_THROWS_AS(normalized_adjacency(bad), ContractError);
  bad << 0, 0.5, 0.5, 0;
  CHECK_THROWS_AS(normalized_adjacency(bad), ContractError);
  GraphEncoder g(GraphEncoderConfig{3, true, 0.9});
  CHECK_THROWS_AS(g.gcn_forward(Mat::Zero(2, 4), Mat::Zero(2, 2), Mode::Eval), ContractError);
  CHECK_THROWS_AS(GraphEncoder::pooled_features(Mat(0, 3)), ContractError);
}

TEST_CASE("pooling examples") {
  Mat rows(3, 2);
  rows << 1, 2, 1, 2, 1, 2;
  CHECK(GraphEncoder::pooled_features(rows) == Vec::Map(std::vector<double>{1, 2}.data(), 2));
  Mat ab(2, 2);
  ab << 1, 4, 3, -2;
  const Vec m = GraphEncoder::pooled_features(ab);
  CHECK(m[0] == 2);
  CHECK(m[1] == 1);
}

TEST_CASE("single-node graph: f_g(ELU(BN(h W)))") {
  GraphEncoder g(GraphEncoderConfig{4, true, 0.9});
  Rng rng(6);
  g.init(rng);
  randomize_running_stats(g, rng);
  const Mat h = testing::random_matrix(1, 4, rng);
  Vec z = (h * g.weight.value).transpose();
  for (int f = 0; f < 4; ++f)
    z[f] = elu((z[f] - g.bn.running_mean[f]) / std::sqrt(g.bn.running_var[f] + g.bn.eps) * g.bn.gamma.value(f, 0) +
               g.bn.beta.value(f, 0));
  const Vec expect = g.fg3.forward(nn::relu(g.fg2.forward(nn::relu(g.fg1.forward(z))))).col(0);
  CHECK((g.graph_embed(h, Mat::Zero(1, 1), Mode::Eval) - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("property: node permutation equivariance and pooling invariance") {
  GraphEncoder g(GraphEncoderConfig{8, true, 0.9});
  Rng rng(7);
  g.init(rng);
  randomize_running_stats(g, rng);
  for (int trial = 0; trial < 30; ++trial) {
    const int n = 1 + static_cast<int>(rng.index(20));
    const Mat h = testing::random_matrix(n, 8, rng);
    const Mat a = testing::random_adjacency(n, rng.uniform(0, 0.6), rng);
    CHECK(testing::gcn_symmetry_deviation(g, h, a, testing::random_permutation(n, rng)) < 1e-10);
  }
}

TEST_CASE("batched propagation equals per-graph propagation in eval mode") {
  GraphEncoder g(GraphEncoderConfig{5, true, 0.9});
  Rng rng(8);
  g.init(rng);
  randomize_running_stats(g, rng);
  const Mat a1 = normalized_adjacency(testing::random_adjacency(6, 0.4, rng));
  const Mat a2 = normalized_adjacency(testing::random_adjacency(6, 0.4, rng));
  const Mat h = testing::random_matrix(5, 12, rng);
  const Mat* both[] = {&a1, &a2};
  const Mat* first[] = {&a1};
  const Mat* second[] = {&a2};
  const Mat hb = g.propagate(h, both, Mode::Eval);
  CHECK((hb.leftCols(6) - g.propagate(h.leftCols(6), first, Mode::Eval)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((hb.rightCols(6) - g.propagate(h.rightCols(6), second, Mode::Eval)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("gradients of patch + graph encoders match central differences") {
  Encoders enc(tiny_config());
  Rng rng(9);
  enc.init(rng);
  const int graphs = 2, nodes = 3;
  const int batch = graphs * nodes;
  const Mat x = testing::random_matrix(1, batch * 512, rng);
  const Mat coords = testing::random_matrix(3, batch, rng, 0.0, 1.0);
  const Mat a1 = normalized_adjacency(testing::random_adjacency(nodes, 0.7, rng));
  const Mat a2 = normalized_adjacency(testing::random_adjacency(nodes, 0.7, rng));
  const Mat* adj[] = {&a1, &a2};
  const Mat weights = testing::random_matrix(enc.graph.config().feature_dim, graphs, rng);

  // Scalar function of every parameter through both encoders, batch statistics.
  auto loss = [&]() {
    const Mat h = enc.patch.encode(x, coords, batch, Mode::Train);
    return enc.graph.embed(h, adj, Mode::Train).cwiseProduct(weights).sum();
  };

  enc.zero_grad();
  PatchTrace pt;
  GraphTrace gt;
  const Mat h = enc.patch.encode(x, coords, batch, Mode::Train, &pt);
  (void)enc.graph.embed(h, adj, Mode::Train, &gt);
  const Mat gh = enc.graph.backward(weights, gt);
  enc.patch.backward(gh, pt);

  auto params = enc.params();
  int checked = 0;
  double worst = 0;
  while (checked < 25) {
    nn::Param* p = params[rng.index(params.size())];
    const auto r = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(p->value.rows())));
    const auto c = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(p->value.cols())));
    const double numeric = testing::central_difference(p->value(r, c), loss, 1e-5);
    const double analytic = p->grad(r, c);
    if (std::abs(numeric) < 1e-7 && std::abs(analytic) < 1e-7) continue;  // dead unit, uninformative
    const double err = testing::rel_error(analytic, numeric);
    worst = std::max(worst, err);
    CAPTURE(p->name);
    CHECK(err < 1e-3);
    ++checked;
  }
  MESSAGE("worst relative error " << worst);
}

TEST_CASE("encoders: parameter order and naming are stable") {
  Encoders a(PatchEncoderConfig::desk()), b(PatchEncoderConfig::desk());
  Rng r1(10), r2(10);
  a.init(r1);
  b.init(r2);
  const auto pa = a.params();
  const auto pb = b.params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value == pb[i]->value);
  }
  // No weight decay on biases and normalisation parameters.
  for (auto* p : pa) {
    const bool norm_or_bias = p->name.find(".bn") != std::string::npos || p->name.find("bias") != std::string::npos;
    CHECK(p->decay == !norm_or_bias);
  }
}
