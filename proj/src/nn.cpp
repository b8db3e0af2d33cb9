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

#include "ctxssl/nn.hpp"

#include <algorithm>
#include <array>
#include <cmath>

#include "ctxssl/error.hpp"

namespace ctxssl::nn {
namespace {

// Upper bound on im2col buffer entries per chunk.
constexpr Eigen::Index kMaxColEntries = 1 << 16;

}  // namespace

Param::Param(std::string n, Eigen::Index rows, Eigen::Index cols, bool weight_decay)
    : name(std::move(n)), value(Mat::Zero(rows, cols)), grad(Mat::Zero(rows, cols)), decay(weight_decay) {}

void he_uniform(Mat& w, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / std::max(fan_in, 1));
  for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
}

// ---------------------------------------------------------------- Dense

Dense::Dense(const std::string& name, int in, int out)
    : weight(name + ".weight", out, in, true), bias(name + ".bias", out, 1, false) {}

void Dense::init(Rng& rng) {
  he_uniform(weight.value, in_features(), rng);
  bias.value.setZero();
}

Mat Dense::forward(const Mat& x) const {
  if (x.rows() != weight.value.cols()) throw ContractError("dense: input width mismatch for " + weight.name);
  Mat y = weight.value * x;
  y.colwise() += bias.value.col(0);
  return y;
}

Mat Dense::backward(const Mat& x, const Mat& grad_out) {
  weight.grad.noalias() += grad_out * x.transpose();
  bias.grad += grad_out.rowwise().sum();
  return weight.value.transpose() * grad_out;
}

// ---------------------------------------------------------------- Conv3d

Conv3d::Conv3d(const std::string& name, int in_channels, int out_channels, int stride)
    : weight(name + ".weight", out_channels, 27 * in_channels, true),
      bias(name + ".bias", out_channels, 1, false),
      in_ch_(in_channels),
      out_ch_(out_channels),
      stride_(stride) {
  if (stride != 1 && stride != 2) throw ContractError("conv3d: stride must be 1 or 2");
}

void Conv3d::init(Rng& rng) {
  he_uniform(weight.value, 27 * in_ch_, rng);
  bias.value.setZero();
}

Dims3 Conv3d::output_dims(Dims3 in) const {
  return {(in.x - 1) / stride_ + 1, (in.y - 1) / stride_ + 1, (in.z - 1) / stride_ + 1};
}

namespace {

// Offsets of the 27 taps relative to the window origin, in input voxels.
std::array<std::ptrdiff_t, 27> tap_offsets(Dims3 in) {
  std::array<std::ptrdiff_t, 27> off{};
  int t = 0;
  for (int kz = 0; kz < 3; ++kz)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx) off[static_cast<std::size_t>(t++)] = (static_cast<std::ptrdiff_t>(kz) * in.y + ky) * in.x + kx;
  return off;
}

}  // namespace

void Conv3d::im2col(const Mat& x, Dims3 in, Dims3 out, int b0, int nb, Mat& cols) const {
  const int s_in = in.size(), s_out = out.size();
  const Eigen::Index k = 27 * static_cast<Eigen::Index>(in_ch_);
  if (cols.rows() != k || cols.cols() != static_cast<Eigen::Index>(nb) * s_out) cols.resize(k, static_cast<Eigen::Index>(nb) * s_out);
  const double* xd = x.data();
  double* cd = cols.data();
  const std::ptrdiff_t cin = in_ch_;
  const auto off = tap_offsets(in);
  for (int b = 0; b < nb; ++b) {
    const double* xb = xd + static_cast<std::ptrdiff_t>(b0 + b) * s_in * cin;
    for (int oz = 0; oz < out.z; ++oz) {
      const int z0 = oz * stride_ - 1;
      for (int oy = 0; oy < out.y; ++oy) {
        const int y0 = oy * stride_ - 1;
        for (int ox = 0; ox < out.x; ++ox) {
          const int x0 = ox * stride_ - 1;
          const std::ptrdiff_t col = static_cast<std::ptrdiff_t>(b) * s_out + (static_cast<std::ptrdiff_t>(oz) * out.y + oy) * out.x + ox;
          double* dst = cd + col * k;
          const bool interior = z0 >= 0 && y0 >= 0 && x0 >= 0 && z0 + 2 < in.z && y0 + 2 < in.y && x0 + 2 < in.x;
          if (interior) {
            const double* base = xb + ((static_cast<std::ptrdiff_t>(z0) * in.y + y0) * in.x + x0) * cin;
            if (cin == 1) {
              for (int t = 0; t < 27; ++t) dst[t] = base[off[static_cast<std::size_t>(t)]];
            } else {
              for (int t = 0; t < 27; ++t, dst += cin) {
                const double* src = base + off[static_cast<std::size_t>(t)] * cin;
                for (std::ptrdiff_t c = 0; c < cin; ++c) dst[c] = src[c];
              }
            }
            continue;
          }
          for (int kz = 0; kz < 3; ++kz) {
            const int iz = z0 + kz;
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = y0 + ky;
              for (int kx = 0; kx < 3; ++kx, dst += cin) {
                const int ix = x0 + kx;
                if (iz < 0 || iy < 0 || ix < 0 || iz >= in.z || iy >= in.y || ix >= in.x) {
                  for (std::ptrdiff_t c = 0; c < cin; ++c) dst[c] = 0.0;
                } else {
                  const double* src = xb + ((static_cast<std::ptrdiff_t>(iz) * in.y + iy) * in.x + ix) * cin;
                  for (std::ptrdiff_t c = 0; c < cin; ++c) dst[c] = src[c];
                }
              }
            }
          }
        }
      }
    }
  }
}

void Conv3d::col2im(const Mat& cols, Dims3 in, Dims3 out, int b0, int nb, Mat& gx) const {
  const int s_in = in.size(), s_out = out.size();
  const std::ptrdiff_t k = 27 * static_cast<std::ptrdiff_t>(in_ch_);
  const double* cd = cols.data();
  double* gd = gx.data();
  const std::ptrdiff_t cin = in_ch_;
  const auto off = tap_offsets(in);
  for (int b = 0; b < nb; ++b) {
    double* gb = gd + static_cast<std::ptrdiff_t>(b0 + b) * s_in * cin;
    for (int oz = 0; oz < out.z; ++oz) {
      const int z0 = oz * stride_ - 1;
      for (int oy = 0; oy < out.y; ++oy) {
        const int y0 = oy * stride_ - 1;
        for (int ox = 0; ox < out.x; ++ox) {
          const int x0 = ox * stride_ - 1;
          const std::ptrdiff_t col = static_cast<std::ptrdiff_t>(b) * s_out + (static_cast<std::ptrdiff_t>(oz) * out.y + oy) * out.x + ox;
          const double* src = cd + col * k;
          const bool interior = z0 >= 0 && y0 >= 0 && x0 >= 0 && z0 + 2 < in.z && y0 + 2 < in.y && x0 + 2 < in.x;
          if (interior) {
            double* base = gb + ((static_cast<std::ptrdiff_t>(z0) * in.y + y0) * in.x + x0) * cin;
            for (int t = 0; t < 27; ++t, src += cin) {
              double* dst = base + off[static_cast<std::size_t>(t)] * cin;
              for (std::ptrdiff_t c = 0; c < cin; ++c) dst[c] += src[c];
            }
            continue;
          }
          for (int kz = 0; kz < 3; ++kz) {
            const int iz = z0 + kz;
            for (int ky = 0; ky < 3; ++ky) {
              const int iy = y0 + ky;
              for (int kx = 0; kx < 3; ++kx, src += cin) {
                const int ix = x0 + kx;
                if (iz < 0 || iy < 0 || ix < 0 || iz >= in.z || iy >= in.y || ix >= in.x) continue;
                double* dst = gb + ((static_cast<std::ptrdiff_t>(iz) * in.y + iy) * in.x + ix) * cin;
                for (std::ptrdiff_t c = 0; c < cin; ++c) dst[c] += src[c];
              }
            }
          }
        }
      }
    }
  }
}

Mat Conv3d::forward(const Mat& x, Dims3 in, int batch) const {
  if (x.rows() != in_ch_ || x.cols() != static_cast<Eigen::Index>(batch) * in.size())
    throw ContractError("conv3d: input shape mismatch for " + weight.name);
  const Dims3 out = output_dims(in);
  const Eigen::Index s_out = out.size();
  Mat y(out_ch_, batch * s_out);
  const int chunk = static_cast<int>(std::max<Eigen::Index>(1, kMaxColEntries / (27 * in_ch_ * s_out)));
  Mat cols;
  for (int b0 = 0; b0 < batch; b0 += chunk) {
    const int nb = std::min(chunk, batch - b0);
    im2col(x, in, out, b0, nb, cols);
    y.middleCols(b0 * s_out, nb * s_out).noalias() = weight.value * cols;
  }
  y.colwise() += bias.value.col(0);
  return y;
}

Mat Conv3d::backward(const Mat& x, Dims3 in, int batch, const Mat& grad_out, bool input_grad) {
  const Dims3 out = output_dims(in);
  const Eigen::Index s_out = out.size();
  Mat gx;
  if (input_grad) gx = Mat::Zero(in_ch_, static_cast<Eigen::Index>(batch) * in.size());
  bias.grad += grad_out.rowwise().sum();
  const int chunk = static_cast<int>(std::max<Eigen::Index>(1, kMaxColEntries / (27 * in_ch_ * s_out)));
  Mat cols, gcols;
  for (int b0 = 0; b0 < batch; b0 += chunk) {
    const int nb = std::min(chunk, batch - b0);
    im2col(x, in, out, b0, nb, cols);
    const auto gy = grad_out.middleCols(b0 * s_out, nb * s_out);
    weight.grad.noalias() += gy * cols.transpose();
    if (!input_grad) continue;
    gcols.noalias() = weight.value.transpose() * gy;
    col2im(gcols, in, out, b0, nb, gx);
  }
  return gx;
}

// ---------------------------------------------------------------- BatchNorm

BatchNorm::BatchNorm(const std::string& n, int channels, double mom, double epsilon)
    : gamma(n + ".gamma", channels, 1, false),
      beta(n + ".beta", channels, 1, false),
      running_mean(Vec::Zero(channels)),
      running_var(Vec::Ones(channels)),
      momentum(mom),
      eps(epsilon),
      name(n) {
  gamma.value.setOnes();
}

void BatchNorm::collect_buffers(std::vector<Buffer>& out) {
  out.push_back({name + ".running_mean", &running_mean});
  out.push_back({name + ".running_var", &running_var});
}

Mat BatchNorm::forward(const Mat& x, Mode mode, BatchNormCache* cache) {
  if (x.rows() != gamma.value.rows()) throw ContractError("batchnorm: channel mismatch for " + name);
  const auto m = static_cast<double>(x.cols());
  Vec mean, var;
  if (mode == Mode::Train) {
    if (x.cols() == 0) throw ContractError("batchnorm: empty batch");
    mean = x.rowwise().mean();
    var = (x.colwise() - mean).array().square().rowwise().mean().matrix();
    running_mean = momentum * running_mean + (1.0 - momentum) * mean;
    const double unbias = m > 1 ? m / (m - 1) : 1.0;
    running_var = momentum * running_var + (1.0 - momentum) * unbias * var;
  } else {
    mean = running_mean;
    var = running_var;
  }
  const Vec inv_std = (var.array() + eps).rsqrt().matrix();
  Mat xhat = (x.colwise() - mean);
  xhat = inv_std.asDiagonal() * xhat;
  Mat y = gamma.value.col(0).asDiagonal() * xhat;
  y.colwise() += beta.value.col(0);
  if (cache != nullptr) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
    cache->batch_stats = mode == Mode::Train;
  }
  return y;
}

Mat BatchNorm::backward(const Mat& grad_out, const BatchNormCache& cache) {
  beta.grad += grad_out.rowwise().sum();
  gamma.grad += grad_out.cwiseProduct(cache.xhat).rowwise().sum();
  const Mat gxhat = gamma.value.col(0).asDiagonal() * grad_out;
  if (!cache.batch_stats) return cache.inv_std.asDiagonal() * gxhat;
  const auto m = static_cast<double>(grad_out.cols());
  const Vec sum_g = gxhat.rowwise().sum();
  const Vec sum_gx = gxhat.cwiseProduct(cache.xhat).rowwise().sum();
  Mat gx = (gxhat * m).colwise() - sum_g;
  gx -= sum_gx.asDiagonal() * cache.xhat;
  return (cache.inv_std / m).asDiagonal() * gx;
}

// ---------------------------------------------------------------- activations

Mat elu(const Mat& x) {
  return x.unaryExpr([](double v) { return v > 0 ? v : std::expm1(v); });
}

Mat elu_backward(const Mat& y, const Mat& grad_out) {
  return grad_out.binaryExpr(y, [](double g, double v) { return v > 0 ? g : g * (v + 1.0); });
}

Mat relu(const Mat& x) { return x.cwiseMax(0.0); }

Mat relu_backward(const Mat& y, const Mat& grad_out) {
  return grad_out.binaryExpr(y, [](double g, double v) { return v > 0 ? g : 0.0; });
}

Mat l2_normalize_columns(const Mat& z) {
  Mat q = z;
  for (Eigen::Index c = 0; c < z.cols(); ++c) {
    const double n = z.col(c).norm();
    if (!(n > 1e-12) || !std::isfinite(n)) throw NumericError("cannot L2-normalise a zero-norm embedding");
    q.col(c) /= n;
  }
  return q;
}

Mat l2_normalize_backward(const Mat& z, const Mat& q, const Mat& grad_q) {
  Mat gz(z.rows(), z.cols());
  for (Eigen::Index c = 0; c < z.cols(); ++c) {
    const double n = z.col(c).norm();
    gz.col(c) = (grad_q.col(c) - q.col(c) * q.col(c).dot(grad_q.col(c))) / n;
  }
  return gz;
}

}  // namespace ctxssl::nn
