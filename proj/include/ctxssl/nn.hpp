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

#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "ctxssl/rng.hpp"

namespace ctxssl::nn {

// Activations are stored feature-major: a (channels, batch * positions) matrix
// whose column b * positions + s holds sample b at spatial position s.
using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

/// Trainable tensor with its gradient accumulator.
struct Param {
  std::string name;
  Mat value;
  Mat grad;
  bool decay = true;  // false for biases and normalisation parameters

  Param() = default;
  Param(std::string n, Eigen::Index rows, Eigen::Index cols, bool weight_decay);
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

/// Non-trainable state saved with the model (batchnorm running statistics).
struct Buffer {
  std::string name;
  Vec* value;
};

/// Train: batch statistics, running statistics updated. Eval: running statistics.
enum class Mode { Train, Eval };

struct Dims3 {
  int x = 1, y = 1, z = 1;
  [[nodiscard]] int size() const { return x * y * z; }
  bool operator==(const Dims3&) const = default;
};

/// Uniform(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
void he_uniform(Mat& w, int fan_in, Rng& rng);

class Dense {
 public:
  Dense() = default;
  Dense(const std::string& name, int in, int out);
  void init(Rng& rng);
  [[nodiscard]] Mat forward(const Mat& x) const;
  /// Accumulates parameter gradients and returns d loss / d x.
  Mat backward(const Mat& x, const Mat& grad_out);
  void collect(std::vector<Param*>& out) { out.push_back(&weight); out.push_back(&bias); }

  [[nodiscard]] int in_features() const { return static_cast<int>(weight.value.cols()); }
  [[nodiscard]] int out_features() const { return static_cast<int>(weight.value.rows()); }

  Param weight;  // (out, in)
  Param bias;    // (out, 1)
};

/// 3x3x3 convolution, zero padding 1, stride 1 or 2.
class Conv3d {
 public:
  Conv3d() = default;
  Conv3d(const std::string& name, int in_channels, int out_channels, int stride);
  void init(Rng& rng);
  [[nodiscard]] Dims3 output_dims(Dims3 in) const;
  [[nodiscard]] Mat forward(const Mat& x, Dims3 in, int batch) const;
  /// Accumulates parameter gradients; returns d loss / d x unless `input_grad`
  /// is false (then an empty matrix).
  Mat backward(const Mat& x, Dims3 in, int batch, const Mat& grad_out, bool input_grad = true);
  void collect(std::vector<Param*>& out) { out.push_back(&weight); out.push_back(&bias); }

  [[nodiscard]] int in_channels() const { return in_ch_; }
  [[nodiscard]] int out_channels() const { return out_ch_; }
  [[nodiscard]] int stride() const { return stride_; }

  Param weight;  // (out, 27 * in); column k * in + c holds tap k of input channel c
  Param bias;    // (out, 1)

 private:
  void im2col(const Mat& x, Dims3 in, Dims3 out, int b0, int nb, Mat& cols) const;
  void col2im(const Mat& cols, Dims3 in, Dims3 out, int b0, int nb, Mat& gx) const;

  int in_ch_ = 0, out_ch_ = 0, stride_ = 1;
};

struct BatchNormCache {
  Mat xhat;
  Vec inv_std;
  bool batch_stats = false;
};

/// Per-channel (row) normalisation over all columns of the activation matrix.
class BatchNorm {
 public:
  BatchNorm() = default;
  BatchNorm(const std::string& name, int channels, double momentum = 0.9, double eps = 1e-5);
  /// In Train mode uses batch statistics and updates
  /// running = momentum * running + (1 - momentum) * batch.
  Mat forward(const Mat& x, Mode mode, BatchNormCache* cache = nullptr);
  Mat backward(const Mat& grad_out, const BatchNormCache& cache);
  void collect(std::vector<Param*>& out) { out.push_back(&gamma); out.push_back(&beta); }
  void collect_buffers(std::vector<Buffer>& out);

  Param gamma, beta;  // (C, 1)
  Vec running_mean, running_var;
  double momentum = 0.9;
  double eps = 1e-5;
  std::string name;
};

Mat elu(const Mat& x);
/// Gradient of ELU given its output y (alpha = 1).
Mat elu_backward(const Mat& y, const Mat& grad_out);
Mat relu(const Mat& x);
Mat relu_backward(const Mat& y, const Mat& grad_out);

/// Column-wise L2 normalisation; throws NumericError on zero columns.
Mat l2_normalize_columns(const Mat& z);
/// Backpropagates through column-wise normalisation q = z / ||z||.
Mat l2_normalize_backward(const Mat& z, const Mat& q, const Mat& grad_q);

}  // namespace ctxssl::nn
