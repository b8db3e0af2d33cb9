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

#include <map>
#include <span>
#include <string>

#include "ctxssl/archive.hpp"
#include "ctxssl/nn.hpp"

namespace ctxssl {

/// lr0 * 0.5 * (1 + cos(pi * step / total_steps)).
double cosine_lr(long step, long total_steps, double lr0);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;  // decoupled; skipped for parameters with decay == false
};

/// Adam with decoupled weight decay:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p).
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {}

  void step(std::span<nn::Param* const> params, double lr);
  [[nodiscard]] long steps() const { return t_; }
  [[nodiscard]] const AdamConfig& config() const { return config_; }

  void save(Archive& archive, const std::string& prefix) const;
  void load(const Archive& archive, const std::string& prefix);

 private:
  AdamConfig config_;
  long t_ = 0;
  std::map<std::string, nn::Mat> m_, v_;
};

}  // namespace ctxssl
