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


#include "ctxssl/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ctxssl/error.hpp"

namespace ctxssl {

double cosine_lr(long step, long total_steps, double lr0) {
  if (total_steps <= 0) return lr0;
  const double t = static_cast<double>(std::clamp(step, 0L, total_steps)) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

void Adam::step(std::span<nn::Param* const> params, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (nn::Param* p : params) {
    auto [mit, fresh] = m_.try_emplace(p->name, nn::Mat::Zero(p->value.rows(), p->value.cols()));
    auto& v = v_.try_emplace(p->name, nn::Mat::Zero(p->value.rows(), p->value.cols())).first->second;
    nn::Mat& m = mit->second;
    if (m.rows() != p->value.rows() || m.cols() != p->value.cols())
      throw ContractError("adam: parameter '" + p->name + "' changed shape");
    m = config_.beta1 * m + (1.0 - config_.beta1) * p->grad;
    v = config_.beta2 * v + (1.0 - config_.beta2) * p->grad.cwiseProduct(p->grad);
    nn::Mat update = (m / bc1).array() / ((v / bc2).array().sqrt() + config_.eps);
    if (p->decay) update += config_.weight_decay * p->value;
    p->value -= lr * update;
  }
}

void Adam::save(Archive& a, const std::string& prefix) const {
  a.put_i64(prefix + "/t", t_);
  for (const auto& [name, m] : m_) a.put_matrix(prefix + "/m/" + name, m);
  for (const auto& [name, v] : v_) a.put_matrix(prefix + "/v/" + name, v);
}

void Adam::load(const Archive& a, const std::string& prefix) {
  t_ = a.get_i64(prefix + "/t");
  m_.clear();
  v_.clear();
  const std::string pm = prefix + "/m/", pv = prefix + "/v/";
  for (const auto& name : a.names()) {
    if (name.rfind(pm, 0) == 0) m_[name.substr(pm.size())] = a.get_matrix(name);
    if (name.rfind(pv, 0) == 0) v_[name.substr(pv.size())] = a.get_matrix(name);
  }
}

}  // namespace ctxssl
