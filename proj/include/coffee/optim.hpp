#pragma once

// AdamW with bias correction and decoupled weight decay. Moment buffers are
// stored float32; the per-element update is computed in double, so two runs
// over identical gradients are bit-identical.

#include <cmath>
#include <string>
#include <vector>

#include "coffee/tensor.hpp"

namespace coffee {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  void validate() const {
    if (!(lr > 0.0)) throw Error(Error::Kind::config, "adamw: lr must be > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw Error(Error::Kind::config, "adamw: beta1 must be in [0,1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw Error(Error::Kind::config, "adamw: beta2 must be in [0,1)");
    if (!(eps > 0.0)) throw Error(Error::Kind::config, "adamw: eps must be > 0");
    if (weight_decay < 0.0) throw Error(Error::Kind::config, "adamw: weight_decay must be >= 0");
  }
};

class AdamW {
 public:
  AdamW(std::vector<Tensor*> params, AdamWConfig cfg = {})
      : params_(std::move(params)), cfg_(cfg) {
    cfg_.validate();
    if (params_.empty()) throw Error(Error::Kind::contract, "adamw: no parameters");
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i]->data.size(), 0.0f);
      v_[i].assign(params_[i]->data.size(), 0.0f);
    }
  }

  int64_t step_count() const { return step_; }
  const AdamWConfig& config() const { return cfg_; }

  // Adjust the learning rate between steps (for schedules such as cosine decay).
  void set_lr(double lr) {
    if (!(lr > 0.0)) throw Error(Error::Kind::config, "adamw: lr must be > 0");
    cfg_.lr = lr;
  }

  // One update from the gradients currently stored on the parameters.
  // Gradients are left intact; callers zero them between steps.
  void step() {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(step_));
    for (size_t p = 0; p < params_.size(); ++p) {
      Tensor& t = *params_[p];
      if (!t.has_grad())
        throw Error(Error::Kind::contract,
                    "adamw: parameter " + std::to_string(p) + " has no gradient");
      for (size_t i = 0; i < t.data.size(); ++i) {
        const double gi = t.grad[i];
        if (!std::isfinite(gi))
          throw Error(Error::Kind::numeric, "adamw: non-finite gradient");
        const double mi = cfg_.beta1 * double(m_[p][i]) + (1.0 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * double(v_[p][i]) + (1.0 - cfg_.beta2) * gi * gi;
        m_[p][i] = float(mi);
        v_[p][i] = float(vi);
        const double mhat = double(m_[p][i]) / bc1;
        const double vhat = double(v_[p][i]) / bc2;
        const double upd = mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * double(t.data[i]);
        t.data[i] = float(double(t.data[i]) - cfg_.lr * upd);
      }
    }
  }

 private:
  std::vector<Tensor*> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  int64_t step_ = 0;
};

}  // namespace coffee
