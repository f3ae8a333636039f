// AdamW over a fixed-order list of Eigen matrices, a warmup + cosine decay
// learning-rate schedule, and the exponential moving average used to keep a
// teacher copy of student weights.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <vector>

namespace bright {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

template <typename S>
class AdamWT {
 public:
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

  explicit AdamWT(AdamWConfig cfg = {}) : cfg_(cfg) {}

  // params[i] is updated in place from grads[i]. The call order and list
  // order must stay identical across steps; state is keyed by position.
  void step(const std::vector<Mat*>& params, const std::vector<const Mat*>& grads, double lr) {
    if (params.size() != grads.size()) {
      throw std::invalid_argument("adamw: params/grads length mismatch");
    }
    if (slots_.empty()) {
      slots_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        slots_[i].m = Mat::Zero(params[i]->rows(), params[i]->cols());
        slots_[i].v = Mat::Zero(params[i]->rows(), params[i]->cols());
      }
    } else if (slots_.size() != params.size()) {
      throw std::invalid_argument("adamw: parameter list changed size between steps");
    }
    ++t_;
    const S b1 = S(cfg_.beta1), b2 = S(cfg_.beta2);
    const S bc1 = S(1.0 - std::pow(cfg_.beta1, t_));
    const S bc2 = S(1.0 - std::pow(cfg_.beta2, t_));
    for (size_t i = 0; i < params.size(); ++i) {
      Mat& p = *params[i];
      const Mat& g = *grads[i];
      if (g.rows() != p.rows() || g.cols() != p.cols()) {
        throw std::invalid_argument("adamw: gradient shape mismatch at slot " + std::to_string(i));
      }
      Mat& m = slots_[i].m;
      Mat& v = slots_[i].v;
      m = b1 * m + (S(1) - b1) * g;
      v = b2 * v + (S(1) - b2) * g.cwiseProduct(g);
      // Decoupled weight decay, applied before the adaptive step.
      if (cfg_.weight_decay > 0.0) p -= S(lr * cfg_.weight_decay) * p;
      const Mat mhat = m / bc1;
      const Mat vhat = v / bc2;
      p.array() -= S(lr) * mhat.array() / (vhat.array().sqrt() + S(cfg_.eps));
    }
  }

  int t() const { return t_; }

 private:
  struct Slot {
    Mat m, v;
  };
  AdamWConfig cfg_;
  std::vector<Slot> slots_;
  int t_ = 0;
};

using AdamW = AdamWT<float>;

// Linear warmup to base_lr over `warmup` steps, then cosine decay to
// `final_lr` at `total` steps. Steps are 0-based.
inline double cosine_lr(int step, int total, int warmup, double base_lr, double final_lr = 0.0) {
  if (total <= 0) throw std::invalid_argument("cosine_lr: total must be positive");
  if (warmup < 0 || warmup > total) throw std::invalid_argument("cosine_lr: bad warmup");
  if (step < 0) step = 0;
  if (step >= total) return final_lr;
  if (step < warmup) return base_lr * double(step + 1) / double(warmup);
  const double t = double(step - warmup) / double(total - warmup);
  return final_lr + 0.5 * (base_lr - final_lr) * (1.0 + std::cos(M_PI * t));
}

// teacher <- momentum * teacher + (1 - momentum) * student, element-wise over
// matching parameter lists.
template <typename S>
void ema_update(std::vector<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>*> teacher,
                const std::vector<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>*>& student,
                double momentum) {
  if (teacher.size() != student.size()) {
    throw std::invalid_argument("ema_update: teacher/student length mismatch");
  }
  if (momentum < 0.0 || momentum > 1.0) {
    throw std::invalid_argument("ema_update: momentum outside [0, 1]");
  }
  const S m = S(momentum);
  for (size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i]->rows() != student[i]->rows() || teacher[i]->cols() != student[i]->cols()) {
      throw std::invalid_argument("ema_update: shape mismatch at slot " + std::to_string(i));
    }
    *teacher[i] = m * (*teacher[i]) + (S(1) - m) * (*student[i]);
  }
}

}  // namespace bright
