#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mdmt/tape.hpp"
#include "mdmt/tensor.hpp"

namespace mdmt {

enum class OptimizerKind { adam, sgd };

inline const char* optimizer_name(OptimizerKind k) {
  return k == OptimizerKind::adam ? "adam" : "sgd";
}

template <typename S>
struct ParamRef {
  std::string name;
  Tensor<S>* tensor;
};

// In-place parameter updates. Adam (0.9, 0.999, 1e-8) by default, plain SGD
// selectable. Moment state is keyed by parameter name so it can be
// checkpointed and restored alongside the parameters.
template <typename S>
class Optimizer {
 public:
  struct Moments {
    MatrixX<S> m;
    MatrixX<S> v;
  };

  explicit Optimizer(OptimizerKind kind) : kind_(kind) {}

  OptimizerKind kind() const { return kind_; }
  uint64_t step_count() const { return step_count_; }
  void set_step_count(uint64_t t) { step_count_ = t; }
  std::map<std::string, Moments>& moments() { return moments_; }
  const std::map<std::string, Moments>& moments() const { return moments_; }

  void step(const std::vector<ParamRef<S>>& params, const GradientMap<S>& grads, S lr) {
    if (lr < S(0)) throw ValidationError("optimizer step with negative learning rate");
    ++step_count_;
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(step_count_));
    for (const auto& p : params) {
      if (p.tensor->node < 0 || p.tensor->tape_id != grads.tape_id() ||
          !grads.contains(p.tensor->node)) {
        throw ShapeError("missing gradient for parameter '" + p.name + "'");
      }
      const MatrixX<S>& g = grads.at(p.tensor->node).values;
      MatrixX<S>& w = p.tensor->values;
      if (g.rows() != w.rows() || g.cols() != w.cols()) {
        throw ShapeError("gradient shape mismatch for parameter '" + p.name + "'");
      }
      if (kind_ == OptimizerKind::sgd) {
        w -= lr * g;
      } else {
        auto& st = moments_[p.name];
        if (st.m.size() == 0) {
          st.m = MatrixX<S>::Zero(w.rows(), w.cols());
          st.v = MatrixX<S>::Zero(w.rows(), w.cols());
        }
        st.m = S(0.9) * st.m + S(0.1) * g;
        st.v = (S(0.999) * st.v.array() + S(0.001) * g.array().square()).matrix();
        const S c1 = static_cast<S>(1.0 / bc1);
        const S c2 = static_cast<S>(1.0 / bc2);
        w -= (lr * (st.m.array() * c1) / ((st.v.array() * c2).sqrt() + S(1e-8))).matrix();
      }
      if (!w.allFinite()) {
        throw NumericError("non-finite update for parameter '" + p.name + "'");
      }
    }
  }

 private:
  OptimizerKind kind_;
  uint64_t step_count_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace mdmt
