#include "mdmt/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <sstream>

#include "mdmt/model.hpp"
#include "mdmt/rng.hpp"
#include "mdmt/trainer.hpp"

namespace mdmt {

namespace {

constexpr double kFdStep = 1e-4;
constexpr double kPrimitiveThreshold = 1e-4;
constexpr double kModelThreshold = 1e-3;

using DTensor = Tensor<double>;

double rel_err(double a, double b) {
  return std::fabs(a - b) / std::max({1.0, std::fabs(a), std::fabs(b)});
}

// One differentiable scenario: inputs plus a scalar-loss builder over them.
struct CheckCase {
  std::vector<DTensor> inputs;
  std::function<DTensor(Tape<double>*, std::vector<DTensor>&)> loss_fn;
};

double worst_case_err(CheckCase& cc, const BackwardHook* hook) {
  Tape<double> tape;
  for (auto& t : cc.inputs) tape.watch(t);
  DTensor loss = cc.loss_fn(&tape, cc.inputs);
  GradientMap<double> grads = backward(tape, loss, hook);

  double worst = 0.0;
  for (auto& input : cc.inputs) {
    const auto& analytic = grads.at(input.node).values;
    for (Eigen::Index r = 0; r < input.rows(); ++r) {
      for (Eigen::Index c = 0; c < input.cols(); ++c) {
        const double saved = input.values(r, c);
        input.values(r, c) = saved + kFdStep;
        const double hi = cc.loss_fn(nullptr, cc.inputs).item();
        input.values(r, c) = saved - kFdStep;
        const double lo = cc.loss_fn(nullptr, cc.inputs).item();
        input.values(r, c) = saved;
        const double fd = (hi - lo) / (2.0 * kFdStep);
        worst = std::max(worst, rel_err(analytic(r, c), fd));
      }
    }
  }
  return worst;
}

DTensor random_tensor(Rng& rng, Eigen::Index rows, Eigen::Index cols, int rank = 2) {
  DTensor t = rank == 1 ? DTensor::vector(cols) : DTensor::matrix(rows, cols);
  for (Eigen::Index r = 0; r < t.rows(); ++r) {
    for (Eigen::Index c = 0; c < t.cols(); ++c) t.values(r, c) = rng.uniform(-2.0, 2.0);
  }
  return t;
}

// Values bounded away from zero so the FD step never straddles the ReLU kink.
DTensor random_tensor_off_kink(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  DTensor t = random_tensor(rng, rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      while (std::fabs(t.values(r, c)) < 8.0 * kFdStep) t.values(r, c) = rng.uniform(-2.0, 2.0);
    }
  }
  return t;
}

// Reduce an op output to a scalar with a fixed random weighting so every
// output entry contributes to the gradient.
std::function<DTensor(Tape<double>*, std::vector<DTensor>&)> weighted_loss(
    OpKind kind, DTensor weights) {
  return [kind, weights](Tape<double>* tp, std::vector<DTensor>& ins) {
    DTensor out = apply_primitive<double>(tp, kind, {ins.data(), ins.size()});
    return sum_all(tp, elementwise_mul(tp, out, weights));
  };
}

DTensor const_like_shape(Rng& rng, Eigen::Index rows, Eigen::Index cols, int rank) {
  DTensor w = rank == 1 ? DTensor::vector(cols) : DTensor::matrix(rows, cols);
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    for (Eigen::Index c = 0; c < w.cols(); ++c) w.values(r, c) = rng.uniform(-1.0, 1.0);
  }
  return w;
}

CheckCase make_primitive_case(OpKind kind, int variant, Rng& rng) {
  const auto dim = [&](int lo, int hi) {
    return static_cast<Eigen::Index>(lo + rng.uniform_index(static_cast<uint64_t>(hi - lo + 1)));
  };
  CheckCase cc;
  switch (kind) {
    case OpKind::matmul: {
      const auto m = dim(1, 5), k = dim(1, 5), n = dim(1, 5);
      cc.inputs = {random_tensor(rng, m, k), random_tensor(rng, k, n)};
      cc.loss_fn = weighted_loss(kind, const_like_shape(rng, m, n, 2));
      break;
    }
    case OpKind::add: {
      const auto m = dim(1, 5), n = dim(1, 6);
      if (variant % 2 == 0) {
        cc.inputs = {random_tensor(rng, m, n), random_tensor(rng, m, n)};
      } else {
        cc.inputs = {random_tensor(rng, m, n), random_tensor(rng, 1, n, 1)};
      }
      cc.loss_fn = weighted_loss(kind, const_like_shape(rng, m, n, 2));
      break;
    }
    case OpKind::elementwise_mul: {
      const auto m = dim(1, 5), n = dim(2, 6);
      if (variant % 2 == 0) {
        cc.inputs = {random_tensor(rng, m, n), random_tensor(rng, m, n)};
      } else {
        cc.inputs = {random_tensor(rng, m, n), random_tensor(rng, m, 1)};
      }
      cc.loss_fn = weighted_loss(kind, const_like_shape(rng, m, n, 2));
      break;
    }
    case OpKind::relu: {
      const auto m = dim(1, 5), n = dim(1, 6);
      cc.inputs = {random_tensor_off_kink(rng, m, n)};
      cc.loss_fn = weighted_loss(kind, const_like_shape(rng, m, n, 2));
      break;
    }
    case OpKind::sigmoid:
    case OpKind::softmax_lastdim:
    case OpKind::layernorm_lastdim: {
      const auto m = dim(1, 5);
      const auto n = kind == OpKind::sigmoid ? dim(1, 6) : dim(2, 6);
      cc.inputs = {random_tensor(rng, m, n)};
      cc.loss_fn = weighted_loss(kind, const_like_shape(rng, m, n, 2));
      break;
    }
    case OpKind::scalar_scale: {
      const auto m = dim(1, 5), n = dim(1, 6);
      cc.inputs = {random_tensor(rng, m, n), random_tensor(rng, 1, 1, 1)};
      cc.loss_fn = weighted_loss(kind, const_like_shape(rng, m, n, 2));
      break;
    }
    case OpKind::sum: {
      const auto m = dim(1, 5), n = dim(1, 6);
      cc.inputs = {random_tensor(rng, m, n)};
      cc.loss_fn = weighted_loss(kind, const_like_shape(rng, 1, 1, 1));
      break;
    }
    case OpKind::concat_lastdim: {
      const auto m = dim(1, 5);
      const int parts = 2 + variant % 2;
      Eigen::Index total = 0;
      for (int p = 0; p < parts; ++p) {
        const auto n = dim(1, 4);
        cc.inputs.push_back(random_tensor(rng, m, n));
        total += n;
      }
      cc.loss_fn = weighted_loss(kind, const_like_shape(rng, m, total, 2));
      break;
    }
    case OpKind::gather_rows: {
      const auto vocab = dim(3, 8), e = dim(1, 4), n = dim(2, 6);
      std::vector<int> rows;
      for (Eigen::Index i = 0; i < n; ++i) {
        rows.push_back(static_cast<int>(rng.uniform_index(static_cast<uint64_t>(vocab))));
      }
      cc.inputs = {random_tensor(rng, vocab, e)};
      DTensor w = const_like_shape(rng, n, e, 2);
      cc.loss_fn = [rows, w](Tape<double>* tp, std::vector<DTensor>& ins) {
        DTensor out = gather_rows(tp, ins[0], rows);
        return sum_all(tp, elementwise_mul(tp, out, w));
      };
      break;
    }
    case OpKind::bce_mean: {
      const auto b = dim(2, 5), t = dim(1, 3);
      DTensor pred = DTensor::matrix(b, t);
      DTensor labels = DTensor::matrix(b, t);
      for (Eigen::Index r = 0; r < b; ++r) {
        for (Eigen::Index c = 0; c < t; ++c) {
          pred.values(r, c) = rng.uniform(0.05, 0.95);
          labels.values(r, c) = rng.bernoulli(0.5) ? 1.0 : 0.0;
        }
      }
      cc.inputs = {pred};
      cc.loss_fn = [labels](Tape<double>* tp, std::vector<DTensor>& ins) {
        return bce_mean(tp, ins[0], labels);
      };
      break;
    }
    case OpKind::leaf:
      break;
  }
  return cc;
}

}  // namespace

std::vector<GradCheckResult> run_primitive_gradchecks(uint64_t seed, const BackwardHook* hook) {
  const OpKind kinds[] = {
      OpKind::matmul,          OpKind::add,
      OpKind::elementwise_mul, OpKind::relu,
      OpKind::sigmoid,         OpKind::softmax_lastdim,
      OpKind::layernorm_lastdim, OpKind::scalar_scale,
      OpKind::sum,             OpKind::concat_lastdim,
      OpKind::gather_rows,     OpKind::bce_mean,
  };
  std::vector<GradCheckResult> out;
  for (OpKind kind : kinds) {
    GradCheckResult res;
    res.family = op_name(kind);
    res.threshold = kPrimitiveThreshold;
    Rng rng(mix_seed(seed, static_cast<uint64_t>(kind) + 1));
    for (int i = 0; i < 10; ++i) {
      CheckCase cc = make_primitive_case(kind, i, rng);
      res.worst_rel_err = std::max(res.worst_rel_err, worst_case_err(cc, hook));
    }
    res.pass = res.worst_rel_err < res.threshold;
    out.push_back(std::move(res));
  }
  return out;
}

std::vector<GradCheckResult> run_model_gradchecks(uint64_t seed) {
  // Tiny full model over a 2-field space; one batch of 3 per domain so every
  // domain-indexed parameter is reachable from the summed loss.
  FeatureSpace space;
  space.fields = {{"u", 5}, {"v", 5}};
  space.domain_count = 2;
  space.task_count = 2;
  Hyper hp;
  hp.shared_experts = 2;
  hp.embedding_dim = 4;
  hp.hidden_dim = 4;
  hp.expert_dim = 4;
  hp.tower_hidden = 4;
  Model<double> model = build_variant<double>(VariantKind::full, hp, space, mix_seed(seed, 77));

  Dataset ds;
  ds.space = space;
  Rng rng(mix_seed(seed, 78));
  for (uint16_t d = 0; d < 2; ++d) {
    for (int i = 0; i < 3; ++i) {
      const uint32_t feats[2] = {static_cast<uint32_t>(rng.uniform_index(5)),
                                 static_cast<uint32_t>(rng.uniform_index(5))};
      const uint8_t labs[2] = {static_cast<uint8_t>(rng.bernoulli(0.5)),
                               static_cast<uint8_t>(rng.bernoulli(0.5))};
      ds.push_row(d, feats, labs);
    }
  }
  const std::vector<uint32_t> batch0 = {0, 1, 2};
  const std::vector<uint32_t> batch1 = {3, 4, 5};

  auto loss_value = [&](Tape<double>* tp) {
    Tensor<double> p0 = forward<double>(tp, model, ds, batch0, 0);
    Tensor<double> l0 = batch_labels<double>(ds, batch0);
    Tensor<double> p1 = forward<double>(tp, model, ds, batch1, 1);
    Tensor<double> l1 = batch_labels<double>(ds, batch1);
    return add(tp, bce_mean(tp, p0, l0), bce_mean(tp, p1, l1));
  };

  Tape<double> tape;
  auto params = all_params(model);
  for (auto& p : params) tape.watch(*p.tensor);
  Tensor<double> loss = loss_value(&tape);
  GradientMap<double> grads = backward(tape, loss);

  std::vector<GradCheckResult> out;
  Rng pick(mix_seed(seed, 79));
  std::vector<std::string> families = {
      "model.embedding",   "model.domain_repr",   "model.shared_experts",
      "model.domain_experts", "model.task_experts", "model.gates",
      "model.towers",      "model.fusion_alpha_d", "model.fusion_alpha_t",
      "model.fusion_beta_d", "model.fusion_beta_t",
  };
  for (const auto& family : families) {
    GradCheckResult res;
    res.family = family;
    res.threshold = kModelThreshold;
    const std::string group = family.substr(6);  // strip "model."
    std::vector<ParamRef<double>*> members;
    for (auto& p : params) {
      if (census_group_for(p.name) == group) members.push_back(&p);
    }
    int checked = 0;
    while (checked < 2 && !members.empty()) {
      auto& pr = *members[pick.uniform_index(members.size())];
      Tensor<double>& t = *pr.tensor;
      const Eigen::Index r = static_cast<Eigen::Index>(pick.uniform_index(t.rows()));
      const Eigen::Index c = static_cast<Eigen::Index>(pick.uniform_index(t.cols()));
      const double analytic = grads.at(t.node).values(r, c);
      const double saved = t.values(r, c);
      t.values(r, c) = saved + kFdStep;
      const double hi = loss_value(nullptr).item();
      t.values(r, c) = saved - kFdStep;
      const double lo = loss_value(nullptr).item();
      t.values(r, c) = saved;
      const double fd = (hi - lo) / (2.0 * kFdStep);
      res.worst_rel_err = std::max(res.worst_rel_err, rel_err(analytic, fd));
      ++checked;
    }
    res.pass = res.worst_rel_err < res.threshold;
    out.push_back(std::move(res));
  }
  return out;
}

std::vector<GradCheckResult> run_all_gradchecks(uint64_t seed, const BackwardHook* hook) {
  auto out = run_primitive_gradchecks(seed, hook);
  auto model_checks = run_model_gradchecks(seed);
  out.insert(out.end(), model_checks.begin(), model_checks.end());
  return out;
}

bool gradchecks_pass(const std::vector<GradCheckResult>& results) {
  for (const auto& r : results) {
    if (!r.pass) return false;
  }
  return true;
}

std::string render_gradcheck_report(const std::vector<GradCheckResult>& results) {
  std::ostringstream out;
  char buf[64];
  for (const auto& r : results) {
    std::snprintf(buf, sizeof(buf), "%.3e", r.worst_rel_err);
    out << "family=" << r.family << " worst_rel_err=" << buf << " threshold=" << r.threshold
        << " status=" << (r.pass ? "PASS" : "FAIL") << "\n";
  }
  return out.str();
}

}  // namespace mdmt
