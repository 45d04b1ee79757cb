#pragma once

#include <functional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mdmt/dataset.hpp"
#include "mdmt/optimizer.hpp"
#include "mdmt/rng.hpp"
#include "mdmt/tape.hpp"

namespace mdmt {

// Model widths. input_dim is derived: field_count * embedding_dim.
struct Hyper {
  uint32_t domain_count = 0;   // D
  uint32_t task_count = 0;     // T
  uint32_t shared_experts = 2; // N
  uint32_t embedding_dim = 16;
  uint32_t hidden_dim = 32;
  uint32_t expert_dim = 16;
  uint32_t tower_hidden = 16;

  bool operator==(const Hyper&) const = default;
};

enum class VariantKind {
  full,
  mlp_single,
  shared_only,
  no_domain_module,
  no_task_module,
  no_automl,
  concat_modules,
  fully_gated,
};

const char* variant_name(VariantKind k);
VariantKind variant_from_name(const std::string& name);

inline bool variant_has_domain_module(VariantKind k) {
  return k != VariantKind::shared_only && k != VariantKind::no_domain_module &&
         k != VariantKind::mlp_single;
}
inline bool variant_has_task_module(VariantKind k) {
  return k != VariantKind::shared_only && k != VariantKind::no_task_module &&
         k != VariantKind::mlp_single;
}
// alpha logits exist only where fusion is the weighted sum of Eq. 7
inline bool variant_has_alpha(VariantKind k) {
  return k == VariantKind::full || k == VariantKind::no_automl ||
         k == VariantKind::no_domain_module || k == VariantKind::no_task_module;
}
inline bool variant_automl_trainable(VariantKind k) { return k != VariantKind::no_automl; }

template <typename S>
struct EmbeddingTables {
  std::vector<Tensor<S>> tables;  // one (vocab, embedding_dim) table per field
  uint32_t dim = 0;
};

template <typename S>
struct DomainReprParams {
  std::vector<Tensor<S>> W_d, b_d;  // per-domain (input, hidden) / (hidden)
  Tensor<S> W_sh, b_sh;             // shared, same shapes
  Tensor<S> W_c, b_c;               // (hidden, hidden) mapping into the common space
  Tensor<S> da_W1, da_b1, da_W2, da_b2;  // two-layer domain-agnostic residual path
};

template <typename S>
struct ExpertBank {
  std::vector<Tensor<S>> W;  // (hidden, expert_dim)
  std::vector<Tensor<S>> b;  // (expert_dim)
  size_t count() const { return W.size(); }
};

template <typename S>
struct GateParams {
  std::vector<Tensor<S>> W;  // per (d,t): (hidden, out)
  std::vector<Tensor<S>> b;  // per (d,t): (out)
};

// The four fusion-weight logit families, one trainable scalar per index so a
// batch's (d, t) selection stays a plain tape leaf.
template <typename S>
struct FusionLogits {
  std::vector<Tensor<S>> alpha_d, alpha_t, beta_d, beta_t;
};

template <typename S>
struct TowerParams {
  std::vector<Tensor<S>> W1, b1, W2, b2;  // per (d,t)
};

template <typename S>
struct M3oECore {
  VariantKind kind = VariantKind::full;
  Hyper hp;
  FeatureSpace space;
  EmbeddingTables<S> emb;
  DomainReprParams<S> repr;
  ExpertBank<S> shared_bank, domain_bank, task_bank;
  GateParams<S> gates;        // D*T gates over shared experts (hidden -> N)
  FusionLogits<S> fusion;
  TowerParams<S> towers;      // D*T two-layer heads
  Tensor<S> mix_W, mix_b;     // concat_modules: (3*expert_dim -> expert_dim)
  GateParams<S> module_gates; // fully_gated: D*T gates over the three modules

  size_t pair_index(uint32_t d, uint32_t t) const { return size_t(d) * hp.task_count + t; }
};

// Independent per-(d,t) baseline: own embeddings, one expert-style hidden
// layer, then the usual two-layer tower.
template <typename S>
struct MlpPair {
  EmbeddingTables<S> emb;
  Tensor<S> hid_W, hid_b;
  Tensor<S> tw_W1, tw_b1, tw_W2, tw_b2;
};

template <typename S>
struct MlpEnsemble {
  Hyper hp;
  FeatureSpace space;
  std::vector<MlpPair<S>> pairs;  // D*T, indexed d*T + t

  size_t pair_index(uint32_t d, uint32_t t) const { return size_t(d) * hp.task_count + t; }
};

template <typename S>
using Model = std::variant<M3oECore<S>, MlpEnsemble<S>>;

// --- construction -----------------------------------------------------------

namespace detail {

template <typename S>
Tensor<S> init_weight(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
  Tensor<S> t = Tensor<S>::matrix(rows, cols);
  const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      t.values(r, c) = static_cast<S>(rng.uniform(-bound, bound));
    }
  }
  return t;
}

template <typename S>
Tensor<S> init_embedding(Rng& rng, Eigen::Index vocab, Eigen::Index dim) {
  Tensor<S> t = Tensor<S>::matrix(vocab, dim);
  const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
  for (Eigen::Index r = 0; r < vocab; ++r) {
    for (Eigen::Index c = 0; c < dim; ++c) {
      t.values(r, c) = static_cast<S>(rng.uniform(-bound, bound));
    }
  }
  return t;
}

template <typename S>
Tensor<S> zero_bias(Eigen::Index n) {
  return Tensor<S>::vector(n);
}

}  // namespace detail

template <typename S>
EmbeddingTables<S> make_embedding_tables(const FeatureSpace& space, uint32_t dim, Rng& rng) {
  EmbeddingTables<S> emb;
  emb.dim = dim;
  for (const auto& f : space.fields) {
    emb.tables.push_back(detail::init_embedding<S>(rng, f.vocab, dim));
  }
  return emb;
}

template <typename S>
Model<S> build_variant(VariantKind kind, const Hyper& hp_in, const FeatureSpace& space,
                       uint64_t seed) {
  Hyper hp = hp_in;
  hp.domain_count = space.domain_count;
  hp.task_count = space.task_count;
  const auto input_dim = static_cast<Eigen::Index>(space.field_count() * hp.embedding_dim);
  const Eigen::Index hidden = hp.hidden_dim;
  const Eigen::Index expert = hp.expert_dim;
  const Eigen::Index tower = hp.tower_hidden;
  const uint32_t D = hp.domain_count, T = hp.task_count, N = hp.shared_experts;
  if (D < 1 || T < 1 || N < 1) throw ValidationError("model needs D >= 1, T >= 1, N >= 1");
  Rng rng(mix_seed(seed, 0x10d31u));

  if (kind == VariantKind::mlp_single) {
    MlpEnsemble<S> m;
    m.hp = hp;
    m.space = space;
    for (uint32_t d = 0; d < D; ++d) {
      for (uint32_t t = 0; t < T; ++t) {
        MlpPair<S> p;
        p.emb = make_embedding_tables<S>(space, hp.embedding_dim, rng);
        p.hid_W = detail::init_weight<S>(rng, input_dim, hidden);
        p.hid_b = detail::zero_bias<S>(hidden);
        p.tw_W1 = detail::init_weight<S>(rng, hidden, tower);
        p.tw_b1 = detail::zero_bias<S>(tower);
        p.tw_W2 = detail::init_weight<S>(rng, tower, 1);
        p.tw_b2 = detail::zero_bias<S>(1);
        m.pairs.push_back(std::move(p));
      }
    }
    return m;
  }

  M3oECore<S> m;
  m.kind = kind;
  m.hp = hp;
  m.space = space;
  m.emb = make_embedding_tables<S>(space, hp.embedding_dim, rng);
  for (uint32_t d = 0; d < D; ++d) {
    m.repr.W_d.push_back(detail::init_weight<S>(rng, input_dim, hidden));
    m.repr.b_d.push_back(detail::zero_bias<S>(hidden));
  }
  m.repr.W_sh = detail::init_weight<S>(rng, input_dim, hidden);
  m.repr.b_sh = detail::zero_bias<S>(hidden);
  m.repr.W_c = detail::init_weight<S>(rng, hidden, hidden);
  m.repr.b_c = detail::zero_bias<S>(hidden);
  m.repr.da_W1 = detail::init_weight<S>(rng, input_dim, hidden);
  m.repr.da_b1 = detail::zero_bias<S>(hidden);
  m.repr.da_W2 = detail::init_weight<S>(rng, hidden, hidden);
  m.repr.da_b2 = detail::zero_bias<S>(hidden);

  auto make_bank = [&](uint32_t n) {
    ExpertBank<S> bank;
    for (uint32_t e = 0; e < n; ++e) {
      bank.W.push_back(detail::init_weight<S>(rng, hidden, expert));
      bank.b.push_back(detail::zero_bias<S>(expert));
    }
    return bank;
  };
  m.shared_bank = make_bank(N);
  if (variant_has_domain_module(kind)) m.domain_bank = make_bank(D);
  if (variant_has_task_module(kind)) m.task_bank = make_bank(T);

  for (uint32_t d = 0; d < D; ++d) {
    for (uint32_t t = 0; t < T; ++t) {
      (void)t;
      m.gates.W.push_back(detail::init_weight<S>(rng, hidden, N));
      m.gates.b.push_back(detail::zero_bias<S>(N));
    }
  }
  for (uint32_t d = 0; d < D; ++d) {
    for (uint32_t t = 0; t < T; ++t) {
      (void)t;
      m.towers.W1.push_back(detail::init_weight<S>(rng, expert, tower));
      m.towers.b1.push_back(detail::zero_bias<S>(tower));
      m.towers.W2.push_back(detail::init_weight<S>(rng, tower, 1));
      m.towers.b2.push_back(detail::zero_bias<S>(1));
    }
  }

  // Logits start at zero: realized weights 0.5, so the AutoML model and the
  // fixed-0.5 ablation are identical at initialization.
  if (variant_has_alpha(kind)) {
    if (variant_has_domain_module(kind)) {
      m.fusion.alpha_d.assign(D, Tensor<S>::scalar(S(0)));
    }
    if (variant_has_task_module(kind)) {
      m.fusion.alpha_t.assign(T, Tensor<S>::scalar(S(0)));
    }
  }
  if (variant_has_domain_module(kind)) m.fusion.beta_d.assign(D, Tensor<S>::scalar(S(0)));
  if (variant_has_task_module(kind)) m.fusion.beta_t.assign(T, Tensor<S>::scalar(S(0)));

  if (kind == VariantKind::concat_modules) {
    m.mix_W = detail::init_weight<S>(rng, 3 * expert, expert);
    m.mix_b = detail::zero_bias<S>(expert);
  }
  if (kind == VariantKind::fully_gated) {
    for (uint32_t d = 0; d < D; ++d) {
      for (uint32_t t = 0; t < T; ++t) {
        (void)t;
        m.module_gates.W.push_back(detail::init_weight<S>(rng, hidden, 3));
        m.module_gates.b.push_back(detail::zero_bias<S>(3));
      }
    }
  }
  return m;
}

// --- forward pieces -----------------------------------------------------------

// Per-sample concatenation of looked-up embedding rows, in field order.
template <typename S>
Tensor<S> embed_batch(Tape<S>* tp, EmbeddingTables<S>& emb, const Dataset& ds,
                      std::span<const uint32_t> rows) {
  if (rows.empty()) throw ShapeError("embed_batch on an empty batch");
  if (emb.tables.size() != ds.space.field_count()) {
    throw ShapeError("embedding table count does not match the dataset's field count");
  }
  std::vector<Tensor<S>> parts;
  std::vector<int> ids(rows.size());
  for (size_t f = 0; f < emb.tables.size(); ++f) {
    for (size_t i = 0; i < rows.size(); ++i) {
      ids[i] = static_cast<int>(ds.feature_row(rows[i])[f]);
    }
    parts.push_back(gather_rows(tp, emb.tables[f], ids));
  }
  return concat_lastdim(tp, parts);
}

// h_d = W_c (W_hat_d x + b_d + b_sh) + b_c + f_DA(x),  W_hat_d = W_d o W_sh
template <typename S>
Tensor<S> domain_repr(Tape<S>* tp, const Tensor<S>& x, uint32_t d,
                      DomainReprParams<S>& p) {
  if (d >= p.W_d.size()) {
    throw ShapeError("domain_repr: domain id " + std::to_string(d) + " out of range");
  }
  Tensor<S> w_hat = elementwise_mul(tp, p.W_d[d], p.W_sh);
  Tensor<S> dr = add(tp, add(tp, matmul(tp, x, w_hat), p.b_d[d]), p.b_sh);
  Tensor<S> mapped = add(tp, matmul(tp, dr, p.W_c), p.b_c);
  Tensor<S> da = add(tp, matmul(tp, relu(tp, add(tp, matmul(tp, x, p.da_W1), p.da_b1)), p.da_W2),
                     p.da_b2);
  return add(tp, mapped, da);
}

// f_E(h) = ReLU(LayerNorm(W h + b)); the one expert architecture shared by
// all three banks.
template <typename S>
Tensor<S> expert_apply(Tape<S>* tp, const Tensor<S>& h, Tensor<S>& W, Tensor<S>& b) {
  return relu(tp, layernorm_lastdim(tp, add(tp, matmul(tp, h, W), b)));
}

namespace detail {

template <typename S>
Tensor<S> column_of(Tape<S>* tp, const Tensor<S>& m, Eigen::Index col) {
  Tensor<S> sel = Tensor<S>::matrix(m.cols(), 1);
  sel.values(col, 0) = S(1);
  return matmul(tp, m, sel);  // constant selector; gradient flows to m only
}

// beta * focal + (1 - beta) * mean(others): the convex pair keeps the
// non-focal experts at the equal weight (1-beta)/(n-1) each.
template <typename S>
Tensor<S> biased_mixture(Tape<S>* tp, const Tensor<S>& h, ExpertBank<S>& bank,
                         uint32_t focal, const Tensor<S>& beta) {
  const size_t n = bank.count();
  Tensor<S> focal_out = expert_apply(tp, h, bank.W[focal], bank.b[focal]);
  if (n == 1) return focal_out;  // degenerate case: the formula's 1/(n-1) vanishes

  Tensor<S> others;
  bool first = true;
  for (uint32_t e = 0; e < n; ++e) {
    if (e == focal) continue;
    Tensor<S> out = expert_apply(tp, h, bank.W[e], bank.b[e]);
    others = first ? out : add(tp, others, out);
    first = false;
  }
  Tensor<S> mean_others =
      scalar_scale(tp, others, Tensor<S>::scalar(S(1) / static_cast<S>(n - 1)));
  Tensor<S> one_minus_beta =
      add(tp, Tensor<S>::scalar(S(1)), scalar_scale(tp, beta, Tensor<S>::scalar(S(-1))));
  return add(tp, scalar_scale(tp, focal_out, beta),
             scalar_scale(tp, mean_others, one_minus_beta));
}

}  // namespace detail

// Gated convex combination of the N shared experts using gate (d,t).
template <typename S>
Tensor<S> shared_module(Tape<S>* tp, const Tensor<S>& h, uint32_t d, uint32_t t,
                        M3oECore<S>& m) {
  if (d >= m.hp.domain_count || t >= m.hp.task_count) {
    throw ShapeError("shared_module: pair (" + std::to_string(d) + "," + std::to_string(t) +
                     ") out of range");
  }
  const size_t p = m.pair_index(d, t);
  Tensor<S> g = softmax_lastdim(tp, add(tp, matmul(tp, h, m.gates.W[p]), m.gates.b[p]));
  Tensor<S> out;
  for (uint32_t e = 0; e < m.shared_bank.count(); ++e) {
    Tensor<S> weighted = elementwise_mul(
        tp, expert_apply(tp, h, m.shared_bank.W[e], m.shared_bank.b[e]),
        detail::column_of(tp, g, e));
    out = (e == 0) ? weighted : add(tp, out, weighted);
  }
  return out;
}

template <typename S>
Tensor<S> domain_module(Tape<S>* tp, const Tensor<S>& h, uint32_t d, M3oECore<S>& m,
                        const Tensor<S>& beta_d) {
  if (d >= m.domain_bank.count()) {
    throw ShapeError("domain_module: domain id " + std::to_string(d) + " out of range");
  }
  return detail::biased_mixture(tp, h, m.domain_bank, d, beta_d);
}

template <typename S>
Tensor<S> task_module(Tape<S>* tp, const Tensor<S>& h, uint32_t t, M3oECore<S>& m,
                      const Tensor<S>& beta_t) {
  if (t >= m.task_bank.count()) {
    throw ShapeError("task_module: task id " + std::to_string(t) + " out of range");
  }
  return detail::biased_mixture(tp, h, m.task_bank, t, beta_t);
}

// h_bar = S + alpha_d * Dout + alpha_t * Tout. alpha_d scales the domain
// module and alpha_t the task module.
template <typename S>
Tensor<S> fuse_views(Tape<S>* tp, const Tensor<S>& shared_out, const Tensor<S>& domain_out,
                     const Tensor<S>& task_out, const Tensor<S>& alpha_d,
                     const Tensor<S>& alpha_t) {
  if (!shared_out.same_shape(domain_out) || !shared_out.same_shape(task_out)) {
    throw ShapeError("fuse_views: module outputs disagree in shape");
  }
  return add(tp, add(tp, shared_out, scalar_scale(tp, domain_out, alpha_d)),
             scalar_scale(tp, task_out, alpha_t));
}

// y = sigmoid(W2 ReLU(W1 h_bar + b1) + b2) using tower (d,t).
template <typename S>
Tensor<S> predict(Tape<S>* tp, const Tensor<S>& h_bar, uint32_t d, uint32_t t,
                  TowerParams<S>& towers, uint32_t task_count) {
  const size_t p = size_t(d) * task_count + t;
  if (p >= towers.W1.size()) {
    throw ShapeError("predict: tower (" + std::to_string(d) + "," + std::to_string(t) +
                     ") out of range");
  }
  Tensor<S> hid = relu(tp, add(tp, matmul(tp, h_bar, towers.W1[p]), towers.b1[p]));
  return sigmoid(tp, add(tp, matmul(tp, hid, towers.W2[p]), towers.b2[p]));
}

// --- full forward ---------------------------------------------------------------

template <typename S>
Tensor<S> forward(Tape<S>* tp, M3oECore<S>& m, const Dataset& ds,
                  std::span<const uint32_t> rows, uint16_t domain) {
  if (rows.empty()) throw ShapeError("forward on an empty batch");
  if (domain >= m.hp.domain_count) {
    throw ShapeError("forward: domain id " + std::to_string(domain) + " out of range");
  }
  const uint32_t d = domain;
  const uint32_t T = m.hp.task_count;
  Tensor<S> x = embed_batch(tp, m.emb, ds, rows);
  Tensor<S> h = domain_repr(tp, x, d, m.repr);

  const bool has_domain = variant_has_domain_module(m.kind);
  const bool has_task = variant_has_task_module(m.kind);

  Tensor<S> domain_out;
  Tensor<S> alpha_d;
  if (has_domain) {
    Tensor<S> beta_d = sigmoid(tp, m.fusion.beta_d[d]);
    domain_out = domain_module(tp, h, d, m, beta_d);  // reused across tasks
    if (variant_has_alpha(m.kind)) alpha_d = sigmoid(tp, m.fusion.alpha_d[d]);
  }

  std::vector<Tensor<S>> preds;
  preds.reserve(T);
  for (uint32_t t = 0; t < T; ++t) {
    Tensor<S> shared_out = shared_module(tp, h, d, t, m);
    Tensor<S> task_out;
    if (has_task) {
      Tensor<S> beta_t = sigmoid(tp, m.fusion.beta_t[t]);
      task_out = task_module(tp, h, t, m, beta_t);
    }

    Tensor<S> fused;
    switch (m.kind) {
      case VariantKind::shared_only:
        fused = shared_out;
        break;
      case VariantKind::no_domain_module:
        fused = add(tp, shared_out,
                    scalar_scale(tp, task_out, sigmoid(tp, m.fusion.alpha_t[t])));
        break;
      case VariantKind::no_task_module:
        fused = add(tp, shared_out, scalar_scale(tp, domain_out, alpha_d));
        break;
      case VariantKind::concat_modules: {
        std::vector<Tensor<S>> parts{shared_out, domain_out, task_out};
        fused = add(tp, matmul(tp, concat_lastdim(tp, parts), m.mix_W), m.mix_b);
        break;
      }
      case VariantKind::fully_gated: {
        const size_t p = m.pair_index(d, t);
        Tensor<S> g = softmax_lastdim(
            tp, add(tp, matmul(tp, h, m.module_gates.W[p]), m.module_gates.b[p]));
        fused = add(tp,
                    add(tp, elementwise_mul(tp, shared_out, detail::column_of(tp, g, 0)),
                        elementwise_mul(tp, domain_out, detail::column_of(tp, g, 1))),
                    elementwise_mul(tp, task_out, detail::column_of(tp, g, 2)));
        break;
      }
      default:  // full / no_automl
        fused = fuse_views(tp, shared_out, domain_out, task_out, alpha_d,
                           sigmoid(tp, m.fusion.alpha_t[t]));
        break;
    }
    preds.push_back(predict(tp, fused, d, t, m.towers, T));
  }
  return concat_lastdim(tp, preds);
}

template <typename S>
Tensor<S> forward(Tape<S>* tp, MlpEnsemble<S>& m, const Dataset& ds,
                  std::span<const uint32_t> rows, uint16_t domain) {
  if (rows.empty()) throw ShapeError("forward on an empty batch");
  if (domain >= m.hp.domain_count) {
    throw ShapeError("forward: domain id " + std::to_string(domain) + " out of range");
  }
  std::vector<Tensor<S>> preds;
  for (uint32_t t = 0; t < m.hp.task_count; ++t) {
    MlpPair<S>& p = m.pairs[m.pair_index(domain, t)];
    Tensor<S> x = embed_batch(tp, p.emb, ds, rows);
    Tensor<S> hid = relu(tp, layernorm_lastdim(tp, add(tp, matmul(tp, x, p.hid_W), p.hid_b)));
    Tensor<S> th = relu(tp, add(tp, matmul(tp, hid, p.tw_W1), p.tw_b1));
    preds.push_back(sigmoid(tp, add(tp, matmul(tp, th, p.tw_W2), p.tw_b2)));
  }
  return concat_lastdim(tp, preds);
}

template <typename S>
Tensor<S> forward(Tape<S>* tp, Model<S>& model, const Dataset& ds,
                  std::span<const uint32_t> rows, uint16_t domain) {
  return std::visit([&](auto& m) { return forward(tp, m, ds, rows, domain); }, model);
}

// --- parameter enumeration -------------------------------------------------------

template <typename S, typename F>
void visit_params(M3oECore<S>& m, F&& fn) {
  for (size_t f = 0; f < m.emb.tables.size(); ++f) {
    fn("emb." + m.space.fields[f].name, m.emb.tables[f]);
  }
  for (size_t d = 0; d < m.repr.W_d.size(); ++d) {
    fn("repr.W_d." + std::to_string(d), m.repr.W_d[d]);
    fn("repr.b_d." + std::to_string(d), m.repr.b_d[d]);
  }
  fn("repr.W_sh", m.repr.W_sh);
  fn("repr.b_sh", m.repr.b_sh);
  fn("repr.W_c", m.repr.W_c);
  fn("repr.b_c", m.repr.b_c);
  fn("repr.da_W1", m.repr.da_W1);
  fn("repr.da_b1", m.repr.da_b1);
  fn("repr.da_W2", m.repr.da_W2);
  fn("repr.da_b2", m.repr.da_b2);
  auto visit_bank = [&](const char* name, ExpertBank<S>& bank) {
    for (size_t e = 0; e < bank.count(); ++e) {
      fn(std::string(name) + ".W." + std::to_string(e), bank.W[e]);
      fn(std::string(name) + ".b." + std::to_string(e), bank.b[e]);
    }
  };
  visit_bank("experts.shared", m.shared_bank);
  visit_bank("experts.domain", m.domain_bank);
  visit_bank("experts.task", m.task_bank);
  for (size_t p = 0; p < m.gates.W.size(); ++p) {
    fn("gates.W." + std::to_string(p), m.gates.W[p]);
    fn("gates.b." + std::to_string(p), m.gates.b[p]);
  }
  for (size_t p = 0; p < m.towers.W1.size(); ++p) {
    const std::string s = std::to_string(p);
    fn("towers.W1." + s, m.towers.W1[p]);
    fn("towers.b1." + s, m.towers.b1[p]);
    fn("towers.W2." + s, m.towers.W2[p]);
    fn("towers.b2." + s, m.towers.b2[p]);
  }
  auto visit_logits = [&](const char* name, std::vector<Tensor<S>>& v) {
    for (size_t i = 0; i < v.size(); ++i) {
      fn(std::string(name) + "." + std::to_string(i), v[i]);
    }
  };
  visit_logits("fusion.e_alpha_d", m.fusion.alpha_d);
  visit_logits("fusion.e_alpha_t", m.fusion.alpha_t);
  visit_logits("fusion.e_beta_d", m.fusion.beta_d);
  visit_logits("fusion.e_beta_t", m.fusion.beta_t);
  if (m.kind == VariantKind::concat_modules) {
    fn("mix.W", m.mix_W);
    fn("mix.b", m.mix_b);
  }
  for (size_t p = 0; p < m.module_gates.W.size(); ++p) {
    fn("module_gates.W." + std::to_string(p), m.module_gates.W[p]);
    fn("module_gates.b." + std::to_string(p), m.module_gates.b[p]);
  }
}

template <typename S, typename F>
void visit_params(MlpEnsemble<S>& m, F&& fn) {
  for (size_t p = 0; p < m.pairs.size(); ++p) {
    const std::string prefix = "pair." + std::to_string(p) + ".";
    auto& pr = m.pairs[p];
    for (size_t f = 0; f < pr.emb.tables.size(); ++f) {
      fn(prefix + "emb." + m.space.fields[f].name, pr.emb.tables[f]);
    }
    fn(prefix + "hid_W", pr.hid_W);
    fn(prefix + "hid_b", pr.hid_b);
    fn(prefix + "tw_W1", pr.tw_W1);
    fn(prefix + "tw_b1", pr.tw_b1);
    fn(prefix + "tw_W2", pr.tw_W2);
    fn(prefix + "tw_b2", pr.tw_b2);
  }
}

template <typename S, typename F>
void visit_params(Model<S>& model, F&& fn) {
  std::visit([&](auto& m) { visit_params(m, fn); }, model);
}

inline bool is_fusion_logit_name(const std::string& name) {
  return name.rfind("fusion.e_", 0) == 0;
}

template <typename S>
std::vector<ParamRef<S>> all_params(Model<S>& model) {
  std::vector<ParamRef<S>> out;
  visit_params(model, [&](const std::string& n, Tensor<S>& t) { out.push_back({n, &t}); });
  return out;
}

// Everything the model-epoch phase trains: all parameters except the fusion
// logits.
template <typename S>
std::vector<ParamRef<S>> model_phase_params(Model<S>& model) {
  std::vector<ParamRef<S>> out;
  visit_params(model, [&](const std::string& n, Tensor<S>& t) {
    if (!is_fusion_logit_name(n)) out.push_back({n, &t});
  });
  return out;
}

// The fusion logits, when the variant trains them at all.
template <typename S>
std::vector<ParamRef<S>> fusion_phase_params(Model<S>& model) {
  std::vector<ParamRef<S>> out;
  if (auto* core = std::get_if<M3oECore<S>>(&model)) {
    if (!variant_automl_trainable(core->kind)) return out;
    visit_params(*core, [&](const std::string& n, Tensor<S>& t) {
      if (is_fusion_logit_name(n)) out.push_back({n, &t});
    });
  }
  return out;
}

// --- realized fusion weights / census / export -----------------------------------

template <typename S>
struct RealizedFusion {
  std::vector<S> alpha_d, alpha_t, beta_d, beta_t;
};

template <typename S>
S sigmoid_value(S x) {
  return S(0.5) * (std::tanh(x * S(0.5)) + S(1));
}

template <typename S>
RealizedFusion<S> realize_fusion_weights(const M3oECore<S>& m) {
  RealizedFusion<S> r;
  auto realize = [](const std::vector<Tensor<S>>& logits, std::vector<S>& out) {
    for (const auto& t : logits) out.push_back(sigmoid_value(t.values(0, 0)));
  };
  realize(m.fusion.alpha_d, r.alpha_d);
  realize(m.fusion.alpha_t, r.alpha_t);
  realize(m.fusion.beta_d, r.beta_d);
  realize(m.fusion.beta_t, r.beta_t);
  return r;
}

struct CensusEntry {
  std::string group;
  size_t count;
};

std::string census_group_for(const std::string& param_name);

template <typename S>
std::vector<CensusEntry> param_census(Model<S>& model) {
  std::vector<CensusEntry> out;
  auto bump = [&](const std::string& group, size_t n) {
    for (auto& e : out) {
      if (e.group == group) {
        e.count += n;
        return;
      }
    }
    out.push_back({group, n});
  };
  visit_params(model, [&](const std::string& name, Tensor<S>& t) {
    bump(census_group_for(name), static_cast<size_t>(t.size()));
  });
  size_t total = 0;
  for (const auto& e : out) total += e.count;
  bump("total", total);
  return out;
}

enum class ExportStage { domain_module, task_module, fused };

ExportStage export_stage_from_name(const std::string& name);
const char* export_stage_name(ExportStage s);

// Per-sample stage embeddings for a dataset slice; rows follow `rows` order.
// `task` selects the gate/tower pathway for the task-dependent stages.
template <typename S>
MatrixX<S> stage_embeddings(M3oECore<S>& m, const Dataset& ds,
                            std::span<const uint32_t> rows, uint16_t domain,
                            ExportStage stage, uint32_t task) {
  if (rows.empty()) throw ShapeError("stage_embeddings on an empty slice");
  if (task >= m.hp.task_count) throw ShapeError("stage_embeddings: task out of range");
  Tensor<S> x = embed_batch<S>(nullptr, m.emb, ds, rows);
  Tensor<S> h = domain_repr<S>(nullptr, x, domain, m.repr);
  const bool has_domain = variant_has_domain_module(m.kind);
  const bool has_task = variant_has_task_module(m.kind);
  if (stage == ExportStage::domain_module) {
    if (!has_domain) throw ValidationError("variant has no domain module to export");
    Tensor<S> beta = sigmoid<S>(nullptr, m.fusion.beta_d[domain]);
    return domain_module<S>(nullptr, h, domain, m, beta).values;
  }
  if (stage == ExportStage::task_module) {
    if (!has_task) throw ValidationError("variant has no task module to export");
    Tensor<S> beta = sigmoid<S>(nullptr, m.fusion.beta_t[task]);
    return task_module<S>(nullptr, h, task, m, beta).values;
  }
  // fused: recompute the (d, task) pathway up to h_bar
  Tensor<S> shared_out = shared_module<S>(nullptr, h, domain, task, m);
  Tensor<S> fused;
  switch (m.kind) {
    case VariantKind::shared_only:
      fused = shared_out;
      break;
    case VariantKind::no_domain_module: {
      Tensor<S> beta = sigmoid<S>(nullptr, m.fusion.beta_t[task]);
      Tensor<S> tout = task_module<S>(nullptr, h, task, m, beta);
      fused = add<S>(nullptr, shared_out,
                     scalar_scale<S>(nullptr, tout, sigmoid<S>(nullptr, m.fusion.alpha_t[task])));
      break;
    }
    case VariantKind::no_task_module: {
      Tensor<S> beta = sigmoid<S>(nullptr, m.fusion.beta_d[domain]);
      Tensor<S> dout = domain_module<S>(nullptr, h, domain, m, beta);
      fused = add<S>(nullptr, shared_out,
                     scalar_scale<S>(nullptr, dout, sigmoid<S>(nullptr, m.fusion.alpha_d[domain])));
      break;
    }
    default: {
      Tensor<S> beta_d = sigmoid<S>(nullptr, m.fusion.beta_d[domain]);
      Tensor<S> dout = domain_module<S>(nullptr, h, domain, m, beta_d);
      Tensor<S> beta_t = sigmoid<S>(nullptr, m.fusion.beta_t[task]);
      Tensor<S> tout = task_module<S>(nullptr, h, task, m, beta_t);
      if (m.kind == VariantKind::concat_modules) {
        std::vector<Tensor<S>> parts{shared_out, dout, tout};
        fused = add<S>(nullptr, matmul<S>(nullptr, concat_lastdim<S>(nullptr, parts), m.mix_W),
                       m.mix_b);
      } else if (m.kind == VariantKind::fully_gated) {
        const size_t p = m.pair_index(domain, task);
        Tensor<S> g = softmax_lastdim<S>(
            nullptr, add<S>(nullptr, matmul<S>(nullptr, h, m.module_gates.W[p]),
                            m.module_gates.b[p]));
        fused = add<S>(nullptr,
                       add<S>(nullptr,
                              elementwise_mul<S>(nullptr, shared_out,
                                                 detail::column_of<S>(nullptr, g, 0)),
                              elementwise_mul<S>(nullptr, dout,
                                                 detail::column_of<S>(nullptr, g, 1))),
                       elementwise_mul<S>(nullptr, tout, detail::column_of<S>(nullptr, g, 2)));
      } else {
        fused = fuse_views<S>(nullptr, shared_out, dout, tout,
                              sigmoid<S>(nullptr, m.fusion.alpha_d[domain]),
                              sigmoid<S>(nullptr, m.fusion.alpha_t[task]));
      }
      break;
    }
  }
  return fused.values;
}

}  // namespace mdmt
