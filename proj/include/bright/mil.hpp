// Slide-level heads over embedding bags: gated-attention pooling with a
// linear classifier (softmax) or a linear risk head (survival, Cox loss).
// Tiles are exchangeable — every output is invariant to bag order and to
// duplicating tiles, because softmax attention renormalizes.
//
// a_i = softmax_i( w^T ( tanh(V h_i) . sigmoid(U h_i) ) ), z = sum_i a_i h_i.
#pragma once

#include <bright/autodiff.hpp>
#include <bright/checkpoint.hpp>
#include <bright/common.hpp>
#include <bright/embed.hpp>
#include <bright/metrics.hpp>
#include <bright/optim.hpp>
#include <bright/survival.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace bright {

struct MilConfig {
  int hidden = 128;
  int n_classes = 2;  // ignored by the survival head
  int epochs = 50;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  // Optional auxiliary instance term (CLAM-style top/bottom-k pseudo-labels
  // on a separate linear instance classifier). Off by default; with frozen
  // tile embeddings and hard selection it trains only the instance
  // classifier, since no gradient path to the attention exists.
  double instance_loss_weight = 0.0;
  int instance_topk = 8;

  void validate(bool classification) const {
    if (hidden <= 0 || epochs <= 0) throw std::invalid_argument("mil config: hidden/epochs must be positive");
    if (classification && n_classes < 2) {
      throw std::invalid_argument("mil config: need at least 2 classes");
    }
    if (!(lr >= 0)) throw std::invalid_argument("mil config: negative learning rate");
  }
};

template <typename S>
struct MilHeadParamsT {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  Mat v, u;            // (hidden x dim) attention branches
  Mat w;               // (1 x hidden) attention score vector
  Mat out_w, out_b;    // (n_out x dim), (1 x n_out); n_out = 1 for survival
  Mat inst_w, inst_b;  // (2 x dim) instance classifier for the optional term

  template <typename T>
  MilHeadParamsT<T> cast() const {
    MilHeadParamsT<T> o;
    o.v = v.template cast<T>();
    o.u = u.template cast<T>();
    o.w = w.template cast<T>();
    o.out_w = out_w.template cast<T>();
    o.out_b = out_b.template cast<T>();
    o.inst_w = inst_w.template cast<T>();
    o.inst_b = inst_b.template cast<T>();
    return o;
  }
};

using MilHeadParams = MilHeadParamsT<float>;

inline MilHeadParams init_mil_head(int dim, int n_out, const MilConfig& cfg, Rng& rng) {
  if (dim <= 0 || n_out <= 0) throw std::invalid_argument("init_mil_head: bad dims");
  MilHeadParams p;
  auto normal_mat = [&](const std::string& name, int rows, int cols, double sd) {
    Rng stream = rng.derive(name);
    Eigen::MatrixXf m(rows, cols);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) m(r, c) = float(stream.normal() * sd);
    }
    return m;
  };
  const double sd = 0.02;
  p.v = normal_mat("mil.v", cfg.hidden, dim, sd);
  p.u = normal_mat("mil.u", cfg.hidden, dim, sd);
  p.w = normal_mat("mil.w", 1, cfg.hidden, sd);
  p.out_w = normal_mat("mil.out_w", n_out, dim, sd);
  p.out_b = Eigen::MatrixXf::Zero(1, n_out);
  p.inst_w = normal_mat("mil.inst_w", 2, dim, sd);
  p.inst_b = Eigen::MatrixXf::Zero(1, 2);
  return p;
}

inline NamedArrays mil_to_arrays(const MilHeadParams& p) {
  NamedArrays a;
  a.add("v", p.v);
  a.add("u", p.u);
  a.add("w", p.w);
  a.add("out_w", p.out_w);
  a.add("out_b", p.out_b);
  a.add("inst_w", p.inst_w);
  a.add("inst_b", p.inst_b);
  return a;
}

inline MilHeadParams mil_from_arrays(const NamedArrays& a) {
  MilHeadParams p;
  p.v = a.get("v");
  p.u = a.get("u");
  p.w = a.get("w");
  p.out_w = a.get("out_w");
  p.out_b = a.get("out_b");
  p.inst_w = a.get("inst_w");
  p.inst_b = a.get("inst_b");
  return p;
}

// ---------------------------------------------------------------------------
// Inference (plain Eigen, no tape)
// ---------------------------------------------------------------------------

// Softmax-normalized attention over the bag's tiles.
inline Eigen::VectorXf gated_attention(const Eigen::MatrixXf& h, const MilHeadParams& p) {
  if (h.rows() < 1) throw std::invalid_argument("gated_attention: empty bag");
  if (h.cols() != p.v.cols()) {
    throw std::invalid_argument("gated_attention: embedding dim " + std::to_string(h.cols()) +
                                " does not match head dim " + std::to_string(p.v.cols()));
  }
  Eigen::MatrixXf t = (h * p.v.transpose()).array().tanh();
  Eigen::MatrixXf s = (h * p.u.transpose()).unaryExpr([](float x) {
    return 1.f / (1.f + std::exp(-x));
  });
  Eigen::VectorXf scores = (t.cwiseProduct(s)) * p.w.transpose();  // (n x 1)
  scores.array() -= scores.maxCoeff();
  Eigen::VectorXf a = scores.array().exp();
  a /= a.sum();
  return a;
}

struct SlidePrediction {
  std::vector<double> probs;  // classification: softmax over classes
  double risk = 0.0;          // survival: scalar risk
  Eigen::VectorXf attention;  // per-tile, sums to 1
};

inline SlidePrediction mil_classify(const EmbeddingBag& bag, const MilHeadParams& p) {
  bag.validate();
  SlidePrediction out;
  out.attention = gated_attention(bag.embeddings, p);
  Eigen::RowVectorXf z = out.attention.transpose() * bag.embeddings;  // (1 x dim)
  Eigen::RowVectorXf logits = z * p.out_w.transpose() + p.out_b;
  Eigen::RowVectorXf e = (logits.array() - logits.maxCoeff()).exp();
  e /= e.sum();
  out.probs.resize(size_t(e.cols()));
  for (Eigen::Index c = 0; c < e.cols(); ++c) out.probs[size_t(c)] = double(e(c));
  return out;
}

inline SlidePrediction mil_risk(const EmbeddingBag& bag, const MilHeadParams& p) {
  bag.validate();
  if (p.out_w.rows() != 1) {
    throw std::invalid_argument("mil_risk: head has " + std::to_string(p.out_w.rows()) +
                                " outputs, expected 1");
  }
  SlidePrediction out;
  out.attention = gated_attention(bag.embeddings, p);
  Eigen::RowVectorXf z = out.attention.transpose() * bag.embeddings;
  out.risk = double((z * p.out_w.transpose())(0, 0) + p.out_b(0, 0));
  return out;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace mil_detail {

template <typename S>
struct Leaves {
  typename ad::TapeT<S>::Ptr v, u, w, out_w, out_b, inst_w, inst_b;
};

template <typename S>
Leaves<S> bind(ad::TapeT<S>& tape, const MilHeadParamsT<S>& p) {
  Leaves<S> L;
  L.v = tape.leaf(p.v, true);
  L.u = tape.leaf(p.u, true);
  L.w = tape.leaf(p.w, true);
  L.out_w = tape.leaf(p.out_w, true);
  L.out_b = tape.leaf(p.out_b, true);
  L.inst_w = tape.leaf(p.inst_w, true);
  L.inst_b = tape.leaf(p.inst_b, true);
  return L;
}

// Attention-pooled logits for one bag: (1 x n_out) node.
template <typename S>
typename ad::TapeT<S>::Ptr forward_logits(ad::TapeT<S>& tape, const Leaves<S>& L,
                                          const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& h) {
  auto hn = tape.leaf(h, false);
  auto t = tape.tanh_act(tape.matmul(hn, L.v, false, true));
  auto s = tape.sigmoid(tape.matmul(hn, L.u, false, true));
  auto scores = tape.matmul(L.w, tape.hadamard(t, s), false, true);  // (1 x n)
  auto a = tape.softmax_rows(scores);
  auto z = tape.matmul(a, hn);  // (1 x dim)
  return tape.linear(z, L.out_w, L.out_b);
}

template <typename S>
std::vector<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>*> param_ptrs(MilHeadParamsT<S>& p) {
  return {&p.v, &p.u, &p.w, &p.out_w, &p.out_b, &p.inst_w, &p.inst_b};
}

template <typename S>
std::vector<typename ad::TapeT<S>::Ptr> leaf_ptrs(const Leaves<S>& L) {
  return {L.v, L.u, L.w, L.out_w, L.out_b, L.inst_w, L.inst_b};
}

}  // namespace mil_detail

struct MilTrainLog {
  std::vector<double> epoch_losses;  // mean training loss per epoch
  std::vector<double> val_scores;    // validation metric per epoch
  int best_epoch = -1;
  double best_score = 0.0;
  bool no_event_warning = false;  // survival: some epoch saw zero events
};

// Gated-attention classifier trained per slide with cross-entropy, model
// selection on validation AUROC (positive-class probability when binary,
// macro one-vs-rest otherwise; ties keep the earlier epoch). Deterministic
// for a fixed seed.
inline MilHeadParams train_mil_classifier(const std::vector<const EmbeddingBag*>& train_bags,
                                          const std::vector<int>& train_labels,
                                          const std::vector<const EmbeddingBag*>& val_bags,
                                          const std::vector<int>& val_labels, const MilConfig& cfg,
                                          uint64_t seed, MilTrainLog* log = nullptr) {
  cfg.validate(true);
  if (train_bags.size() != train_labels.size() || train_bags.empty()) {
    throw std::invalid_argument("train_mil: empty or mismatched training set");
  }
  if (val_bags.size() != val_labels.size() || val_bags.empty()) {
    throw std::invalid_argument("train_mil: empty or mismatched validation set");
  }
  for (int y : train_labels) {
    if (y < 0 || y >= cfg.n_classes) throw std::invalid_argument("train_mil: label out of range");
  }
  {
    std::vector<int> seen(size_t(cfg.n_classes), 0);
    for (int y : train_labels) seen[size_t(y)] = 1;
    if (std::accumulate(seen.begin(), seen.end(), 0) < 2) {
      throw std::invalid_argument("train_mil: training set contains a single class");
    }
  }
  const int dim = int(train_bags[0]->fused_dim());
  for (const auto* b : train_bags) b->validate();
  for (const auto* b : val_bags) b->validate();

  Rng root(seed);
  Rng init_rng = root.derive("mil.init");
  MilHeadParams params = init_mil_head(dim, cfg.n_classes, cfg, init_rng);
  MilHeadParams best = params;
  double best_score = -std::numeric_limits<double>::infinity();
  int best_epoch = -1;

  AdamW opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  std::vector<size_t> perm(train_bags.size());
  std::iota(perm.begin(), perm.end(), size_t(0));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = root.derive("mil.shuffle", uint64_t(epoch));
    shuffle_rng.shuffle(perm);
    double epoch_loss = 0.0;
    for (size_t pi = 0; pi < perm.size(); ++pi) {
      const EmbeddingBag& bag = *train_bags[perm[pi]];
      const int y = train_labels[perm[pi]];
      ad::Tape tape;
      auto L = mil_detail::bind<float>(tape, params);
      auto logits = mil_detail::forward_logits<float>(tape, L, bag.embeddings);
      // Cross-entropy gradient: softmax(logits) - onehot(y).
      Eigen::RowVectorXf e = (logits->val.row(0).array() - logits->val.row(0).maxCoeff()).exp();
      e /= e.sum();
      epoch_loss += -std::log(std::max(double(e(y)), 1e-30));
      Eigen::RowVectorXf g = e;
      g(y) -= 1.f;
      tape.seed_grad(logits, g);

      if (cfg.instance_loss_weight > 0.0 && cfg.n_classes == 2) {
        // Top/bottom-k tiles by attention become pseudo-labeled instances for
        // the auxiliary linear instance classifier.
        Eigen::VectorXf att = gated_attention(bag.embeddings, params);
        const int k = std::min<int>(cfg.instance_topk, int(att.size()));
        std::vector<int> idx(size_t(att.size()));
        std::iota(idx.begin(), idx.end(), 0);
        std::sort(idx.begin(), idx.end(), [&](int a, int b) {
          if (att(a) != att(b)) return att(a) > att(b);
          return a < b;
        });
        Eigen::MatrixXf sel(2 * k, dim);
        for (int j = 0; j < k; ++j) {
          sel.row(j) = bag.embeddings.row(idx[size_t(j)]);
          sel.row(k + j) = bag.embeddings.row(idx[idx.size() - 1 - size_t(j)]);
        }
        auto sn = tape.leaf(sel, false);
        auto inst_logits = tape.linear(sn, L.inst_w, L.inst_b);  // (2k x 2)
        Eigen::MatrixXf ig(2 * k, 2);
        for (int j = 0; j < 2 * k; ++j) {
          // Top tiles labeled as the slide class membership (1 when the slide
          // is positive), bottom tiles the opposite.
          const int target = (j < k) == (y == 1) ? 1 : 0;
          Eigen::RowVectorXf p2 =
              (inst_logits->val.row(j).array() - inst_logits->val.row(j).maxCoeff()).exp();
          p2 /= p2.sum();
          Eigen::RowVectorXf gi = p2;
          gi(target) -= 1.f;
          ig.row(j) = gi * float(cfg.instance_loss_weight / double(2 * k));
        }
        tape.seed_grad(inst_logits, ig);
      }

      tape.run_backward();
      auto ptrs = mil_detail::param_ptrs(params);
      auto leaves = mil_detail::leaf_ptrs(L);
      std::vector<const Eigen::MatrixXf*> grads;
      for (auto& l : leaves) grads.push_back(&l->grad);
      opt.step(ptrs, grads, cfg.lr);
    }
    epoch_loss /= double(train_bags.size());

    // Validation metric for model selection.
    double score;
    if (cfg.n_classes == 2) {
      std::vector<double> s;
      for (const auto* b : val_bags) s.push_back(mil_classify(*b, params).probs[1]);
      score = auroc_or_nan(s, val_labels);
    } else {
      std::vector<std::vector<double>> s;
      for (const auto* b : val_bags) s.push_back(mil_classify(*b, params).probs);
      score = macro_ovr_auroc(s, val_labels, cfg.n_classes);
    }
    if (!std::isnan(score) && score > best_score) {
      best_score = score;
      best = params;
      best_epoch = epoch;
    }
    if (log) {
      log->epoch_losses.push_back(epoch_loss);
      log->val_scores.push_back(score);
    }
  }
  if (log) {
    log->best_epoch = best_epoch;
    log->best_score = best_score;
  }
  return best;
}

// Survival head trained full-batch per epoch with the Breslow Cox partial
// likelihood on pooled risks; model selection on validation C-index.
inline MilHeadParams train_mil_survival(const std::vector<const EmbeddingBag*>& train_bags,
                                        const std::vector<double>& train_times,
                                        const std::vector<int>& train_events,
                                        const std::vector<const EmbeddingBag*>& val_bags,
                                        const std::vector<double>& val_times,
                                        const std::vector<int>& val_events, const MilConfig& cfg,
                                        uint64_t seed, MilTrainLog* log = nullptr) {
  cfg.validate(false);
  if (train_bags.size() != train_times.size() || train_bags.size() != train_events.size() ||
      train_bags.empty()) {
    throw std::invalid_argument("train_mil_survival: empty or mismatched training set");
  }
  if (val_bags.size() != val_times.size() || val_bags.size() != val_events.size() ||
      val_bags.empty()) {
    throw std::invalid_argument("train_mil_survival: empty or mismatched validation set");
  }
  check_survival_inputs(train_times, train_events);
  check_survival_inputs(val_times, val_events);
  const int dim = int(train_bags[0]->fused_dim());
  for (const auto* b : train_bags) b->validate();
  for (const auto* b : val_bags) b->validate();

  Rng root(seed);
  Rng init_rng = root.derive("mil.init");
  MilHeadParams params = init_mil_head(dim, 1, cfg, init_rng);
  MilHeadParams best = params;
  double best_score = -std::numeric_limits<double>::infinity();
  int best_epoch = -1;
  const bool no_events = std::count(train_events.begin(), train_events.end(), 1) == 0;

  AdamW opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    ad::Tape tape;
    auto L = mil_detail::bind<float>(tape, params);
    std::vector<ad::Tape::Ptr> risk_nodes;
    Eigen::VectorXd eta(Eigen::Index(train_bags.size()));
    for (size_t i = 0; i < train_bags.size(); ++i) {
      auto r = mil_detail::forward_logits<float>(tape, L, train_bags[i]->embeddings);
      risk_nodes.push_back(r);
      eta(Eigen::Index(i)) = double(r->val(0, 0));
    }
    double loss = 0.0;
    if (no_events) {
      // Empty risk sets: the loss is identically zero; flag it and keep the
      // initialization (nothing to optimize).
      if (log) log->no_event_warning = true;
    } else {
      loss = double(cox_partial_likelihood_loss(eta, train_times, train_events));
      Eigen::VectorXd g = cox_loss_grad_eta(eta, train_times, train_events);
      for (size_t i = 0; i < risk_nodes.size(); ++i) {
        Eigen::MatrixXf seed_g(1, 1);
        seed_g(0, 0) = float(g(Eigen::Index(i)));
        tape.seed_grad(risk_nodes[i], seed_g);
      }
      tape.run_backward();
      auto ptrs = mil_detail::param_ptrs(params);
      auto leaves = mil_detail::leaf_ptrs(L);
      std::vector<const Eigen::MatrixXf*> grads;
      for (auto& l : leaves) grads.push_back(&l->grad);
      opt.step(ptrs, grads, cfg.lr);
    }

    std::vector<double> val_risk;
    for (const auto* b : val_bags) val_risk.push_back(mil_risk(*b, params).risk);
    const double score = concordance_or_nan(val_times, val_events, val_risk);
    if (!std::isnan(score) && score > best_score) {
      best_score = score;
      best = params;
      best_epoch = epoch;
    }
    if (log) {
      log->epoch_losses.push_back(loss);
      log->val_scores.push_back(score);
    }
  }
  if (log) {
    log->best_epoch = best_epoch;
    log->best_score = best_score;
  }
  return best;
}

}  // namespace bright
