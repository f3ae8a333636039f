// Self-distillation pretraining of the adapter on unlabeled tiles.
//
// Two global and several local crops of each tile are pushed through a
// student (backbone + adapter + projection head); an EMA teacher scores the
// global crops. The student matches the teacher's centered,
// temperature-sharpened prototype distribution across views. Only adapter
// and head parameters train; the backbone stays frozen throughout.
#pragma once

#include <bright/autodiff.hpp>
#include <bright/common.hpp>
#include <bright/image.hpp>
#include <bright/lora.hpp>
#include <bright/optim.hpp>
#include <bright/vit.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bright {

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

struct AugConfig {
  double global_scale_min = 0.5, global_scale_max = 1.0;
  double local_scale_min = 0.15, local_scale_max = 0.5;
  double p_flip = 0.5;
  double p_jitter = 0.8;
  double jitter_strength = 0.4;  // brightness/contrast/saturation amplitude
  double p_gray = 0.2;
  double p_blur = 0.5;
};

namespace ssl_detail {

inline void color_jitter(FloatImageRGB& img, double strength, Rng& rng) {
  const float fb = float(1.0 + rng.uniform(-strength, strength));
  const float fc = float(1.0 + rng.uniform(-strength, strength));
  const float fs = float(1.0 + rng.uniform(-strength, strength));
  // Contrast mixes toward the mean luminance of the crop.
  double mean_lum = 0.0;
  const size_t n_px = img.data.size() / 3;
  for (size_t i = 0; i < n_px; ++i) {
    mean_lum += 0.2126 * img.data[3 * i] + 0.7152 * img.data[3 * i + 1] + 0.0722 * img.data[3 * i + 2];
  }
  mean_lum /= double(n_px);
  const float ml = float(mean_lum);
  for (size_t i = 0; i < n_px; ++i) {
    float r = img.data[3 * i], g = img.data[3 * i + 1], b = img.data[3 * i + 2];
    r *= fb;
    g *= fb;
    b *= fb;
    r = ml + fc * (r - ml);
    g = ml + fc * (g - ml);
    b = ml + fc * (b - ml);
    const float gray = 0.2126f * r + 0.7152f * g + 0.0722f * b;
    r = gray + fs * (r - gray);
    g = gray + fs * (g - gray);
    b = gray + fs * (b - gray);
    img.data[3 * i] = std::clamp(r, 0.f, 1.f);
    img.data[3 * i + 1] = std::clamp(g, 0.f, 1.f);
    img.data[3 * i + 2] = std::clamp(b, 0.f, 1.f);
  }
}

inline void to_grayscale(FloatImageRGB& img) {
  const size_t n_px = img.data.size() / 3;
  for (size_t i = 0; i < n_px; ++i) {
    const float gray = 0.2126f * img.data[3 * i] + 0.7152f * img.data[3 * i + 1] +
                       0.0722f * img.data[3 * i + 2];
    img.data[3 * i] = img.data[3 * i + 1] = img.data[3 * i + 2] = gray;
  }
}

// 3x3 separable blur with kernel (1/4, 1/2, 1/4), edge-clamped.
inline void blur3(FloatImageRGB& img) {
  FloatImageRGB tmp = img;
  auto cl = [](int v, int hi) { return v < 0 ? 0 : (v >= hi ? hi - 1 : v); };
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        tmp.at(x, y, c) = 0.25f * img.at(cl(x - 1, img.width), y, c) + 0.5f * img.at(x, y, c) +
                          0.25f * img.at(cl(x + 1, img.width), y, c);
      }
    }
  }
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(x, y, c) = 0.25f * tmp.at(x, cl(y - 1, img.height), c) + 0.5f * tmp.at(x, y, c) +
                          0.25f * tmp.at(x, cl(y + 1, img.height), c);
      }
    }
  }
}

}  // namespace ssl_detail

// Random resized crop + flip + photometric noise, resized to out_size.
inline FloatImageRGB augment_crop(const ImageRGB& tile, int out_size, bool global_view,
                                  const AugConfig& cfg, Rng& rng) {
  if (out_size <= 0) throw std::invalid_argument("augment_crop: out_size must be positive");
  FloatImageRGB img = to_float(tile);

  const double smin = global_view ? cfg.global_scale_min : cfg.local_scale_min;
  const double smax = global_view ? cfg.global_scale_max : cfg.local_scale_max;
  const double area = rng.uniform(smin, smax) * double(tile.width) * double(tile.height);
  const double aspect = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
  int cw = int(std::lround(std::sqrt(area * aspect)));
  int ch = int(std::lround(std::sqrt(area / aspect)));
  cw = std::clamp(cw, 1, tile.width);
  ch = std::clamp(ch, 1, tile.height);
  const int x0 = int(rng.uniform_int(uint64_t(tile.width - cw + 1)));
  const int y0 = int(rng.uniform_int(uint64_t(tile.height - ch + 1)));
  img = resize_bilinear(crop(img, x0, y0, cw, ch), out_size, out_size);

  if (rng.uniform() < cfg.p_flip) img = hflip(img);
  if (rng.uniform() < cfg.p_jitter) ssl_detail::color_jitter(img, cfg.jitter_strength, rng);
  if (rng.uniform() < cfg.p_gray) ssl_detail::to_grayscale(img);
  if (rng.uniform() < cfg.p_blur) ssl_detail::blur3(img);
  return img;
}

// ---------------------------------------------------------------------------
// Projection head: embed -> hidden -> hidden -> bottleneck, GELU between,
// L2-normalize, then cosine logits against L2-normalized prototype rows.
// ---------------------------------------------------------------------------

struct DinoHeadConfig {
  int hidden = 256;
  int bottleneck = 64;
  int prototypes = 512;

  void validate() const {
    if (hidden <= 0 || bottleneck <= 0 || prototypes <= 1) {
      throw std::invalid_argument("head config: dims must be positive (>= 2 prototypes)");
    }
  }
};

template <typename S>
struct DinoHeadParamsT {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  DinoHeadConfig cfg;
  Mat w1, b1;    // (hidden x embed)
  Mat w2, b2;    // (hidden x hidden)
  Mat w3, b3;    // (bottleneck x hidden)
  Mat proto;     // (prototypes x bottleneck), rows normalized at use

  template <typename T>
  DinoHeadParamsT<T> cast() const {
    DinoHeadParamsT<T> o;
    o.cfg = cfg;
    o.w1 = w1.template cast<T>();
    o.b1 = b1.template cast<T>();
    o.w2 = w2.template cast<T>();
    o.b2 = b2.template cast<T>();
    o.w3 = w3.template cast<T>();
    o.b3 = b3.template cast<T>();
    o.proto = proto.template cast<T>();
    return o;
  }
};

using DinoHeadParams = DinoHeadParamsT<float>;

inline DinoHeadParams init_dino_head(int embed_dim, const DinoHeadConfig& cfg, Rng& rng) {
  cfg.validate();
  if (embed_dim <= 0) throw std::invalid_argument("init_dino_head: embed_dim must be positive");
  DinoHeadParams p;
  p.cfg = cfg;
  auto normal_mat = [&](const std::string& name, int rows, int cols) {
    Rng stream = rng.derive(name);
    Eigen::MatrixXf m(rows, cols);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) m(r, c) = float(stream.normal() * 0.02);
    }
    return m;
  };
  p.w1 = normal_mat("head.w1", cfg.hidden, embed_dim);
  p.b1 = Eigen::MatrixXf::Zero(1, cfg.hidden);
  p.w2 = normal_mat("head.w2", cfg.hidden, cfg.hidden);
  p.b2 = Eigen::MatrixXf::Zero(1, cfg.hidden);
  p.w3 = normal_mat("head.w3", cfg.bottleneck, cfg.hidden);
  p.b3 = Eigen::MatrixXf::Zero(1, cfg.bottleneck);
  p.proto = normal_mat("head.proto", cfg.prototypes, cfg.bottleneck);
  return p;
}

inline int64_t dino_head_param_count(int embed_dim, const DinoHeadConfig& cfg) {
  cfg.validate();
  int64_t n = 0;
  n += int64_t(cfg.hidden) * embed_dim + cfg.hidden;
  n += int64_t(cfg.hidden) * cfg.hidden + cfg.hidden;
  n += int64_t(cfg.bottleneck) * cfg.hidden + cfg.bottleneck;
  n += int64_t(cfg.prototypes) * cfg.bottleneck;
  return n;
}

inline NamedArrays dino_head_to_arrays(const DinoHeadParams& p) {
  NamedArrays a;
  a.add("w1", p.w1);
  a.add("b1", p.b1);
  a.add("w2", p.w2);
  a.add("b2", p.b2);
  a.add("w3", p.w3);
  a.add("b3", p.b3);
  a.add("proto", p.proto);
  return a;
}

inline DinoHeadParams dino_head_from_arrays(const NamedArrays& a, const DinoHeadConfig& cfg) {
  cfg.validate();
  DinoHeadParams p;
  p.cfg = cfg;
  p.w1 = a.get("w1");
  p.b1 = a.get("b1");
  p.w2 = a.get("w2");
  p.b2 = a.get("b2");
  p.w3 = a.get("w3");
  p.b3 = a.get("b3");
  p.proto = a.get("proto");
  if (p.proto.rows() != cfg.prototypes || p.proto.cols() != cfg.bottleneck) {
    throw std::invalid_argument("dino_head_from_arrays: prototype shape mismatch");
  }
  return p;
}

template <typename S>
struct DinoHeadLeavesT {
  using Ptr = typename ad::TapeT<S>::Ptr;
  Ptr w1, b1, w2, b2, w3, b3, proto;
};

template <typename S>
DinoHeadLeavesT<S> bind_dino_head(ad::TapeT<S>& tape, const DinoHeadParamsT<S>& p, bool trainable) {
  DinoHeadLeavesT<S> L;
  L.w1 = tape.leaf(p.w1, trainable);
  L.b1 = tape.leaf(p.b1, trainable);
  L.w2 = tape.leaf(p.w2, trainable);
  L.b2 = tape.leaf(p.b2, trainable);
  L.w3 = tape.leaf(p.w3, trainable);
  L.b3 = tape.leaf(p.b3, trainable);
  L.proto = tape.leaf(p.proto, trainable);
  return L;
}

template <typename S>
typename ad::TapeT<S>::Ptr dino_head_forward(ad::TapeT<S>& tape, const DinoHeadLeavesT<S>& L,
                                             const typename ad::TapeT<S>::Ptr& x) {
  auto h = tape.gelu(tape.linear(x, L.w1, L.b1));
  h = tape.gelu(tape.linear(h, L.w2, L.b2));
  h = tape.linear(h, L.w3, L.b3);
  h = tape.l2_normalize_rows(h, S(1e-12));
  auto pn = tape.l2_normalize_rows(L.proto, S(1e-12));
  return tape.matmul(h, pn, false, true);  // (n x prototypes)
}

template <typename S>
std::vector<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>*> dino_head_param_ptrs(
    DinoHeadParamsT<S>& p) {
  return {&p.w1, &p.b1, &p.w2, &p.b2, &p.w3, &p.b3, &p.proto};
}

template <typename S>
std::vector<typename ad::TapeT<S>::Ptr> dino_head_leaf_ptrs(const DinoHeadLeavesT<S>& L) {
  return {L.w1, L.b1, L.w2, L.b2, L.w3, L.b3, L.proto};
}

// ---------------------------------------------------------------------------
// Cross-view loss
// ---------------------------------------------------------------------------

// -sum_k t_k log softmax(s / tau_s)_k with teacher target
// t = softmax((teacher_logits - center) / tau_t). Templated for finite-
// difference checks in double.
template <typename S>
S dino_cross_term(const Eigen::Matrix<S, 1, Eigen::Dynamic>& teacher_logits,
                  const Eigen::Matrix<S, 1, Eigen::Dynamic>& student_logits,
                  const Eigen::Matrix<S, 1, Eigen::Dynamic>& center, S tau_t, S tau_s) {
  if (teacher_logits.cols() != student_logits.cols() || teacher_logits.cols() != center.cols()) {
    throw std::invalid_argument("dino_cross_term: logit widths differ");
  }
  if (!(tau_t > 0) || !(tau_s > 0)) throw std::invalid_argument("dino_cross_term: temperatures must be positive");
  using Row = Eigen::Matrix<S, 1, Eigen::Dynamic>;
  Row tz = (teacher_logits - center) / tau_t;
  tz.array() -= tz.maxCoeff();
  Row t = tz.array().exp();
  t /= t.sum();
  Row sz = student_logits / tau_s;
  const S mx = sz.maxCoeff();
  const S lse = std::log(Row((sz.array() - mx).exp()).sum()) + mx;
  S loss = S(0);
  for (Eigen::Index k = 0; k < sz.cols(); ++k) loss += -t(k) * (sz(k) - lse);
  return loss;
}

// Entropy in nats of softmax(logits / tau); used for collapse diagnostics.
template <typename S>
S softmax_entropy(const Eigen::Matrix<S, 1, Eigen::Dynamic>& logits, S tau) {
  using Row = Eigen::Matrix<S, 1, Eigen::Dynamic>;
  Row z = logits / tau;
  z.array() -= z.maxCoeff();
  Row p = z.array().exp();
  p /= p.sum();
  S h = S(0);
  for (Eigen::Index k = 0; k < p.cols(); ++k) {
    if (p(k) > S(0)) h -= p(k) * std::log(p(k));
  }
  return h;
}

// Analytic gradient with respect to the student logits:
// (softmax(s / tau_s) - t) / tau_s.
template <typename S>
Eigen::Matrix<S, 1, Eigen::Dynamic> dino_cross_term_grad(
    const Eigen::Matrix<S, 1, Eigen::Dynamic>& teacher_logits,
    const Eigen::Matrix<S, 1, Eigen::Dynamic>& student_logits,
    const Eigen::Matrix<S, 1, Eigen::Dynamic>& center, S tau_t, S tau_s) {
  using Row = Eigen::Matrix<S, 1, Eigen::Dynamic>;
  Row tz = (teacher_logits - center) / tau_t;
  tz.array() -= tz.maxCoeff();
  Row t = tz.array().exp();
  t /= t.sum();
  Row sz = student_logits / tau_s;
  sz.array() -= sz.maxCoeff();
  Row p = sz.array().exp();
  p /= p.sum();
  return (p - t) / tau_s;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct SslConfig {
  int epochs = 3;
  int batch_size = 8;       // tiles per optimization step
  int n_local = 4;          // local crops per tile (plus 2 global)
  double tau_s = 0.1;
  double tau_t = 0.04;
  double center_momentum = 0.9;
  double teacher_momentum = 0.95;        // at step 0
  double final_teacher_momentum = 1.0;   // cosine ramp target; 1 freezes the teacher
  double lr = 3e-4;
  double final_lr = 1e-5;
  int warmup_steps = 10;
  double weight_decay = 0.04;
  AugConfig aug;
  DinoHeadConfig head;

  void validate() const {
    if (epochs <= 0 || batch_size <= 0 || n_local < 0) {
      throw std::invalid_argument("ssl config: epochs/batch_size/n_local out of range");
    }
    if (!(tau_s > 0) || !(tau_t > 0)) throw std::invalid_argument("ssl config: temperatures must be positive");
    if (center_momentum < 0 || center_momentum >= 1 || teacher_momentum < 0 ||
        teacher_momentum > 1 || final_teacher_momentum < 0 || final_teacher_momentum > 1) {
      throw std::invalid_argument("ssl config: momenta outside [0, 1)");
    }
    head.validate();
  }
};

struct SslResult {
  LoraParams lora;           // student adapter (the artifact the pipeline uses)
  DinoHeadParams head;       // student head
  LoraParams teacher_lora;
  DinoHeadParams teacher_head;
  Eigen::RowVectorXf center;  // (1 x prototypes)
  std::vector<double> step_losses;
  // Collapse diagnostics, one entry per step: mean entropy of the sharpened
  // teacher targets and of the student distribution, in nats. Both near
  // ln(prototypes) signals uniform collapse; teacher near 0 with a high loss
  // signals assignment churn.
  std::vector<double> step_teacher_entropy;
  std::vector<double> step_student_entropy;
};

// Trains adapter + head on a tile pool. Sequential and deterministic for a
// fixed seed; the backbone is shared, frozen, and never copied.
inline SslResult train_ssl(const ViTParams& backbone, const LoraConfig& lora_cfg,
                           const std::vector<ImageRGB>& tiles, const SslConfig& cfg, uint64_t seed,
                           const std::function<void(int, int, double)>& on_step = {}) {
  cfg.validate();
  lora_cfg.validate();
  backbone.cfg.validate();
  if (tiles.empty()) throw std::invalid_argument("train_ssl: empty tile pool");
  for (size_t i = 0; i < tiles.size(); ++i) {
    if (tiles[i].width != backbone.cfg.image_size || tiles[i].height != backbone.cfg.image_size) {
      throw std::invalid_argument("train_ssl: tile " + std::to_string(i) +
                                  " does not match model input size");
    }
  }

  Rng root(seed);
  Rng init_rng = root.derive("ssl.init");
  SslResult res;
  res.lora = init_lora(backbone.cfg, lora_cfg, init_rng);
  res.head = init_dino_head(backbone.cfg.embed_dim(), cfg.head, init_rng);
  res.teacher_lora = res.lora;
  res.teacher_head = res.head;
  res.center = Eigen::RowVectorXf::Zero(cfg.head.prototypes);

  const int n_views = 2 + cfg.n_local;
  const int steps_per_epoch = std::max<int>(1, int(tiles.size()) / cfg.batch_size);
  const int total_steps = cfg.epochs * steps_per_epoch;

  AdamW opt({0.9, 0.999, 1e-8, cfg.weight_decay});
  const float tau_s = float(cfg.tau_s), tau_t = float(cfg.tau_t);

  std::vector<size_t> perm(tiles.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = i;

  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle_rng = root.derive("ssl.shuffle", uint64_t(epoch));
    shuffle_rng.shuffle(perm);
    for (int bi = 0; bi < steps_per_epoch; ++bi, ++step) {
      ad::Tape tape;
      auto vit_leaves = bind_vit(tape, backbone, false);
      auto lora_leaves = bind_lora<float>(tape, res.lora, true);
      auto head_leaves = bind_dino_head<float>(tape, res.head, true);
      auto hook = make_lora_hook<float>(lora_leaves);

      // Teacher runs on its own gradient-free tape.
      ad::Tape t_tape;
      auto t_vit = bind_vit(t_tape, backbone, false);
      auto t_lora = bind_lora<float>(t_tape, res.teacher_lora, false);
      auto t_head = bind_dino_head<float>(t_tape, res.teacher_head, false);
      auto t_hook = make_lora_hook<float>(t_lora);

      double batch_loss = 0.0;
      double ent_teacher = 0.0, ent_student = 0.0;
      int n_pairs = 0;
      Eigen::RowVectorXf teacher_logit_sum = Eigen::RowVectorXf::Zero(cfg.head.prototypes);
      int n_teacher_views = 0;

      std::vector<std::pair<ad::Tape::Ptr, Eigen::RowVectorXf>> deferred;  // (student logits, grad)

      for (int ti = 0; ti < cfg.batch_size; ++ti) {
        const ImageRGB& tile = tiles[perm[size_t((bi * cfg.batch_size + ti) % int(tiles.size()))]];
        Rng aug_rng = root.derive("ssl.aug", uint64_t(step) * 1000003u + uint64_t(ti));

        std::vector<ad::Tape::Ptr> student_logits(static_cast<size_t>(n_views));
        std::vector<Eigen::RowVectorXf> teacher_logits(2);
        for (int v = 0; v < n_views; ++v) {
          const bool global_view = v < 2;
          FloatImageRGB crop_img =
              augment_crop(tile, backbone.cfg.image_size, global_view, cfg.aug, aug_rng);
          auto patches = patchify<float>(crop_img, backbone.cfg);
          auto emb = vit_forward<float>(tape, vit_leaves, patches, hook);
          student_logits[size_t(v)] = dino_head_forward<float>(tape, head_leaves, emb);
          if (global_view) {
            auto t_emb = vit_forward<float>(t_tape, t_vit, patches, t_hook);
            auto t_log = dino_head_forward<float>(t_tape, t_head, t_emb);
            teacher_logits[size_t(v)] = t_log->val.row(0);
            teacher_logit_sum += teacher_logits[size_t(v)];
            ++n_teacher_views;
          }
        }
        for (int g = 0; g < 2; ++g) {
          for (int v = 0; v < n_views; ++v) {
            if (v == g) continue;
            const Eigen::Matrix<float, 1, Eigen::Dynamic> tl = teacher_logits[size_t(g)];
            const Eigen::Matrix<float, 1, Eigen::Dynamic> sl = student_logits[size_t(v)]->val.row(0);
            batch_loss += double(dino_cross_term<float>(tl, sl, res.center, tau_t, tau_s));
            deferred.emplace_back(student_logits[size_t(v)],
                                  dino_cross_term_grad<float>(tl, sl, res.center, tau_t, tau_s));
            ent_teacher += double(softmax_entropy<float>(tl - res.center, tau_t));
            ent_student += double(softmax_entropy<float>(sl, tau_s));
            ++n_pairs;
          }
        }
      }

      batch_loss /= double(n_pairs);
      const float inv_pairs = 1.f / float(n_pairs);
      for (auto& [node, grad] : deferred) {
        tape.seed_grad(node, grad * inv_pairs);
      }
      tape.run_backward();

      // Optimizer step over adapter + head.
      std::vector<Eigen::MatrixXf*> params = lora_param_ptrs(res.lora);
      for (auto* m : dino_head_param_ptrs(res.head)) params.push_back(m);
      std::vector<ad::Tape::Ptr> leaves = lora_leaf_ptrs(lora_leaves);
      for (auto& l : dino_head_leaf_ptrs(head_leaves)) leaves.push_back(l);
      std::vector<const Eigen::MatrixXf*> grads;
      grads.reserve(leaves.size());
      for (auto& l : leaves) grads.push_back(&l->grad);
      const double lr = cosine_lr(step, total_steps, std::min(cfg.warmup_steps, total_steps),
                                  cfg.lr, cfg.final_lr);
      opt.step(params, grads, lr);

      // Teacher EMA and center update.
      std::vector<Eigen::MatrixXf*> t_params = lora_param_ptrs(res.teacher_lora);
      for (auto* m : dino_head_param_ptrs(res.teacher_head)) t_params.push_back(m);
      std::vector<const Eigen::MatrixXf*> s_params;
      for (auto* m : params) s_params.push_back(m);
      const double ramp = total_steps > 1 ? double(step) / double(total_steps - 1) : 1.0;
      const double m_t = cfg.final_teacher_momentum -
                         (cfg.final_teacher_momentum - cfg.teacher_momentum) *
                             0.5 * (1.0 + std::cos(M_PI * ramp));
      ema_update<float>(t_params, s_params, m_t);
      const Eigen::RowVectorXf batch_center = teacher_logit_sum / float(n_teacher_views);
      res.center = float(cfg.center_momentum) * res.center +
                   float(1.0 - cfg.center_momentum) * batch_center;

      res.step_losses.push_back(batch_loss);
      res.step_teacher_entropy.push_back(ent_teacher / n_pairs);
      res.step_student_entropy.push_back(ent_student / n_pairs);
      if (on_step) on_step(step, total_steps, batch_loss);
    }
  }
  return res;
}

}  // namespace bright
