// Vision transformer backbone. Pre-norm blocks (attention + GELU MLP),
// learned positional embeddings, CLS token. The tile embedding is the final
// CLS token concatenated with the mean of the final patch tokens, so its
// width is twice the model dim.
//
// The forward pass runs on the autodiff tape; an optional projection hook
// lets an adapter add a delta to the q/k/v projections of every block
// without this header knowing the adapter's structure.
#pragma once

#include <bright/autodiff.hpp>
#include <bright/checkpoint.hpp>
#include <bright/common.hpp>
#include <bright/image.hpp>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bright {

struct ViTConfig {
  int image_size = 64;
  int patch_size = 8;
  int dim = 128;
  int depth = 4;
  int heads = 4;
  int mlp_ratio = 4;

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || dim <= 0 || depth <= 0 || heads <= 0 ||
        mlp_ratio <= 0) {
      throw std::invalid_argument("vit config: all fields must be positive");
    }
    if (image_size % patch_size != 0) {
      throw std::invalid_argument("vit config: image_size " + std::to_string(image_size) +
                                  " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (dim % heads != 0) {
      throw std::invalid_argument("vit config: dim " + std::to_string(dim) +
                                  " not divisible by heads " + std::to_string(heads));
    }
  }

  int grid() const { return image_size / patch_size; }
  int n_patches() const { return grid() * grid(); }
  int n_tokens() const { return n_patches() + 1; }
  int patch_dim() const { return 3 * patch_size * patch_size; }
  int head_dim() const { return dim / heads; }
  int embed_dim() const { return 2 * dim; }
};

template <typename S>
struct ViTParamsT {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

  struct Block {
    Mat ln1_g, ln1_b;
    Mat wq, bq, wk, bk, wv, bv;  // each w is (dim x dim), b is (1 x dim)
    Mat wo, bo;
    Mat ln2_g, ln2_b;
    Mat mlp1_w, mlp1_b;  // (hidden x dim), (1 x hidden)
    Mat mlp2_w, mlp2_b;  // (dim x hidden), (1 x dim)
  };

  ViTConfig cfg;
  Mat patch_w, patch_b;  // (dim x patch_dim), (1 x dim)
  Mat cls, pos;          // (1 x dim), (n_tokens x dim)
  std::vector<Block> blocks;
  Mat lnf_g, lnf_b;

  template <typename T>
  ViTParamsT<T> cast() const {
    ViTParamsT<T> out;
    out.cfg = cfg;
    out.patch_w = patch_w.template cast<T>();
    out.patch_b = patch_b.template cast<T>();
    out.cls = cls.template cast<T>();
    out.pos = pos.template cast<T>();
    out.lnf_g = lnf_g.template cast<T>();
    out.lnf_b = lnf_b.template cast<T>();
    out.blocks.resize(blocks.size());
    for (size_t i = 0; i < blocks.size(); ++i) {
      const Block& s = blocks[i];
      auto& d = out.blocks[i];
      d.ln1_g = s.ln1_g.template cast<T>();
      d.ln1_b = s.ln1_b.template cast<T>();
      d.wq = s.wq.template cast<T>();
      d.bq = s.bq.template cast<T>();
      d.wk = s.wk.template cast<T>();
      d.bk = s.bk.template cast<T>();
      d.wv = s.wv.template cast<T>();
      d.bv = s.bv.template cast<T>();
      d.wo = s.wo.template cast<T>();
      d.bo = s.bo.template cast<T>();
      d.ln2_g = s.ln2_g.template cast<T>();
      d.ln2_b = s.ln2_b.template cast<T>();
      d.mlp1_w = s.mlp1_w.template cast<T>();
      d.mlp1_b = s.mlp1_b.template cast<T>();
      d.mlp2_w = s.mlp2_w.template cast<T>();
      d.mlp2_b = s.mlp2_b.template cast<T>();
    }
    return out;
  }
};

using ViTParams = ViTParamsT<float>;

// Weights drawn N(0, 0.02^2) from per-tensor derived streams, so results do
// not depend on allocation order. Norm scales start at 1, shifts at 0.
inline ViTParams init_vit(const ViTConfig& cfg, Rng& rng) {
  cfg.validate();
  ViTParams p;
  p.cfg = cfg;
  const int d = cfg.dim;
  const int hidden = cfg.mlp_ratio * d;
  auto normal_mat = [&](const std::string& name, int rows, int cols) {
    Rng stream = rng.derive(name);
    Eigen::MatrixXf m(rows, cols);
    for (int r = 0; r < rows; ++r) {
      for (int c = 0; c < cols; ++c) m(r, c) = float(stream.normal() * 0.02);
    }
    return m;
  };
  p.patch_w = normal_mat("patch_w", d, cfg.patch_dim());
  p.patch_b = Eigen::MatrixXf::Zero(1, d);
  p.cls = normal_mat("cls", 1, d);
  p.pos = normal_mat("pos", cfg.n_tokens(), d);
  p.blocks.resize(size_t(cfg.depth));
  for (int i = 0; i < cfg.depth; ++i) {
    auto& b = p.blocks[size_t(i)];
    const std::string tag = "b" + std::to_string(i) + ".";
    b.ln1_g = Eigen::MatrixXf::Ones(1, d);
    b.ln1_b = Eigen::MatrixXf::Zero(1, d);
    b.wq = normal_mat(tag + "wq", d, d);
    b.bq = Eigen::MatrixXf::Zero(1, d);
    b.wk = normal_mat(tag + "wk", d, d);
    b.bk = Eigen::MatrixXf::Zero(1, d);
    b.wv = normal_mat(tag + "wv", d, d);
    b.bv = Eigen::MatrixXf::Zero(1, d);
    b.wo = normal_mat(tag + "wo", d, d);
    b.bo = Eigen::MatrixXf::Zero(1, d);
    b.ln2_g = Eigen::MatrixXf::Ones(1, d);
    b.ln2_b = Eigen::MatrixXf::Zero(1, d);
    b.mlp1_w = normal_mat(tag + "mlp1_w", hidden, d);
    b.mlp1_b = Eigen::MatrixXf::Zero(1, hidden);
    b.mlp2_w = normal_mat(tag + "mlp2_w", d, hidden);
    b.mlp2_b = Eigen::MatrixXf::Zero(1, d);
  }
  p.lnf_g = Eigen::MatrixXf::Ones(1, d);
  p.lnf_b = Eigen::MatrixXf::Zero(1, d);
  return p;
}

inline int64_t vit_param_count(const ViTConfig& cfg) {
  cfg.validate();
  const int64_t d = cfg.dim;
  const int64_t hidden = int64_t(cfg.mlp_ratio) * d;
  int64_t n = 0;
  n += d * cfg.patch_dim() + d;       // patch embed
  n += d;                             // cls
  n += int64_t(cfg.n_tokens()) * d;   // pos
  int64_t block = 0;
  block += 2 * d;                     // ln1
  block += 4 * (d * d + d);           // q, k, v, o
  block += 2 * d;                     // ln2
  block += hidden * d + hidden;       // mlp1
  block += d * hidden + d;            // mlp2
  n += block * cfg.depth;
  n += 2 * d;                         // final norm
  return n;
}

namespace vit_detail {

inline void put(NamedArrays& a, const std::string& name, const Eigen::MatrixXf& m) {
  a.add(name, m);
}

}  // namespace vit_detail

inline NamedArrays vit_to_arrays(const ViTParams& p) {
  NamedArrays a;
  using vit_detail::put;
  put(a, "patch_w", p.patch_w);
  put(a, "patch_b", p.patch_b);
  put(a, "cls", p.cls);
  put(a, "pos", p.pos);
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    const auto& b = p.blocks[i];
    const std::string t = "b" + std::to_string(i) + ".";
    put(a, t + "ln1_g", b.ln1_g);
    put(a, t + "ln1_b", b.ln1_b);
    put(a, t + "wq", b.wq);
    put(a, t + "bq", b.bq);
    put(a, t + "wk", b.wk);
    put(a, t + "bk", b.bk);
    put(a, t + "wv", b.wv);
    put(a, t + "bv", b.bv);
    put(a, t + "wo", b.wo);
    put(a, t + "bo", b.bo);
    put(a, t + "ln2_g", b.ln2_g);
    put(a, t + "ln2_b", b.ln2_b);
    put(a, t + "mlp1_w", b.mlp1_w);
    put(a, t + "mlp1_b", b.mlp1_b);
    put(a, t + "mlp2_w", b.mlp2_w);
    put(a, t + "mlp2_b", b.mlp2_b);
  }
  put(a, "lnf_g", p.lnf_g);
  put(a, "lnf_b", p.lnf_b);
  return a;
}

inline ViTParams vit_from_arrays(const NamedArrays& a, const ViTConfig& cfg) {
  cfg.validate();
  ViTParams p;
  p.cfg = cfg;
  p.patch_w = a.get("patch_w");
  p.patch_b = a.get("patch_b");
  p.cls = a.get("cls");
  p.pos = a.get("pos");
  if (p.patch_w.rows() != cfg.dim || p.patch_w.cols() != cfg.patch_dim() ||
      p.pos.rows() != cfg.n_tokens() || p.pos.cols() != cfg.dim) {
    throw std::invalid_argument("vit_from_arrays: checkpoint shapes do not match config");
  }
  p.blocks.resize(size_t(cfg.depth));
  for (int i = 0; i < cfg.depth; ++i) {
    auto& b = p.blocks[size_t(i)];
    const std::string t = "b" + std::to_string(i) + ".";
    b.ln1_g = a.get(t + "ln1_g");
    b.ln1_b = a.get(t + "ln1_b");
    b.wq = a.get(t + "wq");
    b.bq = a.get(t + "bq");
    b.wk = a.get(t + "wk");
    b.bk = a.get(t + "bk");
    b.wv = a.get(t + "wv");
    b.bv = a.get(t + "bv");
    b.wo = a.get(t + "wo");
    b.bo = a.get(t + "bo");
    b.ln2_g = a.get(t + "ln2_g");
    b.ln2_b = a.get(t + "ln2_b");
    b.mlp1_w = a.get(t + "mlp1_w");
    b.mlp1_b = a.get(t + "mlp1_b");
    b.mlp2_w = a.get(t + "mlp2_w");
    b.mlp2_b = a.get(t + "mlp2_b");
  }
  p.lnf_g = a.get("lnf_g");
  p.lnf_b = a.get("lnf_b");
  return p;
}

// Patch rows in raster order; each row flattens its patch as (y, x, channel)
// with pixels mapped to [-1, 1].
template <typename S = float>
Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> patchify(const FloatImageRGB& img,
                                                          const ViTConfig& cfg) {
  if (img.width != cfg.image_size || img.height != cfg.image_size) {
    throw std::invalid_argument("patchify: image is " + std::to_string(img.width) + "x" +
                                std::to_string(img.height) + ", config expects " +
                                std::to_string(cfg.image_size));
  }
  const int P = cfg.patch_size;
  const int g = cfg.grid();
  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> out(cfg.n_patches(), cfg.patch_dim());
  for (int py = 0; py < g; ++py) {
    for (int px = 0; px < g; ++px) {
      const int row = py * g + px;
      int col = 0;
      for (int dy = 0; dy < P; ++dy) {
        for (int dx = 0; dx < P; ++dx) {
          for (int c = 0; c < 3; ++c) {
            out(row, col++) = S(img.at(px * P + dx, py * P + dy, c)) * S(2) - S(1);
          }
        }
      }
    }
  }
  return out;
}

template <typename S = float>
Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> patchify(const ImageRGB& img,
                                                          const ViTConfig& cfg) {
  return patchify<S>(to_float(img), cfg);
}

// Parameter leaves bound to a tape. The backbone stays frozen unless
// `trainable` is set (gradient checks train it; the pipeline never does).
template <typename S>
struct ViTLeavesT {
  using Ptr = typename ad::TapeT<S>::Ptr;

  struct Block {
    Ptr ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, mlp1_w, mlp1_b, mlp2_w, mlp2_b;
  };

  ViTConfig cfg;
  Ptr patch_w, patch_b, cls, pos;
  std::vector<Block> blocks;
  Ptr lnf_g, lnf_b;
};

template <typename S>
ViTLeavesT<S> bind_vit(ad::TapeT<S>& tape, const ViTParamsT<S>& p, bool trainable = false) {
  ViTLeavesT<S> L;
  L.cfg = p.cfg;
  L.patch_w = tape.leaf(p.patch_w, trainable);
  L.patch_b = tape.leaf(p.patch_b, trainable);
  L.cls = tape.leaf(p.cls, trainable);
  L.pos = tape.leaf(p.pos, trainable);
  L.blocks.resize(p.blocks.size());
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    const auto& b = p.blocks[i];
    auto& o = L.blocks[i];
    o.ln1_g = tape.leaf(b.ln1_g, trainable);
    o.ln1_b = tape.leaf(b.ln1_b, trainable);
    o.wq = tape.leaf(b.wq, trainable);
    o.bq = tape.leaf(b.bq, trainable);
    o.wk = tape.leaf(b.wk, trainable);
    o.bk = tape.leaf(b.bk, trainable);
    o.wv = tape.leaf(b.wv, trainable);
    o.bv = tape.leaf(b.bv, trainable);
    o.wo = tape.leaf(b.wo, trainable);
    o.bo = tape.leaf(b.bo, trainable);
    o.ln2_g = tape.leaf(b.ln2_g, trainable);
    o.ln2_b = tape.leaf(b.ln2_b, trainable);
    o.mlp1_w = tape.leaf(b.mlp1_w, trainable);
    o.mlp1_b = tape.leaf(b.mlp1_b, trainable);
    o.mlp2_w = tape.leaf(b.mlp2_w, trainable);
    o.mlp2_b = tape.leaf(b.mlp2_b, trainable);
  }
  L.lnf_g = tape.leaf(p.lnf_g, trainable);
  L.lnf_b = tape.leaf(p.lnf_b, trainable);
  return L;
}

enum class ProjKind { query = 0, key = 1, value = 2 };

// Returns a delta node to add to the projection output for (block, kind), or
// null for no contribution. `x` is the block's normalized token matrix.
template <typename S>
using ProjHook = std::function<typename ad::TapeT<S>::Ptr(ad::TapeT<S>&, int, ProjKind,
                                                          const typename ad::TapeT<S>::Ptr&)>;

// Forward for one tile. `patches` is (n_patches x patch_dim); returns the
// (1 x 2*dim) embedding node.
template <typename S>
typename ad::TapeT<S>::Ptr vit_forward(ad::TapeT<S>& tape, const ViTLeavesT<S>& L,
                                       const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& patches,
                                       const ProjHook<S>& hook = {}) {
  const ViTConfig& cfg = L.cfg;
  if (patches.rows() != cfg.n_patches() || patches.cols() != cfg.patch_dim()) {
    throw std::invalid_argument("vit_forward: patch matrix shape mismatch");
  }
  const S eps = S(1e-5);
  const int dh = cfg.head_dim();
  const S scale = S(1) / std::sqrt(S(dh));

  auto px = tape.leaf(patches, false);
  auto tok = tape.linear(px, L.patch_w, L.patch_b);        // (N x d)
  auto x = tape.concat_rows({L.cls, tok});                 // (T x d)
  x = tape.add(x, L.pos);

  for (size_t i = 0; i < L.blocks.size(); ++i) {
    const auto& b = L.blocks[i];
    auto h = tape.layernorm_rows(x, b.ln1_g, b.ln1_b, eps);
    auto q = tape.linear(h, b.wq, b.bq);
    auto k = tape.linear(h, b.wk, b.bk);
    auto v = tape.linear(h, b.wv, b.bv);
    if (hook) {
      if (auto dq = hook(tape, int(i), ProjKind::query, h)) q = tape.add(q, dq);
      if (auto dk = hook(tape, int(i), ProjKind::key, h)) k = tape.add(k, dk);
      if (auto dv = hook(tape, int(i), ProjKind::value, h)) v = tape.add(v, dv);
    }
    std::vector<typename ad::TapeT<S>::Ptr> heads;
    heads.reserve(size_t(cfg.heads));
    for (int hd = 0; hd < cfg.heads; ++hd) {
      auto qh = tape.slice_cols(q, hd * dh, dh);
      auto kh = tape.slice_cols(k, hd * dh, dh);
      auto vh = tape.slice_cols(v, hd * dh, dh);
      auto att = tape.softmax_rows(tape.scale(tape.matmul(qh, kh, false, true), scale));
      heads.push_back(tape.matmul(att, vh));
    }
    auto attn_out = tape.linear(tape.concat_cols(heads), b.wo, b.bo);
    x = tape.add(x, attn_out);

    auto m = tape.layernorm_rows(x, b.ln2_g, b.ln2_b, eps);
    m = tape.linear(m, b.mlp1_w, b.mlp1_b);
    m = tape.gelu(m);
    m = tape.linear(m, b.mlp2_w, b.mlp2_b);
    x = tape.add(x, m);
  }

  auto fin = tape.layernorm_rows(x, L.lnf_g, L.lnf_b, eps);
  auto cls_tok = tape.slice_rows(fin, 0, 1);
  auto patch_mean = tape.mean_rows(tape.slice_rows(fin, 1, cfg.n_patches()));
  return tape.concat_cols({cls_tok, patch_mean});
}

// Convenience: plain inference on a uint8 tile with no adapter and no
// gradient bookkeeping.
inline Eigen::RowVectorXf vit_embed_tile(const ViTParams& p, const ImageRGB& tile) {
  ad::Tape tape;
  auto leaves = bind_vit(tape, p, false);
  auto out = vit_forward<float>(tape, leaves, patchify<float>(tile, p.cfg));
  return out->val.row(0);
}

}  // namespace bright
