// Low-rank adapters for the backbone's attention projections. Each block's
// query, key and value projections get a rank-r bypass y += (alpha/r) x A^T B^T,
// i.e. an additive weight delta (alpha/r) B A. B starts at zero so a freshly
// initialized adapter leaves the backbone's function unchanged; merging a
// zero adapter reproduces the base weights exactly.
#pragma once

#include <bright/checkpoint.hpp>
#include <bright/common.hpp>
#include <bright/vit.hpp>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace bright {

struct LoraConfig {
  int rank = 8;
  double alpha = 8.0;  // scaling numerator; defaults to rank so alpha/r = 1

  void validate() const {
    if (rank <= 0) throw std::invalid_argument("lora config: rank must be positive");
    if (!(alpha > 0)) throw std::invalid_argument("lora config: alpha must be positive");
  }
};

template <typename S>
struct LoraParamsT {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

  struct Block {
    Mat a_q, b_q;  // A: (rank x dim), B: (dim x rank)
    Mat a_k, b_k;
    Mat a_v, b_v;
  };

  LoraConfig cfg;
  std::vector<Block> blocks;

  S scaling() const { return S(cfg.alpha / double(cfg.rank)); }

  template <typename T>
  LoraParamsT<T> cast() const {
    LoraParamsT<T> out;
    out.cfg = cfg;
    out.blocks.resize(blocks.size());
    for (size_t i = 0; i < blocks.size(); ++i) {
      out.blocks[i].a_q = blocks[i].a_q.template cast<T>();
      out.blocks[i].b_q = blocks[i].b_q.template cast<T>();
      out.blocks[i].a_k = blocks[i].a_k.template cast<T>();
      out.blocks[i].b_k = blocks[i].b_k.template cast<T>();
      out.blocks[i].a_v = blocks[i].a_v.template cast<T>();
      out.blocks[i].b_v = blocks[i].b_v.template cast<T>();
    }
    return out;
  }
};

using LoraParams = LoraParamsT<float>;

// A matrices N(0, 0.02^2) from derived streams, B zero.
inline LoraParams init_lora(const ViTConfig& vit_cfg, const LoraConfig& cfg, Rng& rng) {
  vit_cfg.validate();
  cfg.validate();
  LoraParams p;
  p.cfg = cfg;
  p.blocks.resize(size_t(vit_cfg.depth));
  const int d = vit_cfg.dim;
  const int r = cfg.rank;
  auto normal_mat = [&](const std::string& name) {
    Rng stream = rng.derive(name);
    Eigen::MatrixXf m(r, d);
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < d; ++j) m(i, j) = float(stream.normal() * 0.02);
    }
    return m;
  };
  for (int i = 0; i < vit_cfg.depth; ++i) {
    auto& b = p.blocks[size_t(i)];
    const std::string t = "lora.b" + std::to_string(i) + ".";
    b.a_q = normal_mat(t + "a_q");
    b.b_q = Eigen::MatrixXf::Zero(d, r);
    b.a_k = normal_mat(t + "a_k");
    b.b_k = Eigen::MatrixXf::Zero(d, r);
    b.a_v = normal_mat(t + "a_v");
    b.b_v = Eigen::MatrixXf::Zero(d, r);
  }
  return p;
}

// depth blocks x 3 projections x (A: r*d_in + B: d_out*r) with d_in = d_out = dim.
inline int64_t lora_trainable_count(const ViTConfig& vit_cfg, int rank) {
  vit_cfg.validate();
  if (rank <= 0) throw std::invalid_argument("lora_trainable_count: rank must be positive");
  const int64_t d = vit_cfg.dim;
  return int64_t(vit_cfg.depth) * 3 * int64_t(rank) * (d + d);
}

inline NamedArrays lora_to_arrays(const LoraParams& p) {
  NamedArrays a;
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    const auto& b = p.blocks[i];
    const std::string t = "b" + std::to_string(i) + ".";
    a.add(t + "a_q", b.a_q);
    a.add(t + "b_q", b.b_q);
    a.add(t + "a_k", b.a_k);
    a.add(t + "b_k", b.b_k);
    a.add(t + "a_v", b.a_v);
    a.add(t + "b_v", b.b_v);
  }
  return a;
}

inline LoraParams lora_from_arrays(const NamedArrays& a, const ViTConfig& vit_cfg,
                                   const LoraConfig& cfg) {
  vit_cfg.validate();
  cfg.validate();
  LoraParams p;
  p.cfg = cfg;
  p.blocks.resize(size_t(vit_cfg.depth));
  for (int i = 0; i < vit_cfg.depth; ++i) {
    auto& b = p.blocks[size_t(i)];
    const std::string t = "b" + std::to_string(i) + ".";
    b.a_q = a.get(t + "a_q");
    b.b_q = a.get(t + "b_q");
    b.a_k = a.get(t + "a_k");
    b.b_k = a.get(t + "b_k");
    b.a_v = a.get(t + "a_v");
    b.b_v = a.get(t + "b_v");
    if (b.a_q.rows() != cfg.rank || b.a_q.cols() != vit_cfg.dim || b.b_q.rows() != vit_cfg.dim ||
        b.b_q.cols() != cfg.rank) {
      throw std::invalid_argument("lora_from_arrays: shapes do not match config at block " +
                                  std::to_string(i));
    }
  }
  return p;
}

template <typename S>
struct LoraLeavesT {
  using Ptr = typename ad::TapeT<S>::Ptr;
  struct Block {
    Ptr a_q, b_q, a_k, b_k, a_v, b_v;
  };
  LoraConfig cfg;
  std::vector<Block> blocks;
};

template <typename S>
LoraLeavesT<S> bind_lora(ad::TapeT<S>& tape, const LoraParamsT<S>& p, bool trainable) {
  LoraLeavesT<S> L;
  L.cfg = p.cfg;
  L.blocks.resize(p.blocks.size());
  for (size_t i = 0; i < p.blocks.size(); ++i) {
    L.blocks[i].a_q = tape.leaf(p.blocks[i].a_q, trainable);
    L.blocks[i].b_q = tape.leaf(p.blocks[i].b_q, trainable);
    L.blocks[i].a_k = tape.leaf(p.blocks[i].a_k, trainable);
    L.blocks[i].b_k = tape.leaf(p.blocks[i].b_k, trainable);
    L.blocks[i].a_v = tape.leaf(p.blocks[i].a_v, trainable);
    L.blocks[i].b_v = tape.leaf(p.blocks[i].b_v, trainable);
  }
  return L;
}

// Projection hook for vit_forward: delta = scaling * (x A^T) B^T.
template <typename S>
ProjHook<S> make_lora_hook(const LoraLeavesT<S>& L) {
  const S sc = S(L.cfg.alpha / double(L.cfg.rank));
  return [&L, sc](ad::TapeT<S>& tape, int block, ProjKind kind,
                  const typename ad::TapeT<S>::Ptr& x) -> typename ad::TapeT<S>::Ptr {
    if (block < 0 || size_t(block) >= L.blocks.size()) {
      throw std::invalid_argument("lora hook: block index out of range");
    }
    const auto& b = L.blocks[size_t(block)];
    const auto& a = kind == ProjKind::query ? b.a_q : kind == ProjKind::key ? b.a_k : b.a_v;
    const auto& bb = kind == ProjKind::query ? b.b_q : kind == ProjKind::key ? b.b_k : b.b_v;
    return tape.scale(tape.matmul(tape.matmul(x, a, false, true), bb, false, true), sc);
  };
}

// Fold the adapter into the backbone: W <- W + (alpha/r) B A for each
// adapted projection. A zero adapter leaves every weight bit-identical.
template <typename S>
ViTParamsT<S> merge_lora(const ViTParamsT<S>& vit, const LoraParamsT<S>& lora) {
  if (lora.blocks.size() != vit.blocks.size()) {
    throw std::invalid_argument("merge_lora: adapter depth does not match backbone");
  }
  ViTParamsT<S> out = vit;
  const S sc = lora.scaling();
  for (size_t i = 0; i < vit.blocks.size(); ++i) {
    const auto& lb = lora.blocks[i];
    out.blocks[i].wq += sc * (lb.b_q * lb.a_q);
    out.blocks[i].wk += sc * (lb.b_k * lb.a_k);
    out.blocks[i].wv += sc * (lb.b_v * lb.a_v);
  }
  return out;
}

// Flat views over the adapter, in a fixed order shared by the optimizer and
// the tape leaves.
template <typename S>
std::vector<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>*> lora_param_ptrs(
    LoraParamsT<S>& p) {
  std::vector<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>*> out;
  for (auto& b : p.blocks) {
    out.push_back(&b.a_q);
    out.push_back(&b.b_q);
    out.push_back(&b.a_k);
    out.push_back(&b.b_k);
    out.push_back(&b.a_v);
    out.push_back(&b.b_v);
  }
  return out;
}

template <typename S>
std::vector<typename ad::TapeT<S>::Ptr> lora_leaf_ptrs(const LoraLeavesT<S>& L) {
  std::vector<typename ad::TapeT<S>::Ptr> out;
  for (const auto& b : L.blocks) {
    out.push_back(b.a_q);
    out.push_back(b.b_q);
    out.push_back(b.a_k);
    out.push_back(b.b_k);
    out.push_back(b.a_v);
    out.push_back(b.b_v);
  }
  return out;
}

}  // namespace bright
