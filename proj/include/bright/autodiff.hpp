// Reverse-mode autodiff tape over dense Eigen matrices. Nodes are created
// in forward order; backward() replays them in reverse. Gradients propagate
// only through nodes flagged needs_grad, so frozen-backbone forwards cost no
// extra memory.
//
// Tapes are single-use: build forward, seed output gradients, run backward,
// read leaf gradients, discard.
#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace bright::ad {

template <typename S>
class TapeT {
 public:
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;

  struct Node {
    Mat val;
    Mat grad;  // allocated only when needs_grad
    bool needs_grad = false;
    std::function<void()> backprop;
  };
  using Ptr = std::shared_ptr<Node>;

  Ptr leaf(const Mat& v, bool needs_grad = false) {
    auto n = std::make_shared<Node>();
    n->val = v;
    n->needs_grad = needs_grad;
    if (needs_grad) n->grad = Mat::Zero(v.rows(), v.cols());
    nodes_.push_back(n);
    return n;
  }

  // C = op_a(A) * op_b(B) with optional transposes.
  Ptr matmul(const Ptr& a, const Ptr& b, bool ta = false, bool tb = false) {
    const auto ar = ta ? a->val.cols() : a->val.rows();
    const auto ac = ta ? a->val.rows() : a->val.cols();
    const auto br = tb ? b->val.cols() : b->val.rows();
    const auto bc = tb ? b->val.rows() : b->val.cols();
    if (ac != br) shape_error("matmul", a, b);
    auto out = fresh(ar, bc, a, b);
    if (!ta && !tb) out->val.noalias() = a->val * b->val;
    else if (ta && !tb) out->val.noalias() = a->val.transpose() * b->val;
    else if (!ta && tb) out->val.noalias() = a->val * b->val.transpose();
    else out->val.noalias() = a->val.transpose() * b->val.transpose();
    if (out->needs_grad) {
      Node* pa = a.get();
      Node* pb = b.get();
      Node* self = out.get();
      out->backprop = [pa, pb, self, ta, tb] {
        if (pa->needs_grad) {
          // dP = dC * Q^T with Q = op_b(B)
          Mat dp;
          if (tb) dp.noalias() = self->grad * pb->val;
          else dp.noalias() = self->grad * pb->val.transpose();
          if (ta) pa->grad.noalias() += dp.transpose();
          else pa->grad.noalias() += dp;
        }
        if (pb->needs_grad) {
          Mat dq;
          if (ta) dq.noalias() = pa->val * self->grad;
          else dq.noalias() = pa->val.transpose() * self->grad;
          if (tb) pb->grad.noalias() += dq.transpose();
          else pb->grad.noalias() += dq;
        }
      };
    }
    return out;
  }

  Ptr add(const Ptr& a, const Ptr& b) {
    if (a->val.rows() != b->val.rows() || a->val.cols() != b->val.cols())
      shape_error("add", a, b);
    auto out = fresh(a->val.rows(), a->val.cols(), a, b);
    out->val = a->val + b->val;
    if (out->needs_grad) {
      Node *pa = a.get(), *pb = b.get(), *self = out.get();
      out->backprop = [pa, pb, self] {
        if (pa->needs_grad) pa->grad += self->grad;
        if (pb->needs_grad) pb->grad += self->grad;
      };
    }
    return out;
  }

  // a (n x c) + row vector v (1 x c) broadcast over rows.
  Ptr add_rowvec(const Ptr& a, const Ptr& v) {
    if (v->val.rows() != 1 || v->val.cols() != a->val.cols()) shape_error("add_rowvec", a, v);
    auto out = fresh(a->val.rows(), a->val.cols(), a, v);
    out->val = a->val.rowwise() + v->val.row(0);
    if (out->needs_grad) {
      Node *pa = a.get(), *pv = v.get(), *self = out.get();
      out->backprop = [pa, pv, self] {
        if (pa->needs_grad) pa->grad += self->grad;
        if (pv->needs_grad) pv->grad.row(0) += self->grad.colwise().sum();
      };
    }
    return out;
  }

  Ptr scale(const Ptr& a, S s) {
    auto out = fresh(a->val.rows(), a->val.cols(), a);
    out->val = a->val * s;
    if (out->needs_grad) {
      Node *pa = a.get(), *self = out.get();
      out->backprop = [pa, self, s] {
        if (pa->needs_grad) pa->grad += self->grad * s;
      };
    }
    return out;
  }

  Ptr hadamard(const Ptr& a, const Ptr& b) {
    if (a->val.rows() != b->val.rows() || a->val.cols() != b->val.cols())
      shape_error("hadamard", a, b);
    auto out = fresh(a->val.rows(), a->val.cols(), a, b);
    out->val = a->val.cwiseProduct(b->val);
    if (out->needs_grad) {
      Node *pa = a.get(), *pb = b.get(), *self = out.get();
      out->backprop = [pa, pb, self] {
        if (pa->needs_grad) pa->grad += self->grad.cwiseProduct(pb->val);
        if (pb->needs_grad) pb->grad += self->grad.cwiseProduct(pa->val);
      };
    }
    return out;
  }

  // Exact GELU: x * Phi(x).
  Ptr gelu(const Ptr& a) {
    auto out = fresh(a->val.rows(), a->val.cols(), a);
    out->val = a->val.unaryExpr([](S x) { return S(x * normal_cdf(double(x))); });
    if (out->needs_grad) {
      Node *pa = a.get(), *self = out.get();
      out->backprop = [pa, self] {
        if (!pa->needs_grad) return;
        pa->grad += self->grad.cwiseProduct(pa->val.unaryExpr([](S x) {
          const double xd = double(x);
          return S(normal_cdf(xd) + xd * normal_pdf(xd));
        }));
      };
    }
    return out;
  }

  Ptr tanh_act(const Ptr& a) {
    auto out = fresh(a->val.rows(), a->val.cols(), a);
    out->val = a->val.array().tanh();
    if (out->needs_grad) {
      Node *pa = a.get(), *self = out.get();
      out->backprop = [pa, self] {
        if (pa->needs_grad)
          pa->grad.array() += self->grad.array() * (S(1) - self->val.array().square());
      };
    }
    return out;
  }

  Ptr sigmoid(const Ptr& a) {
    auto out = fresh(a->val.rows(), a->val.cols(), a);
    out->val = a->val.unaryExpr([](S x) { return S(1) / (S(1) + std::exp(-x)); });
    if (out->needs_grad) {
      Node *pa = a.get(), *self = out.get();
      out->backprop = [pa, self] {
        if (pa->needs_grad)
          pa->grad.array() += self->grad.array() * self->val.array() * (S(1) - self->val.array());
      };
    }
    return out;
  }

  Ptr softmax_rows(const Ptr& a) {
    auto out = fresh(a->val.rows(), a->val.cols(), a);
    out->val = a->val;
    for (Eigen::Index r = 0; r < out->val.rows(); ++r) {
      auto row = out->val.row(r);
      row.array() -= row.maxCoeff();
      row = row.array().exp();
      row /= row.sum();
    }
    if (out->needs_grad) {
      Node *pa = a.get(), *self = out.get();
      out->backprop = [pa, self] {
        if (!pa->needs_grad) return;
        for (Eigen::Index r = 0; r < self->val.rows(); ++r) {
          const S dot = self->grad.row(r).cwiseProduct(self->val.row(r)).sum();
          pa->grad.row(r).array() +=
              self->val.row(r).array() * (self->grad.row(r).array() - dot);
        }
      };
    }
    return out;
  }

  // Row-wise layer norm with affine parameters gamma, beta (each 1 x c).
  Ptr layernorm_rows(const Ptr& x, const Ptr& gamma, const Ptr& beta, S eps) {
    if (gamma->val.rows() != 1 || gamma->val.cols() != x->val.cols()) shape_error("layernorm", x, gamma);
    if (beta->val.rows() != 1 || beta->val.cols() != x->val.cols()) shape_error("layernorm", x, beta);
    auto out = fresh(x->val.rows(), x->val.cols(), x, gamma, beta);
    auto xhat = std::make_shared<Mat>(x->val.rows(), x->val.cols());
    auto inv_sigma = std::make_shared<std::vector<S>>(size_t(x->val.rows()));
    const S c = S(x->val.cols());
    for (Eigen::Index r = 0; r < x->val.rows(); ++r) {
      const S mu = x->val.row(r).mean();
      const S var = (x->val.row(r).array() - mu).square().sum() / c;
      const S is = S(1) / std::sqrt(var + eps);
      (*inv_sigma)[size_t(r)] = is;
      xhat->row(r) = (x->val.row(r).array() - mu) * is;
      out->val.row(r) =
          xhat->row(r).cwiseProduct(gamma->val.row(0)) + beta->val.row(0);
    }
    if (out->needs_grad) {
      Node *px = x.get(), *pg = gamma.get(), *pb = beta.get(), *self = out.get();
      out->backprop = [px, pg, pb, self, xhat, inv_sigma, c] {
        for (Eigen::Index r = 0; r < self->val.rows(); ++r) {
          const auto dy = self->grad.row(r);
          if (pg->needs_grad) pg->grad.row(0) += dy.cwiseProduct(xhat->row(r));
          if (pb->needs_grad) pb->grad.row(0) += dy;
          if (px->needs_grad) {
            const Eigen::Matrix<S, 1, Eigen::Dynamic> g = dy.cwiseProduct(pg->val.row(0));
            const S mean_g = g.mean();
            const S mean_gx = g.cwiseProduct(xhat->row(r)).mean();
            px->grad.row(r).array() +=
                ((*inv_sigma)[size_t(r)]) *
                (g.array() - mean_g - xhat->row(r).array() * mean_gx);
          }
        }
      };
    }
    return out;
  }

  // Mean over rows: (n x c) -> (1 x c).
  Ptr mean_rows(const Ptr& a) {
    auto out = fresh(1, a->val.cols(), a);
    out->val = a->val.colwise().mean();
    if (out->needs_grad) {
      Node *pa = a.get(), *self = out.get();
      const S inv = S(1) / S(a->val.rows());
      out->backprop = [pa, self, inv] {
        if (pa->needs_grad)
          pa->grad.noalias() +=
              Mat::Ones(pa->grad.rows(), 1) * (self->grad.row(0) * inv);
      };
    }
    return out;
  }

  Ptr slice_rows(const Ptr& a, Eigen::Index r0, Eigen::Index n) {
    check_block("slice_rows", r0, n, a->val.rows());
    auto out = fresh(n, a->val.cols(), a);
    out->val = a->val.middleRows(r0, n);
    if (out->needs_grad) {
      Node *pa = a.get(), *self = out.get();
      out->backprop = [pa, self, r0, n] {
        if (pa->needs_grad) pa->grad.middleRows(r0, n) += self->grad;
      };
    }
    return out;
  }

  Ptr slice_cols(const Ptr& a, Eigen::Index c0, Eigen::Index n) {
    check_block("slice_cols", c0, n, a->val.cols());
    auto out = fresh(a->val.rows(), n, a);
    out->val = a->val.middleCols(c0, n);
    if (out->needs_grad) {
      Node *pa = a.get(), *self = out.get();
      out->backprop = [pa, self, c0, n] {
        if (pa->needs_grad) pa->grad.middleCols(c0, n) += self->grad;
      };
    }
    return out;
  }

  Ptr concat_cols(const std::vector<Ptr>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
    Eigen::Index cols = 0;
    for (const auto& p : parts) {
      if (p->val.rows() != parts[0]->val.rows()) shape_error("concat_cols", parts[0], p);
      cols += p->val.cols();
    }
    auto out = std::make_shared<Node>();
    out->val.resize(parts[0]->val.rows(), cols);
    Eigen::Index c0 = 0;
    for (const auto& p : parts) {
      out->val.middleCols(c0, p->val.cols()) = p->val;
      c0 += p->val.cols();
      out->needs_grad = out->needs_grad || p->needs_grad;
    }
    if (out->needs_grad) {
      out->grad = Mat::Zero(out->val.rows(), out->val.cols());
      std::vector<Node*> raw;
      raw.reserve(parts.size());
      for (const auto& p : parts) raw.push_back(p.get());
      Node* self = out.get();
      out->backprop = [raw, self] {
        Eigen::Index c0 = 0;
        for (Node* p : raw) {
          if (p->needs_grad) p->grad += self->grad.middleCols(c0, p->val.cols());
          c0 += p->val.cols();
        }
      };
    }
    nodes_.push_back(out);
    return out;
  }

  Ptr concat_rows(const std::vector<Ptr>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
    Eigen::Index rows = 0;
    for (const auto& p : parts) {
      if (p->val.cols() != parts[0]->val.cols()) shape_error("concat_rows", parts[0], p);
      rows += p->val.rows();
    }
    auto out = std::make_shared<Node>();
    out->val.resize(rows, parts[0]->val.cols());
    Eigen::Index r0 = 0;
    for (const auto& p : parts) {
      out->val.middleRows(r0, p->val.rows()) = p->val;
      r0 += p->val.rows();
      out->needs_grad = out->needs_grad || p->needs_grad;
    }
    if (out->needs_grad) {
      out->grad = Mat::Zero(out->val.rows(), out->val.cols());
      std::vector<Node*> raw;
      raw.reserve(parts.size());
      for (const auto& p : parts) raw.push_back(p.get());
      Node* self = out.get();
      out->backprop = [raw, self] {
        Eigen::Index r0 = 0;
        for (Node* p : raw) {
          if (p->needs_grad) p->grad += self->grad.middleRows(r0, p->val.rows());
          r0 += p->val.rows();
        }
      };
    }
    nodes_.push_back(out);
    return out;
  }

  // Row-wise x / sqrt(|x|^2 + eps).
  Ptr l2_normalize_rows(const Ptr& a, S eps) {
    auto out = fresh(a->val.rows(), a->val.cols(), a);
    auto norms = std::make_shared<std::vector<S>>(size_t(a->val.rows()));
    for (Eigen::Index r = 0; r < a->val.rows(); ++r) {
      const S n = std::sqrt(a->val.row(r).squaredNorm() + eps);
      (*norms)[size_t(r)] = n;
      out->val.row(r) = a->val.row(r) / n;
    }
    if (out->needs_grad) {
      Node *pa = a.get(), *self = out.get();
      out->backprop = [pa, self, norms] {
        if (!pa->needs_grad) return;
        for (Eigen::Index r = 0; r < self->val.rows(); ++r) {
          const S n = (*norms)[size_t(r)];
          const S dot = self->grad.row(r).cwiseProduct(pa->val.row(r)).sum();
          pa->grad.row(r) += self->grad.row(r) / n - pa->val.row(r) * (dot / (n * n * n));
        }
      };
    }
    return out;
  }

  // y = x W^T + b for W stored (out x in), b (1 x out).
  Ptr linear(const Ptr& x, const Ptr& w, const Ptr& b) {
    return add_rowvec(matmul(x, w, false, true), b);
  }

  void seed_grad(const Ptr& node, const Mat& g) {
    if (!node->needs_grad) {
      throw std::logic_error("seed_grad: node does not require gradients");
    }
    if (g.rows() != node->val.rows() || g.cols() != node->val.cols()) {
      throw std::invalid_argument("seed_grad: gradient shape mismatch");
    }
    node->grad += g;
  }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      Node* n = it->get();
      if (n->needs_grad && n->backprop) n->backprop();
    }
  }

  void backward(const Ptr& root, const Mat& seed) {
    seed_grad(root, seed);
    run_backward();
  }

  size_t size() const { return nodes_.size(); }

 private:
  template <typename... Parents>
  Ptr fresh(Eigen::Index rows, Eigen::Index cols, const Parents&... parents) {
    auto out = std::make_shared<Node>();
    out->val.resize(rows, cols);
    out->needs_grad = (parents->needs_grad || ...);
    if (out->needs_grad) out->grad = Mat::Zero(rows, cols);
    nodes_.push_back(out);
    return out;
  }

  static void check_block(const char* op, Eigen::Index start, Eigen::Index n, Eigen::Index total) {
    if (start < 0 || n <= 0 || start + n > total) {
      throw std::invalid_argument(std::string(op) + ": block [" + std::to_string(start) + ", " +
                                  std::to_string(start + n) + ") outside extent " +
                                  std::to_string(total));
    }
  }

  static void shape_error(const char* op, const Ptr& a, const Ptr& b) {
    throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                                std::to_string(a->val.rows()) + "x" + std::to_string(a->val.cols()) +
                                " vs " + std::to_string(b->val.rows()) + "x" +
                                std::to_string(b->val.cols()));
  }

  static double normal_cdf(double x) { return 0.5 * std::erfc(-x * M_SQRT1_2); }
  static double normal_pdf(double x) {
    return std::exp(-0.5 * x * x) * 0.3989422804014326779399461;
  }

  std::vector<Ptr> nodes_;
};

using Tape = TapeT<float>;

}  // namespace bright::ad
