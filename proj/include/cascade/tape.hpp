#pragma once

#include <cmath>
#include <functional>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cascade/common.hpp"
#include "cascade/model.hpp"

namespace cascade {

// Reverse-mode tape over dense matrices. Nodes are created in forward order;
// backward() walks them in reverse, each node scattering its accumulated
// gradient into its inputs. Parameter matrices are wrapped once per tape and
// their gradients read back through param_grad().
template <typename T = double>
class Tape {
 public:
  int leaf(Mat<T> v) { return push(std::move(v), {}); }

  int param(Mat<T>* p) {
    auto it = param_nodes_.find(p);
    if (it != param_nodes_.end()) return it->second;
    int node = push(*p, {});
    param_nodes_.emplace(p, node);
    return node;
  }

  const Mat<T>& value(int i) const { return nodes_[static_cast<std::size_t>(i)].value; }

  Mat<T>& grad(int i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.grad.size() == 0) n.grad = Mat<T>::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

  const Mat<T>* param_grad(Mat<T>* p) const {
    auto it = param_nodes_.find(p);
    if (it == param_nodes_.end()) return nullptr;
    const Node& n = nodes_[static_cast<std::size_t>(it->second)];
    if (n.grad.size() == 0) return nullptr;
    return &n.grad;
  }

  int matmul(int a, int b) {
    Mat<T> v = value(a) * value(b);
    return push(std::move(v), [this, a, b](const Mat<T>& g) {
      grad(a) += g * value(b).transpose();
      grad(b) += value(a).transpose() * g;
    });
  }

  int add(int a, int b) {
    Mat<T> v = value(a) + value(b);
    return push(std::move(v), [this, a, b](const Mat<T>& g) {
      grad(a) += g;
      grad(b) += g;
    });
  }

  // bias [1 x c] broadcast over the rows of a
  int add_rowvec(int a, int bias) {
    Mat<T> v = value(a).rowwise() + value(bias).row(0);
    return push(std::move(v), [this, a, bias](const Mat<T>& g) {
      grad(a) += g;
      grad(bias).row(0) += g.colwise().sum();
    });
  }

  int scale(int a, T s) {
    Mat<T> v = value(a) * s;
    return push(std::move(v), [this, a, s](const Mat<T>& g) { grad(a) += g * s; });
  }

  // row-wise layer normalization with learnable gain/bias [1 x d]
  int layernorm(int x, int gn, int bn, T eps = static_cast<T>(1e-5)) {
    const Mat<T>& xv = value(x);
    const Eigen::Index rows = xv.rows(), cols = xv.cols();
    Mat<T> xhat(rows, cols);
    Vec<T> inv_sigma(rows);
    for (Eigen::Index r = 0; r < rows; ++r) {
      T mu = xv.row(r).mean();
      T var = (xv.row(r).array() - mu).square().mean();
      T inv = T(1) / std::sqrt(var + eps);
      inv_sigma(r) = inv;
      xhat.row(r) = (xv.row(r).array() - mu) * inv;
    }
    Mat<T> v = (xhat.array().rowwise() * value(gn).row(0).array()).matrix();
    v.rowwise() += value(bn).row(0);
    return push(std::move(v), [this, x, gn, bn, xhat, inv_sigma](const Mat<T>& g) {
      const Eigen::Index rows = g.rows(), cols = g.cols();
      Mat<T>& dx = grad(x);
      Mat<T>& dg = grad(gn);
      Mat<T>& db = grad(bn);
      for (Eigen::Index r = 0; r < rows; ++r) {
        Eigen::Array<T, 1, Eigen::Dynamic> h =
            g.row(r).array() * value(gn).row(0).array();
        T mean_h = h.mean();
        T mean_hx = (h * xhat.row(r).array()).mean();
        dx.row(r) +=
            ((h - mean_h - xhat.row(r).array() * mean_hx) * inv_sigma(r)).matrix();
        dg.row(0) += (g.row(r).array() * xhat.row(r).array()).matrix();
        db.row(0) += g.row(r);
      }
      (void)cols;
    });
  }

  // exact GELU: x * Phi(x)
  int gelu(int x) {
    const Mat<T>& xv = value(x);
    Mat<T> v(xv.rows(), xv.cols());
    for (Eigen::Index r = 0; r < xv.rows(); ++r)
      for (Eigen::Index c = 0; c < xv.cols(); ++c) v(r, c) = gelu_scalar(xv(r, c));
    return push(std::move(v), [this, x](const Mat<T>& g) {
      const Mat<T>& xv = value(x);
      Mat<T>& dx = grad(x);
      for (Eigen::Index r = 0; r < xv.rows(); ++r)
        for (Eigen::Index c = 0; c < xv.cols(); ++c)
          dx(r, c) += g(r, c) * gelu_grad_scalar(xv(r, c));
    });
  }

  // fused masked multi-head self-attention over x [S x d]
  int attention(int x, const MaskMat& mask, int wq, int bq, int wk, int bk, int wv, int bv,
                int wo, int bo, int n_heads) {
    const Mat<T>& xv = value(x);
    const Eigen::Index s = xv.rows(), d = xv.cols();
    const Eigen::Index dh = d / n_heads;
    const T alpha = T(1) / std::sqrt(static_cast<T>(dh));

    Mat<T> q = (xv * value(wq)).rowwise() + value(bq).row(0);
    Mat<T> k = (xv * value(wk)).rowwise() + value(bk).row(0);
    Mat<T> vv = (xv * value(wv)).rowwise() + value(bv).row(0);

    std::vector<Mat<T>> probs(static_cast<std::size_t>(n_heads));
    Mat<T> concat(s, d);
    for (int h = 0; h < n_heads; ++h) {
      auto qh = q.block(0, h * dh, s, dh);
      auto kh = k.block(0, h * dh, s, dh);
      auto vh = vv.block(0, h * dh, s, dh);
      Mat<T> scores = qh * kh.transpose() * alpha;
      Mat<T>& p = probs[static_cast<std::size_t>(h)];
      p.resize(s, s);
      for (Eigen::Index r = 0; r < s; ++r) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index c = 0; c < s; ++c)
          if (mask(r, c) && scores(r, c) > mx) mx = scores(r, c);
        T denom = 0;
        for (Eigen::Index c = 0; c < s; ++c) {
          T e = mask(r, c) ? std::exp(scores(r, c) - mx) : T(0);
          p(r, c) = e;
          denom += e;
        }
        p.row(r) /= denom;
      }
      concat.block(0, h * dh, s, dh) = p * vh;
    }
    Mat<T> out = (concat * value(wo)).rowwise() + value(bo).row(0);

    return push(std::move(out), [this, x, wq, bq, wk, bk, wv, bv, wo, bo, n_heads, q, k, vv,
                                 probs, concat, alpha](const Mat<T>& g) {
      const Mat<T>& xv = value(x);
      const Eigen::Index s = xv.rows(), d = xv.cols();
      const Eigen::Index dh = d / n_heads;

      grad(wo) += concat.transpose() * g;
      grad(bo).row(0) += g.colwise().sum();
      Mat<T> dconcat = g * value(wo).transpose();

      Mat<T> dq = Mat<T>::Zero(s, d), dk = Mat<T>::Zero(s, d), dv = Mat<T>::Zero(s, d);
      for (int h = 0; h < n_heads; ++h) {
        auto qh = q.block(0, h * dh, s, dh);
        auto kh = k.block(0, h * dh, s, dh);
        auto vh = vv.block(0, h * dh, s, dh);
        const Mat<T>& p = probs[static_cast<std::size_t>(h)];
        Mat<T> doh = dconcat.block(0, h * dh, s, dh);
        Mat<T> dp = doh * vh.transpose();
        dv.block(0, h * dh, s, dh) = p.transpose() * doh;
        Mat<T> ds(s, s);
        for (Eigen::Index r = 0; r < s; ++r) {
          T dot = p.row(r).dot(dp.row(r));
          ds.row(r) = (p.row(r).array() * (dp.row(r).array() - dot)).matrix();
        }
        dq.block(0, h * dh, s, dh) = ds * kh * alpha;
        dk.block(0, h * dh, s, dh) = ds.transpose() * qh * alpha;
      }

      grad(wq) += xv.transpose() * dq;
      grad(bq).row(0) += dq.colwise().sum();
      grad(wk) += xv.transpose() * dk;
      grad(bk).row(0) += dk.colwise().sum();
      grad(wv) += xv.transpose() * dv;
      grad(bv).row(0) += dv.colwise().sum();
      grad(x) += dq * value(wq).transpose() + dk * value(wk).transpose() +
                 dv * value(wv).transpose();
    });
  }

  // builds the input matrix [S x d] from embedding tables and query banks;
  // token_ids[p] >= 0 selects a token-table row, -1 marks a query position
  // whose (stage, qindex) come from the layout
  int assemble(int token_emb, int pos_emb, const std::vector<int>& query_nodes,
               const SequenceLayout& layout, const std::vector<int>& token_ids) {
    const Eigen::Index s = layout.size();
    const Eigen::Index d = value(token_emb).cols();
    Mat<T> v(s, d);
    for (Eigen::Index p = 0; p < s; ++p) {
      const PosRole& role = layout.positions[static_cast<std::size_t>(p)];
      if (role.kind == PosRole::Query) {
        int qn = query_nodes[static_cast<std::size_t>(role.stage - 1)];
        v.row(p) = value(qn).row(role.qindex - 1) + value(pos_emb).row(p);
      } else {
        v.row(p) =
            value(token_emb).row(token_ids[static_cast<std::size_t>(p)]) + value(pos_emb).row(p);
      }
    }
    SequenceLayout lay = layout;
    std::vector<int> toks = token_ids;
    return push(std::move(v),
                [this, token_emb, pos_emb, query_nodes, lay, toks](const Mat<T>& g) {
                  for (Eigen::Index p = 0; p < g.rows(); ++p) {
                    const PosRole& role = lay.positions[static_cast<std::size_t>(p)];
                    if (role.kind == PosRole::Query) {
                      int qn = query_nodes[static_cast<std::size_t>(role.stage - 1)];
                      grad(qn).row(role.qindex - 1) += g.row(p);
                    } else {
                      grad(token_emb).row(toks[static_cast<std::size_t>(p)]) += g.row(p);
                    }
                    grad(pos_emb).row(p) += g.row(p);
                  }
                });
  }

  int pick_rows(int x, const std::vector<int>& rows) {
    Mat<T> v(static_cast<Eigen::Index>(rows.size()), value(x).cols());
    for (std::size_t i = 0; i < rows.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = value(x).row(rows[i]);
    std::vector<int> rs = rows;
    return push(std::move(v), [this, x, rs](const Mat<T>& g) {
      for (std::size_t i = 0; i < rs.size(); ++i)
        grad(x).row(rs[i]) += g.row(static_cast<Eigen::Index>(i));
    });
  }

  int concat_rows(const std::vector<int>& parts) {
    Eigen::Index rows = 0;
    for (int p : parts) rows += value(p).rows();
    Mat<T> v(rows, value(parts.front()).cols());
    Eigen::Index at = 0;
    for (int p : parts) {
      v.middleRows(at, value(p).rows()) = value(p);
      at += value(p).rows();
    }
    std::vector<int> ps = parts;
    return push(std::move(v), [this, ps](const Mat<T>& g) {
      Eigen::Index at = 0;
      for (int p : ps) {
        grad(p) += g.middleRows(at, value(p).rows());
        at += value(p).rows();
      }
    });
  }

  // sum over rows of -log softmax(row)[target]; softmax over the full vocab
  int cross_entropy_sum(int logits, const std::vector<int>& targets) {
    const Mat<T>& lv = value(logits);
    Mat<T> probs(lv.rows(), lv.cols());
    T loss = 0;
    for (Eigen::Index r = 0; r < lv.rows(); ++r) {
      T mx = lv.row(r).maxCoeff();
      T denom = 0;
      for (Eigen::Index c = 0; c < lv.cols(); ++c) {
        T e = std::exp(lv(r, c) - mx);
        probs(r, c) = e;
        denom += e;
      }
      probs.row(r) /= denom;
      loss -= std::log(probs(r, targets[static_cast<std::size_t>(r)]));
    }
    Mat<T> v(1, 1);
    v(0, 0) = loss;
    std::vector<int> ts = targets;
    return push(std::move(v), [this, logits, probs, ts](const Mat<T>& g) {
      Mat<T> d = probs;
      for (Eigen::Index r = 0; r < d.rows(); ++r)
        d(r, ts[static_cast<std::size_t>(r)]) -= T(1);
      grad(logits) += d * g(0, 0);
    });
  }

  // mean pairwise cosine over all rows of q (ordered pairs i != j);
  // zero-norm rows contribute 0 to every pair they touch
  int diversity(int q, bool* zero_norm_seen = nullptr) {
    const Mat<T>& qv = value(q);
    const Eigen::Index n = qv.rows();
    Mat<T> v(1, 1);
    if (n < 2) {
      v(0, 0) = 0;
      return push(std::move(v), [](const Mat<T>&) {});
    }
    Vec<T> norms(n);
    bool any_zero = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      norms(i) = qv.row(i).norm();
      if (norms(i) == T(0)) any_zero = true;
    }
    if (zero_norm_seen) *zero_norm_seen = any_zero;
    const T denom = static_cast<T>(n) * static_cast<T>(n) - static_cast<T>(n);
    T acc = 0;
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) {
        if (i == j || norms(i) == T(0) || norms(j) == T(0)) continue;
        acc += qv.row(i).dot(qv.row(j)) / (norms(i) * norms(j));
      }
    v(0, 0) = acc / denom;
    return push(std::move(v), [this, q, norms, denom](const Mat<T>& g) {
      const Mat<T>& qv = value(q);
      const Eigen::Index n = qv.rows();
      Mat<T>& dq = grad(q);
      const T scale = g(0, 0) / denom;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (norms(i) == T(0)) continue;
        for (Eigen::Index j = 0; j < n; ++j) {
          if (i == j || norms(j) == T(0)) continue;
          T cos = qv.row(i).dot(qv.row(j)) / (norms(i) * norms(j));
          // d cos(qi,qj)/dqi, applied for both ordered pairs (i,j) and (j,i)
          dq.row(i) += scale * T(2) *
                       (qv.row(j) / (norms(i) * norms(j)) -
                        qv.row(i) * (cos / (norms(i) * norms(i))));
        }
      }
    });
  }

  void backward(int loss_node) {
    grad(loss_node).setOnes();
    for (int i = static_cast<int>(nodes_.size()) - 1; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward && n.grad.size() != 0) n.backward(n.grad);
    }
  }

  static T gelu_scalar(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
  }
  static T gelu_grad_scalar(T x) {
    T phi = std::exp(-x * x / T(2)) / std::sqrt(T(2) * static_cast<T>(M_PI));
    T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
    return cdf + x * phi;
  }

 private:
  struct Node {
    Mat<T> value;
    Mat<T> grad;
    std::function<void(const Mat<T>&)> backward;
  };

  int push(Mat<T> v, std::function<void(const Mat<T>&)> bw) {
    nodes_.push_back(Node{std::move(v), Mat<T>(), std::move(bw)});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<Node> nodes_;
  std::unordered_map<Mat<T>*, int> param_nodes_;
};

}  // namespace cascade
