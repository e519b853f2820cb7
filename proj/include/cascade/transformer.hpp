#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "cascade/common.hpp"
#include "cascade/model.hpp"
#include "cascade/tape.hpp"

namespace cascade {

// token-table ids aligned with layout positions; -1 marks query positions.
// history: per item the l-length code path; teacher: the target's codes for
// the C positions (the last one is unused by the layout).
inline std::vector<int> tokens_for_layout(const ModelConfig& cfg, const SequenceLayout& layout,
                                          const std::vector<std::vector<int>>& history,
                                          const std::vector<int>& teacher) {
  std::vector<int> ids(static_cast<std::size_t>(layout.size()), -1);
  for (int p = 0; p < layout.size(); ++p) {
    const PosRole& role = layout.positions[static_cast<std::size_t>(p)];
    if (role.kind == PosRole::History) {
      int code = history[static_cast<std::size_t>(role.item - 1)]
                        [static_cast<std::size_t>(role.level - 1)];
      ids[static_cast<std::size_t>(p)] = cfg.token_id(role.level, code);
    } else if (role.kind == PosRole::Token) {
      int code = teacher[static_cast<std::size_t>(role.stage - 1)];
      ids[static_cast<std::size_t>(p)] = cfg.token_id(role.stage, code);
    }
  }
  return ids;
}

// ---------------------------------------------------------------------------
// Tape (training) forward
// ---------------------------------------------------------------------------

// builds the full pre-norm stack on the tape and returns the node holding the
// readout logits [l x vocab]
template <typename T>
int tape_forward(Tape<T>& tape, ModelParams<T>& params, const SequenceLayout& layout,
                 const MaskMat& mask, const std::vector<int>& token_ids) {
  const ModelConfig& cfg = params.cfg;
  int tok = tape.param(&params.token_emb);
  int pos = tape.param(&params.pos_emb);
  std::vector<int> query_nodes;
  if (cfg.care())
    for (auto& q : params.queries) query_nodes.push_back(tape.param(&q));

  int x = tape.assemble(tok, pos, query_nodes, layout, token_ids);
  for (auto& ly : params.layers) {
    int a = tape.layernorm(x, tape.param(&ly.ln1_g), tape.param(&ly.ln1_b));
    int m = tape.attention(a, mask, tape.param(&ly.wq), tape.param(&ly.bq), tape.param(&ly.wk),
                           tape.param(&ly.bk), tape.param(&ly.wv), tape.param(&ly.bv),
                           tape.param(&ly.wo), tape.param(&ly.bo), cfg.n_heads);
    x = tape.add(x, m);
    int f = tape.layernorm(x, tape.param(&ly.ln2_g), tape.param(&ly.ln2_b));
    f = tape.add_rowvec(tape.matmul(f, tape.param(&ly.w1)), tape.param(&ly.b1));
    f = tape.gelu(f);
    f = tape.add_rowvec(tape.matmul(f, tape.param(&ly.w2)), tape.param(&ly.b2));
    x = tape.add(x, f);
  }
  int n = tape.layernorm(x, tape.param(&params.lnf_g), tape.param(&params.lnf_b));
  int r = tape.pick_rows(n, layout.readouts);
  return tape.add_rowvec(tape.matmul(r, tape.param(&params.w_out)), tape.param(&params.b_out));
}

// ---------------------------------------------------------------------------
// Inference session
// ---------------------------------------------------------------------------

// Incremental no-gradient forward with per-layer KV caching. Every position
// is processed by the same row-wise kernel in append order, so a full pass,
// a beam extension, and a staged re-encoding produce bit-identical rows for
// identical visible sets. Attention sums run in ascending cache order and
// skip masked columns entirely.
template <typename T = double>
class Session {
 public:
  Session(const ModelParams<T>* params, const SequenceLayout* layout, const MaskMat* mask)
      : params_(params), layout_(layout), mask_(mask) {
    const ModelConfig& cfg = params->cfg;
    k_cache_.resize(static_cast<std::size_t>(cfg.n_layers));
    v_cache_.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& m : k_cache_) m.resize(0, cfg.d);
    for (auto& m : v_cache_) m.resize(0, cfg.d);
    normed_.resize(0, cfg.d);
  }

  int size() const { return static_cast<int>(layout_pos_.size()); }
  int layout_pos(int row) const { return layout_pos_[static_cast<std::size_t>(row)]; }

  // token_id >= 0 selects a token-table row; -1 reads the query bank via the
  // layout role at that position
  void append(int lpos, int token_id) {
    const ModelConfig& cfg = params_->cfg;
    const PosRole& role = layout_->positions[static_cast<std::size_t>(lpos)];
    Mat<T> x(1, cfg.d);
    if (token_id >= 0) {
      x.row(0) = params_->token_emb.row(token_id) + params_->pos_emb.row(lpos);
    } else {
      x.row(0) = params_->queries[static_cast<std::size_t>(role.stage - 1)].row(role.qindex - 1) +
                 params_->pos_emb.row(lpos);
    }

    const int row = size();
    layout_pos_.push_back(lpos);
    const int heads = cfg.n_heads;
    const Eigen::Index dh = cfg.d / heads;
    const T alpha = T(1) / std::sqrt(static_cast<T>(dh));

    for (int li = 0; li < cfg.n_layers; ++li) {
      const LayerParams<T>& ly = params_->layers[static_cast<std::size_t>(li)];
      Mat<T> h = layernorm_row(x, ly.ln1_g, ly.ln1_b);
      Mat<T> q = h * ly.wq + ly.bq;
      Mat<T> k = h * ly.wk + ly.bk;
      Mat<T> v = h * ly.wv + ly.bv;
      grow(k_cache_[static_cast<std::size_t>(li)], k);
      grow(v_cache_[static_cast<std::size_t>(li)], v);

      const Mat<T>& kc = k_cache_[static_cast<std::size_t>(li)];
      const Mat<T>& vc = v_cache_[static_cast<std::size_t>(li)];
      Mat<T> attn(1, cfg.d);
      for (int hd = 0; hd < heads; ++hd) {
        const Eigen::Index off = hd * dh;
        T mx = -std::numeric_limits<T>::infinity();
        for (int c = 0; c <= row; ++c) {
          if (!(*mask_)(lpos, layout_pos_[static_cast<std::size_t>(c)])) continue;
          T s = q.row(0).segment(off, dh).dot(kc.row(c).segment(off, dh)) * alpha;
          if (s > mx) mx = s;
        }
        T denom = 0;
        Vec<T> acc = Vec<T>::Zero(dh);
        for (int c = 0; c <= row; ++c) {
          if (!(*mask_)(lpos, layout_pos_[static_cast<std::size_t>(c)])) continue;
          T s = q.row(0).segment(off, dh).dot(kc.row(c).segment(off, dh)) * alpha;
          T e = std::exp(s - mx);
          denom += e;
          acc += e * vc.row(c).segment(off, dh).transpose();
        }
        attn.row(0).segment(off, dh) = (acc / denom).transpose();
      }
      x.row(0) += (attn * ly.wo + ly.bo).row(0);

      Mat<T> f = layernorm_row(x, ly.ln2_g, ly.ln2_b);
      f = f * ly.w1 + ly.b1;
      for (Eigen::Index c = 0; c < f.cols(); ++c) f(0, c) = Tape<T>::gelu_scalar(f(0, c));
      x.row(0) += (f * ly.w2 + ly.b2).row(0);
    }
    grow(normed_, layernorm_row(x, params_->lnf_g, params_->lnf_b));
  }

  // [1 x vocab] logits for an already-appended row
  Mat<T> logits_at(int row) const {
    Mat<T> lg = normed_.row(row) * params_->w_out + params_->b_out;
    for (Eigen::Index c = 0; c < lg.cols(); ++c)
      if (!std::isfinite(static_cast<double>(lg(0, c))))
        throw Error("numerical-overflow", "non-finite logit");
    return lg;
  }

  const ModelParams<T>& params() const { return *params_; }
  const SequenceLayout& layout() const { return *layout_; }

 private:
  static Mat<T> layernorm_row(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b) {
    const T eps = static_cast<T>(1e-5);
    T mu = x.row(0).mean();
    T var = (x.row(0).array() - mu).square().mean();
    T inv = T(1) / std::sqrt(var + eps);
    Mat<T> out(1, x.cols());
    out.row(0) =
        (((x.row(0).array() - mu) * inv) * g.row(0).array() + b.row(0).array()).matrix();
    return out;
  }

  static void grow(Mat<T>& m, const Mat<T>& row) {
    m.conservativeResize(m.rows() + 1, Eigen::NoChange);
    m.row(m.rows() - 1) = row.row(0);
  }

  const ModelParams<T>* params_;
  const SequenceLayout* layout_;
  const MaskMat* mask_;
  std::vector<int> layout_pos_;
  std::vector<Mat<T>> k_cache_, v_cache_;
  Mat<T> normed_;
};

// ---------------------------------------------------------------------------
// Whole-sequence no-gradient forward
// ---------------------------------------------------------------------------

// readout logits [l x vocab] from one teacher-forced pass
template <typename T = double>
Mat<T> forward_nograd(const ModelParams<T>& params, const SequenceLayout& layout,
                      const MaskMat& mask, const std::vector<int>& token_ids) {
  Session<T> session(&params, &layout, &mask);
  for (int p = 0; p < layout.size(); ++p)
    session.append(p, token_ids[static_cast<std::size_t>(p)]);
  Mat<T> out(params.cfg.l, params.cfg.vocab());
  for (int t = 0; t < params.cfg.l; ++t) {
    int lpos = layout.readouts[static_cast<std::size_t>(t)];
    out.row(t) = session.logits_at(lpos).row(0);
  }
  return out;
}

// Stage-by-stage reference: stage t re-encodes from scratch a fresh sequence
// holding only history levels <= g(t) plus the reasoning positions of stages
// 1..t, each keeping its full-layout positional index and its progressive
// visibility rule. The single-pass forward must reproduce these logits.
template <typename T = double>
Mat<T> staged_reference_forward(const ModelParams<T>& params, const SequenceLayout& layout,
                                const MaskMat& mask, const std::vector<int>& token_ids) {
  const ModelConfig& cfg = params.cfg;
  if (!cfg.care()) throw Error("config", "staged reference requires care mode");
  Mat<T> out(cfg.l, cfg.vocab());
  for (int t = 1; t <= cfg.l; ++t) {
    const int g = cfg.schedule[static_cast<std::size_t>(t - 1)];
    Session<T> session(&params, &layout, &mask);
    for (int p = 0; p < layout.size(); ++p) {
      const PosRole& role = layout.positions[static_cast<std::size_t>(p)];
      bool included = false;
      if (role.kind == PosRole::History)
        included = role.level <= g;
      else if (role.kind == PosRole::Query)
        included = role.stage <= t;
      else
        included = role.stage < t;
      if (included) session.append(p, token_ids[static_cast<std::size_t>(p)]);
    }
    out.row(t - 1) = session.logits_at(session.size() - 1).row(0);
  }
  return out;
}

}  // namespace cascade
