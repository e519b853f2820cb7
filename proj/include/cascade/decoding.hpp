#pragma once

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "cascade/common.hpp"
#include "cascade/dataset.hpp"
#include "cascade/model.hpp"
#include "cascade/tokenizer.hpp"
#include "cascade/transformer.hpp"

namespace cascade {

struct RankedItem {
  std::string item_id;
  double score;  // cumulative log-probability
};

struct RankedList {
  std::vector<RankedItem> items;  // scores non-increasing, items distinct
  bool underfull = false;         // fewer complete hypotheses than requested
};

struct TokenizedExample {
  std::string user_id;
  std::vector<std::vector<int>> history;  // per history item: l codes
  std::vector<int> target;                // l codes
  std::string target_item;
};

inline std::vector<TokenizedExample> tokenize_examples(const std::vector<TrainingExample>& raw,
                                                       const SemanticTable& table) {
  std::vector<TokenizedExample> out;
  out.reserve(raw.size());
  for (const auto& ex : raw) {
    TokenizedExample te;
    te.user_id = ex.user_id;
    te.target_item = ex.target;
    te.target = table.id_of(ex.target);
    te.history.reserve(ex.history.size());
    for (const auto& item : ex.history) te.history.push_back(table.id_of(item));
    out.push_back(std::move(te));
  }
  return out;
}

namespace detail {

// layout position of C(t) and of each Q(t, j)
struct ReasoningIndex {
  std::vector<int> c_pos;                // stage -> position, -1 if absent
  std::vector<std::vector<int>> q_pos;   // stage -> positions of its queries
};

inline ReasoningIndex index_reasoning(const SequenceLayout& layout, int l) {
  ReasoningIndex idx;
  idx.c_pos.assign(static_cast<std::size_t>(l) + 1, -1);
  idx.q_pos.assign(static_cast<std::size_t>(l) + 1, {});
  for (int p = 0; p < layout.size(); ++p) {
    const PosRole& role = layout.positions[static_cast<std::size_t>(p)];
    if (role.kind == PosRole::Token)
      idx.c_pos[static_cast<std::size_t>(role.stage)] = p;
    else if (role.kind == PosRole::Query)
      idx.q_pos[static_cast<std::size_t>(role.stage)].push_back(p);
  }
  return idx;
}

// renormalized log-probabilities over the valid level-t codes, from one
// readout logits row; ascending code order
template <typename T>
std::vector<std::pair<int, double>> renormalize(const Mat<T>& logits, const ModelConfig& cfg,
                                                int stage, const std::vector<int>& valid) {
  double mx = -std::numeric_limits<double>::infinity();
  for (int c : valid)
    mx = std::max(mx, static_cast<double>(logits(0, cfg.token_id(stage, c))));
  double denom = 0;
  for (int c : valid) denom += std::exp(static_cast<double>(logits(0, cfg.token_id(stage, c))) - mx);
  double lse = mx + std::log(denom);
  std::vector<std::pair<int, double>> out;
  out.reserve(valid.size());
  for (int c : valid)
    out.emplace_back(c, static_cast<double>(logits(0, cfg.token_id(stage, c))) - lse);
  return out;
}

}  // namespace detail

// Trie-constrained beam search. Every hypothesis extends through the same
// learned query positions; token positions branch. Invalid codes are removed
// before renormalization, so hypothesis log-probs stay comparable. History is
// encoded once and shared by all hypotheses. Ties break toward the
// lexicographically smaller code sequence.
template <typename T = double>
RankedList beam_generate(const ModelParams<T>& params, const PrefixTrie& trie,
                         std::vector<std::vector<int>> history, int beam_size, int k) {
  const ModelConfig& cfg = params.cfg;
  if (history.empty()) throw Error("empty-history", "beam search needs history");
  if (k > beam_size) throw Error("config", "K must be <= beam size");
  if (static_cast<int>(history.size()) > cfg.max_history)
    history.erase(history.begin(),
                  history.end() - static_cast<std::ptrdiff_t>(cfg.max_history));

  const int m_actual = static_cast<int>(history.size());
  SequenceLayout layout = build_layout(m_actual, cfg);
  MaskMat mask = build_progressive_mask(layout, cfg);
  detail::ReasoningIndex ridx = detail::index_reasoning(layout, cfg.l);

  Session<T> base(&params, &layout, &mask);
  for (int i = 0; i < m_actual; ++i)
    for (int v = 1; v <= cfg.l; ++v)
      base.append((i * cfg.l) + (v - 1),
                  cfg.token_id(v, history[static_cast<std::size_t>(i)]
                                         [static_cast<std::size_t>(v - 1)]));
  if (cfg.care())
    for (int p : ridx.q_pos[1]) base.append(p, -1);

  struct Hyp {
    Session<T> session;
    std::vector<int> codes;
    double logp = 0;
  };
  std::vector<Hyp> beam;
  beam.push_back(Hyp{std::move(base), {}, 0.0});

  for (int t = 1; t <= cfg.l; ++t) {
    struct Cand {
      int parent;
      int code;
      double logp;
      std::vector<int> codes;
    };
    std::vector<Cand> cands;
    for (std::size_t hi = 0; hi < beam.size(); ++hi) {
      Hyp& hyp = beam[hi];
      std::vector<int> valid = trie.valid_next(hyp.codes);
      if (valid.empty()) continue;
      Mat<T> logits = hyp.session.logits_at(hyp.session.size() - 1);
      auto scored = detail::renormalize(logits, cfg, t, valid);
      for (auto& [code, lp] : scored) {
        Cand c;
        c.parent = static_cast<int>(hi);
        c.code = code;
        c.logp = hyp.logp + lp;
        c.codes = hyp.codes;
        c.codes.push_back(code);
        cands.push_back(std::move(c));
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      return a.codes < b.codes;
    });
    if (static_cast<int>(cands.size()) > beam_size) cands.resize(static_cast<std::size_t>(beam_size));

    std::vector<Hyp> next;
    next.reserve(cands.size());
    for (auto& c : cands) {
      Hyp hyp{beam[static_cast<std::size_t>(c.parent)].session, std::move(c.codes), c.logp};
      if (t < cfg.l) {
        hyp.session.append(ridx.c_pos[static_cast<std::size_t>(t)], cfg.token_id(t, c.code));
        if (cfg.care())
          for (int p : ridx.q_pos[static_cast<std::size_t>(t + 1)]) hyp.session.append(p, -1);
      }
      next.push_back(std::move(hyp));
    }
    beam = std::move(next);
    if (beam.empty()) break;
  }

  RankedList out;
  for (auto& hyp : beam) {
    if (static_cast<int>(out.items.size()) >= k) break;
    auto item = trie.ground(hyp.codes);
    if (!item) continue;
    out.items.push_back(RankedItem{*item, hyp.logp});
  }
  out.underfull = static_cast<int>(out.items.size()) < k;
  return out;
}

// ---------------------------------------------------------------------------
// Teacher-forced per-stage analysis pass
// ---------------------------------------------------------------------------

struct StagePrediction {
  int predicted = 0;
  bool hit = false;
  std::vector<std::pair<int, double>> distribution;  // (code, prob) over the level's codes
};

// One forward with the target's codes teacher-forced; per stage, the argmax
// over that level's codes. Deliberately unconstrained by the catalog trie:
// the analysis records what the model wants to emit at each position, and a
// prefix-restricted argmax would collapse to the single surviving code
// whenever an id prefix is unique.
template <typename T = double>
std::vector<StagePrediction> teacher_forced_tokens(const ModelParams<T>& params,
                                                   std::vector<std::vector<int>> history,
                                                   const std::vector<int>& target) {
  const ModelConfig& cfg = params.cfg;
  if (static_cast<int>(target.size()) != cfg.l)
    throw Error("config", "target must have one code per stage");
  if (history.empty()) throw Error("empty-history", "analysis pass needs history");
  if (static_cast<int>(history.size()) > cfg.max_history)
    history.erase(history.begin(),
                  history.end() - static_cast<std::ptrdiff_t>(cfg.max_history));

  SequenceLayout layout = build_layout(static_cast<int>(history.size()), cfg);
  MaskMat mask = build_progressive_mask(layout, cfg);
  std::vector<int> token_ids = tokens_for_layout(cfg, layout, history, target);
  Mat<T> logits = forward_nograd(params, layout, mask, token_ids);

  std::vector<int> all_codes(static_cast<std::size_t>(cfg.k_eff));
  std::iota(all_codes.begin(), all_codes.end(), 0);

  std::vector<StagePrediction> out(static_cast<std::size_t>(cfg.l));
  for (int t = 1; t <= cfg.l; ++t) {
    StagePrediction& sp = out[static_cast<std::size_t>(t - 1)];
    Mat<T> row = logits.row(t - 1);
    auto scored = detail::renormalize(row, cfg, t, all_codes);
    double best = -std::numeric_limits<double>::infinity();
    for (auto& [code, lp] : scored) {
      double p = std::exp(lp);
      sp.distribution.emplace_back(code, p);
      if (lp > best) {
        best = lp;
        sp.predicted = code;
      }
    }
    sp.hit = sp.predicted == target[static_cast<std::size_t>(t - 1)];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Prediction dump: `user_id<TAB>rank<TAB>item_id<TAB>score`
// ---------------------------------------------------------------------------

inline std::string format_predictions(
    const std::vector<std::pair<std::string, RankedList>>& per_user) {
  std::ostringstream out;
  out.precision(17);
  for (const auto& [user, list] : per_user)
    for (std::size_t r = 0; r < list.items.size(); ++r)
      out << user << '\t' << (r + 1) << '\t' << list.items[r].item_id << '\t'
          << list.items[r].score << '\n';
  return out.str();
}

inline std::map<std::string, std::vector<RankedItem>> parse_predictions(std::istream& in) {
  std::map<std::string, std::vector<RankedItem>> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_fields(line, '\t');
    if (fields.size() != 4)
      throw Error("parse", "prediction dump: bad line " + std::to_string(line_no));
    std::size_t rank;
    double score;
    try {
      rank = std::stoul(fields[1]);
      score = std::stod(fields[3]);
    } catch (const std::exception&) {
      throw Error("parse", "prediction dump: bad number at line " + std::to_string(line_no));
    }
    auto& list = out[fields[0]];
    if (rank != list.size() + 1)
      throw Error("parse", "prediction dump: rank out of order at line " + std::to_string(line_no));
    list.push_back(RankedItem{fields[2], score});
  }
  return out;
}

// `user_id<TAB>item_id`
inline std::string format_test_targets(const std::vector<TokenizedExample>& examples) {
  std::ostringstream out;
  for (const auto& ex : examples) out << ex.user_id << '\t' << ex.target_item << '\n';
  return out.str();
}

inline std::map<std::string, std::string> parse_test_targets(std::istream& in) {
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_fields(line, '\t');
    if (fields.size() != 2)
      throw Error("parse", "test targets: bad line " + std::to_string(line_no));
    out[fields[0]] = fields[1];
  }
  return out;
}

}  // namespace cascade
