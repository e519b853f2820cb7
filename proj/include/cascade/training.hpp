#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <utility>
#include <vector>

#include "cascade/common.hpp"
#include "cascade/decoding.hpp"
#include "cascade/model.hpp"
#include "cascade/tape.hpp"
#include "cascade/tokenizer.hpp"
#include "cascade/transformer.hpp"

namespace cascade {

struct TrainConfig {
  double alpha = 0.7;  // diversity weight
  double learning_rate = 1e-3;
  int batch_size = 64;
  int max_epochs = 200;
  int patience = 10;  // epochs without valid Recall@10 improvement
  std::uint64_t seed = 0;
  int valid_eval_users = 0;  // cap on valid examples scored per epoch, 0 = all
  int valid_beam = 10;
  double stop_at_train_loss = 0;  // stop once epoch L_Rec drops below; 0 disables

  void validate() const {
    if (alpha < 0) throw Error("config", "alpha must be non-negative");
    if (learning_rate <= 0) throw Error("config", "learning_rate must be positive");
    if (batch_size < 1) throw Error("config", "batch_size must be >= 1");
    if (max_epochs < 1) throw Error("config", "max_epochs must be >= 1");
    if (patience < 1) throw Error("config", "patience must be >= 1");
    if (valid_beam < 1) throw Error("config", "valid_beam must be >= 1");
  }
};

struct TrainLog {
  std::vector<double> l_rec, l_div, total, recall10, ndcg10;
  std::vector<double> wall_seconds;  // excluded from deterministic reports
  int best_epoch = -1;
  double best_recall10 = 0;
  int epochs() const { return static_cast<int>(total.size()); }
};

// ---------------------------------------------------------------------------
// Loss values (closed forms used by the trainer and by oracle tests)
// ---------------------------------------------------------------------------

// -sum_t log softmax(logits row t)[target token t], softmax over full vocab
template <typename T>
double recommendation_loss_single(const Mat<T>& stage_logits,
                                  const std::vector<int>& target_tokens) {
  if (static_cast<std::size_t>(stage_logits.rows()) != target_tokens.size())
    throw Error("config", "one logits row per target code required");
  double loss = 0;
  for (Eigen::Index r = 0; r < stage_logits.rows(); ++r) {
    int tgt = target_tokens[static_cast<std::size_t>(r)];
    if (tgt < 0 || tgt >= stage_logits.cols())
      throw Error("config", "target token out of vocabulary");
    double mx = static_cast<double>(stage_logits.row(r).maxCoeff());
    double denom = 0;
    for (Eigen::Index c = 0; c < stage_logits.cols(); ++c)
      denom += std::exp(static_cast<double>(stage_logits(r, c)) - mx);
    loss += mx + std::log(denom) - static_cast<double>(stage_logits(r, tgt));
  }
  return loss;
}

// batch mean
template <typename T>
double recommendation_loss(const std::vector<Mat<T>>& batch_logits,
                           const std::vector<std::vector<int>>& batch_targets) {
  if (batch_logits.empty()) throw Error("config", "empty batch");
  double total = 0;
  for (std::size_t i = 0; i < batch_logits.size(); ++i)
    total += recommendation_loss_single(batch_logits[i], batch_targets[i]);
  return total / static_cast<double>(batch_logits.size());
}

// mean pairwise cosine over all query vectors pooled across stages
template <typename T>
double diversity_loss(const std::vector<Mat<T>>& queries, bool* zero_norm_seen = nullptr) {
  Eigen::Index n = 0;
  for (const auto& q : queries) n += q.rows();
  if (zero_norm_seen) *zero_norm_seen = false;
  if (n < 2) return 0;
  Mat<T> all(n, queries.front().cols());
  Eigen::Index at = 0;
  for (const auto& q : queries) {
    all.middleRows(at, q.rows()) = q;
    at += q.rows();
  }
  double acc = 0;
  std::vector<double> norms(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    norms[static_cast<std::size_t>(i)] = static_cast<double>(all.row(i).norm());
    if (norms[static_cast<std::size_t>(i)] == 0 && zero_norm_seen) *zero_norm_seen = true;
  }
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      if (i == j) continue;
      double ni = norms[static_cast<std::size_t>(i)], nj = norms[static_cast<std::size_t>(j)];
      if (ni == 0 || nj == 0) continue;
      acc += static_cast<double>(all.row(i).dot(all.row(j))) / (ni * nj);
    }
  return acc / (static_cast<double>(n) * static_cast<double>(n) - static_cast<double>(n));
}

inline double total_loss(double l_rec, double l_div, double alpha) {
  return l_rec + alpha * l_div;
}

// ---------------------------------------------------------------------------
// Batch graph construction
// ---------------------------------------------------------------------------

namespace detail {

struct LayoutCache {
  const ModelConfig* cfg;
  std::map<int, std::pair<SequenceLayout, MaskMat>> by_m;

  const std::pair<SequenceLayout, MaskMat>& get(int m_actual) {
    auto it = by_m.find(m_actual);
    if (it != by_m.end()) return it->second;
    SequenceLayout layout = build_layout(m_actual, *cfg);
    MaskMat mask = build_progressive_mask(layout, *cfg);
    return by_m.emplace(m_actual, std::make_pair(std::move(layout), std::move(mask))).first->second;
  }
};

inline std::vector<int> target_tokens(const ModelConfig& cfg, const TokenizedExample& ex) {
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(cfg.l));
  for (int t = 1; t <= cfg.l; ++t)
    out.push_back(cfg.token_id(t, ex.target[static_cast<std::size_t>(t - 1)]));
  return out;
}

// builds mean CE + alpha * diversity over one batch; returns the loss node
template <typename T>
int batch_loss_node(Tape<T>& tape, ModelParams<T>& params, LayoutCache& cache,
                    const std::vector<TokenizedExample>& examples,
                    const std::vector<std::size_t>& batch, double alpha) {
  const ModelConfig& cfg = params.cfg;
  int sum_node = -1;
  for (std::size_t bi : batch) {
    const TokenizedExample& ex = examples[bi];
    const auto& [layout, mask] = cache.get(static_cast<int>(ex.history.size()));
    std::vector<int> token_ids = tokens_for_layout(cfg, layout, ex.history, ex.target);
    int logits = tape_forward(tape, params, layout, mask, token_ids);
    int ce = tape.cross_entropy_sum(logits, target_tokens(cfg, ex));
    sum_node = sum_node < 0 ? ce : tape.add(sum_node, ce);
  }
  int loss = tape.scale(sum_node, static_cast<T>(1.0 / static_cast<double>(batch.size())));
  if (cfg.care() && cfg.total_queries() >= 2) {
    std::vector<int> qnodes;
    for (auto& q : params.queries) qnodes.push_back(tape.param(&q));
    int div = tape.diversity(tape.concat_rows(qnodes));
    loss = tape.add(loss, tape.scale(div, static_cast<T>(alpha)));
  }
  return loss;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Optimizer and fit loop
// ---------------------------------------------------------------------------

template <typename T>
struct TrainResult {
  ModelParams<T> params;  // best-valid checkpoint
  TrainLog log;
  bool diverged = false;
  int last_finite_epoch = -1;
};

template <typename T = double>
TrainResult<T> fit(const ModelParams<T>& initial, const std::vector<TokenizedExample>& train,
                   const std::vector<TokenizedExample>& valid, const PrefixTrie& trie,
                   const TrainConfig& tc) {
  tc.validate();
  if (train.empty()) throw Error("config", "no training examples");
  const ModelConfig& cfg = initial.cfg;

  ModelParams<T> params = initial;
  auto named = params.named_tensors();

  std::vector<Mat<T>> adam_m(named.size()), adam_v(named.size());
  for (std::size_t i = 0; i < named.size(); ++i) {
    adam_m[i] = Mat<T>::Zero(named[i].second->rows(), named[i].second->cols());
    adam_v[i] = Mat<T>::Zero(named[i].second->rows(), named[i].second->cols());
  }
  const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;
  long long step = 0;

  Rng shuffle_rng(Rng::derive(tc.seed, 0x53485546ULL));  // "SHUF"
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  std::vector<std::size_t> valid_subset(valid.size());
  std::iota(valid_subset.begin(), valid_subset.end(), std::size_t{0});
  if (tc.valid_eval_users > 0 &&
      valid_subset.size() > static_cast<std::size_t>(tc.valid_eval_users)) {
    Rng sub_rng(Rng::derive(tc.seed, 0x56414cULL));  // "VAL"
    sub_rng.shuffle(valid_subset.begin(), valid_subset.end());
    valid_subset.resize(static_cast<std::size_t>(tc.valid_eval_users));
    std::sort(valid_subset.begin(), valid_subset.end());
  }

  detail::LayoutCache cache{&cfg, {}};
  TrainResult<T> result{params, {}, false, -1};

  for (int epoch = 0; epoch < tc.max_epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    shuffle_rng.shuffle(order.begin(), order.end());

    double epoch_rec = 0, epoch_div = 0, epoch_total = 0;
    std::size_t seen = 0;
    bool finite = true;
    for (std::size_t at = 0; at < order.size() && finite; at += static_cast<std::size_t>(tc.batch_size)) {
      std::vector<std::size_t> batch(
          order.begin() + static_cast<std::ptrdiff_t>(at),
          order.begin() + static_cast<std::ptrdiff_t>(
                              std::min(order.size(), at + static_cast<std::size_t>(tc.batch_size))));
      Tape<T> tape;
      int loss = detail::batch_loss_node(tape, params, cache, train, batch, tc.alpha);
      double loss_value = static_cast<double>(tape.value(loss)(0, 0));
      if (!std::isfinite(loss_value)) {
        finite = false;
        break;
      }
      double div_value = diversity_loss(params.queries);
      double rec_value = loss_value - tc.alpha * div_value;
      if (!cfg.care()) {
        div_value = 0;
        rec_value = loss_value;
      }
      epoch_rec += rec_value * static_cast<double>(batch.size());
      epoch_div += div_value * static_cast<double>(batch.size());
      epoch_total += loss_value * static_cast<double>(batch.size());
      seen += batch.size();

      tape.backward(loss);
      ++step;
      const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));
      for (std::size_t i = 0; i < named.size(); ++i) {
        const Mat<T>* g = tape.param_grad(named[i].second);
        if (!g) continue;
        Mat<T>& m = adam_m[i];
        Mat<T>& v = adam_v[i];
        m = static_cast<T>(b1) * m + static_cast<T>(1.0 - b1) * (*g);
        v = (static_cast<T>(b2) * v.array() +
             static_cast<T>(1.0 - b2) * g->array().square())
                .matrix();
        named[i].second->array() -=
            static_cast<T>(tc.learning_rate) *
            ((m.array() / static_cast<T>(bc1)) /
             ((v.array() / static_cast<T>(bc2)).sqrt() + static_cast<T>(adam_eps)));
      }
    }

    if (!finite) {
      result.diverged = true;
      result.last_finite_epoch = epoch - 1;
      break;
    }

    result.log.l_rec.push_back(epoch_rec / static_cast<double>(seen));
    result.log.l_div.push_back(epoch_div / static_cast<double>(seen));
    result.log.total.push_back(epoch_total / static_cast<double>(seen));
    result.last_finite_epoch = epoch;

    double recall = 0, ndcg = 0;
    if (!valid_subset.empty()) {
      for (std::size_t vi : valid_subset) {
        const TokenizedExample& ex = valid[vi];
        RankedList list = beam_generate(params, trie, ex.history, tc.valid_beam,
                                        std::min(10, tc.valid_beam));
        for (std::size_t r = 0; r < list.items.size(); ++r) {
          if (list.items[r].item_id == ex.target_item) {
            recall += 1.0;
            ndcg += 1.0 / std::log2(static_cast<double>(r) + 2.0);
            break;
          }
        }
      }
      recall /= static_cast<double>(valid_subset.size());
      ndcg /= static_cast<double>(valid_subset.size());
    }
    result.log.recall10.push_back(recall);
    result.log.ndcg10.push_back(ndcg);

    auto t1 = std::chrono::steady_clock::now();
    result.log.wall_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());

    // without a valid set every epoch counts as an improvement, so the
    // returned checkpoint is simply the latest
    bool improved = result.log.best_epoch < 0 || valid_subset.empty() ||
                    recall > result.log.best_recall10;
    if (improved) {
      result.log.best_epoch = epoch;
      result.log.best_recall10 = recall;
      result.params = params;
    }
    if (tc.stop_at_train_loss > 0 && result.log.l_rec.back() < tc.stop_at_train_loss) {
      result.params = params;
      result.log.best_epoch = epoch;
      break;
    }
    if (epoch - result.log.best_epoch >= tc.patience) break;
  }
  return result;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient verification
// ---------------------------------------------------------------------------

// Central-difference check of the batch loss gradient on n_probe randomly
// chosen scalar parameters (at least 10 drawn from the query bank in care
// mode). Returns the max relative error with denominator
// max(|analytic|, |numeric|, 1e-8).
template <typename T = double>
double finite_difference_check(ModelParams<T>& params,
                               const std::vector<TokenizedExample>& batch, double alpha,
                               int n_probe = 50, double h = 1e-4, std::uint64_t seed = 0) {
  if (batch.empty()) throw Error("config", "finite difference check needs a batch");
  auto named = params.named_tensors();
  std::vector<std::size_t> all_idx(batch.size());
  std::iota(all_idx.begin(), all_idx.end(), std::size_t{0});

  auto loss_value = [&]() {
    Tape<T> tape;
    detail::LayoutCache cache{&params.cfg, {}};
    int loss = detail::batch_loss_node(tape, params, cache, batch, all_idx, alpha);
    return static_cast<double>(tape.value(loss)(0, 0));
  };

  Tape<T> tape;
  detail::LayoutCache cache{&params.cfg, {}};
  int loss = detail::batch_loss_node(tape, params, cache, batch, all_idx, alpha);
  tape.backward(loss);

  struct Probe {
    std::size_t tensor;
    Eigen::Index r, c;
  };
  std::vector<std::size_t> query_tensors, other_tensors;
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (named[i].first.rfind("queries", 0) == 0)
      query_tensors.push_back(i);
    else
      other_tensors.push_back(i);
  }
  Rng rng(Rng::derive(seed, 0x4644ULL));  // "FD"
  std::vector<Probe> probes;
  auto pick_from = [&](const std::vector<std::size_t>& tensors) {
    std::size_t ti = tensors[rng.uniform_int(tensors.size())];
    Mat<T>* m = named[ti].second;
    Eigen::Index r = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(m->rows())));
    Eigen::Index c = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(m->cols())));
    probes.push_back(Probe{ti, r, c});
  };
  int from_queries = query_tensors.empty() ? 0 : std::min(10, n_probe);
  for (int i = 0; i < from_queries; ++i) pick_from(query_tensors);
  for (int i = from_queries; i < n_probe; ++i)
    pick_from(other_tensors.empty() ? query_tensors : other_tensors);

  double max_rel = 0;
  for (const Probe& p : probes) {
    Mat<T>* m = named[p.tensor].second;
    const Mat<T>* g = tape.param_grad(m);
    double analytic = g ? static_cast<double>((*g)(p.r, p.c)) : 0.0;
    T saved = (*m)(p.r, p.c);
    (*m)(p.r, p.c) = saved + static_cast<T>(h);
    double up = loss_value();
    (*m)(p.r, p.c) = saved - static_cast<T>(h);
    double down = loss_value();
    (*m)(p.r, p.c) = saved;
    double numeric = (up - down) / (2.0 * h);
    double rel = std::abs(analytic - numeric) /
                 std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace cascade
