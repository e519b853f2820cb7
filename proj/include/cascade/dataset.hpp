#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "cascade/common.hpp"

namespace cascade {

struct Interaction {
  std::string user_id;
  std::string item_id;
  std::int64_t timestamp = 0;
};

struct InteractionLog {
  // per-user sequences, each sorted by (timestamp, ingestion order)
  std::map<std::string, std::vector<Interaction>> by_user;
  std::vector<std::string> items;  // sorted unique catalog
  std::size_t user_count() const { return by_user.size(); }
  std::size_t item_count() const { return items.size(); }
};

struct SplitDataset {
  struct UserSplit {
    std::vector<Interaction> train, valid, test;
  };
  std::map<std::string, UserSplit> by_user;
  std::vector<std::string> dropped_users;  // users with < 3 interactions
};

struct TrainingExample {
  std::string user_id;
  std::vector<std::string> history;  // temporally ordered, length <= M
  std::string target;
};

struct SynthConfig {
  int n_users = 500;
  int n_items = 200;
  int n_clusters = 16;
  double zipf_exponent = 1.2;
  int history_min = 5;
  int history_max = 14;
  int embedding_dim = 16;
  double noise_scale = 0.05;

  void validate() const {
    if (n_users < 1 || n_items < 1 || n_clusters < 1)
      throw Error("config", "n_users, n_items, n_clusters must be positive");
    if (n_clusters > n_items) throw Error("config", "n_clusters must be <= n_items");
    if (history_min < 2) throw Error("config", "history_length_range min must be >= 2");
    if (history_max < history_min) throw Error("config", "history range empty");
    if (embedding_dim < 1) throw Error("config", "embedding_dim must be positive");
    if (zipf_exponent <= 0.0) throw Error("config", "zipf_exponent must be positive");
    if (noise_scale < 0.0) throw Error("config", "noise_scale must be non-negative");
  }
};

template <typename T>
struct ItemEmbeddings {
  std::vector<std::string> item_ids;
  Mat<T> vectors;  // [n_items x dim], row i belongs to item_ids[i]
  std::unordered_map<std::string, int> index;

  void rebuild_index() {
    index.clear();
    for (std::size_t i = 0; i < item_ids.size(); ++i) index[item_ids[i]] = static_cast<int>(i);
  }
};

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

// Reads tab-separated `user_id<TAB>item_id<TAB>timestamp` records. Lines
// starting with '#' and blank lines are skipped. Per-user sequences come out
// sorted by (timestamp, input order).
inline InteractionLog ingest_interactions(std::istream& in) {
  struct Row {
    Interaction inter;
    std::size_t order;
  };
  std::map<std::string, std::vector<Row>> rows;
  std::set<std::string> item_set;
  std::string line;
  std::size_t line_no = 0;
  std::size_t order = 0;
  std::size_t records = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto fields = split_fields(line, '\t');
    if (fields.size() != 3 || fields[0].empty() || fields[1].empty())
      throw Error("parse", "malformed record at line " + std::to_string(line_no));
    std::int64_t ts = 0;
    const std::string& raw = fields[2];
    std::size_t consumed = 0;
    try {
      ts = std::stoll(raw, &consumed);
    } catch (const std::exception&) {
      throw Error("parse", "bad timestamp at line " + std::to_string(line_no));
    }
    if (consumed != raw.size() || ts < 0)
      throw Error("parse", "bad timestamp at line " + std::to_string(line_no));
    rows[fields[0]].push_back({Interaction{fields[0], fields[1], ts}, order++});
    item_set.insert(fields[1]);
    ++records;
  }
  if (records == 0) throw Error("empty-log", "input contains no interaction records");

  InteractionLog log;
  for (auto& [user, seq] : rows) {
    std::stable_sort(seq.begin(), seq.end(), [](const Row& a, const Row& b) {
      if (a.inter.timestamp != b.inter.timestamp) return a.inter.timestamp < b.inter.timestamp;
      return a.order < b.order;
    });
    auto& dst = log.by_user[user];
    dst.reserve(seq.size());
    for (auto& r : seq) dst.push_back(std::move(r.inter));
  }
  log.items.assign(item_set.begin(), item_set.end());
  return log;
}

inline std::string format_interactions(const InteractionLog& log) {
  std::ostringstream out;
  for (const auto& [user, seq] : log.by_user)
    for (const auto& it : seq) out << user << '\t' << it.item_id << '\t' << it.timestamp << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Temporal split
// ---------------------------------------------------------------------------

// Per-user temporal split. Valid and test each take floor(n/10) interactions
// (minimum 1), the remainder goes to train. Users with fewer than three
// interactions are dropped and reported via `warn`.
inline SplitDataset temporal_split(const InteractionLog& log,
                                   const std::function<void(const std::string&)>& warn = {}) {
  SplitDataset split;
  for (const auto& [user, seq] : log.by_user) {
    std::size_t n = seq.size();
    if (n < 3) {
      split.dropped_users.push_back(user);
      if (warn) warn("user " + user + " has " + std::to_string(n) + " interactions; dropped");
      continue;
    }
    std::size_t n_valid = std::max<std::size_t>(1, n / 10);
    std::size_t n_test = std::max<std::size_t>(1, n / 10);
    std::size_t n_train = n - n_valid - n_test;
    auto& us = split.by_user[user];
    us.train.assign(seq.begin(), seq.begin() + n_train);
    us.valid.assign(seq.begin() + n_train, seq.begin() + n_train + n_valid);
    us.test.assign(seq.begin() + n_train + n_valid, seq.end());
  }
  if (split.by_user.empty()) throw Error("no-splittable-users", "every user was dropped");
  return split;
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

namespace detail {

// inverse-CDF sampler over fixed weights; deterministic given the rng stream
class WeightedSampler {
 public:
  explicit WeightedSampler(const std::vector<double>& weights) {
    cum_.reserve(weights.size());
    double s = 0.0;
    for (double w : weights) {
      s += w;
      cum_.push_back(s);
    }
    total_ = s;
  }
  int sample(Rng& rng) const {
    double u = rng.uniform() * total_;
    auto it = std::upper_bound(cum_.begin(), cum_.end(), u);
    if (it == cum_.end()) return static_cast<int>(cum_.size()) - 1;
    return static_cast<int>(it - cum_.begin());
  }
  double total() const { return total_; }

 private:
  std::vector<double> cum_;
  double total_ = 0.0;
};

inline std::string padded_id(char prefix, int i, int count) {
  int width = 1;
  for (int v = count - 1; v >= 10; v /= 10) ++width;
  std::string digits = std::to_string(i);
  std::string out(1, prefix);
  out.append(static_cast<std::size_t>(width) - std::min<std::size_t>(width, digits.size()), '0');
  out += digits;
  return out;
}

}  // namespace detail

// Synthesizes a clustered, popularity-skewed interaction log. Item popularity
// follows a Zipf law with exponent cfg.zipf_exponent; each user prefers one
// cluster and draws 80% of their history from it (popularity-weighted within
// the cluster) and 20% from the global popularity distribution. Embedding of
// an item = its cluster center + Gaussian noise of scale cfg.noise_scale.
// Fully deterministic given (cfg, seed).
template <typename T = double>
std::pair<InteractionLog, ItemEmbeddings<T>> generate_synthetic(const SynthConfig& cfg,
                                                                std::uint64_t seed) {
  cfg.validate();
  Rng rng(Rng::derive(seed, 0x53594e5448ULL));  // "SYNTH"

  const int n = cfg.n_items;
  std::vector<std::string> item_ids(n);
  for (int i = 0; i < n; ++i) item_ids[i] = detail::padded_id('i', i, n);

  // item i has popularity rank i+1; cluster assignment is pseudo-random so
  // every cluster mixes popular and unpopular items
  std::vector<int> cluster_of(n);
  for (int i = 0; i < n; ++i) cluster_of[i] = static_cast<int>(rng.uniform_int(cfg.n_clusters));

  std::vector<double> zipf(n);
  for (int i = 0; i < n; ++i) zipf[i] = std::pow(static_cast<double>(i + 1), -cfg.zipf_exponent);
  detail::WeightedSampler global(zipf);

  std::vector<detail::WeightedSampler> per_cluster;
  per_cluster.reserve(cfg.n_clusters);
  std::vector<std::vector<int>> cluster_items(cfg.n_clusters);
  for (int c = 0; c < cfg.n_clusters; ++c) {
    std::vector<double> w;
    for (int i = 0; i < n; ++i)
      if (cluster_of[i] == c) {
        w.push_back(zipf[i]);
        cluster_items[c].push_back(i);
      }
    per_cluster.emplace_back(w);
  }

  InteractionLog log;
  for (int u = 0; u < cfg.n_users; ++u) {
    std::string user = detail::padded_id('u', u, cfg.n_users);
    int preferred = static_cast<int>(rng.uniform_int(cfg.n_clusters));
    int len = cfg.history_min +
              static_cast<int>(rng.uniform_int(cfg.history_max - cfg.history_min + 1));
    auto& seq = log.by_user[user];
    seq.reserve(len);
    for (int t = 0; t < len; ++t) {
      int item;
      if (!cluster_items[preferred].empty() && rng.uniform() < 0.8) {
        int local = per_cluster[preferred].sample(rng);
        item = cluster_items[preferred][local];
      } else {
        item = global.sample(rng);
      }
      seq.push_back(Interaction{user, item_ids[item], t});
    }
  }
  log.items.assign(item_ids.begin(), item_ids.end());

  // cluster centers spread apart, then per-item noise
  ItemEmbeddings<T> emb;
  emb.item_ids = item_ids;
  emb.vectors.resize(n, cfg.embedding_dim);
  Mat<T> centers(cfg.n_clusters, cfg.embedding_dim);
  for (int c = 0; c < cfg.n_clusters; ++c)
    for (int d = 0; d < cfg.embedding_dim; ++d)
      centers(c, d) = static_cast<T>(rng.gaussian());
  for (int i = 0; i < n; ++i)
    for (int d = 0; d < cfg.embedding_dim; ++d)
      emb.vectors(i, d) =
          centers(cluster_of[i], d) + static_cast<T>(cfg.noise_scale * rng.gaussian());
  emb.rebuild_index();
  return {std::move(log), std::move(emb)};
}

// ---------------------------------------------------------------------------
// Example construction
// ---------------------------------------------------------------------------

struct ExampleSets {
  std::vector<TrainingExample> train, valid, test;
};

// Sliding next-item examples from the train portion (every position t >= 2),
// one example per user for valid and for test (history = all preceding
// observed interactions, truncated to the last max_history items).
inline ExampleSets build_examples(const SplitDataset& split, int max_history) {
  if (max_history < 1) throw Error("config", "max_history must be >= 1");
  ExampleSets out;
  auto tail = [max_history](const std::vector<std::string>& items) {
    std::size_t m = std::min<std::size_t>(items.size(), static_cast<std::size_t>(max_history));
    return std::vector<std::string>(items.end() - m, items.end());
  };
  for (const auto& [user, us] : split.by_user) {
    std::vector<std::string> seq;
    for (const auto& it : us.train) seq.push_back(it.item_id);
    for (std::size_t t = 1; t < seq.size(); ++t) {
      std::vector<std::string> hist(seq.begin(), seq.begin() + t);
      out.train.push_back({user, tail(hist), seq[t]});
    }
    if (!us.valid.empty() && !seq.empty())
      out.valid.push_back({user, tail(seq), us.valid.front().item_id});
    std::vector<std::string> through_valid = seq;
    for (const auto& it : us.valid) through_valid.push_back(it.item_id);
    if (!us.test.empty() && !through_valid.empty())
      out.test.push_back({user, tail(through_valid), us.test.front().item_id});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding file IO: first line `n_items embedding_dim`, then one line per
// item: `item_id v1 v2 ... v_dim`.
// ---------------------------------------------------------------------------

template <typename T>
std::string format_embeddings(const ItemEmbeddings<T>& emb) {
  std::ostringstream out;
  out.precision(17);
  out << emb.item_ids.size() << ' ' << emb.vectors.cols() << '\n';
  for (std::size_t i = 0; i < emb.item_ids.size(); ++i) {
    out << emb.item_ids[i];
    for (Eigen::Index d = 0; d < emb.vectors.cols(); ++d)
      out << ' ' << emb.vectors(static_cast<Eigen::Index>(i), d);
    out << '\n';
  }
  return out.str();
}

template <typename T>
ItemEmbeddings<T> parse_embeddings(std::istream& in) {
  ItemEmbeddings<T> emb;
  std::size_t n = 0, dim = 0;
  if (!(in >> n >> dim)) throw Error("parse", "embedding file: bad header");
  emb.item_ids.resize(n);
  emb.vectors.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    if (!(in >> emb.item_ids[i])) throw Error("parse", "embedding file: truncated");
    for (std::size_t d = 0; d < dim; ++d) {
      double v = 0;
      if (!(in >> v)) throw Error("parse", "embedding file: truncated row " + emb.item_ids[i]);
      emb.vectors(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(d)) = static_cast<T>(v);
    }
  }
  emb.rebuild_index();
  return emb;
}

}  // namespace cascade
