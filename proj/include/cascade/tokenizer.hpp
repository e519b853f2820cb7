#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "cascade/common.hpp"
#include "cascade/dataset.hpp"

namespace cascade {

// Per-level centroid sets for residual quantization. Each level stores K
// fitted centroids plus one appended all-zero centroid, so K_eff = K + 1 and
// quantization can pass a residual through unchanged.
template <typename T = double>
struct CodebookSet {
  int levels = 0;
  int base_k = 0;
  int dim = 0;
  std::vector<Mat<T>> centroids;  // per level: [K_eff x dim], last row zero

  int k_eff() const { return base_k + 1; }
};

using SemanticID = std::vector<int>;  // length l, codes in [0, K_eff)

struct SemanticTable {
  int levels = 0;
  int k_eff = 0;
  std::vector<std::string> item_ids;
  std::vector<SemanticID> codes;  // codes[i] belongs to item_ids[i]
  std::map<SemanticID, std::string> inverse;
  std::unordered_map<std::string, int> index;

  const SemanticID& id_of(const std::string& item) const {
    auto it = index.find(item);
    if (it == index.end()) throw Error("unknown-item", "no semantic id for " + item);
    return codes[static_cast<std::size_t>(it->second)];
  }
  void rebuild() {
    inverse.clear();
    index.clear();
    for (std::size_t i = 0; i < item_ids.size(); ++i) {
      inverse[codes[i]] = item_ids[i];
      index[item_ids[i]] = static_cast<int>(i);
    }
  }
};

namespace detail {

template <typename T>
T sq_dist(const Mat<T>& a, Eigen::Index ra, const Mat<T>& b, Eigen::Index rb) {
  T s = 0;
  for (Eigen::Index d = 0; d < a.cols(); ++d) {
    T diff = a(ra, d) - b(rb, d);
    s += diff * diff;
  }
  return s;
}

// nearest centroid by squared Euclidean distance, ties to the lowest index
template <typename T>
int nearest_row(const Mat<T>& points, Eigen::Index p, const Mat<T>& centers) {
  int best = 0;
  T best_d = sq_dist(points, p, centers, 0);
  for (Eigen::Index c = 1; c < centers.rows(); ++c) {
    T d = sq_dist(points, p, centers, c);
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

// k-means++ seeding followed by Lloyd iterations. Deterministic given rng
// state. Empty clusters are re-seeded to the point farthest from its
// assigned centroid.
template <typename T>
Mat<T> kmeans(const Mat<T>& points, int k, Rng& rng, int max_iters, T tol) {
  const Eigen::Index n = points.rows();
  Mat<T> centers(k, points.cols());

  std::vector<T> dist2(static_cast<std::size_t>(n));
  centers.row(0) = points.row(static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(n))));
  for (int c = 1; c < k; ++c) {
    T total = 0;
    for (Eigen::Index p = 0; p < n; ++p) {
      T best = sq_dist(points, p, centers, 0);
      for (int cc = 1; cc < c; ++cc) best = std::min(best, sq_dist(points, p, centers, cc));
      dist2[static_cast<std::size_t>(p)] = best;
      total += best;
    }
    Eigen::Index pick = 0;
    if (total > T(0)) {
      T u = static_cast<T>(rng.uniform()) * total;
      T acc = 0;
      pick = n - 1;
      for (Eigen::Index p = 0; p < n; ++p) {
        acc += dist2[static_cast<std::size_t>(p)];
        if (u < acc) {
          pick = p;
          break;
        }
      }
    } else {
      pick = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(n)));
    }
    centers.row(c) = points.row(pick);
  }

  std::vector<int> assign(static_cast<std::size_t>(n), 0);
  for (int iter = 0; iter < max_iters; ++iter) {
    for (Eigen::Index p = 0; p < n; ++p)
      assign[static_cast<std::size_t>(p)] = nearest_row(points, p, centers);

    Mat<T> next = Mat<T>::Zero(k, points.cols());
    std::vector<Eigen::Index> count(static_cast<std::size_t>(k), 0);
    for (Eigen::Index p = 0; p < n; ++p) {
      next.row(assign[static_cast<std::size_t>(p)]) += points.row(p);
      ++count[static_cast<std::size_t>(assign[static_cast<std::size_t>(p)])];
    }
    for (int c = 0; c < k; ++c) {
      if (count[static_cast<std::size_t>(c)] > 0) {
        next.row(c) /= static_cast<T>(count[static_cast<std::size_t>(c)]);
      } else {
        Eigen::Index far = 0;
        T far_d = -1;
        for (Eigen::Index p = 0; p < n; ++p) {
          T d = sq_dist(points, p, centers, assign[static_cast<std::size_t>(p)]);
          if (d > far_d) {
            far_d = d;
            far = p;
          }
        }
        next.row(c) = points.row(far);
      }
    }
    T movement = 0;
    for (int c = 0; c < k; ++c) {
      T m = std::sqrt(sq_dist(next, c, centers, c));
      movement = std::max(movement, m);
    }
    centers = next;
    if (movement < tol) break;
  }
  return centers;
}

}  // namespace detail

// Residual k-means: level 1 clusters raw embeddings, level t clusters the
// residuals left after subtracting each point's assigned level-(t-1)
// centroid. A zero centroid is appended to every level after fitting.
template <typename T = double>
CodebookSet<T> fit_codebooks(const ItemEmbeddings<T>& emb, int levels, int k, std::uint64_t seed,
                             int max_iters = 100, T tol = static_cast<T>(1e-6)) {
  if (levels < 1 || k < 1) throw Error("config", "levels and K must be positive");
  if (static_cast<Eigen::Index>(k) > emb.vectors.rows())
    throw Error("codebook-underfilled", "K=" + std::to_string(k) + " exceeds item count " +
                                            std::to_string(emb.vectors.rows()));

  CodebookSet<T> cbs;
  cbs.levels = levels;
  cbs.base_k = k;
  cbs.dim = static_cast<int>(emb.vectors.cols());
  cbs.centroids.reserve(static_cast<std::size_t>(levels));

  Mat<T> resid = emb.vectors;
  for (int lv = 0; lv < levels; ++lv) {
    Rng rng(Rng::derive(seed, 0x4b4dULL * 131 + static_cast<std::uint64_t>(lv)));
    Mat<T> fitted = detail::kmeans(resid, k, rng, max_iters, tol);
    Mat<T> with_zero = Mat<T>::Zero(k + 1, cbs.dim);
    with_zero.topRows(k) = fitted;
    for (Eigen::Index p = 0; p < resid.rows(); ++p) {
      int c = detail::nearest_row(resid, p, with_zero);
      resid.row(p) -= with_zero.row(c);
    }
    cbs.centroids.push_back(std::move(with_zero));
  }
  return cbs;
}

// Quantizes one embedding level by level. Returns the code path and the
// residual norm remaining after each level.
template <typename T>
std::pair<SemanticID, std::vector<T>> encode_item(const CodebookSet<T>& cbs,
                                                  const Vec<T>& embedding) {
  if (embedding.size() != cbs.dim)
    throw Error("config", "embedding dimension " + std::to_string(embedding.size()) +
                              " != codebook dimension " + std::to_string(cbs.dim));
  SemanticID codes;
  std::vector<T> norms;
  codes.reserve(static_cast<std::size_t>(cbs.levels));
  norms.reserve(static_cast<std::size_t>(cbs.levels));
  Mat<T> resid = embedding.transpose();
  for (int lv = 0; lv < cbs.levels; ++lv) {
    int c = detail::nearest_row(resid, 0, cbs.centroids[static_cast<std::size_t>(lv)]);
    resid.row(0) -= cbs.centroids[static_cast<std::size_t>(lv)].row(c);
    codes.push_back(c);
    norms.push_back(resid.row(0).norm());
  }
  return {std::move(codes), std::move(norms)};
}

// Encodes every item and resolves full-code collisions by moving the
// later-indexed item's LAST level code to the nearest centroid that yields
// an unused ID.
template <typename T>
SemanticTable assign_ids(const CodebookSet<T>& cbs, const ItemEmbeddings<T>& emb) {
  SemanticTable table;
  table.levels = cbs.levels;
  table.k_eff = cbs.k_eff();
  table.item_ids = emb.item_ids;
  table.codes.resize(emb.item_ids.size());

  std::map<SemanticID, std::string> used;
  for (std::size_t i = 0; i < emb.item_ids.size(); ++i) {
    Vec<T> row = emb.vectors.row(static_cast<Eigen::Index>(i)).transpose();
    auto [codes, norms] = encode_item(cbs, row);
    (void)norms;
    if (used.count(codes)) {
      Mat<T> resid = row.transpose();
      for (int lv = 0; lv + 1 < cbs.levels; ++lv)
        resid.row(0) -=
            cbs.centroids[static_cast<std::size_t>(lv)].row(codes[static_cast<std::size_t>(lv)]);
      const Mat<T>& last = cbs.centroids[static_cast<std::size_t>(cbs.levels - 1)];
      std::vector<std::pair<T, int>> order;
      order.reserve(static_cast<std::size_t>(last.rows()));
      for (Eigen::Index c = 0; c < last.rows(); ++c)
        order.emplace_back(detail::sq_dist(resid, 0, last, c), static_cast<int>(c));
      std::stable_sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first < b.first;
        return a.second < b.second;
      });
      bool placed = false;
      for (const auto& [d, c] : order) {
        (void)d;
        codes[static_cast<std::size_t>(cbs.levels - 1)] = c;
        if (!used.count(codes)) {
          placed = true;
          break;
        }
      }
      if (!placed)
        throw Error("id-space-exhausted", "no free last-level code for item " + emb.item_ids[i] +
                                              "; increase K");
    }
    used[codes] = emb.item_ids[i];
    table.codes[i] = std::move(codes);
  }
  table.rebuild();
  return table;
}

// ---------------------------------------------------------------------------
// Prefix trie over semantic IDs
// ---------------------------------------------------------------------------

class PrefixTrie {
 public:
  explicit PrefixTrie(const SemanticTable& table) : levels_(table.levels) {
    nodes_.emplace_back();
    for (std::size_t i = 0; i < table.codes.size(); ++i) {
      int node = 0;
      for (int lv = 0; lv < table.levels; ++lv) {
        int code = table.codes[i][static_cast<std::size_t>(lv)];
        auto it = nodes_[static_cast<std::size_t>(node)].edges.find(code);
        if (it == nodes_[static_cast<std::size_t>(node)].edges.end()) {
          int child = static_cast<int>(nodes_.size());
          nodes_.emplace_back();  // may reallocate, so re-index the parent below
          nodes_[static_cast<std::size_t>(node)].edges.emplace(code, child);
          node = child;
        } else {
          node = it->second;
        }
      }
      nodes_[static_cast<std::size_t>(node)].item = static_cast<int>(i);
      item_ids_.push_back(table.item_ids[i]);
    }
  }

  int levels() const { return levels_; }
  std::size_t leaf_count() const { return item_ids_.size(); }

  // codes that extend `prefix` to a live path, ascending
  std::vector<int> valid_next(const SemanticID& prefix) const {
    int node = walk(prefix);
    std::vector<int> out;
    if (node < 0) return out;
    for (const auto& [code, child] : nodes_[static_cast<std::size_t>(node)].edges)
      out.push_back(code);
    return out;
  }

  std::optional<std::string> ground(const SemanticID& codes) const {
    if (static_cast<int>(codes.size()) != levels_) return std::nullopt;
    int node = walk(codes);
    if (node < 0) return std::nullopt;
    int item = nodes_[static_cast<std::size_t>(node)].item;
    if (item < 0) return std::nullopt;
    return item_ids_[static_cast<std::size_t>(item)];
  }

 private:
  struct Node {
    std::map<int, int> edges;
    int item = -1;
  };

  int walk(const SemanticID& codes) const {
    int node = 0;
    for (int code : codes) {
      const auto& edges = nodes_[static_cast<std::size_t>(node)].edges;
      auto it = edges.find(code);
      if (it == edges.end()) return -1;
      node = it->second;
    }
    return node;
  }

  int levels_;
  std::vector<Node> nodes_;
  std::vector<std::string> item_ids_;
};

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

// one line per item: `item_id c1 c2 ... cl`
inline std::string format_semantic_table(const SemanticTable& table) {
  std::ostringstream out;
  for (std::size_t i = 0; i < table.item_ids.size(); ++i) {
    out << table.item_ids[i];
    for (int c : table.codes[i]) out << ' ' << c;
    out << '\n';
  }
  return out.str();
}

inline SemanticTable parse_semantic_table(std::istream& in, int levels, int k_eff) {
  SemanticTable table;
  table.levels = levels;
  table.k_eff = k_eff;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream row(line);
    std::string item;
    if (!(row >> item)) throw Error("parse", "semantic table: bad line " + std::to_string(line_no));
    SemanticID codes;
    int c = 0;
    while (row >> c) {
      if (c < 0 || c >= k_eff)
        throw Error("parse", "semantic table: code out of range at line " + std::to_string(line_no));
      codes.push_back(c);
    }
    if (static_cast<int>(codes.size()) != levels)
      throw Error("parse", "semantic table: expected " + std::to_string(levels) +
                               " codes at line " + std::to_string(line_no));
    table.item_ids.push_back(std::move(item));
    table.codes.push_back(std::move(codes));
  }
  if (table.item_ids.empty()) throw Error("parse", "semantic table: no rows");
  table.rebuild();
  return table;
}

// codebooks reuse the embedding-file format; the id column is the code index
template <typename T>
std::string format_codebook_level(const CodebookSet<T>& cbs, int level) {
  ItemEmbeddings<T> view;
  const Mat<T>& c = cbs.centroids[static_cast<std::size_t>(level)];
  view.vectors = c;
  for (Eigen::Index r = 0; r < c.rows(); ++r) view.item_ids.push_back(std::to_string(r));
  return format_embeddings(view);
}

template <typename T = double>
CodebookSet<T> parse_codebooks(const std::vector<std::string>& level_texts, int base_k) {
  CodebookSet<T> cbs;
  cbs.levels = static_cast<int>(level_texts.size());
  cbs.base_k = base_k;
  for (const auto& text : level_texts) {
    std::istringstream in(text);
    ItemEmbeddings<T> view = parse_embeddings<T>(in);
    if (view.vectors.rows() != base_k + 1)
      throw Error("parse", "codebook level has wrong centroid count");
    cbs.dim = static_cast<int>(view.vectors.cols());
    cbs.centroids.push_back(std::move(view.vectors));
  }
  return cbs;
}

}  // namespace cascade
