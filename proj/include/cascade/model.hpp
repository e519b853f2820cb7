#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cascade/common.hpp"

namespace cascade {

// "a-b-c-d" -> {a,b,c,d}
inline std::vector<int> parse_dash_list(const std::string& text) {
  std::vector<int> out;
  std::string part;
  std::istringstream in(text);
  while (std::getline(in, part, '-')) {
    if (part.empty()) throw Error("config", "bad dash-separated list: " + text);
    std::size_t consumed = 0;
    int v = 0;
    try {
      v = std::stoi(part, &consumed);
    } catch (const std::exception&) {
      throw Error("config", "bad dash-separated list: " + text);
    }
    if (consumed != part.size()) throw Error("config", "bad dash-separated list: " + text);
    out.push_back(v);
  }
  if (out.empty()) throw Error("config", "empty dash-separated list");
  return out;
}

inline std::string format_dash_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += '-';
    out += std::to_string(v[i]);
  }
  return out;
}

inline std::vector<int> identity_schedule(int l) {
  std::vector<int> g(static_cast<std::size_t>(l));
  std::iota(g.begin(), g.end(), 1);
  return g;
}

inline std::vector<int> full_schedule(int l) {
  return std::vector<int>(static_cast<std::size_t>(l), l);
}

struct ModelConfig {
  int d = 32;
  int n_layers = 1;
  int n_heads = 2;
  int ff_dim = 64;
  int l = 4;       // semantic-ID length = reasoning stages
  int k_eff = 33;  // codes per level including the zero centroid
  std::vector<int> query_counts = {1, 1, 1, 1};
  std::vector<int> schedule = identity_schedule(4);  // g(t): visible history levels at stage t
  std::string mode = "care";                         // "baseline" | "care"
  std::string mask = "progressive";                  // "progressive" | "causal" (care ablation)
  int max_history = 8;
  std::string precision = "double";  // "single" | "double"

  int vocab() const { return l * k_eff; }
  int total_queries() const {
    return std::accumulate(query_counts.begin(), query_counts.end(), 0);
  }
  bool care() const { return mode == "care"; }

  int max_seq_len() const {
    if (care()) return max_history * l + total_queries() + (l - 1);
    return max_history * l + (l - 1);
  }

  void validate() const {
    if (d < 1 || n_layers < 1 || n_heads < 1 || ff_dim < 1)
      throw Error("config", "model dimensions must be positive");
    if (d % n_heads != 0) throw Error("config", "d must be divisible by n_heads");
    if (l < 1) throw Error("config", "l must be >= 1");
    if (k_eff < 2) throw Error("config", "k_eff must be >= 2");
    if (max_history < 1) throw Error("config", "max_history must be >= 1");
    if (mode != "baseline" && mode != "care")
      throw Error("config", "mode must be baseline or care");
    if (mask != "progressive" && mask != "causal")
      throw Error("config", "mask must be progressive or causal");
    if (precision != "single" && precision != "double")
      throw Error("config", "precision must be single or double");
    if (static_cast<int>(schedule.size()) != l)
      throw Error("config", "schedule must list one granularity per stage");
    for (std::size_t t = 0; t < schedule.size(); ++t) {
      if (schedule[t] < 1 || schedule[t] > l)
        throw Error("config", "schedule values must lie in [1, l]");
      if (t > 0 && schedule[t] < schedule[t - 1])
        throw Error("config", "schedule must be non-decreasing");
    }
    if (care()) {
      if (static_cast<int>(query_counts.size()) != l)
        throw Error("config", "query_counts must list one count per stage");
      for (int n : query_counts)
        if (n < 1) throw Error("config", "query_counts must all be >= 1 in care mode");
    }
  }

  // global token id for (level in [1,l], code in [0,k_eff))
  int token_id(int level, int code) const { return (level - 1) * k_eff + code; }
  int padding_id() const { return vocab(); }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d", c.d},
                     {"n_layers", c.n_layers},
                     {"n_heads", c.n_heads},
                     {"ff_dim", c.ff_dim},
                     {"l", c.l},
                     {"k_eff", c.k_eff},
                     {"query_counts", c.query_counts},
                     {"schedule", c.schedule},
                     {"mode", c.mode},
                     {"mask", c.mask},
                     {"max_history", c.max_history},
                     {"precision", c.precision}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("d").get_to(c.d);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("ff_dim").get_to(c.ff_dim);
  j.at("l").get_to(c.l);
  j.at("k_eff").get_to(c.k_eff);
  j.at("query_counts").get_to(c.query_counts);
  j.at("schedule").get_to(c.schedule);
  j.at("mode").get_to(c.mode);
  c.mask = j.value("mask", std::string("progressive"));
  j.at("max_history").get_to(c.max_history);
  j.at("precision").get_to(c.precision);
}

// ---------------------------------------------------------------------------
// Sequence layout
// ---------------------------------------------------------------------------

struct PosRole {
  enum Kind { History, Query, Token } kind = History;
  int item = 0;    // 1-based history item index (History)
  int level = 0;   // 1-based semantic level (History)
  int stage = 0;   // 1-based stage (Query, Token)
  int qindex = 0;  // 1-based query index within the stage (Query)
};

// Position order: all history tokens item-major level-minor, then per stage t
// the stage's queries Q(t,1..n_t) followed by the teacher-forced token C(t)
// (the final stage has no C). Baseline mode has no query positions; its
// stage-1 readout sits at the last history token and stage t>=2 at C(t-1).
struct SequenceLayout {
  int m_actual = 0;
  std::vector<PosRole> positions;
  std::vector<int> readouts;  // per stage: absolute readout position

  int size() const { return static_cast<int>(positions.size()); }
};

inline SequenceLayout build_layout(int m_actual, const ModelConfig& cfg) {
  if (m_actual == 0) throw Error("empty-history", "layout needs at least one history item");
  if (m_actual < 0 || m_actual > cfg.max_history)
    throw Error("config", "history length " + std::to_string(m_actual) +
                              " outside [1, " + std::to_string(cfg.max_history) + "]");
  SequenceLayout layout;
  layout.m_actual = m_actual;
  for (int i = 1; i <= m_actual; ++i)
    for (int v = 1; v <= cfg.l; ++v)
      layout.positions.push_back(PosRole{PosRole::History, i, v, 0, 0});
  layout.readouts.resize(static_cast<std::size_t>(cfg.l));
  if (cfg.care()) {
    for (int t = 1; t <= cfg.l; ++t) {
      for (int j = 1; j <= cfg.query_counts[static_cast<std::size_t>(t - 1)]; ++j)
        layout.positions.push_back(PosRole{PosRole::Query, 0, 0, t, j});
      layout.readouts[static_cast<std::size_t>(t - 1)] = layout.size() - 1;
      if (t < cfg.l) layout.positions.push_back(PosRole{PosRole::Token, 0, 0, t, 0});
    }
  } else {
    layout.readouts[0] = layout.size() - 1;
    for (int t = 1; t < cfg.l; ++t) {
      layout.positions.push_back(PosRole{PosRole::Token, 0, 0, t, 0});
      layout.readouts[static_cast<std::size_t>(t)] = layout.size() - 1;
    }
  }
  return layout;
}

// ---------------------------------------------------------------------------
// Progressive attention mask
// ---------------------------------------------------------------------------

using MaskMat = Mat<std::uint8_t>;

// Visible history band for a level-v history token: the granularity of the
// first stage whose encoding includes level v. A level no stage ever selects
// keeps plain within-band causality at its own level.
inline int history_band(int v, const std::vector<int>& schedule) {
  for (int g : schedule)
    if (g >= v) return g;
  return v;
}

// Visibility rules, care mode:
//   H(i,v) row  -> earlier H(i',v') with v' <= history_band(v)
//   Q(t,j)/C(t) -> H(i',v') with v' <= g(t), plus all earlier reasoning
//                  positions, plus self
// Baseline mode: plain lower-triangular causal mask.
inline MaskMat build_progressive_mask(const SequenceLayout& layout, const ModelConfig& cfg) {
  const int s = layout.size();
  MaskMat mask = MaskMat::Zero(s, s);
  if (!cfg.care() || cfg.mask == "causal") {
    for (int r = 0; r < s; ++r)
      for (int c = 0; c <= r; ++c) mask(r, c) = 1;
    return mask;
  }
  for (int r = 0; r < s; ++r) {
    const PosRole& row = layout.positions[static_cast<std::size_t>(r)];
    int hist_limit = 0;
    if (row.kind == PosRole::History)
      hist_limit = history_band(row.level, cfg.schedule);
    else
      hist_limit = cfg.schedule[static_cast<std::size_t>(row.stage - 1)];
    for (int c = 0; c <= r; ++c) {
      const PosRole& col = layout.positions[static_cast<std::size_t>(c)];
      if (col.kind == PosRole::History) {
        if (col.level <= hist_limit) mask(r, c) = 1;
      } else {
        if (row.kind != PosRole::History) mask(r, c) = 1;
      }
    }
  }
  return mask;
}

inline long long count_true(const MaskMat& mask) {
  long long n = 0;
  for (Eigen::Index r = 0; r < mask.rows(); ++r)
    for (Eigen::Index c = 0; c < mask.cols(); ++c) n += mask(r, c) ? 1 : 0;
  return n;
}

// ---------------------------------------------------------------------------
// Attention-pair accounting (dense causal compute model)
// ---------------------------------------------------------------------------

// one causal pass over all M*l history tokens
inline unsigned long long single_pass_history_pairs(int m, int l) {
  unsigned long long t = static_cast<unsigned long long>(m) * static_cast<unsigned long long>(l);
  return t * (t + 1) / 2;
}

// staged re-encoding: stage t re-encodes g(t)*M history tokens from scratch
inline unsigned long long staged_history_pairs(int m, int l, const std::vector<int>& schedule) {
  if (static_cast<int>(schedule.size()) != l)
    throw Error("config", "schedule must list one granularity per stage");
  unsigned long long total = 0;
  for (int g : schedule) {
    unsigned long long s = static_cast<unsigned long long>(g) * static_cast<unsigned long long>(m);
    total += s * (s + 1) / 2;
  }
  return total;
}

// leading-order staged/single ratio: sum_t g(t)^2 / l^2
inline double staged_over_single_ratio(int l, const std::vector<int>& schedule) {
  if (static_cast<int>(schedule.size()) != l)
    throw Error("config", "schedule must list one granularity per stage");
  double num = 0;
  for (int g : schedule) num += static_cast<double>(g) * static_cast<double>(g);
  return num / (static_cast<double>(l) * static_cast<double>(l));
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T = double>
struct LayerParams {
  Mat<T> wq, wk, wv, wo;          // [d x d]
  Mat<T> bq, bk, bv, bo;          // [1 x d]
  Mat<T> w1, w2;                  // [d x ff], [ff x d]
  Mat<T> b1, b2;                  // [1 x ff], [1 x d]
  Mat<T> ln1_g, ln1_b, ln2_g, ln2_b;  // [1 x d]
};

template <typename T = double>
struct ModelParams {
  ModelConfig cfg;
  Mat<T> token_emb;  // [vocab + 1 x d], last row is the padding token
  Mat<T> pos_emb;    // [max_seq_len x d]
  std::vector<LayerParams<T>> layers;
  Mat<T> lnf_g, lnf_b;  // [1 x d]
  Mat<T> w_out;         // [d x vocab]
  Mat<T> b_out;         // [1 x vocab]
  std::vector<Mat<T>> queries;  // per stage: [n_t x d] (care mode)

  std::vector<std::pair<std::string, Mat<T>*>> named_tensors() {
    std::vector<std::pair<std::string, Mat<T>*>> out;
    out.emplace_back("token_emb", &token_emb);
    out.emplace_back("pos_emb", &pos_emb);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      auto& ly = layers[i];
      std::string p = "layer" + std::to_string(i) + ".";
      out.emplace_back(p + "wq", &ly.wq);
      out.emplace_back(p + "wk", &ly.wk);
      out.emplace_back(p + "wv", &ly.wv);
      out.emplace_back(p + "wo", &ly.wo);
      out.emplace_back(p + "bq", &ly.bq);
      out.emplace_back(p + "bk", &ly.bk);
      out.emplace_back(p + "bv", &ly.bv);
      out.emplace_back(p + "bo", &ly.bo);
      out.emplace_back(p + "w1", &ly.w1);
      out.emplace_back(p + "w2", &ly.w2);
      out.emplace_back(p + "b1", &ly.b1);
      out.emplace_back(p + "b2", &ly.b2);
      out.emplace_back(p + "ln1_g", &ly.ln1_g);
      out.emplace_back(p + "ln1_b", &ly.ln1_b);
      out.emplace_back(p + "ln2_g", &ly.ln2_g);
      out.emplace_back(p + "ln2_b", &ly.ln2_b);
    }
    out.emplace_back("lnf_g", &lnf_g);
    out.emplace_back("lnf_b", &lnf_b);
    out.emplace_back("w_out", &w_out);
    out.emplace_back("b_out", &b_out);
    for (std::size_t t = 0; t < queries.size(); ++t)
      out.emplace_back("queries" + std::to_string(t), &queries[t]);
    return out;
  }
};

template <typename T = double>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams<T> p;
  p.cfg = cfg;
  Rng rng(Rng::derive(seed, 0x494e4954ULL));  // "INIT"
  const T scale = static_cast<T>(0.02);
  auto fill = [&](Mat<T>& m, Eigen::Index r, Eigen::Index c) {
    m.resize(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) m(i, j) = scale * static_cast<T>(rng.gaussian());
  };
  fill(p.token_emb, cfg.vocab() + 1, cfg.d);
  fill(p.pos_emb, cfg.max_seq_len(), cfg.d);
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& ly : p.layers) {
    fill(ly.wq, cfg.d, cfg.d);
    fill(ly.wk, cfg.d, cfg.d);
    fill(ly.wv, cfg.d, cfg.d);
    fill(ly.wo, cfg.d, cfg.d);
    ly.bq = Mat<T>::Zero(1, cfg.d);
    ly.bk = Mat<T>::Zero(1, cfg.d);
    ly.bv = Mat<T>::Zero(1, cfg.d);
    ly.bo = Mat<T>::Zero(1, cfg.d);
    fill(ly.w1, cfg.d, cfg.ff_dim);
    fill(ly.w2, cfg.ff_dim, cfg.d);
    ly.b1 = Mat<T>::Zero(1, cfg.ff_dim);
    ly.b2 = Mat<T>::Zero(1, cfg.d);
    ly.ln1_g = Mat<T>::Ones(1, cfg.d);
    ly.ln1_b = Mat<T>::Zero(1, cfg.d);
    ly.ln2_g = Mat<T>::Ones(1, cfg.d);
    ly.ln2_b = Mat<T>::Zero(1, cfg.d);
  }
  p.lnf_g = Mat<T>::Ones(1, cfg.d);
  p.lnf_b = Mat<T>::Zero(1, cfg.d);
  fill(p.w_out, cfg.d, cfg.vocab());
  p.b_out = Mat<T>::Zero(1, cfg.vocab());
  if (cfg.care()) {
    p.queries.resize(static_cast<std::size_t>(cfg.l));
    for (int t = 0; t < cfg.l; ++t)
      fill(p.queries[static_cast<std::size_t>(t)], cfg.query_counts[static_cast<std::size_t>(t)],
           cfg.d);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Checkpoint IO (versioned JSON container; doubles round-trip exactly)
// ---------------------------------------------------------------------------

inline constexpr const char* kCheckpointFormat = "cascade-checkpoint-v1";

template <typename T>
nlohmann::json checkpoint_to_json(ModelParams<T>& params) {
  nlohmann::json tensors = nlohmann::json::object();
  for (auto& [name, mat] : params.named_tensors()) {
    std::vector<double> data;
    data.reserve(static_cast<std::size_t>(mat->size()));
    for (Eigen::Index r = 0; r < mat->rows(); ++r)
      for (Eigen::Index c = 0; c < mat->cols(); ++c)
        data.push_back(static_cast<double>((*mat)(r, c)));
    tensors[name] = {{"rows", mat->rows()}, {"cols", mat->cols()}, {"data", std::move(data)}};
  }
  return nlohmann::json{
      {"format", kCheckpointFormat}, {"config", params.cfg}, {"tensors", std::move(tensors)}};
}

template <typename T = double>
ModelParams<T> checkpoint_from_json(const nlohmann::json& j) {
  if (!j.contains("format") || j.at("format").get<std::string>() != kCheckpointFormat)
    throw Error("parse", "unrecognized checkpoint format tag");
  ModelConfig cfg = j.at("config").get<ModelConfig>();
  ModelParams<T> params = init_params<T>(cfg, 0);
  const auto& tensors = j.at("tensors");
  for (auto& [name, mat] : params.named_tensors()) {
    if (!tensors.contains(name)) throw Error("parse", "checkpoint missing tensor " + name);
    const auto& tj = tensors.at(name);
    Eigen::Index rows = tj.at("rows").template get<Eigen::Index>();
    Eigen::Index cols = tj.at("cols").template get<Eigen::Index>();
    if (rows != mat->rows() || cols != mat->cols())
      throw Error("parse", "checkpoint tensor " + name + " has wrong shape");
    const auto& data = tj.at("data");
    if (static_cast<Eigen::Index>(data.size()) != rows * cols)
      throw Error("parse", "checkpoint tensor " + name + " has wrong element count");
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c)
        (*mat)(r, c) = static_cast<T>(data[k++].template get<double>());
  }
  return params;
}

}  // namespace cascade
