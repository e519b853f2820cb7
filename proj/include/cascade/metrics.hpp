#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"

#include "cascade/common.hpp"

namespace cascade {

// single ground-truth next-item protocol
inline double recall_at_k(const std::vector<std::string>& ranked, const std::string& target,
                          int k) {
  int limit = std::min<int>(k, static_cast<int>(ranked.size()));
  for (int r = 0; r < limit; ++r)
    if (ranked[static_cast<std::size_t>(r)] == target) return 1.0;
  return 0.0;
}

inline double ndcg_at_k(const std::vector<std::string>& ranked, const std::string& target,
                        int k) {
  int limit = std::min<int>(k, static_cast<int>(ranked.size()));
  for (int r = 0; r < limit; ++r)
    if (ranked[static_cast<std::size_t>(r)] == target)
      return 1.0 / std::log2(static_cast<double>(r) + 2.0);
  return 0.0;
}

// unique items across all top-K lists / (U * K)
inline double divr_at_k(const std::vector<std::vector<std::string>>& lists, int k) {
  if (lists.empty() || k < 1) throw Error("config", "divr needs lists and K >= 1");
  std::set<std::string> unique;
  for (const auto& list : lists) {
    int limit = std::min<int>(k, static_cast<int>(list.size()));
    for (int r = 0; r < limit; ++r) unique.insert(list[static_cast<std::size_t>(r)]);
  }
  return static_cast<double>(unique.size()) /
         (static_cast<double>(lists.size()) * static_cast<double>(k));
}

// share of all slots taken by the 5 most recommended items
// (ties: larger slot count first, then smaller item_id)
inline double orr_at_k(const std::vector<std::vector<std::string>>& lists, int k) {
  if (lists.empty() || k < 1) throw Error("config", "orr needs lists and K >= 1");
  std::map<std::string, long long> slots;
  for (const auto& list : lists) {
    int limit = std::min<int>(k, static_cast<int>(list.size()));
    for (int r = 0; r < limit; ++r) ++slots[list[static_cast<std::size_t>(r)]];
  }
  std::vector<std::pair<std::string, long long>> order(slots.begin(), slots.end());
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  long long top = 0;
  for (std::size_t i = 0; i < order.size() && i < 5; ++i) top += order[i].second;
  return static_cast<double>(top) /
         (static_cast<double>(lists.size()) * static_cast<double>(k));
}

// ---------------------------------------------------------------------------
// Popularity grouping
// ---------------------------------------------------------------------------

struct PopularityGrouping {
  int groups = 0;
  std::vector<int> group_of;  // by code index, 1-based group; group 1 = most frequent
};

// codes sorted by descending training frequency (ties by code index), chunked
// into G near-equal groups with the remainder going to the earlier groups
inline PopularityGrouping popularity_groups(const std::vector<long long>& train_freq, int g,
                                            const std::function<void(const std::string&)>& warn = {}) {
  const int n = static_cast<int>(train_freq.size());
  if (n < 1 || g < 1) throw Error("config", "grouping needs codes and G >= 1");
  PopularityGrouping out;
  out.groups = g;
  if (n < g) {
    out.groups = n;
    if (warn)
      warn("only " + std::to_string(n) + " codes for G=" + std::to_string(g) +
           "; one code per group");
  }
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (train_freq[static_cast<std::size_t>(a)] != train_freq[static_cast<std::size_t>(b)])
      return train_freq[static_cast<std::size_t>(a)] > train_freq[static_cast<std::size_t>(b)];
    return a < b;
  });
  out.group_of.assign(static_cast<std::size_t>(n), 0);
  const int base = n / out.groups;
  const int rem = n % out.groups;
  int at = 0;
  for (int grp = 1; grp <= out.groups; ++grp) {
    int size = base + (grp <= rem ? 1 : 0);
    for (int i = 0; i < size; ++i)
      out.group_of[static_cast<std::size_t>(order[static_cast<std::size_t>(at++)])] = grp;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Bias report
// ---------------------------------------------------------------------------

struct LevelBias {
  std::vector<double> test_frequency;       // per group, sums to 1
  std::vector<double> generated_frequency;  // per group, sums to 1
  std::vector<std::optional<double>> amplification;  // generated / test, null where test = 0
  double token_recall_at_1 = 0;
};

struct BiasReport {
  int groups = 0;
  std::vector<LevelBias> levels;
  std::vector<double> item_test_frequency;
  std::vector<double> item_generated_frequency;
  std::vector<std::optional<double>> item_amplification;
};

namespace detail {

inline std::vector<double> normalized_group_counts(const std::vector<long long>& counts) {
  long long total = 0;
  for (long long c : counts) total += c;
  std::vector<double> out(counts.size(), 0.0);
  if (total == 0) return out;
  for (std::size_t i = 0; i < counts.size(); ++i)
    out[i] = static_cast<double>(counts[i]) / static_cast<double>(total);
  return out;
}

inline std::vector<std::optional<double>> amplification_ratios(const std::vector<double>& gen,
                                                               const std::vector<double>& test) {
  std::vector<std::optional<double>> out(gen.size());
  for (std::size_t i = 0; i < gen.size(); ++i) {
    if (test[i] == 0.0)
      out[i] = std::nullopt;
    else
      out[i] = gen[i] / test[i];
  }
  return out;
}

}  // namespace detail

// Token-level comparison from the teacher-forced argmax codes, plus an
// item-level comparison from the free-running top-K lists.
inline BiasReport bias_report(const std::vector<std::vector<int>>& predicted_codes,
                              const std::vector<std::vector<int>>& target_codes,
                              const std::vector<PopularityGrouping>& level_groupings,
                              const std::vector<std::vector<std::string>>& top_k_lists,
                              const std::vector<std::string>& test_target_items,
                              const PopularityGrouping& item_grouping,
                              const std::unordered_map<std::string, int>& item_index) {
  if (predicted_codes.size() != target_codes.size())
    throw Error("config", "prediction/target count mismatch");
  const int l = static_cast<int>(level_groupings.size());

  BiasReport report;
  report.groups = level_groupings.empty() ? 0 : level_groupings.front().groups;
  report.levels.resize(static_cast<std::size_t>(l));
  for (int lv = 0; lv < l; ++lv) {
    const PopularityGrouping& grouping = level_groupings[static_cast<std::size_t>(lv)];
    std::vector<long long> gen_counts(static_cast<std::size_t>(grouping.groups), 0);
    std::vector<long long> test_counts(static_cast<std::size_t>(grouping.groups), 0);
    long long hits = 0;
    for (std::size_t i = 0; i < predicted_codes.size(); ++i) {
      int pc = predicted_codes[i][static_cast<std::size_t>(lv)];
      int tc = target_codes[i][static_cast<std::size_t>(lv)];
      ++gen_counts[static_cast<std::size_t>(grouping.group_of[static_cast<std::size_t>(pc)] - 1)];
      ++test_counts[static_cast<std::size_t>(grouping.group_of[static_cast<std::size_t>(tc)] - 1)];
      if (pc == tc) ++hits;
    }
    LevelBias& lb = report.levels[static_cast<std::size_t>(lv)];
    lb.generated_frequency = detail::normalized_group_counts(gen_counts);
    lb.test_frequency = detail::normalized_group_counts(test_counts);
    lb.amplification = detail::amplification_ratios(lb.generated_frequency, lb.test_frequency);
    lb.token_recall_at_1 = predicted_codes.empty()
                               ? 0.0
                               : static_cast<double>(hits) /
                                     static_cast<double>(predicted_codes.size());
  }

  std::vector<long long> item_gen(static_cast<std::size_t>(item_grouping.groups), 0);
  std::vector<long long> item_test(static_cast<std::size_t>(item_grouping.groups), 0);
  auto group_of_item = [&](const std::string& item) -> int {
    auto it = item_index.find(item);
    if (it == item_index.end()) throw Error("config", "item missing from grouping: " + item);
    return item_grouping.group_of[static_cast<std::size_t>(it->second)];
  };
  for (const auto& list : top_k_lists)
    for (const auto& item : list) ++item_gen[static_cast<std::size_t>(group_of_item(item) - 1)];
  for (const auto& item : test_target_items)
    ++item_test[static_cast<std::size_t>(group_of_item(item) - 1)];
  report.item_generated_frequency = detail::normalized_group_counts(item_gen);
  report.item_test_frequency = detail::normalized_group_counts(item_test);
  report.item_amplification = detail::amplification_ratios(report.item_generated_frequency,
                                                           report.item_test_frequency);
  return report;
}

inline nlohmann::json bias_report_to_json(const BiasReport& report) {
  auto ratios = [](const std::vector<std::optional<double>>& v) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& x : v) {
      if (x)
        arr.push_back(*x);
      else
        arr.push_back(nullptr);
    }
    return arr;
  };
  nlohmann::json levels = nlohmann::json::array();
  for (const auto& lb : report.levels)
    levels.push_back({{"test_frequency", lb.test_frequency},
                      {"generated_frequency", lb.generated_frequency},
                      {"amplification", ratios(lb.amplification)},
                      {"token_recall_at_1", lb.token_recall_at_1}});
  return nlohmann::json{{"groups", report.groups},
                        {"levels", levels},
                        {"items",
                         {{"test_frequency", report.item_test_frequency},
                          {"generated_frequency", report.item_generated_frequency},
                          {"amplification", ratios(report.item_amplification)}}}};
}

// occurrence counts per level over a set of semantic-ID code paths
inline std::vector<std::vector<long long>> token_frequencies(
    const std::vector<std::vector<int>>& code_paths, int l, int k_eff) {
  std::vector<std::vector<long long>> out(static_cast<std::size_t>(l),
                                          std::vector<long long>(static_cast<std::size_t>(k_eff), 0));
  for (const auto& codes : code_paths)
    for (int lv = 0; lv < l; ++lv)
      ++out[static_cast<std::size_t>(lv)]
           [static_cast<std::size_t>(codes[static_cast<std::size_t>(lv)])];
  return out;
}

}  // namespace cascade
