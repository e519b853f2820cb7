#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <sstream>

#include "cascade/dataset.hpp"

using namespace cascade;

TEST_CASE("ingestion sorts per-user by timestamp with input order as tie-break") {
  std::istringstream in(
      "# comment line\n"
      "u1\ti3\t30\n"
      "u1\ti1\t10\n"
      "\n"
      "u2\ti9\t5\r\n"
      "u1\ti2\t10\n"
      "u1\ti4\t20\n");
  InteractionLog log = ingest_interactions(in);
  REQUIRE(log.user_count() == 2);
  const auto& seq = log.by_user.at("u1");
  REQUIRE(seq.size() == 4);
  CHECK(seq[0].item_id == "i1");  // ts 10, first in input
  CHECK(seq[1].item_id == "i2");  // ts 10, later in input
  CHECK(seq[2].item_id == "i4");
  CHECK(seq[3].item_id == "i3");
  CHECK(log.by_user.at("u2").front().item_id == "i9");
  CHECK(log.items == std::vector<std::string>{"i1", "i2", "i3", "i4", "i9"});
}

TEST_CASE("ingestion rejects malformed rows with the line number") {
  std::istringstream in("u1\ti1\t10\nu1\tmissing_ts\n");
  try {
    ingest_interactions(in);
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(e.code() == "parse");
    CHECK(std::string(e.what()).find("2") != std::string::npos);
  }
}

TEST_CASE("ingestion rejects an empty log") {
  std::istringstream in("# nothing\n\n");
  CHECK_THROWS_AS(ingest_interactions(in), Error);
}

TEST_CASE("interaction round trip preserves order and bytes") {
  std::istringstream in("u1\ti2\t7\nu1\ti1\t3\nu2\ti5\t1\n");
  InteractionLog log = ingest_interactions(in);
  std::string text = format_interactions(log);
  std::istringstream again(text);
  InteractionLog log2 = ingest_interactions(again);
  CHECK(format_interactions(log2) == text);
}

static InteractionLog make_log(const std::map<std::string, int>& user_lengths) {
  InteractionLog log;
  for (const auto& [user, n] : user_lengths) {
    for (int t = 0; t < n; ++t)
      log.by_user[user].push_back({user, "item" + std::to_string(t), t});
  }
  return log;
}

TEST_CASE("temporal split holds out the last tenth for valid and test, minimum one each") {
  InteractionLog log = make_log({{"u10", 10}, {"u3", 3}, {"u20", 20}, {"u29", 29}});
  SplitDataset split = temporal_split(log);
  auto sizes = [&](const std::string& u) {
    const auto& s = split.by_user.at(u);
    return std::array<std::size_t, 3>{s.train.size(), s.valid.size(), s.test.size()};
  };
  CHECK(sizes("u10") == std::array<std::size_t, 3>{8, 1, 1});
  CHECK(sizes("u3") == std::array<std::size_t, 3>{1, 1, 1});
  CHECK(sizes("u20") == std::array<std::size_t, 3>{16, 2, 2});
  CHECK(sizes("u29") == std::array<std::size_t, 3>{25, 2, 2});

  // the held-out interactions are the temporally last ones
  const auto& s = split.by_user.at("u10");
  CHECK(s.valid.front().item_id == "item8");
  CHECK(s.test.front().item_id == "item9");
}

TEST_CASE("users with fewer than three interactions are dropped with a warning") {
  InteractionLog log = make_log({{"tiny", 2}, {"ok", 5}});
  std::vector<std::string> warnings;
  SplitDataset split = temporal_split(log, [&](const std::string& m) { warnings.push_back(m); });
  CHECK(split.by_user.count("tiny") == 0);
  CHECK(split.by_user.count("ok") == 1);
  REQUIRE(split.dropped_users == std::vector<std::string>{"tiny"});
  REQUIRE(warnings.size() == 1);
  CHECK(warnings[0].find("tiny") != std::string::npos);
}

TEST_CASE("a log with no splittable users is an error") {
  InteractionLog log = make_log({{"a", 1}, {"b", 2}});
  try {
    temporal_split(log);
    FAIL("expected error");
  } catch (const Error& e) {
    CHECK(e.code() == "no-splittable-users");
  }
}

TEST_CASE("synthetic generation is deterministic and respects its config") {
  SynthConfig cfg;
  cfg.n_users = 80;
  cfg.n_items = 50;
  cfg.n_clusters = 5;
  cfg.history_min = 4;
  cfg.history_max = 9;
  cfg.embedding_dim = 8;
  auto [log_a, emb_a] = generate_synthetic(cfg, 123);
  auto [log_b, emb_b] = generate_synthetic(cfg, 123);
  CHECK(format_interactions(log_a) == format_interactions(log_b));
  CHECK(format_embeddings(emb_a) == format_embeddings(emb_b));

  auto [log_c, emb_c] = generate_synthetic(cfg, 124);
  CHECK(format_interactions(log_a) != format_interactions(log_c));

  CHECK(log_a.user_count() == 80);
  CHECK(emb_a.item_ids.size() == 50);
  CHECK(emb_a.vectors.rows() == 50);
  CHECK(emb_a.vectors.cols() == 8);
  for (const auto& [user, seq] : log_a.by_user) {
    CHECK(seq.size() >= 4);
    CHECK(seq.size() <= 9);
    for (std::size_t t = 1; t < seq.size(); ++t)
      CHECK(seq[t - 1].timestamp <= seq[t].timestamp);
  }
}

TEST_CASE("synthetic popularity is heavy-tailed with a zipf-like log-log slope") {
  SynthConfig cfg;
  cfg.n_users = 500;
  cfg.n_items = 200;
  cfg.n_clusters = 16;
  cfg.zipf_exponent = 1.2;
  auto [log, emb] = generate_synthetic(cfg, 42);
  (void)emb;

  std::map<std::string, long long> freq;
  for (const auto& [user, seq] : log.by_user)
    for (const auto& inter : seq) ++freq[inter.item_id];
  std::vector<long long> counts;
  for (const auto& [item, n] : freq) counts.push_back(n);
  std::sort(counts.rbegin(), counts.rend());

  // least-squares slope of log(freq) vs log(rank) over the top 50 items
  int n = 50;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int r = 0; r < n; ++r) {
    double x = std::log(static_cast<double>(r + 1));
    double y = std::log(static_cast<double>(counts[static_cast<std::size_t>(r)]));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  INFO("fitted slope " << slope);
  CHECK(slope < -0.5);
  CHECK(slope > -1.8);
  // the most popular item clearly dominates the median one
  CHECK(counts.front() >= 4 * counts[counts.size() / 2]);
}

TEST_CASE("example construction slides over train and anchors valid/test once per user") {
  InteractionLog log = make_log({{"u", 10}});  // item0..item9, split 8/1/1
  SplitDataset split = temporal_split(log);
  ExampleSets ex = build_examples(split, 4);

  REQUIRE(ex.train.size() == 7);  // targets item1..item7
  CHECK(ex.train.front().history == std::vector<std::string>{"item0"});
  CHECK(ex.train.front().target == "item1");
  CHECK(ex.train.back().history ==
        std::vector<std::string>{"item3", "item4", "item5", "item6"});
  CHECK(ex.train.back().target == "item7");

  REQUIRE(ex.valid.size() == 1);
  CHECK(ex.valid[0].history == std::vector<std::string>{"item4", "item5", "item6", "item7"});
  CHECK(ex.valid[0].target == "item8");

  REQUIRE(ex.test.size() == 1);
  CHECK(ex.test[0].history == std::vector<std::string>{"item5", "item6", "item7", "item8"});
  CHECK(ex.test[0].target == "item9");
}

TEST_CASE("histories never exceed max_history") {
  InteractionLog log = make_log({{"u", 30}});
  SplitDataset split = temporal_split(log);
  ExampleSets ex = build_examples(split, 6);
  for (const auto& e : ex.train) CHECK(e.history.size() <= 6);
  CHECK(ex.valid[0].history.size() == 6);
  CHECK(ex.test[0].history.size() == 6);
}

TEST_CASE("embedding file format round-trips doubles exactly") {
  ItemEmbeddings<double> emb;
  emb.item_ids = {"a", "b"};
  emb.vectors.resize(2, 3);
  emb.vectors << 0.1, -2.5e-17, 3.0, 1.0 / 3.0, 2e300, -0.0;
  emb.rebuild_index();
  std::string text = format_embeddings(emb);
  std::istringstream in(text);
  ItemEmbeddings<double> back = parse_embeddings<double>(in);
  REQUIRE(back.item_ids == emb.item_ids);
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 3; ++c) CHECK(back.vectors(r, c) == emb.vectors(r, c));
  CHECK(back.index.at("b") == 1);
}

TEST_CASE("embedding parser reports malformed input") {
  std::istringstream bad_header("not_a_number 3\n");
  CHECK_THROWS_AS(parse_embeddings<double>(bad_header), Error);
  std::istringstream truncated("2 3\na 1 2 3\nb 1 2\n");
  CHECK_THROWS_AS(parse_embeddings<double>(truncated), Error);
}
