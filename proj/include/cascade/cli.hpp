#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "cascade/common.hpp"
#include "cascade/dataset.hpp"
#include "cascade/decoding.hpp"
#include "cascade/metrics.hpp"
#include "cascade/model.hpp"
#include "cascade/tokenizer.hpp"
#include "cascade/training.hpp"
#include "cascade/transformer.hpp"

namespace cascade {

inline constexpr const char* kToolVersion = "1.0.0";

// ---------------------------------------------------------------------------
// Experiment configuration (everything has a default; a config file and then
// command-line flags overlay it)
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::uint64_t seed = 42;
  std::string out_dir = "out";

  std::string source = "synthetic";  // "synthetic" or a path to an interactions file
  std::string embeddings_path;       // required when source is a file path
  SynthConfig synth;

  int tok_levels = 4;
  int tok_k = 32;
  int tok_max_iters = 100;
  double tok_tol = 1e-6;

  int d = 32;
  int n_layers = 1;
  int n_heads = 2;
  int ff_dim = 64;
  int max_history = 8;
  std::string query_counts = "default";  // one query per stage unless overridden
  std::string schedule = "identity";     // identity | full | dash list
  std::string mode = "care";
  std::string mask = "progressive";
  std::string precision = "double";

  TrainConfig train;

  int beam_size = 20;
  std::vector<int> k_list = {5, 10, 20};
  int groups = 8;

  std::vector<int> bench_m = {2, 4, 8, 16};
  int bench_reps = 21;

  ModelConfig model_config() const {
    ModelConfig mc;
    mc.d = d;
    mc.n_layers = n_layers;
    mc.n_heads = n_heads;
    mc.ff_dim = ff_dim;
    mc.l = tok_levels;
    mc.k_eff = tok_k + 1;
    mc.query_counts = query_counts == "default"
                          ? std::vector<int>(static_cast<std::size_t>(tok_levels), 1)
                          : parse_dash_list(query_counts);
    if (schedule == "identity")
      mc.schedule = identity_schedule(tok_levels);
    else if (schedule == "full")
      mc.schedule = full_schedule(tok_levels);
    else
      mc.schedule = parse_dash_list(schedule);
    mc.mode = mode;
    mc.mask = mask;
    mc.max_history = max_history;
    mc.precision = precision;
    mc.validate();
    return mc;
  }

  void validate() const {
    if (k_list.empty()) throw Error("config", "k_list must not be empty");
    for (int k : k_list)
      if (k < 1) throw Error("config", "k_list entries must be >= 1");
    if (beam_size < *std::max_element(k_list.begin(), k_list.end()))
      throw Error("config", "beam_size must be >= max k");
    if (groups < 1) throw Error("config", "analysis groups must be >= 1");
    if (bench_m.empty()) throw Error("config", "bench m_list must not be empty");
    if (bench_reps < 1) throw Error("config", "bench repetitions must be >= 1");
    if (source != "synthetic" && embeddings_path.empty())
      throw Error("config", "file-backed datasets need dataset.embeddings");
    synth.validate();
    train.validate();
    model_config();
  }
};

inline nlohmann::json experiment_to_json(const ExperimentConfig& c) {
  return nlohmann::json{
      {"seed", c.seed},
      {"out_dir", c.out_dir},
      {"dataset",
       {{"source", c.source},
        {"embeddings", c.embeddings_path},
        {"synth",
         {{"n_users", c.synth.n_users},
          {"n_items", c.synth.n_items},
          {"n_clusters", c.synth.n_clusters},
          {"zipf_exponent", c.synth.zipf_exponent},
          {"history_min", c.synth.history_min},
          {"history_max", c.synth.history_max},
          {"embedding_dim", c.synth.embedding_dim},
          {"noise_scale", c.synth.noise_scale}}}}},
      {"tokenizer",
       {{"levels", c.tok_levels},
        {"k", c.tok_k},
        {"max_iters", c.tok_max_iters},
        {"tol", c.tok_tol}}},
      {"model",
       {{"d", c.d},
        {"n_layers", c.n_layers},
        {"n_heads", c.n_heads},
        {"ff_dim", c.ff_dim},
        {"max_history", c.max_history},
        {"query_counts", c.query_counts},
        {"schedule", c.schedule},
        {"mode", c.mode},
        {"mask", c.mask},
        {"precision", c.precision}}},
      {"train",
       {{"alpha", c.train.alpha},
        {"learning_rate", c.train.learning_rate},
        {"batch_size", c.train.batch_size},
        {"max_epochs", c.train.max_epochs},
        {"patience", c.train.patience},
        {"valid_eval_users", c.train.valid_eval_users},
        {"valid_beam", c.train.valid_beam},
        {"stop_at_train_loss", c.train.stop_at_train_loss}}},
      {"decode", {{"beam_size", c.beam_size}, {"k_list", c.k_list}}},
      {"analysis", {{"groups", c.groups}}},
      {"bench", {{"m_list", c.bench_m}, {"repetitions", c.bench_reps}}}};
}

// overlays only the keys present in j
inline void apply_experiment_json(ExperimentConfig& c, const nlohmann::json& j) {
  c.seed = j.value("seed", c.seed);
  c.out_dir = j.value("out_dir", c.out_dir);
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    c.source = d.value("source", c.source);
    c.embeddings_path = d.value("embeddings", c.embeddings_path);
    if (d.contains("synth")) {
      const auto& s = d.at("synth");
      c.synth.n_users = s.value("n_users", c.synth.n_users);
      c.synth.n_items = s.value("n_items", c.synth.n_items);
      c.synth.n_clusters = s.value("n_clusters", c.synth.n_clusters);
      c.synth.zipf_exponent = s.value("zipf_exponent", c.synth.zipf_exponent);
      c.synth.history_min = s.value("history_min", c.synth.history_min);
      c.synth.history_max = s.value("history_max", c.synth.history_max);
      c.synth.embedding_dim = s.value("embedding_dim", c.synth.embedding_dim);
      c.synth.noise_scale = s.value("noise_scale", c.synth.noise_scale);
    }
  }
  if (j.contains("tokenizer")) {
    const auto& t = j.at("tokenizer");
    c.tok_levels = t.value("levels", c.tok_levels);
    c.tok_k = t.value("k", c.tok_k);
    c.tok_max_iters = t.value("max_iters", c.tok_max_iters);
    c.tok_tol = t.value("tol", c.tok_tol);
  }
  if (j.contains("model")) {
    const auto& m = j.at("model");
    c.d = m.value("d", c.d);
    c.n_layers = m.value("n_layers", c.n_layers);
    c.n_heads = m.value("n_heads", c.n_heads);
    c.ff_dim = m.value("ff_dim", c.ff_dim);
    c.max_history = m.value("max_history", c.max_history);
    c.query_counts = m.value("query_counts", c.query_counts);
    c.schedule = m.value("schedule", c.schedule);
    c.mode = m.value("mode", c.mode);
    c.mask = m.value("mask", c.mask);
    c.precision = m.value("precision", c.precision);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    c.train.alpha = t.value("alpha", c.train.alpha);
    c.train.learning_rate = t.value("learning_rate", c.train.learning_rate);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    c.train.max_epochs = t.value("max_epochs", c.train.max_epochs);
    c.train.patience = t.value("patience", c.train.patience);
    c.train.valid_eval_users = t.value("valid_eval_users", c.train.valid_eval_users);
    c.train.valid_beam = t.value("valid_beam", c.train.valid_beam);
    c.train.stop_at_train_loss = t.value("stop_at_train_loss", c.train.stop_at_train_loss);
  }
  if (j.contains("decode")) {
    const auto& d = j.at("decode");
    c.beam_size = d.value("beam_size", c.beam_size);
    if (d.contains("k_list")) c.k_list = d.at("k_list").get<std::vector<int>>();
  }
  if (j.contains("analysis")) c.groups = j.at("analysis").value("groups", c.groups);
  if (j.contains("bench")) {
    const auto& b = j.at("bench");
    if (b.contains("m_list")) c.bench_m = b.at("m_list").get<std::vector<int>>();
    c.bench_reps = b.value("repetitions", c.bench_reps);
  }
}

namespace cli_detail {

inline std::vector<int> parse_comma_list(const std::string& text) {
  std::vector<int> out;
  std::string part;
  std::istringstream in(text);
  while (std::getline(in, part, ',')) {
    try {
      out.push_back(std::stoi(part));
    } catch (const std::exception&) {
      throw Error("config", "bad comma-separated list: " + text);
    }
  }
  if (out.empty()) throw Error("config", "empty comma-separated list");
  return out;
}

inline void apply_flag(ExperimentConfig& c, const std::string& key, const std::string& value) {
  try {
    if (key == "out")
      c.out_dir = value;
    else if (key == "seed")
      c.seed = std::stoull(value);
    else if (key == "source")
      c.source = value;
    else if (key == "embeddings")
      c.embeddings_path = value;
    else if (key == "users")
      c.synth.n_users = std::stoi(value);
    else if (key == "items")
      c.synth.n_items = std::stoi(value);
    else if (key == "clusters")
      c.synth.n_clusters = std::stoi(value);
    else if (key == "zipf")
      c.synth.zipf_exponent = std::stod(value);
    else if (key == "history_min")
      c.synth.history_min = std::stoi(value);
    else if (key == "history_max")
      c.synth.history_max = std::stoi(value);
    else if (key == "embedding_dim")
      c.synth.embedding_dim = std::stoi(value);
    else if (key == "noise")
      c.synth.noise_scale = std::stod(value);
    else if (key == "l")
      c.tok_levels = std::stoi(value);
    else if (key == "k")
      c.tok_k = std::stoi(value);
    else if (key == "d")
      c.d = std::stoi(value);
    else if (key == "layers")
      c.n_layers = std::stoi(value);
    else if (key == "heads")
      c.n_heads = std::stoi(value);
    else if (key == "ff")
      c.ff_dim = std::stoi(value);
    else if (key == "max_history")
      c.max_history = std::stoi(value);
    else if (key == "query_counts")
      c.query_counts = value;
    else if (key == "schedule")
      c.schedule = value;
    else if (key == "mode")
      c.mode = value;
    else if (key == "mask")
      c.mask = value;
    else if (key == "precision")
      c.precision = value;
    else if (key == "alpha")
      c.train.alpha = std::stod(value);
    else if (key == "lr")
      c.train.learning_rate = std::stod(value);
    else if (key == "batch_size")
      c.train.batch_size = std::stoi(value);
    else if (key == "epochs")
      c.train.max_epochs = std::stoi(value);
    else if (key == "patience")
      c.train.patience = std::stoi(value);
    else if (key == "valid_users")
      c.train.valid_eval_users = std::stoi(value);
    else if (key == "valid_beam")
      c.train.valid_beam = std::stoi(value);
    else if (key == "stop_loss")
      c.train.stop_at_train_loss = std::stod(value);
    else if (key == "beam")
      c.beam_size = std::stoi(value);
    else if (key == "k_list")
      c.k_list = parse_comma_list(value);
    else if (key == "groups")
      c.groups = std::stoi(value);
    else if (key == "bench_m")
      c.bench_m = parse_comma_list(value);
    else if (key == "bench_reps")
      c.bench_reps = std::stoi(value);
    else
      throw Error("config", "unknown flag --" + key);
  } catch (const Error&) {
    throw;
  } catch (const std::exception&) {
    throw Error("config", "bad value for --" + key + ": " + value);
  }
}

inline std::filesystem::path out_root(const ExperimentConfig& cfg) {
  std::filesystem::path dir(cfg.out_dir);
  if (!dir.is_absolute()) {
    const char* root = std::getenv("CASCADE_OUT_ROOT");
    if (root && *root) dir = std::filesystem::path(root) / dir;
  }
  std::filesystem::create_directories(dir);
  return dir;
}

inline nlohmann::json report_envelope(const ExperimentConfig& cfg) {
  return nlohmann::json{{"tool", "cascade"},
                        {"version", kToolVersion},
                        {"seed", cfg.seed},
                        {"config", experiment_to_json(cfg)}};
}

inline void write_report(const std::filesystem::path& path, const nlohmann::json& j) {
  write_file_atomic(path.string(), j.dump(2) + "\n");
}

inline InteractionLog load_interactions(const ExperimentConfig& cfg) {
  std::filesystem::path path = cfg.source == "synthetic"
                                   ? out_root(cfg) / "interactions.tsv"
                                   : std::filesystem::path(cfg.source);
  std::ifstream in(path);
  if (!in) throw Error("config", "cannot open interactions file " + path.string());
  return ingest_interactions(in);
}

inline ItemEmbeddings<double> load_embeddings(const ExperimentConfig& cfg) {
  std::filesystem::path path = cfg.source == "synthetic"
                                   ? out_root(cfg) / "embeddings.txt"
                                   : std::filesystem::path(cfg.embeddings_path);
  std::ifstream in(path);
  if (!in) throw Error("config", "cannot open embeddings file " + path.string());
  return parse_embeddings<double>(in);
}

inline SemanticTable load_table(const ExperimentConfig& cfg, int levels, int k_eff) {
  std::filesystem::path path = out_root(cfg) / "semantic_ids.tsv";
  std::ifstream in(path);
  if (!in) throw Error("config", "cannot open " + path.string() + "; run tokenize first");
  return parse_semantic_table(in, levels, k_eff);
}

inline nlohmann::json layout_echo(const ModelConfig& mc) {
  return nlohmann::json{{"mode", mc.mode},
                        {"mask", mc.mask},
                        {"stage_query_counts", mc.query_counts},
                        {"query_counts", format_dash_list(mc.query_counts)},
                        {"schedule", mc.schedule},
                        {"max_sequence_length", mc.max_seq_len()}};
}

}  // namespace cli_detail

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

inline void cmd_synth(const ExperimentConfig& cfg) {
  auto [log, emb] = generate_synthetic(cfg.synth, cfg.seed);
  auto root = cli_detail::out_root(cfg);
  write_file_atomic((root / "interactions.tsv").string(), format_interactions(log));
  write_file_atomic((root / "embeddings.txt").string(), format_embeddings(emb));
  std::size_t interactions = 0;
  for (const auto& [user, seq] : log.by_user) interactions += seq.size();
  nlohmann::json report = cli_detail::report_envelope(cfg);
  report["synth"] = {{"users", log.user_count()},
                     {"items", log.item_count()},
                     {"interactions", interactions}};
  cli_detail::write_report(root / "synth_report.json", report);
  std::cout << "wrote " << (root / "interactions.tsv").string() << " ("
            << interactions << " interactions)\n";
}

inline void cmd_tokenize(const ExperimentConfig& cfg) {
  auto emb = cli_detail::load_embeddings(cfg);
  auto cbs = fit_codebooks(emb, cfg.tok_levels, cfg.tok_k, Rng::derive(cfg.seed, 0x544f4b4eULL),
                           cfg.tok_max_iters, cfg.tok_tol);
  SemanticTable table = assign_ids(cbs, emb);

  std::size_t reassigned = 0;
  for (std::size_t i = 0; i < table.item_ids.size(); ++i) {
    Vec<double> row = emb.vectors.row(static_cast<Eigen::Index>(i)).transpose();
    if (encode_item(cbs, row).first != table.codes[i]) ++reassigned;
  }

  auto root = cli_detail::out_root(cfg);
  write_file_atomic((root / "semantic_ids.tsv").string(), format_semantic_table(table));
  for (int lv = 0; lv < cfg.tok_levels; ++lv)
    write_file_atomic((root / ("codebook_level" + std::to_string(lv + 1) + ".txt")).string(),
                      format_codebook_level(cbs, lv));
  nlohmann::json report = cli_detail::report_envelope(cfg);
  report["tokenize"] = {{"levels", cfg.tok_levels},
                        {"k", cfg.tok_k},
                        {"k_eff", cfg.tok_k + 1},
                        {"items", table.item_ids.size()},
                        {"collision_reassigned", reassigned}};
  cli_detail::write_report(root / "tokenize_report.json", report);
  std::cout << "tokenized " << table.item_ids.size() << " items, " << reassigned
            << " collision reassignments\n";
}

namespace cli_detail {

struct PipelineData {
  InteractionLog log;
  SplitDataset split;
  ExampleSets examples;
  SemanticTable table;
  std::vector<TokenizedExample> train, valid, test;
};

inline PipelineData load_pipeline(const ExperimentConfig& cfg, int max_history, int levels,
                                  int k_eff) {
  PipelineData data;
  data.log = load_interactions(cfg);
  data.split = temporal_split(data.log, [](const std::string& msg) {
    std::cerr << "warning: " << msg << '\n';
  });
  data.examples = build_examples(data.split, max_history);
  data.table = load_table(cfg, levels, k_eff);
  data.train = tokenize_examples(data.examples.train, data.table);
  data.valid = tokenize_examples(data.examples.valid, data.table);
  data.test = tokenize_examples(data.examples.test, data.table);
  return data;
}

}  // namespace cli_detail

inline void cmd_train(const ExperimentConfig& cfg) {
  ModelConfig mc = cfg.model_config();
  auto data = cli_detail::load_pipeline(cfg, mc.max_history, mc.l, mc.k_eff);
  PrefixTrie trie(data.table);
  ModelParams<double> params = init_params<double>(mc, Rng::derive(cfg.seed, 0x5041524dULL));
  TrainConfig tc = cfg.train;
  tc.seed = Rng::derive(cfg.seed, 0x5452414eULL);
  TrainResult<double> result = fit(params, data.train, data.valid, trie, tc);

  auto root = cli_detail::out_root(cfg);
  nlohmann::json report = cli_detail::report_envelope(cfg);
  report["train"] = {{"epochs", result.log.epochs()},
                     {"l_rec", result.log.l_rec},
                     {"l_div", result.log.l_div},
                     {"total", result.log.total},
                     {"valid_recall10", result.log.recall10},
                     {"valid_ndcg10", result.log.ndcg10},
                     {"best_epoch", result.log.best_epoch},
                     {"best_valid_recall10", result.log.best_recall10},
                     {"diverged", result.diverged},
                     {"last_finite_epoch", result.last_finite_epoch},
                     {"train_examples", data.train.size()},
                     {"valid_examples", data.valid.size()},
                     {"layout", cli_detail::layout_echo(mc)}};
  cli_detail::write_report(root / "train_report.json", report);
  double total_wall = 0;
  for (double w : result.log.wall_seconds) total_wall += w;
  cli_detail::write_report(root / "train_report.timing.json",
                           nlohmann::json{{"wall_seconds", result.log.wall_seconds},
                                          {"total_wall_seconds", total_wall}});
  nlohmann::json ckpt = checkpoint_to_json(result.params);
  cli_detail::write_report(root / "checkpoint.json", ckpt);
  if (result.diverged)
    throw Error("diverged", "training loss went non-finite; last finite epoch " +
                                std::to_string(result.last_finite_epoch));
  std::cout << "trained " << result.log.epochs() << " epochs, best valid Recall@10 "
            << result.log.best_recall10 << " at epoch " << result.log.best_epoch << "\n";
}

namespace cli_detail {

template <typename T>
ModelParams<T> load_checkpoint(const ExperimentConfig& cfg) {
  std::filesystem::path path = out_root(cfg) / "checkpoint.json";
  std::ifstream in(path);
  if (!in) throw Error("config", "cannot open " + path.string() + "; run train first");
  nlohmann::json j;
  in >> j;
  return checkpoint_from_json<T>(j);
}

}  // namespace cli_detail

inline void cmd_evaluate(const ExperimentConfig& cfg) {
  ModelParams<double> params = cli_detail::load_checkpoint<double>(cfg);
  const ModelConfig& mc = params.cfg;
  auto data = cli_detail::load_pipeline(cfg, mc.max_history, mc.l, mc.k_eff);
  PrefixTrie trie(data.table);

  const int k_max = *std::max_element(cfg.k_list.begin(), cfg.k_list.end());
  if (k_max > cfg.beam_size) throw Error("config", "beam_size must be >= max k");

  std::vector<std::pair<std::string, RankedList>> per_user;
  per_user.reserve(data.test.size());
  std::size_t underfull = 0;
  for (const auto& ex : data.test) {
    RankedList list = beam_generate(params, trie, ex.history, cfg.beam_size, k_max);
    if (list.underfull) ++underfull;
    per_user.emplace_back(ex.user_id, std::move(list));
  }

  auto root = cli_detail::out_root(cfg);
  write_file_atomic((root / "predictions.tsv").string(), format_predictions(per_user));
  write_file_atomic((root / "test_targets.tsv").string(), format_test_targets(data.test));

  nlohmann::json metric_rows = nlohmann::json::array();
  for (int k : cfg.k_list) {
    double recall = 0, ndcg = 0;
    std::vector<std::vector<std::string>> lists;
    lists.reserve(per_user.size());
    for (std::size_t i = 0; i < per_user.size(); ++i) {
      std::vector<std::string> items;
      for (const auto& ri : per_user[i].second.items) items.push_back(ri.item_id);
      recall += recall_at_k(items, data.test[i].target_item, k);
      ndcg += ndcg_at_k(items, data.test[i].target_item, k);
      lists.push_back(std::move(items));
    }
    recall /= static_cast<double>(per_user.size());
    ndcg /= static_cast<double>(per_user.size());
    metric_rows.push_back({{"k", k},
                           {"recall", recall},
                           {"ndcg", ndcg},
                           {"divr", divr_at_k(lists, k)},
                           {"orr", orr_at_k(lists, k)}});
  }
  nlohmann::json report = cli_detail::report_envelope(cfg);
  report["evaluate"] = {{"beam_size", cfg.beam_size},
                        {"test_examples", data.test.size()},
                        {"underfull_lists", underfull},
                        {"metrics", metric_rows},
                        {"layout", cli_detail::layout_echo(mc)}};
  cli_detail::write_report(root / "metrics_report.json", report);
  std::cout << "evaluated " << data.test.size() << " users at beam " << cfg.beam_size << "\n";
}

inline void cmd_analyze_bias(const ExperimentConfig& cfg) {
  ModelParams<double> params = cli_detail::load_checkpoint<double>(cfg);
  const ModelConfig& mc = params.cfg;
  auto data = cli_detail::load_pipeline(cfg, mc.max_history, mc.l, mc.k_eff);
  auto root = cli_detail::out_root(cfg);

  std::ifstream pred_in(root / "predictions.tsv");
  if (!pred_in)
    throw Error("config", "cannot open predictions.tsv; run evaluate first");
  auto predictions = parse_predictions(pred_in);

  std::vector<std::vector<int>> predicted, targets;
  predicted.reserve(data.test.size());
  targets.reserve(data.test.size());
  for (const auto& ex : data.test) {
    auto stages = teacher_forced_tokens(params, ex.history, ex.target);
    std::vector<int> codes;
    codes.reserve(stages.size());
    for (const auto& sp : stages) codes.push_back(sp.predicted);
    predicted.push_back(std::move(codes));
    targets.push_back(ex.target);
  }

  // popularity references come from the train split only
  std::vector<std::vector<int>> train_code_paths;
  std::vector<long long> item_counts(data.table.item_ids.size(), 0);
  for (const auto& [user, us] : data.split.by_user) {
    (void)user;
    for (const auto& inter : us.train) {
      train_code_paths.push_back(data.table.id_of(inter.item_id));
      item_counts[static_cast<std::size_t>(data.table.index.at(inter.item_id))] += 1;
    }
  }
  auto level_freqs = token_frequencies(train_code_paths, mc.l, mc.k_eff);
  auto warn = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  std::vector<PopularityGrouping> level_groupings;
  for (int lv = 0; lv < mc.l; ++lv)
    level_groupings.push_back(
        popularity_groups(level_freqs[static_cast<std::size_t>(lv)], cfg.groups, warn));
  PopularityGrouping item_grouping = popularity_groups(item_counts, cfg.groups, warn);

  std::vector<std::vector<std::string>> top_k_lists;
  std::vector<std::string> test_targets;
  for (const auto& ex : data.test) {
    auto it = predictions.find(ex.user_id);
    if (it == predictions.end())
      throw Error("config", "predictions.tsv is missing user " + ex.user_id);
    std::vector<std::string> items;
    for (const auto& ri : it->second) items.push_back(ri.item_id);
    top_k_lists.push_back(std::move(items));
    test_targets.push_back(ex.target_item);
  }

  BiasReport br = bias_report(predicted, targets, level_groupings, top_k_lists, test_targets,
                              item_grouping, data.table.index);
  nlohmann::json report = cli_detail::report_envelope(cfg);
  report["bias"] = bias_report_to_json(br);
  report["bias"]["test_examples"] = data.test.size();
  cli_detail::write_report(root / "bias_report.json", report);
  std::cout << "analyzed " << data.test.size() << " test users across " << br.groups
            << " popularity groups\n";
}

inline void cmd_bench_mask(const ExperimentConfig& cfg) {
  ModelConfig base = cfg.model_config();
  if (!base.care()) throw Error("config", "bench-mask requires care mode");

  nlohmann::json rows = nlohmann::json::array();
  nlohmann::json timing_rows = nlohmann::json::array();
  Rng rng(Rng::derive(cfg.seed, 0x424e4348ULL));
  for (int m : cfg.bench_m) {
    ModelConfig mc = base;
    mc.max_history = m;
    mc.validate();
    ModelParams<double> params = init_params<double>(mc, Rng::derive(cfg.seed, 0x5041524dULL));
    std::vector<std::vector<int>> history(static_cast<std::size_t>(m),
                                          std::vector<int>(static_cast<std::size_t>(mc.l), 0));
    for (auto& codes : history)
      for (auto& code : codes) code = static_cast<int>(rng.uniform_int(mc.k_eff));
    std::vector<int> teacher(static_cast<std::size_t>(mc.l));
    for (auto& code : teacher) code = static_cast<int>(rng.uniform_int(mc.k_eff));

    SequenceLayout layout = build_layout(m, mc);
    MaskMat mask = build_progressive_mask(layout, mc);
    std::vector<int> token_ids = tokens_for_layout(mc, layout, history, teacher);

    auto single = single_pass_history_pairs(m, mc.l);
    auto staged = staged_history_pairs(m, mc.l, mc.schedule);
    rows.push_back({{"m", m},
                    {"single_pass_pairs", single},
                    {"staged_pairs", staged},
                    {"pair_ratio", static_cast<double>(staged) / static_cast<double>(single)},
                    {"leading_order_ratio", staged_over_single_ratio(mc.l, mc.schedule)}});

    std::vector<double> prog_times, staged_times;
    for (int rep = 0; rep < cfg.bench_reps; ++rep) {
      auto t0 = std::chrono::steady_clock::now();
      volatile double sink = forward_nograd(params, layout, mask, token_ids)(0, 0);
      auto t1 = std::chrono::steady_clock::now();
      sink = staged_reference_forward(params, layout, mask, token_ids)(0, 0);
      auto t2 = std::chrono::steady_clock::now();
      (void)sink;
      prog_times.push_back(std::chrono::duration<double>(t1 - t0).count());
      staged_times.push_back(std::chrono::duration<double>(t2 - t1).count());
    }
    auto median = [](std::vector<double> v) {
      std::sort(v.begin(), v.end());
      return v[v.size() / 2];
    };
    double mp = median(prog_times), ms = median(staged_times);
    timing_rows.push_back({{"m", m},
                           {"median_progressive_seconds", mp},
                           {"median_staged_seconds", ms},
                           {"wall_time_ratio", ms / mp}});
  }
  auto root = cli_detail::out_root(cfg);
  nlohmann::json report = cli_detail::report_envelope(cfg);
  report["bench"] = {{"rows", rows}, {"repetitions", cfg.bench_reps}};
  cli_detail::write_report(root / "bench_report.json", report);
  cli_detail::write_report(root / "bench_report.timing.json",
                           nlohmann::json{{"rows", timing_rows}});
  std::cout << "benchmarked " << cfg.bench_m.size() << " history lengths\n";
}

// ---------------------------------------------------------------------------
// Entry point
// ---------------------------------------------------------------------------

inline void print_usage(std::ostream& out) {
  out << "usage: cascade <command> [options]\n"
         "\n"
         "commands:\n"
         "  synth         generate a synthetic interaction log and item embeddings\n"
         "  tokenize      fit residual codebooks and assign semantic ids\n"
         "  train         train the generative recommender\n"
         "  evaluate      beam-decode the test split and compute ranking metrics\n"
         "  analyze-bias  teacher-forced token/item distribution comparison\n"
         "  bench-mask    attention-pair counts and single-pass vs staged timings\n"
         "\n"
         "options:\n"
         "  --config PATH        JSON config file (flags override it)\n"
         "  --out DIR            output directory (CASCADE_OUT_ROOT prefixes relative dirs)\n"
         "  --seed N             master seed\n"
         "  --mode M             baseline | care\n"
         "  --mask M             progressive | causal\n"
         "  --alpha F            diversity loss weight\n"
         "  --query_counts S     per-stage query counts, e.g. 1-1-2-2\n"
         "  --schedule S         identity | full | dash list\n"
         "  --epochs N --batch_size N --lr F --patience N --stop_loss F\n"
         "  --valid_users N --valid_beam N\n"
         "  --d N --layers N --heads N --ff N --max_history N\n"
         "  --l N --k N          semantic-id length and codebook size\n"
         "  --users N --items N --clusters N --zipf F --history_min N --history_max N\n"
         "  --embedding_dim N --noise F\n"
         "  --beam N --k_list 5,10,20 --groups N\n"
         "  --bench_m 2,4,8,16 --bench_reps N\n"
         "  --source PATH --embeddings PATH\n";
}

inline int run(const std::vector<std::string>& args) {
  if (args.empty()) {
    print_usage(std::cerr);
    return 2;
  }
  const std::string& command = args[0];
  if (command == "help" || command == "--help" || command == "-h") {
    print_usage(std::cout);
    return 0;
  }

  try {
    ExperimentConfig cfg;
    std::vector<std::pair<std::string, std::string>> flags;
    for (std::size_t i = 1; i < args.size(); ++i) {
      std::string arg = args[i];
      if (arg.rfind("--", 0) != 0) throw Error("config", "expected a --flag, got " + arg);
      arg = arg.substr(2);
      std::string key, value;
      auto eq = arg.find('=');
      if (eq != std::string::npos) {
        key = arg.substr(0, eq);
        value = arg.substr(eq + 1);
      } else {
        key = arg;
        if (i + 1 >= args.size()) throw Error("config", "flag --" + key + " needs a value");
        value = args[++i];
      }
      flags.emplace_back(key, value);
    }
    for (const auto& [key, value] : flags) {
      if (key != "config") continue;
      std::ifstream in(value);
      if (!in) throw Error("config", "cannot open config file " + value);
      nlohmann::json j;
      try {
        in >> j;
      } catch (const std::exception& e) {
        throw Error("config", "bad config file " + value + ": " + e.what());
      }
      apply_experiment_json(cfg, j);
    }
    for (const auto& [key, value] : flags)
      if (key != "config") cli_detail::apply_flag(cfg, key, value);
    cfg.validate();

    if (command == "synth")
      cmd_synth(cfg);
    else if (command == "tokenize")
      cmd_tokenize(cfg);
    else if (command == "train")
      cmd_train(cfg);
    else if (command == "evaluate")
      cmd_evaluate(cfg);
    else if (command == "analyze-bias")
      cmd_analyze_bias(cfg);
    else if (command == "bench-mask")
      cmd_bench_mask(cfg);
    else {
      std::cerr << "unknown command: " << command << "\n\n";
      print_usage(std::cerr);
      return 2;
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "error (" << e.code() << "): " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

inline int cli_main(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace cascade
