#pragma once

// Experiment specs, the pretrained-zoo cache, and the runners behind the CLI.

#include <chrono>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include "json.hpp"
#include "vlpa/checkpoint.hpp"
#include "vlpa/config.hpp"
#include "vlpa/corpus.hpp"
#include "vlpa/eval.hpp"
#include "vlpa/io.hpp"
#include "vlpa/orchestrator.hpp"
#include "vlpa/pretrain.hpp"

namespace vlpa {

namespace fs = std::filesystem;

inline const std::vector<std::string>& known_variants() {
  static const std::vector<std::string> v = {"full", "@i2i", "@itm", "@i2i+itm", "@sim", "@perp"};
  return v;
}

struct ExperimentSpec {
  CorpusParams corpus;
  ZooSpec zoo;
  std::uint64_t model_seed = 0;
  AttackConfig attack;
  std::string variant = "full";
  std::vector<std::string> variants = {"full", "@i2i", "@itm", "@i2i+itm", "@sim", "@perp"};
  std::size_t eval_pairs = 100;
  std::string sweep_axis;  // "", "augmentation" or "transforms"
  std::vector<std::size_t> sweep_grid = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<double> flatness_magnitudes = {-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0};
  std::size_t flatness_directions = 20;
  std::size_t flatness_pairs = 20;
  std::string cache_dir = ".vlpa_cache";

  void validate() const {
    corpus.validate();
    zoo.validate();
    attack.validate();
    apply_variant(attack, variant);
    if (variants.empty()) throw ConfigError("variants list is empty");
    for (const auto& v : variants) apply_variant(attack, v);
    if (eval_pairs == 0 || eval_pairs > corpus.heldout)
      throw ConfigError("eval_pairs must lie in [1, corpus_heldout]");
    if (!sweep_axis.empty() && sweep_axis != "augmentation" && sweep_axis != "transforms")
      throw ConfigError("sweep_axis must be 'augmentation' or 'transforms'");
    if (sweep_grid.empty()) throw ConfigError("sweep_grid is empty");
    for (std::size_t v : sweep_grid)
      if (v == 0) throw ConfigError("sweep_grid values must be >= 1");
    if (flatness_directions == 0) throw ConfigError("flatness_directions must be >= 1");
    if (flatness_pairs == 0 || flatness_pairs > corpus.heldout)
      throw ConfigError("flatness_pairs must lie in [1, corpus_heldout]");
    bool zero = false;
    for (double a : flatness_magnitudes) zero |= a == 0.0;
    if (!zero) throw ConfigError("flatness_magnitudes must include 0");
  }

  // Attack settings after the variant override.
  AttackConfig effective_attack() const { return apply_variant(attack, variant); }
};

inline nlohmann::json to_json(const ExperimentSpec& s) {
  nlohmann::json j = s.attack;
  j["corpus_size"] = s.corpus.size;
  j["corpus_heldout"] = s.corpus.heldout;
  j["corpus_seed"] = s.corpus.seed;
  j["corpus_min_objects"] = s.corpus.min_objects;
  j["corpus_max_objects"] = s.corpus.max_objects;
  j["corpus_filler_prob"] = s.corpus.filler_prob;
  j["corpus_synonym_prob"] = s.corpus.synonym_prob;
  j["surrogate"] = s.zoo.surrogate;
  j["victims"] = s.zoo.victims;
  j["pretrain_steps"] = s.zoo.steps;
  j["pretrain_batch"] = s.zoo.batch;
  j["pretrain_lr"] = s.zoo.lr;
  j["lm_steps"] = s.zoo.lm_steps;
  j["ctx_steps"] = s.zoo.ctx_steps;
  j["surrogate_target"] = s.zoo.surrogate_target;
  j["victim_target"] = s.zoo.victim_target;
  j["model_seed"] = s.model_seed;
  j["variant"] = s.variant;
  j["variants"] = s.variants;
  j["eval_pairs"] = s.eval_pairs;
  j["sweep_axis"] = s.sweep_axis;
  j["sweep_grid"] = s.sweep_grid;
  j["flatness_magnitudes"] = s.flatness_magnitudes;
  j["flatness_directions"] = s.flatness_directions;
  j["flatness_pairs"] = s.flatness_pairs;
  j["cache_dir"] = s.cache_dir;
  return j;
}

inline ExperimentSpec spec_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("spec must be a JSON object");
  static const std::set<std::string> own = {
      "corpus_size",     "corpus_heldout",   "corpus_seed",        "corpus_min_objects", "corpus_max_objects",
      "corpus_filler_prob", "corpus_synonym_prob", "surrogate",    "victims",            "pretrain_steps",
      "pretrain_batch",  "pretrain_lr",      "lm_steps",           "ctx_steps",          "surrogate_target",
      "victim_target",   "model_seed",       "variant",            "variants",           "eval_pairs",
      "sweep_axis",      "sweep_grid",       "flatness_magnitudes", "flatness_directions", "flatness_pairs",
      "cache_dir"};
  nlohmann::json attack_part = nlohmann::json::object();
  for (const auto& [k, v] : j.items()) {
    if (attack_config_keys().count(k)) attack_part[k] = v;
    else if (!own.count(k)) throw ConfigError("unknown spec key '" + k + "'");
  }
  ExperimentSpec s;
  s.attack = attack_config_from_json(attack_part);
  using detail::read_count;
  using detail::read_key;
  read_count(j, "corpus_size", s.corpus.size);
  read_count(j, "corpus_heldout", s.corpus.heldout);
  read_key(j, "corpus_seed", s.corpus.seed);
  read_count(j, "corpus_min_objects", s.corpus.min_objects);
  read_count(j, "corpus_max_objects", s.corpus.max_objects);
  read_key(j, "corpus_filler_prob", s.corpus.filler_prob);
  read_key(j, "corpus_synonym_prob", s.corpus.synonym_prob);
  read_key(j, "surrogate", s.zoo.surrogate);
  read_key(j, "victims", s.zoo.victims);
  read_count(j, "pretrain_steps", s.zoo.steps);
  read_count(j, "pretrain_batch", s.zoo.batch);
  read_key(j, "pretrain_lr", s.zoo.lr);
  read_count(j, "lm_steps", s.zoo.lm_steps);
  read_count(j, "ctx_steps", s.zoo.ctx_steps);
  read_key(j, "surrogate_target", s.zoo.surrogate_target);
  read_key(j, "victim_target", s.zoo.victim_target);
  read_key(j, "model_seed", s.model_seed);
  read_key(j, "variant", s.variant);
  read_key(j, "variants", s.variants);
  read_count(j, "eval_pairs", s.eval_pairs);
  read_key(j, "sweep_axis", s.sweep_axis);
  read_key(j, "sweep_grid", s.sweep_grid);
  read_key(j, "flatness_magnitudes", s.flatness_magnitudes);
  read_count(j, "flatness_directions", s.flatness_directions);
  read_count(j, "flatness_pairs", s.flatness_pairs);
  read_key(j, "cache_dir", s.cache_dir);
  s.validate();
  return s;
}

inline ExperimentSpec load_spec(const fs::path& p) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(io::read_file(p));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(p.string() + ": invalid JSON: " + e.what());
  }
  return spec_from_json(j);
}

inline std::string config_hash(const ExperimentSpec& s) { return io::hash_hex(to_json(s).dump()); }

// ---------------------------------------------------------------------------
// Zoo cache
// ---------------------------------------------------------------------------

inline std::string zoo_key(const ExperimentSpec& s) {
  nlohmann::json j = {{"corpus", s.corpus.to_json()}, {"zoo", s.zoo.to_json()}, {"model_seed", s.model_seed},
                      {"format", 1}};
  return io::hash_hex(j.dump());
}

inline void save_zoo(const fs::path& dir, const ModelZoo& zoo) {
  save_dual_encoder(dir / "surrogate.xmf", zoo.surrogate);
  for (std::size_t i = 0; i < zoo.victims.size(); ++i)
    save_dual_encoder(dir / ("victim" + std::to_string(i) + ".xmf"), zoo.victims[i]);
  save_causal_lm(dir / "lm.xmf", zoo.lm);
  save_contextual_embedder(dir / "embedder.xmf", zoo.embedder);
  io::write_file(dir / "metrics.json", zoo.metrics.dump(2) + "\n");
}

inline ModelZoo load_zoo(const fs::path& dir, std::size_t victims) {
  ModelZoo zoo;
  zoo.surrogate = load_dual_encoder(dir / "surrogate.xmf");
  for (std::size_t i = 0; i < victims; ++i)
    zoo.victims.push_back(load_dual_encoder(dir / ("victim" + std::to_string(i) + ".xmf")));
  zoo.lm = load_causal_lm(dir / "lm.xmf");
  zoo.embedder = load_contextual_embedder(dir / "embedder.xmf");
  zoo.metrics = nlohmann::json::parse(io::read_file(dir / "metrics.json"));
  return zoo;
}

struct ZooHandle {
  ModelZoo zoo;
  bool cache_hit = false;
  std::string key;
  fs::path dir;
};

// Loads the zoo for `spec` from the cache, training and storing it on a miss.
// Entries are published by renaming a finished temporary directory.
inline ZooHandle obtain_zoo(const ExperimentSpec& spec, const SyntheticCorpus& corpus) {
  ZooHandle h;
  h.key = zoo_key(spec);
  h.dir = fs::path(spec.cache_dir) / ("zoo-" + h.key);
  if (fs::exists(h.dir / "metrics.json")) {
    h.zoo = load_zoo(h.dir, spec.zoo.victims.size());
    h.cache_hit = true;
    return h;
  }
  h.zoo = pretrain_zoo(corpus, spec.zoo, spec.model_seed);
  const fs::path tmp = h.dir.string() + ".tmp" + std::to_string(std::hash<std::thread::id>{}(std::this_thread::get_id()) ^
                                                                  static_cast<std::size_t>(::getpid()));
  fs::remove_all(tmp);
  save_zoo(tmp, h.zoo);
  std::error_code ec;
  fs::rename(tmp, h.dir, ec);
  if (ec) fs::remove_all(tmp);  // another process published first
  return h;
}

// ---------------------------------------------------------------------------
// Runs
// ---------------------------------------------------------------------------

struct RunContext {
  ExperimentSpec spec;
  SyntheticCorpus corpus;
  ZooHandle zoo;
  std::size_t jobs = 1;

  AttackModels attack_models() const { return {zoo.zoo.surrogate, zoo.zoo.lm, zoo.zoo.embedder}; }

  EvalModels eval_models() const {
    EvalModels m{zoo.zoo.surrogate, {}, {}, zoo.zoo.lm, zoo.zoo.embedder};
    for (std::size_t i = 0; i < zoo.zoo.victims.size(); ++i) {
      m.victims.push_back(&zoo.zoo.victims[i]);
      m.victim_names.push_back(spec.zoo.victims[i]);
    }
    return m;
  }

  std::span<const Record> eval_pairs() const { return corpus.heldout().first(spec.eval_pairs); }
};

inline RunContext prepare(const ExperimentSpec& spec, std::size_t jobs) {
  RunContext ctx{spec, generate_corpus(spec.corpus), {}, jobs};
  ctx.zoo = obtain_zoo(spec, ctx.corpus);
  return ctx;
}

struct ExperimentOutput {
  std::vector<AttackResult> results;
  EvalReport report;
  double attack_seconds = 0.0;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline ExperimentOutput run_experiment(const RunContext& ctx, const AttackConfig& cfg) {
  ExperimentOutput out;
  const auto t0 = std::chrono::steady_clock::now();
  out.results = attack_batch(ctx.attack_models(), ctx.eval_pairs(), ctx.corpus.heldout(), cfg, ctx.jobs);
  out.attack_seconds = seconds_since(t0);
  out.report = evaluate(ctx.eval_models(), ctx.corpus.heldout(), out.results, cfg);
  return out;
}

struct SweepRow {
  std::size_t value = 0;
  double asr1_tr = 0.0;
  double asr1_ir = 0.0;
  double seconds = 0.0;
};

// Mean victim ASR@1 per direction.
inline std::pair<double, double> victim_asr1(const EvalReport& r) {
  double tr = 0, ir = 0;
  std::size_t n = 0;
  for (const auto& m : r.models)
    if (!m.is_surrogate) {
      tr += m.recall.asr[0][0];
      ir += m.recall.asr[1][0];
      ++n;
    }
  return {tr / static_cast<double>(n), ir / static_cast<double>(n)};
}

// One attack + evaluation per grid point. Augmentation sets both view
// counts; transforms sets M.
inline std::vector<SweepRow> run_sweep(const RunContext& ctx, const AttackConfig& base) {
  if (ctx.spec.sweep_axis.empty()) throw ConfigError("sweep requires sweep_axis");
  std::vector<SweepRow> rows;
  for (std::size_t v : ctx.spec.sweep_grid) {
    AttackConfig cfg = base;
    if (ctx.spec.sweep_axis == "augmentation") cfg.image_view_count = cfg.text_view_count = v;
    else cfg.M = v;
    ExperimentOutput o = run_experiment(ctx, cfg);
    auto [tr, ir] = victim_asr1(o.report);
    rows.push_back({v, tr, ir, o.attack_seconds});
  }
  return rows;
}

inline std::string sweep_csv(const std::string& axis, const std::vector<SweepRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  out << axis << ",asr1_tr,asr1_ir,wall_seconds\n";
  for (const auto& r : rows) out << r.value << ',' << r.asr1_tr << ',' << r.asr1_ir << ',' << r.seconds << '\n';
  return out.str();
}

// ---------------------------------------------------------------------------
// Artifacts
// ---------------------------------------------------------------------------

inline nlohmann::json trace_json(const AttackResult& r) {
  nlohmann::json t = nlohmann::json::array();
  for (const auto& e : r.trace)
    t.push_back({{"cos", e.cos},
                 {"perp", e.perp},
                 {"sim", e.sim},
                 {"itm", e.itm},
                 {"i2i", e.i2i},
                 {"total", e.total},
                 {"adv_cos", e.adv_cos},
                 {"linf", e.linf},
                 {"min_pixel", e.min_pixel},
                 {"max_pixel", e.max_pixel}});
  return t;
}

// adv/<pair_id>.f64 with a JSON sidecar, adv_texts.jsonl and traces.jsonl.
inline void write_attack_artifacts(const fs::path& out, const std::vector<AttackResult>& results,
                                   const AttackConfig& cfg) {
  std::ostringstream texts, traces;
  for (const auto& r : results) {
    const std::string stem = "adv/" + std::to_string(r.pair_id);
    io::write_f64(out / (stem + ".f64"), r.adv_image.data());
    nlohmann::json side = {{"pair_id", r.pair_id},
                           {"eps", cfg.eps},
                           {"linf", r.achieved_linf},
                           {"iterations", r.trace.size()},
                           {"ok", r.ok},
                           {"error", r.error}};
    io::write_file(out / (stem + ".json"), side.dump(2) + "\n");
    texts << nlohmann::json{{"pair_id", r.pair_id},
                            {"tokens", r.adv_tokens},
                            {"text", Vocabulary::standard().render(r.adv_tokens)},
                            {"ter", r.ter}}
                 .dump()
          << '\n';
    traces << nlohmann::json{{"pair_id", r.pair_id},
                             {"clean_cos", r.clean_cos},
                             {"adv_cos", r.adv_cos},
                             {"trace", trace_json(r)}}
                  .dump()
           << '\n';
  }
  io::write_file(out / "adv_texts.jsonl", texts.str());
  io::write_file(out / "traces.jsonl", traces.str());
}

inline void write_report(const fs::path& out, const EvalReport& r, const std::string& stem = "report") {
  io::write_file(out / (stem + ".json"), to_json(r).dump(2) + "\n");
  io::write_file(out / (stem + ".csv"), to_csv(r));
}

struct Manifest {
  std::string verb;
  std::string config_hash;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  double wall_seconds = 0.0;
  bool cache_hit = false;
  std::string zoo_key;
  std::string corpus_hash;
  int exit_code = 0;
  std::string error;
  nlohmann::json spec;
  nlohmann::json extra = nlohmann::json::object();
};

inline void write_manifest(const fs::path& out, const Manifest& m) {
  nlohmann::json j = {{"verb", m.verb},
                      {"config_hash", m.config_hash},
                      {"seed", m.seed},
                      {"jobs", m.jobs},
                      {"wall_seconds", m.wall_seconds},
                      {"cache_hit", m.cache_hit},
                      {"zoo_key", m.zoo_key},
                      {"corpus_hash", m.corpus_hash},
                      {"status", m.exit_code == 0 ? "ok" : "failed"},
                      {"exit_code", m.exit_code},
                      {"error", m.error},
                      {"spec", m.spec}};
  for (const auto& [k, v] : m.extra.items()) j[k] = v;
  io::write_file(out / "manifest.json", j.dump(2) + "\n");
}

}  // namespace vlpa
