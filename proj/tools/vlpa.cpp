// vlpa: command-line driver.
//
//   vlpa <verb> SPEC.json [--seed N] [--out DIR] [--jobs J]
//
// verbs: gen-corpus pretrain attack eval ablate sweep flatness

#include <chrono>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "vlpa/harness.hpp"

using namespace vlpa;

namespace {

struct Options {
  std::string verb;
  std::string spec_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::size_t jobs = 1;
};

std::string variant_dir(const std::string& v) {
  std::string s = "variant_";
  for (char c : v) {
    if (c == '@') continue;
    s += c == '+' ? '_' : c;
  }
  return s;
}

std::size_t count_failures(const std::vector<AttackResult>& rs) {
  std::size_t n = 0;
  for (const auto& r : rs) n += !r.ok;
  return n;
}

// Each verb returns the number of numerically failed pairs.
std::size_t run_verb(const Options& opt, ExperimentSpec& spec, Manifest& man) {
  const fs::path out = opt.out;
  if (opt.verb == "gen-corpus") {
    SyntheticCorpus c = generate_corpus(spec.corpus);
    save_corpus(c, out / "corpus");
    man.corpus_hash = c.content_hash();
    std::cout << "corpus: " << c.records.size() << " pairs, hash " << man.corpus_hash << "\n";
    return 0;
  }

  RunContext ctx = prepare(spec, opt.jobs);
  man.cache_hit = ctx.zoo.cache_hit;
  man.zoo_key = ctx.zoo.key;
  man.corpus_hash = ctx.corpus.content_hash();
  man.extra["pretrain_metrics"] = ctx.zoo.zoo.metrics;
  const AttackConfig cfg = spec.effective_attack();

  if (opt.verb == "pretrain") {
    save_zoo(out / "models", ctx.zoo.zoo);
    std::cout << "zoo " << ctx.zoo.key << (ctx.zoo.cache_hit ? " (cached)" : " (trained)") << "\n"
              << ctx.zoo.zoo.metrics.dump(2) << "\n";
    return 0;
  }
  if (opt.verb == "attack") {
    auto results = attack_batch(ctx.attack_models(), ctx.eval_pairs(), ctx.corpus.heldout(), cfg, opt.jobs);
    write_attack_artifacts(out, results, cfg);
    std::cout << "attacked " << results.size() << " pairs\n";
    return count_failures(results);
  }
  if (opt.verb == "eval") {
    ExperimentOutput o = run_experiment(ctx, cfg);
    write_attack_artifacts(out, o.results, cfg);
    write_report(out, o.report);
    man.extra["attack_seconds"] = o.attack_seconds;
    std::cout << "mean victim ASR@1 " << o.report.mean_victim_asr1() << "\n";
    return count_failures(o.results);
  }
  if (opt.verb == "ablate") {
    std::ostringstream csv;
    csv.precision(17);
    csv << "variant,mean_victim_asr1,victim_asr1_tr,victim_asr1_ir,surrogate_asr1_tr,surrogate_asr1_ir,sim,ter,"
           "perp_adv\n";
    std::size_t failures = 0;
    for (const auto& v : spec.variants) {
      ExperimentOutput o = run_experiment(ctx, apply_variant(spec.attack, v));
      const fs::path dir = out / variant_dir(v);
      write_attack_artifacts(dir, o.results, apply_variant(spec.attack, v));
      write_report(dir, o.report);
      auto [tr, ir] = victim_asr1(o.report);
      const auto& s = o.report.models.front().recall;
      csv << v << ',' << o.report.mean_victim_asr1() << ',' << tr << ',' << ir << ',' << s.asr[0][0] << ','
          << s.asr[1][0] << ',' << o.report.sim << ',' << o.report.ter << ',' << o.report.perp_adv << '\n';
      std::cout << v << ": mean victim ASR@1 " << o.report.mean_victim_asr1() << "\n";
      failures += count_failures(o.results);
    }
    io::write_file(out / "ablation.csv", csv.str());
    return failures;
  }
  if (opt.verb == "sweep") {
    auto rows = run_sweep(ctx, cfg);
    io::write_file(out / "sweep.csv", sweep_csv(spec.sweep_axis, rows));
    std::cout << sweep_csv(spec.sweep_axis, rows);
    return 0;
  }
  if (opt.verb == "flatness") {
    auto pairs = ctx.corpus.heldout().first(spec.flatness_pairs);
    nlohmann::json j = {{"magnitudes", spec.flatness_magnitudes}, {"direction_count", spec.flatness_directions}};
    std::vector<std::vector<double>> curves;
    for (const std::string v : {"full", "@i2i+itm"}) {
      const AttackConfig vc = apply_variant(spec.attack, v);
      auto results = attack_batch(ctx.attack_models(), pairs, ctx.corpus.heldout(), vc, opt.jobs);
      std::vector<double> mean(spec.flatness_magnitudes.size(), 0.0);
      for (const auto& r : results) {
        const Tensor te = embed_text(ctx.zoo.zoo.surrogate, r.adv_tokens);
        auto prof = flatness_profile(ctx.zoo.zoo.surrogate, r.adv_image, te, spec.flatness_magnitudes,
                                     spec.flatness_directions, pair_seed(vc.seed, r.pair_id));
        for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += prof.mean_delta[i] / static_cast<double>(results.size());
      }
      double flat = 0.0;
      for (double m : mean) flat += std::abs(m) / static_cast<double>(mean.size());
      j["profiles"][v] = mean;
      j["mean_abs"][v] = flat;
      curves.push_back(mean);
    }
    io::write_file(out / "flatness.json", j.dump(2) + "\n");
    std::ostringstream csv;
    csv.precision(17);
    csv << "magnitude,full,i2i_itm\n";
    for (std::size_t i = 0; i < spec.flatness_magnitudes.size(); ++i)
      csv << spec.flatness_magnitudes[i] << ',' << curves[0][i] << ',' << curves[1][i] << '\n';
    io::write_file(out / "flatness.csv", csv.str());
    std::cout << j["mean_abs"].dump() << "\n";
    return 0;
  }
  throw UsageError("unknown verb '" + opt.verb + "'");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Joint image-text transfer attacks on toy vision-language models"};
  Options opt;
  app.require_subcommand(1, 1);
  for (const char* verb : {"gen-corpus", "pretrain", "attack", "eval", "ablate", "sweep", "flatness"}) {
    auto* sub = app.add_subcommand(verb);
    sub->add_option("spec", opt.spec_path, "JSON spec file")->required();
    sub->add_option("--seed", opt.seed, "attack seed (overrides the spec)");
    sub->add_option("--out", opt.out, "output directory");
    sub->add_option("--jobs", opt.jobs, "worker threads")->check(CLI::PositiveNumber);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ExitCode::kConfig);
  }
  opt.verb = app.get_subcommands().front()->get_name();

  const auto t0 = std::chrono::steady_clock::now();
  Manifest man;
  man.verb = opt.verb;
  man.jobs = opt.jobs;
  int rc = 0;
  try {
    ExperimentSpec spec = load_spec(opt.spec_path);
    if (opt.seed) spec.attack.seed = *opt.seed;
    man.seed = spec.attack.seed;
    man.spec = to_json(spec);
    man.config_hash = config_hash(spec);
    const std::size_t failures = run_verb(opt, spec, man);
    if (failures > 0) {
      man.error = std::to_string(failures) + " pair(s) failed numerically";
      rc = static_cast<int>(ExitCode::kNumeric);
    }
  } catch (const TrainingError& e) {
    man.error = e.what();
    man.extra["pretrain_metrics"] = nlohmann::json::parse(e.metrics_json());
    rc = static_cast<int>(e.exit_code());
  } catch (const Error& e) {
    man.error = e.what();
    rc = static_cast<int>(e.exit_code());
  } catch (const std::exception& e) {
    man.error = e.what();
    rc = static_cast<int>(ExitCode::kConfig);
  }
  man.exit_code = rc;
  man.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  try {
    write_manifest(opt.out, man);
  } catch (const std::exception& e) {
    std::cerr << "vlpa: cannot write manifest: " << e.what() << "\n";
  }
  if (rc != 0) std::cerr << "vlpa " << opt.verb << ": " << man.error << "\n";
  return rc;
}
