// SPDX-License-Identifier: Apache-2.0
#include "moeforge/experiments.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <sstream>
#include <thread>

#include "moeforge/common.hpp"
#include "moeforge/rng.hpp"

namespace moeforge::experiments {

namespace fs = std::filesystem;

namespace {

/// Runs jobs on a small pool; results land in caller-owned slots, so the
/// outcome is independent of scheduling order.
void run_parallel(std::vector<std::function<void()>> jobs) {
    const unsigned workers = std::max(1u, std::min<unsigned>(
        std::thread::hardware_concurrency(), static_cast<unsigned>(jobs.size())));
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (unsigned w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= jobs.size()) return;
                jobs[i]();
            }
        });
    }
    for (std::thread& t : pool) {
        t.join();
    }
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw ConfigError("cannot write " + path.string());
    }
    return out;
}

const char* mode_name(AssignmentMode mode) {
    switch (mode) {
    case AssignmentMode::kPlain: return "plain";
    case AssignmentMode::kGrouped: return "grouped";
    case AssignmentMode::kRts: return "rts";
    }
    return "?";
}

} // namespace

double median(std::vector<double> values) {
    if (values.empty()) return 0.0;
    std::sort(values.begin(), values.end());
    const std::size_t mid = values.size() / 2;
    if (values.size() % 2 == 1) return values[mid];
    return (values[mid - 1] + values[mid]) / 2.0;
}

std::int64_t median_int(std::vector<std::int64_t> values) {
    if (values.empty()) return 0;
    std::sort(values.begin(), values.end());
    const std::size_t mid = values.size() / 2;
    if (values.size() % 2 == 1) return values[mid];
    return (values[mid - 1] + values[mid]) / 2;
}

CorpusConfig experiment_corpus(double positional_skew, int content_vocab,
                               int sentence_len, int num_languages) {
    CorpusConfig cfg;
    cfg.content_vocab = content_vocab;
    // Fixed sentence length keeps grouped assignment divisible.
    for (int l = 0; l < num_languages; ++l) {
        cfg.languages.push_back(
            {17 + static_cast<std::uint64_t>(l) * 31, 60000, sentence_len, sentence_len});
    }
    cfg.positional_skew = positional_skew;
    cfg.seed = 1;
    return cfg;
}

TrainerConfig toy_trainer_config(const ToyRunConfig& cfg) {
    const CorpusConfig corpus = experiment_corpus(
        cfg.positional_skew, cfg.content_vocab, cfg.sentence_len, cfg.num_languages);
    TrainerConfig tc;
    tc.arch = ArchConfig::toy(corpus.vocab(), cfg.experts);
    tc.router.num_experts = cfg.experts;
    tc.router.assignment_mode = cfg.mode;
    tc.router.group_count = cfg.group_count;
    tc.router.capacity_factor_train = cfg.capacity_factor_train;
    tc.tasks = cfg.tasks;
    tc.tokens_per_task = cfg.tokens_per_task; // sentences are 8 tokens plus tag and EOS
    tc.schedule = {0.1, 500};
    tc.grad_clip_norm = 1.0;
    tc.seed = cfg.seed;
    tc.init_seed = cfg.init_seed;
    tc.mixed_language_batches = cfg.mixed_language_batches;
    return tc;
}

ToyRunResult train_toy_run(const ToyRunConfig& cfg) {
    const CorpusConfig corpus = experiment_corpus(
        cfg.positional_skew, cfg.content_vocab, cfg.sentence_len, cfg.num_languages);
    TrainerConfig tc = toy_trainer_config(cfg);

    std::optional<MultitaskTrainer> trainer;
    if (cfg.init) {
        tc.arch = cfg.init->arch;
        tc.router.num_experts = cfg.init->arch.num_experts;
        trainer.emplace(tc, corpus, model_from_checkpoint(*cfg.init));
    } else {
        trainer.emplace(tc, corpus);
    }

    ToyRunResult result;
    result.metrics.reserve(static_cast<std::size_t>(cfg.steps));
    for (std::int64_t s = 0; s < cfg.steps; ++s) {
        result.metrics.push_back(trainer->step());
        if (cfg.eval_every > 0 &&
            ((s + 1) % cfg.eval_every == 0 || s + 1 == cfg.steps)) {
            const double ce =
                trainer->evaluate(cfg.eval_sentences, 0).mt_cross_entropy;
            result.eval_curve.emplace_back(s + 1, ce);
        }
    }
    result.train_drops = trainer->train_drop_hist();

    const std::int64_t window = std::min<std::int64_t>(200, cfg.steps);
    double sum = 0.0;
    for (std::int64_t s = cfg.steps - window; s < cfg.steps; ++s) {
        sum += result.metrics[static_cast<std::size_t>(s)].mt_loss.value_or(0.0);
    }
    result.final_smoothed_loss = window > 0 ? sum / static_cast<double>(window) : 0.0;
    result.final_eval_ce = trainer->evaluate(cfg.eval_sentences, 0).mt_cross_entropy;
    const std::size_t tail = std::min<std::size_t>(8, result.eval_curve.size());
    if (tail > 0) {
        double acc = 0.0;
        for (std::size_t i = result.eval_curve.size() - tail; i < result.eval_curve.size(); ++i) {
            acc += result.eval_curve[i].second;
        }
        result.final_eval_smoothed = acc / static_cast<double>(tail);
    } else {
        result.final_eval_smoothed = result.final_eval_ce;
    }
    result.final_checkpoint = to_checkpoint(trainer->model());
    return result;
}

std::int64_t steps_to_threshold(const ToyRunResult& run, double threshold) {
    for (const auto& [step, ce] : run.eval_curve) {
        if (ce <= threshold) {
            return step;
        }
    }
    const std::int64_t last =
        run.eval_curve.empty() ? 0 : run.eval_curve.back().first;
    return last + 1;
}

void write_metrics_csv(const fs::path& path, const std::vector<StepMetrics>& metrics,
                       bool with_timing) {
    std::ofstream out = open_out(path);
    out << "step,lr,mt_loss,dae_loss,aux_loss,dropped_frac,wall_ms\n";
    for (const StepMetrics& m : metrics) {
        out << m.step << "," << format_double(m.lr) << ",";
        if (m.mt_loss) out << format_double(*m.mt_loss);
        out << ",";
        if (m.dae_loss) out << format_double(*m.dae_loss);
        out << "," << format_double(m.aux_loss) << "," << format_double(m.dropped_frac)
            << "," << (with_timing ? m.wall_ms : 0) << "\n";
    }
}

CountParamsResult run_count_params(const std::string& preset, int moe_every,
                                   const std::vector<int>& expert_counts) {
    // Published model sizes for the large architecture.
    auto published = [](int experts) -> std::pair<double, double> {
        switch (experts) {
        case 1: return {0.7e9, 0.15};
        case 8: return {1.8e9, 0.05};
        case 16: return {3.0e9, 0.05};
        case 32: return {5.5e9, 0.05};
        case 64: return {10.0e9, 0.05};
        case 128: return {20.0e9, 0.05};
        default: return {0.0, 0.0};
        }
    };

    CountParamsResult result;
    for (int experts : expert_counts) {
        ArchConfig arch;
        if (preset == "large") {
            arch = ArchConfig::large(experts);
        } else if (preset == "small") {
            arch = ArchConfig::small(experts);
        } else if (preset == "toy") {
            arch = ArchConfig::toy(512, experts);
        } else {
            throw ConfigError("count-params: unknown preset " + preset);
        }
        arch.moe_every = moe_every;
        CountParamsRow row;
        row.experts = experts;
        row.count = param_count(arch);
        if (preset == "large" && moe_every == 2) {
            const auto [target, tolerance] = published(experts);
            row.published = target;
            row.tolerance = tolerance;
            if (target > 0.0) {
                row.rel_delta =
                    (static_cast<double>(row.count.total) - target) / target;
                if (std::abs(row.rel_delta) > tolerance) {
                    result.within_tolerance = false;
                }
            }
        }
        result.rows.push_back(row);
    }
    return result;
}

std::string count_params_table(const CountParamsResult& result) {
    std::ostringstream out;
    char line[200];
    std::snprintf(line, sizeof(line), "%8s %16s %16s %16s %12s %10s\n", "experts",
                  "total", "non-expert", "expert+gate", "published", "delta");
    out << line;
    for (const CountParamsRow& row : result.rows) {
        std::string published = "-";
        std::string delta = "-";
        if (row.published > 0.0) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.1fB", row.published / 1e9);
            published = buf;
            std::snprintf(buf, sizeof(buf), "%+.2f%%", row.rel_delta * 100.0);
            delta = buf;
        }
        std::snprintf(line, sizeof(line), "%8d %16lld %16lld %16lld %12s %10s\n",
                      row.experts, static_cast<long long>(row.count.total),
                      static_cast<long long>(row.count.non_expert),
                      static_cast<long long>(row.count.expert + row.count.gate),
                      published.c_str(), delta.c_str());
        out << line;
    }
    return out.str();
}

DropBiasResult run_drop_bias(std::int64_t tokens, int experts, std::uint64_t seed) {
    // Constructed oversubscribed batch: round-robin choices spread every
    // expert's load evenly over positions, capacity admits half of it.
    std::vector<std::int32_t> choice(static_cast<std::size_t>(tokens));
    for (std::int64_t t = 0; t < tokens; ++t) {
        choice[static_cast<std::size_t>(t)] = static_cast<std::int32_t>(t % experts);
    }
    const int cap = static_cast<int>(tokens / (2 * experts));

    DropBiasResult result;
    RoutingDecision plain = assign_plain(choice, experts, cap);
    std::int64_t plain_final_half = 0;
    for (std::int64_t t = 0; t < tokens; ++t) {
        if (!plain.kept(t) && t >= tokens / 2) {
            ++plain_final_half;
        }
    }
    result.plain_final_half_fraction =
        static_cast<double>(plain_final_half) / static_cast<double>(plain.drop_count());
    result.plain_biased = result.plain_final_half_fraction >= 0.9;

    RoutingDecision rts = assign_rts(choice, experts, cap, seed);
    for (std::int64_t t = 0; t < tokens; ++t) {
        if (!rts.kept(t)) {
            ++result.rts_bucket_counts[static_cast<std::size_t>(t * 8 / tokens)];
        }
    }
    const double expected =
        static_cast<double>(rts.drop_count()) / 8.0;
    double chi = 0.0;
    for (std::int64_t count : result.rts_bucket_counts) {
        const double d = static_cast<double>(count) - expected;
        chi += d * d / expected;
    }
    result.rts_chi_square = chi;
    result.rts_uniform = chi < result.chi_square_critical_001;
    return result;
}

RtsAblationResult run_rts_ablation(std::int64_t steps, int num_seeds, std::uint64_t seed,
                                   const fs::path& out_dir) {
    const AssignmentMode modes[] = {AssignmentMode::kPlain, AssignmentMode::kGrouped,
                                    AssignmentMode::kRts};
    RtsAblationResult result;
    std::vector<ToyRunResult> runs(static_cast<std::size_t>(3 * num_seeds));
    std::vector<std::function<void()>> jobs;
    for (int m = 0; m < 3; ++m) {
        for (int s = 0; s < num_seeds; ++s) {
            jobs.push_back([&, m, s] {
                ToyRunConfig cfg;
                cfg.mode = modes[m];
                cfg.steps = steps;
                // Language-blocked batches: four languages concatenated in a
                // fixed order, so plain assignment persistently starves the
                // tail languages, two-bucket grouping halves the starvation,
                // and RTS removes it.
                cfg.num_languages = 4;
                cfg.mixed_language_batches = true;
                cfg.tokens_per_task = 160; // 4 sentences x 10 tokens per language
                cfg.group_count = 2;
                cfg.eval_every = 50;
                cfg.eval_sentences = 64;
                // Mode is the only difference per seed index; the init is
                // shared across seeds so that seeds vary the data, jitter and
                // permutation streams only.
                cfg.seed = Rng::derive_seed(seed, static_cast<std::uint64_t>(s));
                cfg.init_seed = Rng::derive_seed(seed, "shared-init");
                runs[static_cast<std::size_t>(m * num_seeds + s)] = train_toy_run(cfg);
            });
        }
    }
    run_parallel(std::move(jobs));

    std::vector<double> finals[3];
    for (int m = 0; m < 3; ++m) {
        for (int s = 0; s < num_seeds; ++s) {
            const ToyRunResult& run = runs[static_cast<std::size_t>(m * num_seeds + s)];
            result.runs.push_back({modes[m],
                                   Rng::derive_seed(seed, static_cast<std::uint64_t>(s)),
                                   run.final_eval_smoothed});
            finals[m].push_back(run.final_eval_smoothed);
        }
    }
    result.median_plain = median(finals[0]);
    result.median_grouped = median(finals[1]);
    result.median_rts = median(finals[2]);
    result.ordering_holds = result.median_rts <= result.median_grouped &&
                            result.median_grouped <= result.median_plain;
    result.drop_bias = run_drop_bias(4096, 8, Rng::derive_seed(seed, "drop-bias"));

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream curves = open_out(out_dir / "rts_ablation_curves.csv");
        curves << "mode,seed,step,mt_loss,dropped_frac\n";
        for (int m = 0; m < 3; ++m) {
            for (int s = 0; s < num_seeds; ++s) {
                const ToyRunResult& run = runs[static_cast<std::size_t>(m * num_seeds + s)];
                for (const StepMetrics& metric : run.metrics) {
                    curves << mode_name(modes[m]) << "," << s << "," << metric.step << ","
                           << format_double(metric.mt_loss.value_or(0.0)) << ","
                           << format_double(metric.dropped_frac) << "\n";
                }
            }
        }
        std::ofstream evals = open_out(out_dir / "rts_ablation_eval.csv");
        evals << "mode,seed,step,eval_ce\n";
        for (int m = 0; m < 3; ++m) {
            for (int s = 0; s < num_seeds; ++s) {
                const ToyRunResult& run = runs[static_cast<std::size_t>(m * num_seeds + s)];
                for (const auto& [step, ce] : run.eval_curve) {
                    evals << mode_name(modes[m]) << "," << s << "," << step << ","
                          << format_double(ce) << "\n";
                }
            }
        }
        std::ofstream hist = open_out(out_dir / "rts_ablation_drop_hist.csv");
        hist << "mode,seed,bucket,count\n";
        for (int m = 0; m < 3; ++m) {
            for (int s = 0; s < num_seeds; ++s) {
                const ToyRunResult& run = runs[static_cast<std::size_t>(m * num_seeds + s)];
                for (int b = 0; b < 8; ++b) {
                    hist << mode_name(modes[m]) << "," << s << "," << b << ","
                         << run.train_drops.buckets[static_cast<std::size_t>(b)] << "\n";
                }
            }
        }
        std::ofstream summary = open_out(out_dir / "rts_ablation_summary.txt");
        summary << "median final smoothed heldout MT loss over " << num_seeds << " seeds\n";
        summary << "  rts:     " << format_double(result.median_rts) << "\n";
        summary << "  grouped: " << format_double(result.median_grouped) << "\n";
        summary << "  plain:   " << format_double(result.median_plain) << "\n";
        summary << "ordering rts <= grouped <= plain: "
                << (result.ordering_holds ? "yes" : "no") << "\n";
        summary << "constructed-batch plain drops in final half: "
                << format_double(result.drop_bias.plain_final_half_fraction) << "\n";
        summary << "constructed-batch rts chi-square (df 7, crit 18.475): "
                << format_double(result.drop_bias.rts_chi_square) << "\n";
    }
    return result;
}

AoeDonors make_aoe_donors(int experts, std::int64_t base_steps, std::int64_t branch_steps,
                          std::uint64_t seed) {
    ToyRunConfig base_cfg;
    base_cfg.experts = experts;
    base_cfg.steps = base_steps;
    base_cfg.seed = Rng::derive_seed(seed, "aoe-base");
    ToyRunResult base = train_toy_run(base_cfg);

    AoeDonors donors;
    ToyRunResult branches[2];
    std::vector<std::function<void()>> jobs;
    for (int i = 0; i < 2; ++i) {
        jobs.push_back([&, i] {
            ToyRunConfig cfg;
            cfg.experts = experts;
            cfg.steps = branch_steps;
            cfg.seed = Rng::derive_seed(seed, i == 0 ? "aoe-branch-a" : "aoe-branch-b");
            cfg.init = base.final_checkpoint;
            branches[i] = train_toy_run(cfg);
        });
    }
    run_parallel(std::move(jobs));
    donors.a = std::move(branches[0].final_checkpoint);
    donors.b = std::move(branches[1].final_checkpoint);
    donors.donor_loss_level =
        (branches[0].final_eval_ce + branches[1].final_eval_ce) / 2.0;
    return donors;
}

namespace {

/// Heldout MT cross-entropy of a checkpoint under a given eval capacity
/// factor; asserts whether anything dropped.
std::pair<double, bool> checkpoint_eval_ce(const Checkpoint& ckpt, double eval_factor,
                                           std::int64_t sentences) {
    ToyRunConfig probe;
    probe.experts = ckpt.arch.num_experts;
    TrainerConfig tc = toy_trainer_config(probe);
    tc.arch = ckpt.arch;
    tc.router.num_experts = ckpt.arch.num_experts;
    tc.router.capacity_factor_eval = eval_factor;
    MultitaskTrainer trainer(tc, experiment_corpus(probe.positional_skew),
                             model_from_checkpoint(ckpt));
    EvalMetrics metrics = trainer.evaluate(sentences, 0);
    return {metrics.mt_cross_entropy, metrics.drop_hist.total_dropped == 0};
}

} // namespace

AoeResult run_aoe(const Checkpoint& a, const Checkpoint& b, double donor_loss_level,
                  std::int64_t steps, int num_seeds, std::uint64_t seed,
                  const fs::path& out_dir) {
    AoeResult result;
    result.donor_loss_level = donor_loss_level;

    // Self-merge sanity: aggregation of a checkpoint with itself changes
    // nothing observable. Evaluated with a capacity factor high enough that
    // neither side overflows (the merged model has twice the experts, so its
    // per-expert capacity is half).
    {
        Checkpoint self = aoe_merge(a, a);
        const auto [orig_ce, orig_clean] = checkpoint_eval_ce(a, 4.0, 16);
        const auto [self_ce, self_clean] = checkpoint_eval_ce(self, 4.0, 16);
        result.self_merge_exact = orig_clean && self_clean && orig_ce == self_ce;
    }

    Checkpoint merged = aoe_merge(a, b);
    const int merged_experts = merged.arch.num_experts;

    std::vector<ToyRunResult> merged_runs(static_cast<std::size_t>(num_seeds));
    std::vector<ToyRunResult> random_runs(static_cast<std::size_t>(num_seeds));
    std::vector<std::function<void()>> jobs;
    for (int s = 0; s < num_seeds; ++s) {
        jobs.push_back([&, s] {
            ToyRunConfig cfg;
            cfg.experts = merged_experts;
            cfg.steps = steps;
            cfg.eval_every = 25;
            cfg.seed = Rng::derive_seed(Rng::derive_seed(seed, "aoe-merged"),
                                        static_cast<std::uint64_t>(s));
            cfg.init = merged;
            merged_runs[static_cast<std::size_t>(s)] = train_toy_run(cfg);
        });
        jobs.push_back([&, s] {
            ToyRunConfig cfg;
            cfg.experts = merged_experts;
            cfg.steps = steps;
            cfg.eval_every = 25;
            cfg.seed = Rng::derive_seed(Rng::derive_seed(seed, "aoe-random"),
                                        static_cast<std::uint64_t>(s));
            random_runs[static_cast<std::size_t>(s)] = train_toy_run(cfg);
        });
    }
    run_parallel(std::move(jobs));

    for (int s = 0; s < num_seeds; ++s) {
        result.merged_steps.push_back(
            steps_to_threshold(merged_runs[static_cast<std::size_t>(s)], donor_loss_level));
        result.random_steps.push_back(
            steps_to_threshold(random_runs[static_cast<std::size_t>(s)], donor_loss_level));
    }
    result.merged_median = median_int(result.merged_steps);
    result.random_median = median_int(result.random_steps);
    result.merged_faster = result.merged_median < result.random_median;

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream curves = open_out(out_dir / "aoe_curves.csv");
        curves << "arm,seed,step,eval_ce\n";
        for (int s = 0; s < num_seeds; ++s) {
            for (const auto& [step, ce] : merged_runs[static_cast<std::size_t>(s)].eval_curve) {
                curves << "merged," << s << "," << step << "," << format_double(ce) << "\n";
            }
            for (const auto& [step, ce] : random_runs[static_cast<std::size_t>(s)].eval_curve) {
                curves << "random," << s << "," << step << "," << format_double(ce) << "\n";
            }
        }
        std::ofstream summary = open_out(out_dir / "aoe_summary.txt");
        summary << "donor loss level: " << format_double(donor_loss_level) << "\n";
        summary << "merged-init median steps to donor level: " << result.merged_median << "\n";
        summary << "random-init median steps to donor level: " << result.random_median << "\n";
        summary << "merge(C,C) forward-equivalent: "
                << (result.self_merge_exact ? "yes" : "no") << "\n";
    }
    return result;
}

PruneResult run_prune(const Checkpoint& donor, int keep, std::int64_t finetune_steps,
                      std::int64_t scratch_steps, int scratch_seeds, int selection_seeds,
                      std::uint64_t seed, const fs::path& out_dir) {
    PruneResult result;
    const double eval_factor = 2.0;
    result.donor_ce = checkpoint_eval_ce(donor, eval_factor, 16).first;

    // Utilization on heldout batches.
    const CorpusConfig corpus_cfg = experiment_corpus(0.85);
    SyntheticCorpus corpus(corpus_cfg);
    std::vector<EvalBatch> batches;
    for (int b = 0; b < 8; ++b) {
        EvalBatch batch;
        for (int i = 0; i < 10; ++i) {
            auto pair = corpus.mt_pair(0, Split::kHeldout, b * 10 + i);
            std::vector<std::int32_t> src = {corpus_cfg.lang_tag(0)};
            src.insert(src.end(), pair.src.begin(), pair.src.end());
            src.push_back(tok::kEos);
            std::vector<std::int32_t> dec = {tok::kBos};
            dec.insert(dec.end(), pair.tgt.begin(), pair.tgt.end());
            batch.src.add(src);
            batch.decoder_in.add(dec);
        }
        batches.push_back(std::move(batch));
    }
    RouterConfig count_cfg;
    count_cfg.num_experts = donor.arch.num_experts;
    UtilizationCounts counts = count_utilization(donor, batches, count_cfg);

    // k = E identity.
    Checkpoint identity =
        prune_experts(donor, donor.arch.num_experts, PruneStrategy::kTopUtilization, &counts);
    result.identity_ce = checkpoint_eval_ce(identity, eval_factor, 16).first;
    result.identity_exact = result.identity_ce == result.donor_ce;

    Checkpoint top_pruned = prune_experts(donor, keep, PruneStrategy::kTopUtilization, &counts);

    result.pruned_finetuned_ce.resize(static_cast<std::size_t>(scratch_seeds));
    result.scratch_ce.resize(static_cast<std::size_t>(scratch_seeds));
    std::vector<double> top_arm(static_cast<std::size_t>(selection_seeds));
    result.random_pruned_ce.resize(static_cast<std::size_t>(selection_seeds));

    std::vector<std::function<void()>> jobs;
    for (int s = 0; s < scratch_seeds; ++s) {
        jobs.push_back([&, s] {
            ToyRunConfig cfg;
            cfg.experts = keep;
            cfg.steps = finetune_steps;
            cfg.seed = Rng::derive_seed(Rng::derive_seed(seed, "prune-ft"),
                                        static_cast<std::uint64_t>(s));
            cfg.init = top_pruned;
            result.pruned_finetuned_ce[static_cast<std::size_t>(s)] =
                train_toy_run(cfg).final_eval_ce;
        });
        jobs.push_back([&, s] {
            ToyRunConfig cfg;
            cfg.experts = keep;
            cfg.steps = scratch_steps;
            cfg.seed = Rng::derive_seed(Rng::derive_seed(seed, "prune-scratch"),
                                        static_cast<std::uint64_t>(s));
            result.scratch_ce[static_cast<std::size_t>(s)] = train_toy_run(cfg).final_eval_ce;
        });
    }
    for (int s = 0; s < selection_seeds; ++s) {
        jobs.push_back([&, s] {
            ToyRunConfig cfg;
            cfg.experts = keep;
            cfg.steps = finetune_steps;
            cfg.seed = Rng::derive_seed(Rng::derive_seed(seed, "prune-sel-ft"),
                                        static_cast<std::uint64_t>(s));
            cfg.init = top_pruned;
            top_arm[static_cast<std::size_t>(s)] = train_toy_run(cfg).final_eval_ce;
        });
        jobs.push_back([&, s] {
            Checkpoint random_pruned = prune_experts(
                donor, keep, PruneStrategy::kRandom, nullptr,
                Rng::derive_seed(Rng::derive_seed(seed, "prune-random"),
                                 static_cast<std::uint64_t>(s)));
            ToyRunConfig cfg;
            cfg.experts = keep;
            cfg.steps = finetune_steps;
            cfg.seed = Rng::derive_seed(Rng::derive_seed(seed, "prune-sel-ft"),
                                        static_cast<std::uint64_t>(s));
            cfg.init = std::move(random_pruned);
            result.random_pruned_ce[static_cast<std::size_t>(s)] =
                train_toy_run(cfg).final_eval_ce;
        });
    }
    run_parallel(std::move(jobs));

    result.pruned_median = median(result.pruned_finetuned_ce);
    result.scratch_median = median(result.scratch_ce);
    result.top_median = median(top_arm);
    result.random_median = median(result.random_pruned_ce);
    result.pruned_beats_scratch = result.pruned_median < result.scratch_median;
    result.top_beats_random = result.top_median <= result.random_median;

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream summary = open_out(out_dir / "prune_summary.csv");
        summary << "metric,value\n";
        summary << "donor_ce," << format_double(result.donor_ce) << "\n";
        summary << "identity_ce," << format_double(result.identity_ce) << "\n";
        summary << "pruned_finetuned_median," << format_double(result.pruned_median) << "\n";
        summary << "scratch_median," << format_double(result.scratch_median) << "\n";
        summary << "top_selection_median," << format_double(result.top_median) << "\n";
        summary << "random_selection_median," << format_double(result.random_median) << "\n";
        write_utilization_csv(counts, out_dir / "prune_utilization.csv");
    }
    return result;
}

SampleEfficiencyResult run_sample_efficiency(const std::vector<int>& expert_counts,
                                             std::int64_t steps, int num_seeds,
                                             std::uint64_t seed, const fs::path& out_dir) {
    SampleEfficiencyResult result;
    result.expert_counts = expert_counts;
    result.budget_steps = steps;

    std::vector<std::vector<ToyRunResult>> runs(
        expert_counts.size(), std::vector<ToyRunResult>(static_cast<std::size_t>(num_seeds)));
    std::vector<std::function<void()>> jobs;
    for (std::size_t e = 0; e < expert_counts.size(); ++e) {
        for (int s = 0; s < num_seeds; ++s) {
            jobs.push_back([&, e, s] {
                ToyRunConfig cfg;
                cfg.experts = expert_counts[e];
                cfg.steps = steps;
                cfg.eval_every = 25;
                // One seed stream per seed index: every expert setting sees
                // the same data order, the controlled variable.
                cfg.seed = Rng::derive_seed(seed, static_cast<std::uint64_t>(s));
                runs[e][static_cast<std::size_t>(s)] = train_toy_run(cfg);
            });
        }
    }
    run_parallel(std::move(jobs));

    // Threshold per seed: the smallest expert count's final loss.
    result.dense_final_ce.resize(static_cast<std::size_t>(num_seeds));
    for (int s = 0; s < num_seeds; ++s) {
        result.dense_final_ce[static_cast<std::size_t>(s)] =
            runs[0][static_cast<std::size_t>(s)].final_eval_ce;
    }
    result.steps_to_dense_loss.assign(expert_counts.size(), {});
    for (std::size_t e = 0; e < expert_counts.size(); ++e) {
        for (int s = 0; s < num_seeds; ++s) {
            result.steps_to_dense_loss[e].push_back(steps_to_threshold(
                runs[e][static_cast<std::size_t>(s)],
                result.dense_final_ce[static_cast<std::size_t>(s)]));
        }
    }
    std::vector<std::int64_t> largest = result.steps_to_dense_loss.back();
    result.moe_faster = median_int(largest) < steps;

    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
        std::ofstream curves = open_out(out_dir / "sample_efficiency.csv");
        curves << "experts,seed,step,eval_ce\n";
        for (std::size_t e = 0; e < expert_counts.size(); ++e) {
            for (int s = 0; s < num_seeds; ++s) {
                for (const auto& [step, ce] : runs[e][static_cast<std::size_t>(s)].eval_curve) {
                    curves << expert_counts[e] << "," << s << "," << step << ","
                           << format_double(ce) << "\n";
                }
            }
        }
        std::ofstream summary = open_out(out_dir / "sample_efficiency_summary.csv");
        summary << "experts,median_steps_to_dense_loss\n";
        for (std::size_t e = 0; e < expert_counts.size(); ++e) {
            summary << expert_counts[e] << "," << median_int(result.steps_to_dense_loss[e])
                    << "\n";
        }
    }
    return result;
}

} // namespace moeforge::experiments
