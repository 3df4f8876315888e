// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "moeforge/checkpoint.hpp"
#include "moeforge/parallel.hpp"
#include "moeforge/surgery.hpp"
#include "moeforge/trainer.hpp"

namespace moeforge::experiments {

// Shared toy experiment fixture: a positional-skew cipher corpus with
// fixed-length sentences (so grouped assignment always divides the batch)
// and a small encoder-decoder sized to train in seconds.

CorpusConfig experiment_corpus(double positional_skew, int content_vocab = 64,
                               int sentence_len = 8, int num_languages = 1);

struct ToyRunConfig {
    int experts = 8;
    AssignmentMode mode = AssignmentMode::kRts;
    int group_count = 5;
    std::int64_t steps = 2000;
    std::uint64_t seed = 0;
    std::vector<Task> tasks = {Task::kMt};
    double positional_skew = 0.85;
    double capacity_factor_train = 1.0;
    std::int64_t tokens_per_task = 100;
    int content_vocab = 64;
    int sentence_len = 8;
    int num_languages = 1;
    bool mixed_language_batches = false;
    std::int64_t eval_every = 0; // 0 disables periodic heldout evals
    std::int64_t eval_sentences = 16;
    std::optional<std::uint64_t> init_seed; // shared-init controlled runs
    /// Optional warm start; when set, the run fine-tunes this checkpoint.
    std::optional<Checkpoint> init;
};

TrainerConfig toy_trainer_config(const ToyRunConfig& cfg);

struct ToyRunResult {
    std::vector<StepMetrics> metrics;
    DropHistogram train_drops;
    /// (step, heldout CE) at every eval_every interval, when enabled.
    std::vector<std::pair<std::int64_t, double>> eval_curve;
    double final_smoothed_loss = 0.0; // mean train MT loss over the last 200 steps
    double final_eval_ce = 0.0;       // heldout CE after the last step
    /// Mean of the last few eval points (up to 4); the ablation compares this.
    double final_eval_smoothed = 0.0;
    Checkpoint final_checkpoint;
};

ToyRunResult train_toy_run(const ToyRunConfig& cfg);

/// First evaluated step at which heldout CE reaches the threshold, or
/// steps + 1 when never reached. Requires eval_every > 0.
std::int64_t steps_to_threshold(const ToyRunResult& run, double threshold);

void write_metrics_csv(const std::filesystem::path& path,
                       const std::vector<StepMetrics>& metrics, bool with_timing);

// --- count-params ---

struct CountParamsRow {
    int experts = 0;
    ParamCount count;
    double published = 0.0; // 0 when no published figure exists
    double rel_delta = 0.0;
    double tolerance = 0.0;
};

struct CountParamsResult {
    std::vector<CountParamsRow> rows;
    bool within_tolerance = true;
};

/// preset: "large" carries the published size targets; "small"/"toy" report
/// counts only.
CountParamsResult run_count_params(const std::string& preset, int moe_every,
                                   const std::vector<int>& expert_counts);

std::string count_params_table(const CountParamsResult& result);

// --- drop-position bias on a constructed oversubscribed batch ---

struct DropBiasResult {
    double plain_final_half_fraction = 0.0; // fraction of plain drops at position >= T/2
    double rts_chi_square = 0.0;            // over 8 position buckets
    double chi_square_critical_001 = 18.475; // df = 7, significance 0.01
    std::array<std::int64_t, 8> rts_bucket_counts{};
    bool plain_biased = false; // >= 0.9 in the final half
    bool rts_uniform = false;  // chi-square below the critical value
};

DropBiasResult run_drop_bias(std::int64_t tokens, int experts, std::uint64_t seed);

// --- rts ablation (three assignment algorithms) ---

struct AblationRun {
    AssignmentMode mode;
    std::uint64_t seed = 0;
    double final_smoothed_loss = 0.0;
};

struct RtsAblationResult {
    std::vector<AblationRun> runs;
    double median_plain = 0.0;
    double median_grouped = 0.0;
    double median_rts = 0.0;
    bool ordering_holds = false; // rts <= grouped <= plain
    DropBiasResult drop_bias;
};

RtsAblationResult run_rts_ablation(std::int64_t steps, int num_seeds, std::uint64_t seed,
                                   const std::filesystem::path& out_dir);

// --- aoe ---

struct AoeDonors {
    Checkpoint a;
    Checkpoint b;
    double donor_loss_level = 0.0; // mean heldout CE of the two donors
};

/// Trains a shared base, then branches it twice with different data seeds.
AoeDonors make_aoe_donors(int experts, std::int64_t base_steps, std::int64_t branch_steps,
                          std::uint64_t seed);

struct AoeResult {
    double donor_loss_level = 0.0;
    std::vector<std::int64_t> merged_steps;
    std::vector<std::int64_t> random_steps;
    std::int64_t merged_median = 0;
    std::int64_t random_median = 0;
    bool merged_faster = false;
    bool self_merge_exact = false; // merge(C, C) eval loss equals C's exactly
};

AoeResult run_aoe(const Checkpoint& a, const Checkpoint& b, double donor_loss_level,
                  std::int64_t steps, int num_seeds, std::uint64_t seed,
                  const std::filesystem::path& out_dir);

// --- prune ---

struct PruneResult {
    double donor_ce = 0.0;
    double identity_ce = 0.0; // k = E pruned, no fine-tune
    std::vector<double> pruned_finetuned_ce;   // per seed, top-utilization
    std::vector<double> scratch_ce;            // per seed, equal-size scratch
    std::vector<double> random_pruned_ce;      // per seed, random selection
    double pruned_median = 0.0;
    double scratch_median = 0.0;
    double top_median = 0.0;
    double random_median = 0.0;
    bool pruned_beats_scratch = false;
    bool top_beats_random = false;
    bool identity_exact = false;
};

PruneResult run_prune(const Checkpoint& donor, int keep, std::int64_t finetune_steps,
                      std::int64_t scratch_steps, int scratch_seeds, int selection_seeds,
                      std::uint64_t seed, const std::filesystem::path& out_dir);

// --- sample efficiency ---

struct SampleEfficiencyResult {
    std::vector<int> expert_counts;
    // [expert setting][seed] -> steps to reach the dense 2000-step loss.
    std::vector<std::vector<std::int64_t>> steps_to_dense_loss;
    std::vector<double> dense_final_ce; // per seed
    std::int64_t budget_steps = 0;
    bool moe_faster = false; // median steps of the largest E < budget
};

SampleEfficiencyResult run_sample_efficiency(const std::vector<int>& expert_counts,
                                             std::int64_t steps, int num_seeds,
                                             std::uint64_t seed,
                                             const std::filesystem::path& out_dir);

double median(std::vector<double> values);
std::int64_t median_int(std::vector<std::int64_t> values);

} // namespace moeforge::experiments
