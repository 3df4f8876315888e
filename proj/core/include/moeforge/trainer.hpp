// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <functional>
#include <optional>

#include "moeforge/corpus.hpp"
#include "moeforge/model.hpp"
#include "moeforge/optim.hpp"

namespace moeforge {

enum class Task { kMt, kDae };

const char* task_name(Task task);

/// One per-task batch: encoder input is [lang tag] + tokens + [EOS], decoder
/// input is [BOS] + target, and targets is the flat teacher-forcing target
/// (target tokens + [EOS] per sentence).
struct TaskBatch {
    Task task = Task::kMt;
    int language = 0;
    TokenBatch src;
    TokenBatch decoder_in;
    std::vector<std::int32_t> targets;
};

/// Relative-position histogram of dropped tokens (8 buckets over the
/// flattened position range of each routed batch).
struct DropHistogram {
    std::array<std::int64_t, 8> buckets{};
    std::int64_t total_dropped = 0;
    std::int64_t total_routed = 0;

    void accumulate(const RoutingDecision& decision);
    double dropped_fraction() const {
        return total_routed == 0 ? 0.0
                                 : static_cast<double>(total_dropped) /
                                       static_cast<double>(total_routed);
    }
};

struct TrainerConfig {
    ArchConfig arch;
    RouterConfig router;
    LrSchedule schedule;
    std::vector<Task> tasks = {Task::kMt, Task::kDae};
    std::int64_t tokens_per_task = 4096;
    double temperature = 5.0;
    DaeNoiseConfig noise;
    double grad_clip_norm = 0.0; // 0 disables global-norm clipping
    std::uint64_t seed = 0;
    /// Weight-initialization stream; defaults to seed. Controlled experiments
    /// share the init while varying the data/noise streams.
    std::optional<std::uint64_t> init_seed;
    /// When set, every batch holds all languages concatenated in language
    /// order (equal sentence shares) instead of sampling one language per
    /// batch. This mirrors language-blocked loaders, where the flattened
    /// suffix of a batch is always the same languages.
    bool mixed_language_batches = false;
};

struct StepMetrics {
    std::int64_t step = 0;
    double lr = 0.0;
    std::optional<double> mt_loss;
    std::optional<double> dae_loss;
    double aux_loss = 0.0;
    double dropped_frac = 0.0;
    std::int64_t wall_ms = 0;
};

struct EvalMetrics {
    double mt_cross_entropy = 0.0;
    double exact_match = 0.0;
    double token_accuracy = 0.0;
    DropHistogram drop_hist;
};

/// Multitask training loop: one batch per task per step, additive loss
/// (sum of task cross-entropies plus every MoE balance loss), one backward,
/// one Adam step. Every random stream is derived from the config seed, so a
/// fixed seed reproduces the run bit-for-bit.
class MultitaskTrainer {
public:
    MultitaskTrainer(TrainerConfig cfg, CorpusConfig corpus_cfg);
    MultitaskTrainer(TrainerConfig cfg, CorpusConfig corpus_cfg, ModelParams model);

    StepMetrics step();

    const ModelParams& model() const { return model_; }
    ModelParams& model() { return model_; }
    const SyntheticCorpus& corpus() const { return corpus_; }
    std::int64_t steps_done() const { return step_; }
    std::int64_t batches_consumed(Task task) const;
    const DropHistogram& train_drop_hist() const { return train_drops_; }

    /// Deterministic batch for (task, step index); exposed so loss additivity
    /// and single-task equivalence can be tested against fixed data.
    TaskBatch build_batch(Task task, std::int64_t step_index);

    /// Heldout MT metrics under eval-phase routing. Exact match runs greedy
    /// generation on generate_sentences pairs (0 skips generation).
    EvalMetrics evaluate(std::int64_t ce_sentences, std::int64_t generate_sentences);

    using GenerateFn =
        std::function<std::vector<std::int32_t>(const std::vector<std::int32_t>& src)>;
    /// Same metrics with an injected generator (used to validate the metric
    /// against a known-perfect reference).
    EvalMetrics evaluate_with(std::int64_t ce_sentences, std::int64_t generate_sentences,
                              const GenerateFn& generator);

private:
    Tensor task_loss(const TaskBatch& batch, std::int64_t step_index,
                     std::vector<RoutingDecision>* decisions, Tensor* aux_sum);

    TrainerConfig cfg_;
    SyntheticCorpus corpus_;
    ModelParams model_;
    AdamOptimizer optimizer_;
    std::int64_t step_ = 0;
    std::array<std::int64_t, 2> consumed_{0, 0};
    std::array<Rng, 2> lang_rngs_;
    std::array<Rng, 2> data_rngs_;
    DropHistogram train_drops_;
};

} // namespace moeforge
