// SPDX-License-Identifier: Apache-2.0
#include "moeforge/trainer.hpp"

#include <chrono>
#include <cmath>

#include "moeforge/common.hpp"

namespace moeforge {

const char* task_name(Task task) {
    return task == Task::kMt ? "mt" : "dae";
}

void DropHistogram::accumulate(const RoutingDecision& decision) {
    const std::int64_t t_count = decision.tokens();
    total_routed += t_count * decision.top_k;
    for (std::int64_t t = 0; t < t_count; ++t) {
        for (int k = 0; k < decision.top_k; ++k) {
            if (decision.slot[static_cast<std::size_t>(t * decision.top_k + k)] != kDropped) {
                continue;
            }
            ++total_dropped;
            const std::size_t bucket = static_cast<std::size_t>(
                std::min<std::int64_t>(7, t * 8 / std::max<std::int64_t>(1, t_count)));
            ++buckets[bucket];
        }
    }
}

namespace {

std::size_t task_slot(Task task) {
    return task == Task::kMt ? 0 : 1;
}

ModelParams build_from(const TrainerConfig& cfg) {
    return build_model(cfg.arch,
                       Rng::derive_seed(cfg.init_seed.value_or(cfg.seed), "init"));
}

} // namespace

MultitaskTrainer::MultitaskTrainer(TrainerConfig cfg, CorpusConfig corpus_cfg)
    : MultitaskTrainer(cfg, std::move(corpus_cfg), build_from(cfg)) {}

MultitaskTrainer::MultitaskTrainer(TrainerConfig cfg, CorpusConfig corpus_cfg,
                                   ModelParams model)
    : cfg_(std::move(cfg)),
      corpus_(std::move(corpus_cfg)),
      model_(std::move(model)),
      optimizer_(model_.trainable()),
      lang_rngs_{Rng(Rng::derive_seed(cfg_.seed, "lang-mt")),
                 Rng(Rng::derive_seed(cfg_.seed, "lang-dae"))},
      data_rngs_{Rng(Rng::derive_seed(cfg_.seed, "data-mt")),
                 Rng(Rng::derive_seed(cfg_.seed, "data-dae"))} {
    cfg_.router.validate();
    if (cfg_.tasks.empty()) {
        throw ConfigError("trainer: at least one task required");
    }
    if (model_.arch.vocab < corpus_.config().vocab()) {
        throw ConfigError("trainer: model vocab smaller than corpus vocab");
    }
    if (cfg_.router.num_experts != model_.arch.num_experts) {
        throw ConfigError("trainer: router num_experts does not match arch");
    }
    cfg_.noise.validate();
}

std::int64_t MultitaskTrainer::batches_consumed(Task task) const {
    return consumed_[task_slot(task)];
}

TaskBatch MultitaskTrainer::build_batch(Task task, std::int64_t step_index) {
    const std::size_t slot = task_slot(task);
    TaskBatch batch;
    batch.task = task;

    std::int64_t sentence = 0;
    auto add_sentence = [&](int language, std::int64_t index) {
        std::vector<std::int32_t> src_core;
        std::vector<std::int32_t> tgt_core;
        if (task == Task::kMt) {
            SyntheticCorpus::MtPair pair = corpus_.mt_pair(language, Split::kTrain, index);
            src_core = std::move(pair.src);
            tgt_core = std::move(pair.tgt);
        } else {
            tgt_core = corpus_.mono_sentence(language, Split::kTrain, index);
            DaeNoiseConfig noise = cfg_.noise;
            noise.rng_seed = Rng::derive_seed(
                Rng::derive_seed(cfg_.seed, "dae-noise"),
                static_cast<std::uint64_t>(step_index * 1000003 + sentence));
            src_core = noise_dae(tgt_core, noise);
        }

        std::vector<std::int32_t> src_seq;
        src_seq.reserve(src_core.size() + 2);
        src_seq.push_back(corpus_.config().lang_tag(language));
        src_seq.insert(src_seq.end(), src_core.begin(), src_core.end());
        src_seq.push_back(tok::kEos);

        std::vector<std::int32_t> dec_in;
        dec_in.reserve(tgt_core.size() + 1);
        dec_in.push_back(tok::kBos);
        dec_in.insert(dec_in.end(), tgt_core.begin(), tgt_core.end());

        batch.src.add(src_seq);
        batch.decoder_in.add(dec_in);
        batch.targets.insert(batch.targets.end(), tgt_core.begin(), tgt_core.end());
        batch.targets.push_back(tok::kEos);
        ++sentence;
        return static_cast<std::int64_t>(src_seq.size());
    };

    auto draw_index = [&](int language) {
        const LanguageSpec& lang =
            corpus_.config().languages[static_cast<std::size_t>(language)];
        return static_cast<std::int64_t>(
            data_rngs_[slot].uniform_int(static_cast<std::uint64_t>(lang.corpus_sentences)));
    };

    if (cfg_.mixed_language_batches) {
        batch.language = -1;
        const int langs = corpus_.config().num_languages();
        const std::int64_t share = cfg_.tokens_per_task / langs;
        for (int l = 0; l < langs; ++l) {
            std::int64_t lang_tokens = 0;
            while (lang_tokens < share) {
                lang_tokens += add_sentence(l, draw_index(l));
            }
        }
    } else {
        batch.language =
            sample_language(corpus_.sizes(), cfg_.temperature, lang_rngs_[slot]);
        std::int64_t src_tokens = 0;
        while (src_tokens < cfg_.tokens_per_task) {
            src_tokens += add_sentence(batch.language, draw_index(batch.language));
        }
    }
    return batch;
}

Tensor MultitaskTrainer::task_loss(const TaskBatch& batch, std::int64_t step_index,
                                   std::vector<RoutingDecision>* decisions,
                                   Tensor* aux_sum) {
    ForwardResult fwd = forward(
        model_, batch.src, batch.decoder_in, cfg_.router, Phase::kTrain,
        Rng::derive_seed(Rng::derive_seed(cfg_.seed, task_name(batch.task)),
                         static_cast<std::uint64_t>(step_index)));
    if (decisions) {
        for (RoutingDecision& d : fwd.decisions) {
            decisions->push_back(std::move(d));
        }
    }
    *aux_sum = add(*aux_sum, fwd.aux_loss);
    return cross_entropy_mean(fwd.logits, batch.targets);
}

StepMetrics MultitaskTrainer::step() {
    const auto t0 = std::chrono::steady_clock::now();
    optimizer_.zero_grad();

    StepMetrics metrics;
    metrics.step = step_;
    Tensor aux_sum = Tensor::scalar(0.0);
    Tensor total = Tensor::scalar(0.0);
    std::vector<RoutingDecision> decisions;
    for (Task task : cfg_.tasks) {
        TaskBatch batch = build_batch(task, step_);
        Tensor ce = task_loss(batch, step_, &decisions, &aux_sum);
        if (task == Task::kMt) {
            metrics.mt_loss = ce.scalar_value();
        } else {
            metrics.dae_loss = ce.scalar_value();
        }
        total = add(total, ce);
        ++consumed_[task_slot(task)];
    }
    total = add(total, aux_sum);
    total.backward();

    metrics.lr = lr_at(cfg_.schedule, step_ + 1);
    optimizer_.step(metrics.lr, cfg_.grad_clip_norm);
    ++step_;

    metrics.aux_loss = aux_sum.scalar_value();
    DropHistogram step_drops;
    for (const RoutingDecision& d : decisions) {
        step_drops.accumulate(d);
        train_drops_.accumulate(d);
    }
    metrics.dropped_frac = step_drops.dropped_fraction();
    metrics.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
    return metrics;
}

EvalMetrics MultitaskTrainer::evaluate(std::int64_t ce_sentences,
                                       std::int64_t generate_sentences) {
    RouterConfig eval_cfg = cfg_.router;
    GenerateFn generator = [&](const std::vector<std::int32_t>& src) {
        return generate(model_, src, static_cast<std::int64_t>(src.size()) + 4, eval_cfg,
                        tok::kBos, tok::kEos);
    };
    return evaluate_with(ce_sentences, generate_sentences, generator);
}

EvalMetrics MultitaskTrainer::evaluate_with(std::int64_t ce_sentences,
                                            std::int64_t generate_sentences,
                                            const GenerateFn& generator) {
    EvalMetrics metrics;
    const int lang_count = corpus_.config().num_languages();

    TokenBatch src;
    TokenBatch dec_in;
    std::vector<std::int32_t> targets;
    for (std::int64_t i = 0; i < ce_sentences; ++i) {
        const int lang = static_cast<int>(i % lang_count);
        SyntheticCorpus::MtPair pair = corpus_.mt_pair(lang, Split::kHeldout, i);
        std::vector<std::int32_t> s = {corpus_.config().lang_tag(lang)};
        s.insert(s.end(), pair.src.begin(), pair.src.end());
        s.push_back(tok::kEos);
        std::vector<std::int32_t> d = {tok::kBos};
        d.insert(d.end(), pair.tgt.begin(), pair.tgt.end());
        src.add(s);
        dec_in.add(d);
        targets.insert(targets.end(), pair.tgt.begin(), pair.tgt.end());
        targets.push_back(tok::kEos);
    }
    ForwardResult fwd = forward(model_, src, dec_in, cfg_.router, Phase::kEval, 0);
    metrics.mt_cross_entropy = cross_entropy_mean(fwd.logits, targets).scalar_value();
    for (const RoutingDecision& d : fwd.decisions) {
        metrics.drop_hist.accumulate(d);
    }

    // Token accuracy from the teacher-forced logits.
    std::int64_t correct = 0;
    const std::int64_t v = fwd.logits.shape()[1];
    for (std::int64_t t = 0; t < fwd.logits.shape()[0]; ++t) {
        const double* row = fwd.logits.data().data() + t * v;
        std::int64_t best = 0;
        for (std::int64_t j = 1; j < v; ++j) {
            if (row[j] > row[best]) best = j;
        }
        if (best == targets[static_cast<std::size_t>(t)]) ++correct;
    }
    metrics.token_accuracy =
        static_cast<double>(correct) / static_cast<double>(targets.size());

    if (generate_sentences > 0) {
        std::int64_t exact = 0;
        for (std::int64_t i = 0; i < generate_sentences; ++i) {
            const int lang = static_cast<int>(i % lang_count);
            SyntheticCorpus::MtPair pair = corpus_.mt_pair(lang, Split::kHeldout, i);
            std::vector<std::int32_t> s = {corpus_.config().lang_tag(lang)};
            s.insert(s.end(), pair.src.begin(), pair.src.end());
            s.push_back(tok::kEos);
            if (generator(s) == pair.tgt) {
                ++exact;
            }
        }
        metrics.exact_match =
            static_cast<double>(exact) / static_cast<double>(generate_sentences);
    }
    return metrics;
}

} // namespace moeforge
