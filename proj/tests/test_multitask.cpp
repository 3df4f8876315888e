// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>

#include "moeforge/common.hpp"
#include "moeforge/trainer.hpp"

using namespace moeforge;

namespace {

CorpusConfig toy_corpus() {
    CorpusConfig cfg;
    cfg.content_vocab = 32;
    cfg.languages = {{101, 5000, 5, 9}, {202, 1000, 5, 9}};
    return cfg;
}

TrainerConfig toy_trainer(const CorpusConfig& corpus, int experts = 2) {
    TrainerConfig cfg;
    cfg.arch = ArchConfig::toy(corpus.vocab(), experts);
    cfg.arch.d_model = 16;
    cfg.arch.ffn_dim = 24;
    cfg.arch.heads = 2;
    cfg.router.num_experts = experts;
    cfg.tokens_per_task = 48;
    cfg.schedule = {0.01, 100};
    cfg.seed = 7;
    return cfg;
}

} // namespace

TEST_CASE("noise_dae") {
    SUBCASE("all probabilities zero with the degenerate window is the identity") {
        DaeNoiseConfig cfg;
        cfg.infill_ratio = 0.0;
        cfg.drop_prob = 0.0;
        cfg.blank_prob = 0.0;
        cfg.swap_window = 1;
        std::vector<std::int32_t> clean = {9, 10, 11, 12, 13, 14};
        CHECK(noise_dae(clean, cfg) == clean);
    }
    SUBCASE("infill_ratio 1.0 collapses to a single MASK") {
        DaeNoiseConfig cfg;
        cfg.infill_ratio = 1.0;
        cfg.drop_prob = 0.0;
        cfg.blank_prob = 0.0;
        cfg.swap_window = 1;
        std::vector<std::int32_t> clean(40, 9);
        const auto noised = noise_dae(clean, cfg);
        REQUIRE(noised.size() == 1);
        CHECK(noised[0] == tok::kMask);
    }
    SUBCASE("empty input rejected") {
        CHECK_THROWS_AS((void)noise_dae({}, DaeNoiseConfig{}), ConfigError);
    }
    SUBCASE("Monte Carlo: masked fraction tracks the configured infill ratio") {
        std::vector<std::int32_t> clean(1000);
        for (std::size_t i = 0; i < clean.size(); ++i) {
            clean[i] = static_cast<std::int32_t>(9 + i % 50);
        }
        double total_fraction = 0.0;
        const int seeds = 1000;
        for (int s = 0; s < seeds; ++s) {
            DaeNoiseConfig cfg; // defaults: infill 0.2, drop 0.1, blank 0.1
            cfg.drop_prob = 0.0;
            cfg.blank_prob = 0.0;
            cfg.swap_window = 1;
            cfg.rng_seed = static_cast<std::uint64_t>(s);
            const auto noised = noise_dae(clean, cfg);
            // Tokens consumed by infill = original length minus survivors
            // (each masked run re-emits one MASK).
            std::int64_t masks = 0, survivors = 0;
            for (std::int32_t t : noised) {
                if (t == tok::kMask) ++masks;
                else ++survivors;
            }
            total_fraction +=
                static_cast<double>(1000 - survivors) / 1000.0;
        }
        CHECK(total_fraction / seeds == doctest::Approx(0.20).epsilon(0.1)); // 0.20 +- 0.02
    }
    SUBCASE("never empty, never out of domain (fuzz)") {
        Rng rng(55);
        for (int trial = 0; trial < 300; ++trial) {
            const int len = 1 + static_cast<int>(rng.uniform_int(30));
            std::vector<std::int32_t> clean(static_cast<std::size_t>(len));
            for (auto& t : clean) {
                t = static_cast<std::int32_t>(9 + rng.uniform_int(40));
            }
            DaeNoiseConfig cfg;
            cfg.infill_ratio = rng.uniform();
            cfg.drop_prob = rng.uniform();
            cfg.blank_prob = rng.uniform();
            cfg.swap_window = 1 + static_cast<int>(rng.uniform_int(4));
            cfg.rng_seed = rng.next_u64();
            const auto noised = noise_dae(clean, cfg);
            REQUIRE_FALSE(noised.empty());
            for (std::int32_t t : noised) {
                const bool in_domain =
                    t == tok::kMask || t == tok::kBlank ||
                    std::find(clean.begin(), clean.end(), t) != clean.end();
                REQUIRE(in_domain);
            }
        }
    }
    SUBCASE("deterministic under a fixed seed") {
        std::vector<std::int32_t> clean(64, 10);
        DaeNoiseConfig cfg;
        cfg.rng_seed = 99;
        CHECK(noise_dae(clean, cfg) == noise_dae(clean, cfg));
    }
}

TEST_CASE("temperature sampling") {
    SUBCASE("T = 1 is proportional to the data sizes") {
        auto p = language_probs({30.0, 10.0}, 1.0);
        CHECK(p[0] == doctest::Approx(0.75).epsilon(1e-12));
        CHECK(p[1] == doctest::Approx(0.25).epsilon(1e-12));
    }
    SUBCASE("T -> infinity flattens to uniform") {
        auto p = language_probs({30.0, 10.0, 60.0}, 1e9);
        const double mx = *std::max_element(p.begin(), p.end());
        const double mn = *std::min_element(p.begin(), p.end());
        CHECK(mx - mn < 1e-9);
    }
    SUBCASE("D = [90, 10], T = 5 matches the formula") {
        // Oracle: p0 = (0.9)^0.2 / ((0.9)^0.2 + (0.1)^0.2), evaluated here.
        const double w0 = std::pow(0.9, 0.2), w1 = std::pow(0.1, 0.2);
        const double expected0 = w0 / (w0 + w1);
        CHECK(expected0 == doctest::Approx(0.608127).epsilon(1e-5));
        auto p = language_probs({90.0, 10.0}, 5.0);
        CHECK(p[0] == doctest::Approx(expected0).epsilon(1e-12));
        CHECK(p[1] == doctest::Approx(1.0 - expected0).epsilon(1e-12));
    }
    SUBCASE("sampler follows the distribution (Monte Carlo)") {
        Rng rng(77);
        std::vector<double> sizes = {90.0, 10.0};
        int hits = 0;
        const int trials = 20000;
        for (int i = 0; i < trials; ++i) {
            if (sample_language(sizes, 5.0, rng) == 0) ++hits;
        }
        CHECK(static_cast<double>(hits) / trials == doctest::Approx(0.608).epsilon(0.02));
    }
    SUBCASE("invalid inputs rejected") {
        CHECK_THROWS_AS((void)language_probs({1.0, 0.0}, 5.0), ConfigError);
        CHECK_THROWS_AS((void)language_probs({1.0, 2.0}, 0.0), ConfigError);
    }
}

TEST_CASE("synthetic corpus") {
    SyntheticCorpus corpus(toy_corpus());
    SUBCASE("MT pairs are exactly invertible by the generating rule") {
        for (int lang = 0; lang < 2; ++lang) {
            for (int i = 0; i < 20; ++i) {
                auto pair = corpus.mt_pair(lang, Split::kTrain, i);
                REQUIRE(pair.src.size() == pair.tgt.size());
                for (std::size_t j = 0; j < pair.src.size(); ++j) {
                    CHECK(pair.tgt[j] ==
                          corpus.cipher(lang, pair.src[pair.src.size() - 1 - j]));
                }
            }
        }
    }
    SUBCASE("deterministic and split-disjoint by construction") {
        auto a = corpus.source_sentence(0, Split::kTrain, 3);
        auto b = corpus.source_sentence(0, Split::kTrain, 3);
        CHECK(a == b);
        auto h = corpus.source_sentence(0, Split::kHeldout, 3);
        CHECK(a != h); // different seed stream
    }
    SUBCASE("ciphers differ across languages and stay in the content range") {
        const auto first = corpus.config().first_content();
        bool any_diff = false;
        for (int c = 0; c < corpus.config().content_vocab; ++c) {
            const auto t = static_cast<std::int32_t>(first + c);
            const auto c0 = corpus.cipher(0, t);
            const auto c1 = corpus.cipher(1, t);
            CHECK(c0 >= first);
            CHECK(c0 < first + corpus.config().content_vocab);
            any_diff = any_diff || c0 != c1;
        }
        CHECK(any_diff);
    }
    SUBCASE("positional skew narrows the symbol window by position") {
        CorpusConfig skewed = toy_corpus();
        skewed.positional_skew = 0.9;
        skewed.languages[0].len_min = 16;
        skewed.languages[0].len_max = 16;
        SyntheticCorpus sc(skewed);
        const auto first = sc.config().first_content();
        // First and last positions live in disjoint parts of the vocabulary.
        std::set<std::int32_t> front, back;
        for (int i = 0; i < 60; ++i) {
            auto s = sc.source_sentence(0, Split::kTrain, i);
            front.insert(s.front());
            back.insert(s.back());
        }
        CHECK(*std::max_element(front.begin(), front.end()) <
              *std::min_element(back.begin(), back.end()));
        CHECK(*front.begin() >= first);
    }
}

TEST_CASE("multitask trainer") {
    const CorpusConfig corpus = toy_corpus();

    SUBCASE("additive loss decomposes into per-task losses at equal parameters") {
        TrainerConfig cfg = toy_trainer(corpus);
        MultitaskTrainer both(cfg, corpus);
        // Same seed: identical init and identical per-task batch streams.
        MultitaskTrainer mt_only([&] {
            TrainerConfig c = cfg;
            c.tasks = {Task::kMt};
            return c;
        }(), corpus);
        MultitaskTrainer dae_only([&] {
            TrainerConfig c = cfg;
            c.tasks = {Task::kDae};
            return c;
        }(), corpus);

        StepMetrics m_both = both.step();
        StepMetrics m_mt = mt_only.step();
        StepMetrics m_dae = dae_only.step();
        REQUIRE(m_both.mt_loss.has_value());
        REQUIRE(m_both.dae_loss.has_value());
        CHECK(*m_both.mt_loss == doctest::Approx(*m_mt.mt_loss).epsilon(1e-10));
        CHECK(*m_both.dae_loss == doctest::Approx(*m_dae.dae_loss).epsilon(1e-10));
    }

    SUBCASE("single-task run equals a plain MT step bit-for-bit") {
        TrainerConfig cfg = toy_trainer(corpus);
        cfg.tasks = {Task::kMt};
        MultitaskTrainer a(cfg, corpus);
        MultitaskTrainer b(cfg, corpus);
        StepMetrics ma = a.step();
        StepMetrics mb = b.step();
        CHECK(*ma.mt_loss == *mb.mt_loss);
        for (std::size_t i = 0; i < a.model().tensors.size(); ++i) {
            const auto av = a.model().tensors[i].data();
            const auto bv = b.model().tensors[i].data();
            for (std::size_t j = 0; j < av.size(); ++j) {
                REQUIRE(av[j] == bv[j]);
            }
        }
    }

    SUBCASE("each task consumes exactly one batch per step") {
        TrainerConfig cfg = toy_trainer(corpus);
        MultitaskTrainer trainer(cfg, corpus);
        for (int s = 0; s < 5; ++s) {
            trainer.step();
        }
        CHECK(trainer.batches_consumed(Task::kMt) == 5);
        CHECK(trainer.batches_consumed(Task::kDae) == 5);
    }

    SUBCASE("untrained model cross-entropy is close to ln(vocab)") {
        TrainerConfig cfg = toy_trainer(corpus);
        MultitaskTrainer trainer(cfg, corpus);
        EvalMetrics metrics = trainer.evaluate(24, 0);
        const double expected = std::log(static_cast<double>(corpus.vocab()));
        CHECK(metrics.mt_cross_entropy ==
              doctest::Approx(expected).epsilon(0.10));
    }

    SUBCASE("a perfect generator scores 100% exact match") {
        TrainerConfig cfg = toy_trainer(corpus);
        MultitaskTrainer trainer(cfg, corpus);
        SyntheticCorpus ref(corpus);
        auto oracle = [&](const std::vector<std::int32_t>& src) {
            // src = [lang tag] + sentence + [EOS]; reproduce the target rule.
            const int lang = src.front() - tok::kFirstLang;
            std::vector<std::int32_t> core(src.begin() + 1, src.end() - 1);
            std::vector<std::int32_t> tgt(core.size());
            for (std::size_t i = 0; i < core.size(); ++i) {
                tgt[i] = ref.cipher(lang, core[core.size() - 1 - i]);
            }
            return tgt;
        };
        EvalMetrics metrics = trainer.evaluate_with(8, 8, oracle);
        CHECK(metrics.exact_match == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("drop histogram buckets sum to the dropped total") {
        TrainerConfig cfg = toy_trainer(corpus, 4);
        cfg.router.capacity_factor_train = 0.4; // force drops
        MultitaskTrainer trainer(cfg, corpus);
        for (int s = 0; s < 3; ++s) {
            trainer.step();
        }
        const DropHistogram& hist = trainer.train_drop_hist();
        std::int64_t total = 0;
        for (std::int64_t b : hist.buckets) {
            total += b;
        }
        CHECK(total == hist.total_dropped);
        CHECK(hist.total_dropped > 0);
        CHECK(hist.total_routed > 0);
    }

    SUBCASE("fixed master seed reproduces metrics exactly") {
        TrainerConfig cfg = toy_trainer(corpus);
        MultitaskTrainer a(cfg, corpus);
        MultitaskTrainer b(cfg, corpus);
        for (int s = 0; s < 3; ++s) {
            StepMetrics ma = a.step();
            StepMetrics mb = b.step();
            CHECK(*ma.mt_loss == *mb.mt_loss);
            CHECK(*ma.dae_loss == *mb.dae_loss);
            CHECK(ma.aux_loss == mb.aux_loss);
            CHECK(ma.dropped_frac == mb.dropped_frac);
        }
    }

    SUBCASE("loss decreases over a short MT-only run") {
        TrainerConfig cfg = toy_trainer(corpus);
        cfg.tasks = {Task::kMt};
        cfg.schedule = {0.05, 40};
        MultitaskTrainer trainer(cfg, corpus);
        double first_avg = 0.0, last_avg = 0.0;
        const int steps = 120;
        for (int s = 0; s < steps; ++s) {
            StepMetrics m = trainer.step();
            if (s < 20) first_avg += *m.mt_loss / 20.0;
            if (s >= steps - 20) last_avg += *m.mt_loss / 20.0;
        }
        CHECK(last_avg < first_avg);
    }
}
