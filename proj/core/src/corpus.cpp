// SPDX-License-Identifier: Apache-2.0
#include "moeforge/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <nlohmann/json.hpp>

#include "moeforge/common.hpp"

namespace moeforge {

using nlohmann::json;

void CorpusConfig::validate() const {
    if (content_vocab < 2) throw ConfigError("corpus: content_vocab must be >= 2");
    if (languages.empty()) throw ConfigError("corpus: at least one language required");
    if (positional_skew < 0.0 || positional_skew > 1.0) {
        throw ConfigError("corpus: positional_skew must be in [0, 1]");
    }
    for (const LanguageSpec& lang : languages) {
        if (lang.corpus_sentences < 1) throw ConfigError("corpus: corpus_sentences must be >= 1");
        if (lang.len_min < 1 || lang.len_max < lang.len_min) {
            throw ConfigError("corpus: invalid sentence length range");
        }
    }
}

CorpusConfig CorpusConfig::two_language_default() {
    CorpusConfig cfg;
    cfg.content_vocab = 64;
    cfg.languages = {{11, 100000, 6, 12}, {23, 25000, 6, 12}};
    return cfg;
}

CorpusConfig CorpusConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open corpus config " + path.string());
    }
    json j = json::parse(in);
    CorpusConfig cfg;
    cfg.content_vocab = j.at("content_vocab").get<int>();
    cfg.positional_skew = j.value("positional_skew", 0.0);
    cfg.seed = j.value("seed", std::uint64_t{0});
    for (const json& lj : j.at("languages")) {
        LanguageSpec lang;
        lang.seed = lj.at("seed").get<std::uint64_t>();
        lang.corpus_sentences = lj.at("sentences").get<std::int64_t>();
        lang.len_min = lj.value("len_min", 6);
        lang.len_max = lj.value("len_max", 12);
        cfg.languages.push_back(lang);
    }
    cfg.validate();
    return cfg;
}

void CorpusConfig::save(const std::filesystem::path& path) const {
    json langs = json::array();
    for (const LanguageSpec& lang : languages) {
        langs.push_back(json{{"seed", lang.seed},
                             {"sentences", lang.corpus_sentences},
                             {"len_min", lang.len_min},
                             {"len_max", lang.len_max}});
    }
    json j{{"content_vocab", content_vocab},
           {"positional_skew", positional_skew},
           {"seed", seed},
           {"languages", std::move(langs)}};
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << "\n";
}

SyntheticCorpus::SyntheticCorpus(CorpusConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    ciphers_.reserve(cfg_.languages.size());
    for (const LanguageSpec& lang : cfg_.languages) {
        Rng rng(Rng::derive_seed(Rng::derive_seed(cfg_.seed, lang.seed), "cipher"));
        auto perm = rng.permutation(static_cast<std::size_t>(cfg_.content_vocab));
        ciphers_.emplace_back(perm.begin(), perm.end());
    }
}

std::vector<std::int32_t> SyntheticCorpus::source_sentence(int lang, Split split,
                                                           std::int64_t index) const {
    const LanguageSpec& spec = cfg_.languages.at(static_cast<std::size_t>(lang));
    const std::uint64_t split_tag = split == Split::kTrain ? 0x7261 : 0x6865;
    Rng rng(Rng::derive_seed(
        Rng::derive_seed(Rng::derive_seed(cfg_.seed, spec.seed), split_tag),
        static_cast<std::uint64_t>(index % spec.corpus_sentences)));

    const int len = spec.len_min +
                    static_cast<int>(rng.uniform_int(
                        static_cast<std::uint64_t>(spec.len_max - spec.len_min + 1)));
    const int vc = cfg_.content_vocab;
    const int window = std::max(
        1, static_cast<int>(std::lround(vc * (1.0 - cfg_.positional_skew))));
    std::vector<std::int32_t> out(static_cast<std::size_t>(len));
    for (int i = 0; i < len; ++i) {
        int start = 0;
        if (len > 1 && window < vc) {
            start = static_cast<int>(
                std::lround(static_cast<double>(i) / (len - 1) * (vc - window)));
        }
        out[static_cast<std::size_t>(i)] =
            cfg_.first_content() + start +
            static_cast<std::int32_t>(rng.uniform_int(static_cast<std::uint64_t>(window)));
    }
    return out;
}

std::int32_t SyntheticCorpus::cipher(int lang, std::int32_t token) const {
    const std::int32_t rel = token - cfg_.first_content();
    if (rel < 0 || rel >= cfg_.content_vocab) {
        throw ConfigError("cipher: token is not a content symbol");
    }
    return cfg_.first_content() + ciphers_[static_cast<std::size_t>(lang)][static_cast<std::size_t>(rel)];
}

SyntheticCorpus::MtPair SyntheticCorpus::mt_pair(int lang, Split split,
                                                 std::int64_t index) const {
    MtPair pair;
    pair.src = source_sentence(lang, split, index);
    pair.tgt.resize(pair.src.size());
    for (std::size_t i = 0; i < pair.src.size(); ++i) {
        pair.tgt[i] = cipher(lang, pair.src[pair.src.size() - 1 - i]);
    }
    return pair;
}

std::vector<std::int32_t> SyntheticCorpus::mono_sentence(int lang, Split split,
                                                         std::int64_t index) const {
    // Separate index stream from the MT pairs.
    std::vector<std::int32_t> s = source_sentence(lang, split, index + (1LL << 40));
    for (std::int32_t& t : s) {
        t = cipher(lang, t);
    }
    return s;
}

std::vector<double> SyntheticCorpus::sizes() const {
    std::vector<double> out;
    out.reserve(cfg_.languages.size());
    for (const LanguageSpec& lang : cfg_.languages) {
        out.push_back(static_cast<double>(lang.corpus_sentences));
    }
    return out;
}

void DaeNoiseConfig::validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(infill_ratio) || !prob(drop_prob) || !prob(blank_prob)) {
        throw ConfigError("dae: probabilities must be in [0, 1]");
    }
    if (swap_window < 1) throw ConfigError("dae: swap_window must be >= 1");
    if (span_length_mean <= 0.0) throw ConfigError("dae: span_length_mean must be positive");
}

std::vector<std::int32_t> noise_dae(const std::vector<std::int32_t>& clean,
                                    const DaeNoiseConfig& cfg) {
    cfg.validate();
    if (clean.empty()) {
        throw ConfigError("noise_dae: empty input");
    }
    Rng rng(cfg.rng_seed);
    const std::int64_t n = static_cast<std::int64_t>(clean.size());

    // 1) Span infilling: mark spans until exactly round(ratio * n) original
    // tokens are covered, then collapse each maximal masked run to one MASK.
    const std::int64_t budget = std::llround(cfg.infill_ratio * static_cast<double>(n));
    std::vector<std::uint8_t> masked(static_cast<std::size_t>(n), 0);
    std::int64_t covered = 0;
    while (covered < budget) {
        std::int64_t span = std::max(1, rng.poisson(cfg.span_length_mean));
        span = std::min(span, budget - covered);
        // Uniform start among still-unmasked positions.
        std::int64_t pick = static_cast<std::int64_t>(
            rng.uniform_int(static_cast<std::uint64_t>(n - covered)));
        std::int64_t start = -1;
        for (std::int64_t i = 0; i < n; ++i) {
            if (!masked[static_cast<std::size_t>(i)] && pick-- == 0) {
                start = i;
                break;
            }
        }
        for (std::int64_t i = start; i < n && span > 0; ++i) {
            if (!masked[static_cast<std::size_t>(i)]) {
                masked[static_cast<std::size_t>(i)] = 1;
                ++covered;
                --span;
            }
        }
    }
    std::vector<std::int32_t> seq;
    seq.reserve(clean.size());
    for (std::int64_t i = 0; i < n; ++i) {
        if (masked[static_cast<std::size_t>(i)]) {
            if (i == 0 || !masked[static_cast<std::size_t>(i - 1)]) {
                seq.push_back(tok::kMask);
            }
        } else {
            seq.push_back(clean[static_cast<std::size_t>(i)]);
        }
    }

    // 2) Word drop.
    if (cfg.drop_prob > 0.0) {
        std::vector<std::int32_t> kept;
        kept.reserve(seq.size());
        for (std::int32_t t : seq) {
            if (rng.uniform() >= cfg.drop_prob) {
                kept.push_back(t);
            }
        }
        if (kept.empty()) {
            kept.push_back(seq.front());
        }
        seq = std::move(kept);
    }

    // 3) Word blank.
    if (cfg.blank_prob > 0.0) {
        for (std::int32_t& t : seq) {
            if (rng.uniform() < cfg.blank_prob) {
                t = tok::kBlank;
            }
        }
    }

    // 4) Single-pass neighbor swap; offset 0 keeps the token in place.
    if (cfg.swap_window > 1) {
        const std::int64_t len = static_cast<std::int64_t>(seq.size());
        for (std::int64_t i = 0; i + 1 < len; ++i) {
            const std::int64_t offset = static_cast<std::int64_t>(
                rng.uniform_int(static_cast<std::uint64_t>(cfg.swap_window)));
            if (offset > 0) {
                std::swap(seq[static_cast<std::size_t>(i)],
                          seq[static_cast<std::size_t>(std::min(i + offset, len - 1))]);
            }
        }
    }
    return seq;
}

std::vector<double> language_probs(const std::vector<double>& sizes, double temperature) {
    if (temperature <= 0.0) {
        throw ConfigError("language_probs: temperature must be positive");
    }
    double total = 0.0;
    for (double d : sizes) {
        if (d <= 0.0) throw ConfigError("language_probs: sizes must be positive");
        total += d;
    }
    std::vector<double> probs(sizes.size());
    double norm = 0.0;
    for (std::size_t i = 0; i < sizes.size(); ++i) {
        probs[i] = std::pow(sizes[i] / total, 1.0 / temperature);
        norm += probs[i];
    }
    for (double& p : probs) {
        p /= norm;
    }
    return probs;
}

int sample_language(const std::vector<double>& sizes, double temperature, Rng& rng) {
    return static_cast<int>(rng.categorical(language_probs(sizes, temperature)));
}

} // namespace moeforge
