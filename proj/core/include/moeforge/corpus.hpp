// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "moeforge/rng.hpp"

namespace moeforge {

/// Fixed special token ids shared by every synthetic corpus.
namespace tok {
inline constexpr std::int32_t kPad = 0;
inline constexpr std::int32_t kBos = 1;
inline constexpr std::int32_t kEos = 2;
inline constexpr std::int32_t kMask = 3;
inline constexpr std::int32_t kBlank = 4;
inline constexpr std::int32_t kFirstLang = 5;
} // namespace tok

struct LanguageSpec {
    std::uint64_t seed = 1;
    std::int64_t corpus_sentences = 100000; // D_l
    int len_min = 6;
    int len_max = 12;
};

/// Synthetic multilingual data. Each language is a token-substitution cipher
/// over a shared content vocabulary; the MT task maps a raw source sentence
/// to its ciphered and reversed form, so every pair is exactly invertible by
/// construction. positional_skew > 0 ties symbol identity to sentence
/// position, which is what gives positional token-drop bias something real
/// to bite on.
struct CorpusConfig {
    int content_vocab = 64;
    std::vector<LanguageSpec> languages;
    double positional_skew = 0.0; // 0 = uniform symbols, 1 = fully position-bound
    std::uint64_t seed = 0;

    void validate() const;
    int num_languages() const { return static_cast<int>(languages.size()); }
    std::int64_t vocab() const {
        return tok::kFirstLang + num_languages() + content_vocab;
    }
    std::int32_t lang_tag(int lang) const { return tok::kFirstLang + lang; }
    std::int32_t first_content() const { return tok::kFirstLang + num_languages(); }

    static CorpusConfig two_language_default();
    static CorpusConfig load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
};

enum class Split { kTrain, kHeldout };

class SyntheticCorpus {
public:
    explicit SyntheticCorpus(CorpusConfig cfg);

    const CorpusConfig& config() const { return cfg_; }

    /// Raw source-language sentence (content ids only), deterministic in
    /// (language, split, index). Train and heldout draw from disjoint seed
    /// ranges.
    std::vector<std::int32_t> source_sentence(int lang, Split split,
                                              std::int64_t index) const;

    struct MtPair {
        std::vector<std::int32_t> src;
        std::vector<std::int32_t> tgt; // reverse(cipher(src))
    };
    MtPair mt_pair(int lang, Split split, std::int64_t index) const;

    /// Target-side monolingual sentence (cipher applied, not reversed).
    std::vector<std::int32_t> mono_sentence(int lang, Split split,
                                            std::int64_t index) const;

    std::int32_t cipher(int lang, std::int32_t token) const;

    std::vector<double> sizes() const;

private:
    CorpusConfig cfg_;
    std::vector<std::vector<std::int32_t>> ciphers_; // per language, over content ids
};

struct DaeNoiseConfig {
    double infill_ratio = 0.2;
    double drop_prob = 0.1;
    double blank_prob = 0.1;
    int swap_window = 3; // 1 disables swapping (offset 0 is the only draw)
    double span_length_mean = 3.0;
    std::uint64_t rng_seed = 0;

    void validate() const;
};

/// Applies, in order: span infilling (random spans totaling infill_ratio of
/// the tokens, each maximal masked run collapsing to one MASK), word drop,
/// word blank, and a single-pass neighbor swap within swap_window. Never
/// returns an empty sequence. Deterministic under the config seed.
std::vector<std::int32_t> noise_dae(const std::vector<std::int32_t>& clean,
                                    const DaeNoiseConfig& cfg);

/// Temperature sampling distribution: p_l proportional to (D_l / sum D)^(1/T).
std::vector<double> language_probs(const std::vector<double>& sizes, double temperature);

int sample_language(const std::vector<double>& sizes, double temperature, Rng& rng);

} // namespace moeforge
