// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sg {

enum class Form : uint8_t { kEnv, kLan };

// One utterance: spoken words (LAN) or an environmental description (ENV),
// attributed to a role special token such as "<CHI>".
struct Utterance {
    std::string role;
    std::vector<std::string> words;
    Form form = Form::kLan;
};

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Word-level vocabulary in which every word owns two distinct token ids:
// its environmental form and its linguistic form.
class DualVocab {
public:
    struct Entry {
        int env_id = -1;
        int lan_id = -1;
    };

    static constexpr const char *kPad = "<PAD>";
    static constexpr const char *kUnkEnv = "<UNK_ENV>";
    static constexpr const char *kUnkLan = "<UNK_LAN>";

    // Builds from a corpus: words whose frequency in either form reaches
    // min_count get both ids, ordered by descending total frequency then
    // lexicographically. Throws on an empty corpus.
    static DualVocab build(std::span<const Utterance> utterances, int min_count);

    int size() const { return size_; }
    bool has_word(const std::string &w) const { return entries_.count(w) != 0; }
    const Entry &entry(const std::string &w) const;
    int special(const std::string &name) const;
    bool has_special(const std::string &name) const { return specials_.count(name) != 0; }
    int pad_id() const { return special(kPad); }

    const std::map<std::string, Entry> &entries() const { return entries_; }
    const std::map<std::string, int> &specials() const { return specials_; }

    // Token id for a word in a given form; out-of-vocabulary words map to the
    // matching unknown id, never to the other form's.
    int token(const std::string &word, Form f) const;

    // Human-readable name of a token id: "<CHI>" for specials, "word:ENV" or
    // "word:LAN" for entries.
    const std::string &token_name(int id) const;

    void save(const std::string &path) const;
    static DualVocab load(const std::string &path);

private:
    void index_names();

    std::map<std::string, Entry> entries_;
    std::map<std::string, int> specials_;
    std::vector<std::string> names_;  // id -> printable token name
    int size_ = 0;
};

// Fixed-length token chunk; the training unit and the co-occurrence unit.
struct CorpusChunk {
    std::vector<int> tokens;
};

// CHAT-subset transcript parser. Speaker lines `*XXX:`, action/situation
// tiers `%act:`/`%sit:`, inline local events `[% ...]` and speechless
// actions `0 [% ...]`. Unknown `%` tiers and `@` headers are skipped.
// Malformed input throws ParseError naming the line.
std::vector<Utterance> parse_chat(const std::string &text);

// Caption-grounded dialogue parser: one JSON object per line,
// {"caption": str, "turns": [{"role": "Q"|"A", "text": str}, ...]}.
// The caption becomes an ENV utterance under the caption marker role; turns
// must alternate starting with Q. Throws ParseError naming the record.
std::vector<Utterance> parse_caption_dialogue(const std::string &text);

// Concatenates role-tagged token streams and splits into chunks of
// chunk_len, padding the final partial chunk.
std::vector<CorpusChunk> tokenize_corpus(std::span<const Utterance> utterances,
                                         const DualVocab &vocab, int chunk_len);

// Per-word count of chunks containing both the ENV and the LAN token.
std::map<std::string, long> count_cooccurrence(std::span<const CorpusChunk> chunks,
                                               const DualVocab &vocab,
                                               std::span<const std::string> words);

// Evaluation context template: prefix ++ [FILLER] ++ suffix, predicting the
// target's LAN token from the suffix's final position. Elements are token
// names in DualVocab::token_name format.
struct ContextTemplate {
    std::string target;
    int template_id = 0;
    std::vector<std::string> prefix_words;
    std::vector<std::string> suffix_words;

    int filler_pos() const { return static_cast<int>(prefix_words.size()); }
    int length() const {
        return static_cast<int>(prefix_words.size() + suffix_words.size()) + 1;
    }
    // Index of the final prompt token, the position the target is predicted from.
    int final_pos() const { return length() - 1; }
};

// Replaces the FILLER slot with the word's ENV token. Throws if the filler
// word has no ENV form in the vocabulary.
std::vector<int> instantiate(const ContextTemplate &tmpl, const std::string &filler_word,
                             const DualVocab &vocab);

std::vector<ContextTemplate> load_templates(const std::string &path);
void save_templates(const std::string &path, std::span<const ContextTemplate> templates);

// Per-word frequency split by form, for target-word selection.
struct WordFreq {
    long env = 0;
    long lan = 0;
};
std::map<std::string, WordFreq> count_word_freq(std::span<const Utterance> utterances);

// Target-word selection: words whose ENV and LAN frequencies both reach
// min_freq, intersected with the inventory list, top_k by ENV frequency
// (ties broken lexicographically).
std::vector<std::string> select_target_words(const std::map<std::string, WordFreq> &freq,
                                             std::span<const std::string> inventory,
                                             long min_freq, int top_k);

// Chunk file: magic "SGC1", u32 chunk_len, u32 count, then u32 ids, all
// little-endian.
void save_chunks(const std::string &path, std::span<const CorpusChunk> chunks, int chunk_len);
std::vector<CorpusChunk> load_chunks(const std::string &path, int *chunk_len_out = nullptr);

}  // namespace sg
